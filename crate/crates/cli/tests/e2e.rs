use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use imask::dataset_io::tensor::write_prob_map;
use imask::ProbMap;

fn imask(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_imask")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = imask(args);
    assert!(
        out.status.success(),
        "{args:?} failed ({:?}): {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    imask(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Relative path -> bytes for every file under `dir`.
fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    if dir.is_file() {
        return vec![(PathBuf::new(), fs::read(dir).unwrap())];
    }
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn synth(dir: &Path, seed: &str) -> PathBuf {
    let ds = dir.join(format!("ds{seed}"));
    ok(&["--seed", seed, "synth", "--out", s(&ds), "--n", "40", "--height", "12", "--width", "12", "--classes", "3"]);
    ds
}

#[test]
fn help_and_version() {
    let v = ok(&["--version"]);
    assert!(v.contains(env!("CARGO_PKG_VERSION")) && v.contains("manifest v1") && v.contains("IMT1"), "{v}");
    for sub in [
        "split", "augment", "vote", "im", "refine", "build-cd", "metrics", "score", "archspec", "synth", "run", "analyze",
    ] {
        let h = ok(&[sub, "--help"]);
        assert!(h.contains("--seed") && h.contains("--jobs"), "{sub} help lacks global flags");
    }
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&[]), 1);
    assert_eq!(code(&["nope"]), 1);
    assert_eq!(code(&["im", "--mode", "binary"]), 1);
    assert_eq!(code(&["--jobs", "0", "archspec"]), 1);
    assert_eq!(code(&["archspec", "--input", "12x12"]), 1);
}

#[test]
fn data_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    assert_eq!(code(&["split", "--dataset", s(&missing)]), 2);
    let a = dir.path().join("a.png");
    fs::write(&a, b"not a png").unwrap();
    let out = dir.path().join("o.png");
    assert_eq!(code(&["im", "--preds", s(&a), s(&a), "--mode", "binary", "--out-f", s(&out), "--out-im", s(&out)]), 2);
}

#[test]
fn backend_failure_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth(dir.path(), "1");
    let cfg = serde_json::json!({
        "name": "broken",
        "dataset": ds,
        "output": dir.path().join("runs/broken"),
        "approach": "LDT",
        "student": { "train": "false {cd_dir}", "predict": "false" },
    });
    let path = dir.path().join("run.json");
    fs::write(&path, cfg.to_string()).unwrap();
    assert_eq!(code(&["run", "--config", s(&path)]), 3);
}

#[test]
fn synth_split_augment_are_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), "7");
    let b = dir.path().join("again");
    ok(&["--seed", "7", "synth", "--out", s(&b), "--n", "40", "--height", "12", "--width", "12", "--classes", "3"]);
    assert_eq!(tree(&a), tree(&b));
    let c = synth(dir.path(), "8");
    assert_ne!(tree(&a), tree(&c));

    for ds in [&a, &b] {
        assert_eq!(ok(&["--seed", "3", "split", "--dataset", s(ds), "--ld-count", "4"]).trim(), "LD 4 ULD 28");
        assert_eq!(ok(&["--seed", "3", "augment", "--dataset", s(ds)]).trim(), "ALD 40");
    }
    assert_eq!(tree(&a), tree(&b));
}

fn prob(h: usize, w: usize, data: Vec<f32>) -> ProbMap<f32> {
    ProbMap::from_vec(h, w, 1, data).unwrap()
}

#[test]
fn vote_im_refine() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let p1 = d.join("a.imt");
    let p2 = d.join("b.imt");
    write_prob_map(&p1, &prob(2, 2, vec![0.9, 0.8, 0.2, 0.1])).unwrap();
    write_prob_map(&p2, &prob(2, 2, vec![0.7, 0.3, 0.6, 0.1])).unwrap();

    let hard = d.join("hard.png");
    let soft = d.join("soft.png");
    ok(&["vote", "--preds", s(&p1), s(&p2), "--voting", "hard", "--out", s(&hard)]);
    ok(&["vote", "--preds", s(&p1), s(&p2), "--voting", "soft", "--out", s(&soft)]);
    let hard = imask::dataset_io::read_class_mask(&hard, 2).unwrap();
    let soft = imask::dataset_io::read_class_mask(&soft, 2).unwrap();
    assert_eq!(hard.data(), &[1, 0, 0, 0]);
    // means 0.8, 0.55, 0.4, 0.1
    assert_eq!(soft.data(), &[1, 1, 0, 0]);

    let f = d.join("f.png");
    let im = d.join("im.png");
    let out = ok(&["im", "--preds", s(&p1), s(&p2), "--mode", "binary", "--out-f", s(&f), "--out-im", s(&im)]);
    assert_eq!(out.trim(), "im_fraction 0.500000");
    let im_mask = imask::dataset_io::read_binary_mask(&im).unwrap();
    assert_eq!(im_mask.data(), &[0, 1, 1, 0]);

    // png inputs give the same result as tensors
    let f2 = d.join("f2.png");
    let im2 = d.join("im2.png");
    let m1 = d.join("m1.png");
    let m2 = d.join("m2.png");
    imask::dataset_io::write_binary_mask(&m1, &imask::BinaryMask::from_vec(2, 2, vec![1, 1, 0, 0]).unwrap()).unwrap();
    imask::dataset_io::write_binary_mask(&m2, &imask::BinaryMask::from_vec(2, 2, vec![1, 0, 1, 0]).unwrap()).unwrap();
    ok(&["im", "--preds", s(&m1), s(&m2), "--mode", "binary", "--out-f", s(&f2), "--out-im", s(&im2)]);
    assert_eq!(fs::read(&f).unwrap(), fs::read(&f2).unwrap());
    assert_eq!(fs::read(&im).unwrap(), fs::read(&im2).unwrap());

    let rf = d.join("rf.png");
    let rim = d.join("rim.png");
    ok(&["refine", "--f", s(&f), "--im", s(&im), "--mode", "binary", "--out-f", s(&rf), "--out-im", s(&rim)]);
    assert_eq!(fs::read(&f).unwrap(), fs::read(&rf).unwrap());
    assert_eq!(fs::read(&im).unwrap(), fs::read(&rim).unwrap());
    ok(&["refine", "--f", s(&f), "--im", s(&im), "--mode", "binary", "--dilate", "3", "--out-f", s(&rf), "--out-im", s(&rim)]);
    assert!(imask::dataset_io::read_binary_mask(&rim).unwrap().data().iter().all(|&b| b == 1));
    assert_eq!(code(&["refine", "--f", s(&f), "--im", s(&im), "--mode", "binary", "--erode", "2", "--out-f", s(&rf), "--out-im", s(&rim)]), 1);
}

#[test]
fn archspec_table_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("cost.csv");
    let out = ok(&["archspec", "--alpha", "1", "2", "--base", "16", "--csv", s(&csv)]);
    assert!(out.contains("base_filters 16"));
    let text = fs::read_to_string(&csv).unwrap();
    let rows: Vec<Vec<f64>> =
        text.lines().skip(1).map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 2);
    let ratio = rows[1][1] / rows[0][1];
    assert!((3.8..=4.0).contains(&ratio), "{ratio}");
    assert!(out.ends_with(&text));

    let calibrated = ok(&["archspec"]);
    let base: f64 = calibrated.lines().next().unwrap().strip_prefix("base_filters ").unwrap().parse().unwrap();
    assert!(base > 0.0);
    ok(&["archspec", "--evalnet", "--base", "8"]);
}

fn run_config(dir: &Path, ds: &Path, name: &str, approach: &str) -> PathBuf {
    let cfg = serde_json::json!({
        "name": name,
        "dataset": ds,
        "output": dir.join("runs").join(name),
        "approach": approach,
        "generations": 2,
        "n_students": 2,
        "teacher": "builtin:noisy_oracle?p=0.1",
    });
    let path = dir.join(format!("{name}.json"));
    fs::write(&path, cfg.to_string()).unwrap();
    path
}

#[test]
fn run_resume_analyze_and_downstream() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let ds = synth(d, "2");
    let cfg = run_config(d, &ds, "im", "IM");
    let run_dir = d.join("runs/im");

    let first = ok(&["--seed", "5", "--jobs", "2", "run", "--config", s(&cfg), "--stop-after", "gen1:consensus"]);
    assert!(first.contains("stopped early"));
    assert_eq!(code(&["--seed", "5", "run", "--config", s(&cfg)]), 1, "existing state without --resume");
    assert_eq!(code(&["run", "--config", s(&cfg), "--stop-after", "gen1:bogus"]), 1);
    let done = ok(&["--seed", "5", "run", "--config", s(&cfg), "--resume"]);
    assert!(done.contains("gen2"), "{done}");

    // a fresh run with the same seed is byte-identical
    let cfg2 = d.join("im2.json");
    let mut v: serde_json::Value = serde_json::from_slice(&fs::read(&cfg).unwrap()).unwrap();
    v["output"] = serde_json::json!(d.join("runs/im2"));
    fs::write(&cfg2, v.to_string()).unwrap();
    ok(&["--seed", "5", "run", "--config", s(&cfg2)]);
    for rel in ["gen2/cd", "gen2/report.json", "report.json"] {
        assert_eq!(tree(&run_dir.join(rel)), tree(&d.join("runs/im2").join(rel)), "{rel}");
    }

    let analysis = ok(&["analyze", "--run", s(&run_dir)]);
    assert!(analysis.contains("points written"));
    for f in ["series.csv", "series.svg", "series.json", "frequency_im_gen1.csv", "frequency_im_gen2.json"] {
        assert!(run_dir.join("analysis").join(f).is_file(), "{f}");
    }

    // metrics over the best student's validation predictions
    let eval = run_dir.join("gen2/students/eval/s0/VAL");
    let csv = d.join("m/per_image.csv");
    let json = d.join("m/aggregate.json");
    let out = ok(&["metrics", "--dataset", s(&ds), "--pred-dir", s(&eval), "--split", "val", "--out-csv", s(&csv), "--out-json", s(&json)]);
    assert!(out.starts_with("miou "));
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 1 + 4);
    let agg: serde_json::Value = serde_json::from_slice(&fs::read(&json).unwrap()).unwrap();
    assert!(agg["mean_miou"].as_f64().unwrap() > 0.0);

    // build-cd from the run's consensus masks reproduces the run's composition size
    let consensus = run_dir.join("gen1/consensus");
    let cd = d.join("cd");
    let built = ok(&[
        "--seed", "1", "build-cd", "--dataset", s(&ds), "--approach", "im", "--final-dir", s(&consensus.join("final")),
        "--im-dir", s(&consensus.join("im")), "--generation", "1", "--out", s(&cd),
    ]);
    let ours = imask::pseudo_label::read_cd(&cd).unwrap();
    let theirs = imask::pseudo_label::read_cd(&run_dir.join("gen1/cd")).unwrap();
    assert_eq!(ours.len(), theirs.len(), "{built}");
    assert_eq!(ours.descriptor.label_encoding, theirs.descriptor.label_encoding);

    let scores = d.join("scores");
    assert_eq!(ok(&["score", "--dataset", s(&ds), "--pair-dir", s(&cd), "--out", s(&scores)]).trim(), format!("scored {}", ours.len()));
    let parsed: serde_json::Value = serde_json::from_slice(&fs::read(scores.join("scores.json")).unwrap()).unwrap();
    let parsed = parsed.as_object().unwrap();
    assert_eq!(parsed.len(), ours.len());
    // the oracle scores pseudo labels against ground truth, labeled pairs are exact
    assert!(parsed.values().all(|v| (0.0..=1.0).contains(&v.as_f64().unwrap())));
    assert!(ours.pairs.iter().filter(|p| p.source != imask::pseudo_label::PairSource::Pseudo).all(|p| parsed[&p.id].as_f64() == Some(1.0)));
}
