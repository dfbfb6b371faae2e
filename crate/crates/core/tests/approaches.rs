use imask::backend::BackendSpec;
use imask::orchestrator::{GenerationReport, RunReport, REPORT_FILE};
use imask::pseudo_label::{PairSource, TierBounds};
use imask::synth::{generate_dataset, SceneSpec, SynthSplits};
use imask::{Approach, RunConfig, RunOptions};

#[test]
fn every_approach_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    generate_dataset(&SceneSpec::new(16, 16, 3, 31), 30, SynthSplits::default_for(30), &data).unwrap();
    let mut gen1_error = std::collections::BTreeMap::new();
    for approach in Approach::ALL {
        let mut cfg = RunConfig::new(approach.as_str(), &data, approach);
        cfg.output = Some(dir.path().join(approach.as_str()));
        cfg.generations = 2;
        cfg.n_students = 2;
        cfg.teacher = Some(BackendSpec::Builtin("builtin:noisy_oracle?p=0.1".into()));
        cfg.scorer = Some(serde_json::from_value(serde_json::json!({ "backend": "builtin:oracle" })).unwrap());
        cfg.tier_bounds = Some(TierBounds::new(0.5, 0.95).unwrap());
        cfg.evalnet_threshold = Some(0.5);
        cfg.seed = 3;
        let outcome = imask::run(&cfg, &RunOptions::default()).unwrap_or_else(|e| panic!("{approach:?}: {e}"));
        assert!(outcome.finished, "{approach:?}");
        let report = RunReport::load(&outcome.run_dir).unwrap();
        assert_eq!(outcome.report.as_ref(), Some(&report));
        if approach.is_baseline_only() {
            assert_eq!(report.generations.len(), 1, "{approach:?}");
            continue;
        }
        assert_eq!(report.generations.len(), cfg.generations + 1, "{approach:?}");
        let alphas: Vec<f64> = report.generations.iter().skip(1).map(|g| g.alpha).collect();
        assert_eq!(alphas[0] < alphas[1], approach.is_noisy(), "{approach:?} alpha {alphas:?}");
        for g in &report.generations {
            assert!((0.0..=1.0).contains(&g.best_val), "{approach:?}");
        }
        let gen1: GenerationReport =
            serde_json::from_slice(&std::fs::read(outcome.run_dir.join("gen1").join(REPORT_FILE)).unwrap()).unwrap();
        let pseudo = gen1.cd_counts.get(&PairSource::Pseudo).copied().unwrap_or(0)
            + gen1.cd_counts.get(&PairSource::PseudoAugmented).copied().unwrap_or(0);
        if approach != Approach::EvalNet {
            assert!(pseudo > 0, "{approach:?} has no pseudo pairs: {:?}", gen1.cd_counts);
        }
        assert_eq!(gen1.cd_total, gen1.cd_counts.values().sum::<usize>(), "{approach:?}");
        gen1_error.insert(approach.as_str(), report.generations[1].label_error.unwrap());
    }
    // same noisy teachers, so masking disagreement must beat keeping it
    assert!(gen1_error["IM"] < gen1_error["ME"], "{gen1_error:?}");
}
