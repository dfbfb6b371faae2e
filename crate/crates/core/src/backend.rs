//! Segmenter and scorer backends behind the train / predict / score protocol.
//!
//! External backends are command templates run as subprocesses. Builtin
//! backends (`builtin:centroid`, `builtin:noisy_oracle?p=..`,
//! `builtin:oracle`) implement the same directory contract in-process.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::augment::{self, ConcreteAugmentation};
use crate::dataset_io::tensor::{read_prob_map, write_prob_map, write_score};
use crate::dataset_io::{read_image, read_json, write_json, Dataset};
use crate::error::{Error, Result};
use crate::pseudo_label::{read_cd, unmap_im, LabelEncoding};
use crate::quality::oracle_score;
use crate::raster::ProbMap;
use crate::seed::derive_seed;
use crate::synth::{self, NoiseModel};

pub const TENSOR_EXT: &str = "imt";
/// Separates a record ID from a geometric code in Input Ensemble stems.
pub const VARIANT_SEP: char = '~';

#[derive(Clone, Debug)]
pub struct TrainRequest<'a> {
    pub cd_dir: &'a Path,
    pub model_out: &'a Path,
    pub alpha: f64,
    pub epochs: usize,
    pub batch: usize,
    pub steps_min: u64,
    pub seed: u64,
}

pub trait Backend: Send + Sync {
    fn describe(&self) -> String;
    fn train(&self, req: &TrainRequest<'_>) -> Result<()>;
    /// One `(H, W, C)` float32 tensor per `*.png` in `input_dir`, same stem.
    fn predict(&self, model_in: &Path, input_dir: &Path, output_dir: &Path) -> Result<()>;
    /// One float32 score tensor per record of the pair directory.
    fn score(&self, model_in: &Path, pair_dir: &Path, output_dir: &Path) -> Result<()>;
}

/// Command templates of an external backend.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessCommands {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predict: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workdir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BackendSpec {
    Builtin(String),
    Process(ProcessCommands),
}

/// What builtins may need beyond the protocol arguments.
#[derive(Clone, Debug)]
pub struct BackendContext {
    /// Dataset with ground truth, for oracle backends.
    pub dataset_root: PathBuf,
}

fn parse_query(query: &str) -> Result<BTreeMap<String, String>> {
    query
        .split('&')
        .filter(|s| !s.is_empty())
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::Config(format!("bad backend option {kv:?}")))
        })
        .collect()
}

fn parse_num<T: std::str::FromStr>(opts: &BTreeMap<String, String>, key: &str, default: T) -> Result<T> {
    match opts.get(key) {
        None => Ok(default),
        Some(v) => v.parse().map_err(|_| Error::Config(format!("bad value for {key}: {v:?}"))),
    }
}

pub fn resolve(spec: &BackendSpec, ctx: &BackendContext) -> Result<Arc<dyn Backend>> {
    match spec {
        BackendSpec::Process(cmds) => Ok(Arc::new(ProcessBackend { commands: cmds.clone() })),
        BackendSpec::Builtin(uri) => {
            let rest = uri.strip_prefix("builtin:").ok_or_else(|| Error::Config(format!("unknown backend {uri:?}")))?;
            let (name, query) = rest.split_once('?').unwrap_or((rest, ""));
            let opts = parse_query(query)?;
            match name {
                "centroid" => Ok(Arc::new(CentroidBackend { bootstrap: parse_num::<u8>(&opts, "bootstrap", 1)? != 0 })),
                "noisy_oracle" => {
                    let p = parse_num(&opts, "p", 0.2)?;
                    let noise = match opts.get("kind").map(String::as_str).unwrap_or("pixel_flip") {
                        "pixel_flip" => NoiseModel::PixelFlip { p },
                        "class_confusion" => NoiseModel::ClassConfusion { p },
                        "boundary_jitter" => NoiseModel::BoundaryJitter { kernel: parse_num(&opts, "kernel", 3)?, p },
                        other => return Err(Error::Config(format!("unknown noise kind {other:?}"))),
                    };
                    noise.validate()?;
                    Ok(Arc::new(NoisyOracleBackend { noise, dataset: Dataset::open(&ctx.dataset_root)? }))
                }
                "oracle" => Ok(Arc::new(OracleScorer { dataset: Dataset::open(&ctx.dataset_root)? })),
                other => Err(Error::Config(format!("unknown builtin backend {other:?}"))),
            }
        }
    }
}

/// Sorted stems of `*.ext` files in `dir`.
pub fn list_stems(dir: &Path, ext: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(ext) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push(stem.to_string());
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn tensor_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.{TENSOR_EXT}"))
}

/// Reads and checks the prediction tensor for `stem`; any defect counts as
/// a backend failure.
pub fn read_prediction(dir: &Path, stem: &str, dims: (usize, usize), channels: usize) -> Result<ProbMap<f32>> {
    let path = tensor_path(dir, stem);
    if !path.is_file() {
        return Err(Error::Backend(format!("no prediction written for {stem} in {}", dir.display())));
    }
    let map = read_prob_map(&path).map_err(|e| Error::Backend(format!("{}: {e}", path.display())))?;
    if map.dims() != dims || map.channels() != channels {
        return Err(Error::Backend(format!(
            "{}: prediction shape {:?}x{} does not match {:?}x{channels}",
            path.display(),
            map.dims(),
            map.channels(),
            dims
        )));
    }
    Ok(map)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub struct ProcessBackend {
    pub commands: ProcessCommands,
}

impl ProcessBackend {
    fn run(&self, verb: &str, template: Option<&String>, subs: &[(&str, String)]) -> Result<()> {
        let template = template.ok_or_else(|| Error::Config(format!("no command configured for `{verb}`")))?;
        let words = shell_words::split(template).map_err(|e| Error::Config(format!("bad {verb} command: {e}")))?;
        let words: Vec<String> = words
            .into_iter()
            .map(|w| subs.iter().fold(w, |acc, (k, v)| acc.replace(&format!("{{{k}}}"), v)))
            .collect();
        let (program, args) = words.split_first().ok_or_else(|| Error::Config(format!("empty {verb} command")))?;
        let mut cmd = Command::new(program);
        cmd.args(args);
        if let Some(dir) = &self.commands.workdir {
            cmd.current_dir(dir);
        }
        log::debug!("{verb}: {words:?}");
        let out = cmd.output().map_err(|e| Error::Backend(format!("cannot start {program}: {e}")))?;
        if !out.status.success() {
            let stderr = String::from_utf8_lossy(&out.stderr);
            let tail: String = stderr.lines().rev().take(20).collect::<Vec<_>>().into_iter().rev().collect::<Vec<_>>().join("\n");
            return Err(Error::Backend(format!("{verb} exited with {}: {tail}", out.status)));
        }
        Ok(())
    }
}

fn path_str(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

impl Backend for ProcessBackend {
    fn describe(&self) -> String {
        "process".into()
    }

    fn train(&self, req: &TrainRequest<'_>) -> Result<()> {
        self.run(
            "train",
            self.commands.train.as_ref(),
            &[
                ("cd_dir", path_str(req.cd_dir)),
                ("model_out", path_str(req.model_out)),
                ("alpha", req.alpha.to_string()),
                ("epochs", req.epochs.to_string()),
                ("batch", req.batch.to_string()),
                ("steps_min", req.steps_min.to_string()),
                ("seed", req.seed.to_string()),
            ],
        )?;
        if !req.model_out.exists() {
            return Err(Error::Backend(format!("train wrote no model at {}", req.model_out.display())));
        }
        Ok(())
    }

    fn predict(&self, model_in: &Path, input_dir: &Path, output_dir: &Path) -> Result<()> {
        ensure_dir(output_dir)?;
        self.run(
            "predict",
            self.commands.predict.as_ref(),
            &[("model_in", path_str(model_in)), ("input_dir", path_str(input_dir)), ("output_dir", path_str(output_dir))],
        )
    }

    fn score(&self, model_in: &Path, pair_dir: &Path, output_dir: &Path) -> Result<()> {
        ensure_dir(output_dir)?;
        self.run(
            "score",
            self.commands.score.as_ref(),
            &[("model_in", path_str(model_in)), ("pair_dir", path_str(pair_dir)), ("output_dir", path_str(output_dir))],
        )
    }
}

fn builtin_err(e: Error) -> Error {
    match e {
        Error::Backend(_) => e,
        other => Error::Backend(other.to_string()),
    }
}

pub struct CentroidBackend {
    pub bootstrap: bool,
}

impl Backend for CentroidBackend {
    fn describe(&self) -> String {
        "builtin:centroid".into()
    }

    fn train(&self, req: &TrainRequest<'_>) -> Result<()> {
        let cd = read_cd(req.cd_dir).map_err(builtin_err)?;
        let declared = crate::dataset_io::DatasetManifest::load(req.cd_dir)?.num_classes;
        let model = synth::centroid_train(&cd, declared, self.bootstrap.then_some(req.seed)).map_err(builtin_err)?;
        write_json(req.model_out, &model)
    }

    fn predict(&self, model_in: &Path, input_dir: &Path, output_dir: &Path) -> Result<()> {
        let model: synth::CentroidModel = read_json(model_in).map_err(builtin_err)?;
        ensure_dir(output_dir)?;
        for stem in list_stems(input_dir, "png")? {
            let image = read_image(&input_dir.join(format!("{stem}.png")))?;
            let probs = synth::centroid_predict::<f32>(&model, &image).map_err(builtin_err)?;
            write_prob_map(&tensor_path(output_dir, &stem), &probs)?;
        }
        Ok(())
    }

    fn score(&self, _: &Path, _: &Path, _: &Path) -> Result<()> {
        Err(Error::Backend("builtin:centroid does not score".into()))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct NoisyOracleModel {
    noise: NoiseModel,
    seed: u64,
}

/// Simulated teacher: reads the ground truth of each input and corrupts it.
pub struct NoisyOracleBackend {
    pub noise: NoiseModel,
    pub dataset: Dataset,
}

/// Splits `<id>~<geometric code>` (or `<id>~<variant>~<code>`) into the
/// record ID and the geometric augmentation.
pub fn parse_variant_stem(stem: &str) -> Result<(&str, Option<ConcreteAugmentation>)> {
    match stem.split_once(VARIANT_SEP) {
        None => Ok((stem, None)),
        Some((id, rest)) => {
            let code = rest.rsplit(VARIANT_SEP).next().unwrap_or(rest);
            let aug = ConcreteAugmentation::parse_geometric_code(code)
                .ok_or_else(|| Error::InvalidArgument(format!("bad variant code in {stem:?}")))?;
            Ok((id, Some(aug)))
        }
    }
}

impl Backend for NoisyOracleBackend {
    fn describe(&self) -> String {
        format!("builtin:noisy_oracle({:?})", self.noise)
    }

    fn train(&self, req: &TrainRequest<'_>) -> Result<()> {
        write_json(req.model_out, &NoisyOracleModel { noise: self.noise, seed: req.seed })
    }

    fn predict(&self, model_in: &Path, input_dir: &Path, output_dir: &Path) -> Result<()> {
        let model: NoisyOracleModel = read_json(model_in).map_err(builtin_err)?;
        let m = &self.dataset.manifest;
        ensure_dir(output_dir)?;
        for stem in list_stems(input_dir, "png")? {
            let (id, aug) = parse_variant_stem(&stem).map_err(builtin_err)?;
            let mut gt = self.dataset.class_mask(id).map_err(builtin_err)?;
            if let Some(aug) = aug {
                gt = augment::apply_geometric(&gt, &aug);
            }
            let probs = synth::noisy_oracle_predict(&gt, m.label_count(), m.is_binary(), &model.noise, derive_seed(model.seed, &stem))?;
            write_prob_map(&tensor_path(output_dir, &stem), &probs)?;
        }
        Ok(())
    }

    fn score(&self, _: &Path, _: &Path, _: &Path) -> Result<()> {
        Err(Error::Backend("builtin:noisy_oracle does not score".into()))
    }
}

/// Perfect quality scorer: IoU (binary) or mIoU of each pseudo-label
/// against the ground truth of its source record.
pub struct OracleScorer {
    pub dataset: Dataset,
}

impl Backend for OracleScorer {
    fn describe(&self) -> String {
        "builtin:oracle".into()
    }

    fn train(&self, req: &TrainRequest<'_>) -> Result<()> {
        write_json(req.model_out, &serde_json::json!({ "scorer": "oracle" }))
    }

    fn predict(&self, _: &Path, _: &Path, _: &Path) -> Result<()> {
        Err(Error::Backend("builtin:oracle only scores".into()))
    }

    fn score(&self, _model_in: &Path, pair_dir: &Path, output_dir: &Path) -> Result<()> {
        let cd = read_cd(pair_dir).map_err(builtin_err)?;
        let m = &self.dataset.manifest;
        ensure_dir(output_dir)?;
        for pair in &cd.pairs {
            let gt = self.dataset.class_mask(&pair.base_id).map_err(builtin_err)?;
            let label = match cd.descriptor.label_encoding {
                LabelEncoding::Plain => pair.label.clone(),
                LabelEncoding::ImShifted => unmap_im(&pair.label).0,
            };
            let s = oracle_score(&label, &gt, m.label_count(), m.is_binary()).map_err(builtin_err)?;
            write_score(&tensor_path(output_dir, &pair.id), &[s as f32])?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset_io::tensor::read_prob_map;
    use crate::synth::{generate_dataset, SceneSpec, SynthSplits};

    fn ctx(root: &Path) -> BackendContext {
        BackendContext { dataset_root: root.to_path_buf() }
    }

    #[test]
    fn spec_parsing() {
        let s: BackendSpec = serde_json::from_str(r#""builtin:centroid""#).unwrap();
        assert_eq!(s, BackendSpec::Builtin("builtin:centroid".into()));
        let p: BackendSpec = serde_json::from_str(r#"{"train": "python x.py train {cd_dir}"}"#).unwrap();
        assert!(matches!(p, BackendSpec::Process(_)));
        let dir = tempfile::tempdir().unwrap();
        assert!(resolve(&BackendSpec::Builtin("builtin:nope".into()), &ctx(dir.path())).is_err());
        assert!(resolve(&BackendSpec::Builtin("centroid".into()), &ctx(dir.path())).is_err());
    }

    #[test]
    fn variant_stems() {
        assert_eq!(parse_variant_stem("s00001").unwrap(), ("s00001", None));
        let (id, aug) = parse_variant_stem("s00001~h1v0r3").unwrap();
        assert_eq!(id, "s00001");
        assert_eq!(aug, Some(ConcreteAugmentation::geometric(true, false, 3)));
        assert_eq!(parse_variant_stem("a~2~h0v1r0").unwrap().1, Some(ConcreteAugmentation::geometric(false, true, 0)));
        assert!(parse_variant_stem("a~zz").is_err());
    }

    #[test]
    fn noisy_oracle_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let ds = generate_dataset(&SceneSpec::new(16, 16, 3, 1), 10, SynthSplits::default_for(10), &data).unwrap();
        let backend = resolve(&BackendSpec::Builtin("builtin:noisy_oracle?p=0".into()), &ctx(&data)).unwrap();
        let model = dir.path().join("t.model");
        backend
            .train(&TrainRequest { cd_dir: &data, model_out: &model, alpha: 1.0, epochs: 1, batch: 1, steps_min: 0, seed: 3 })
            .unwrap();
        let out = dir.path().join("pred");
        backend.predict(&model, &data.join("images"), &out).unwrap();
        let id = &ds.manifest.split(crate::dataset_io::Split::FD)[0];
        let pred = read_prob_map(&tensor_path(&out, id)).unwrap();
        assert_eq!(pred.argmax(), ds.class_mask(id).unwrap());
        assert!(read_prediction(&out, id, (16, 16), 2).is_err());
        assert!(read_prediction(&out, "missing", (16, 16), 3).unwrap_err().is_backend());
    }

    #[test]
    fn process_failure_is_backend_error() {
        let b = ProcessBackend {
            commands: ProcessCommands { predict: Some("sh -c 'echo boom >&2; exit 4'".into()), ..Default::default() },
        };
        let dir = tempfile::tempdir().unwrap();
        let err = b.predict(Path::new("m"), dir.path(), &dir.path().join("o")).unwrap_err();
        assert!(err.is_backend());
        assert!(err.to_string().contains("boom"));
        assert!(matches!(b.score(Path::new("m"), dir.path(), dir.path()).unwrap_err(), Error::Config(_)));
    }

    #[test]
    fn process_substitutes_placeholders() {
        let dir = tempfile::tempdir().unwrap();
        let model = dir.path().join("model out.bin");
        let b = ProcessBackend {
            commands: ProcessCommands { train: Some("sh -c 'echo $1 > \"$0\"' {model_out} {alpha}".into()), ..Default::default() },
        };
        b.train(&TrainRequest { cd_dir: dir.path(), model_out: &model, alpha: 1.5, epochs: 1, batch: 1, steps_min: 0, seed: 0 })
            .unwrap();
        assert_eq!(fs::read_to_string(&model).unwrap().trim(), "1.5");
    }
}
