//! Pseudo-label quality scores: the ground-truth oracle, ensemble averaging
//! and the threshold filter used by the EvalNet approach.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::{tensor_path, Backend};
use crate::dataset_io::tensor::read_score;
use crate::error::{Error, Result};
use crate::metrics;
use crate::raster::ClassMask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerKind {
    Oracle,
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub id: String,
    pub score: f64,
    pub scorer: ScorerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_class: Option<Vec<f64>>,
}

impl ScoreRecord {
    pub fn new(id: impl Into<String>, score: f64, scorer: ScorerKind) -> Self {
        Self { id: id.into(), score: score.clamp(0.0, 1.0), scorer, per_class: None }
    }
}

/// IoU for binary data, mIoU otherwise, against ground truth.
pub fn oracle_score(pred: &ClassMask, gt: &ClassMask, label_count: usize, binary: bool) -> Result<f64> {
    if binary {
        metrics::iou(&pred.to_binary()?, &gt.to_binary()?)
    } else {
        metrics::miou(pred, gt, label_count)
    }
}

/// Mean of the clamped scores.
pub fn ensemble_score(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Empty("no scores to average"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    let mean = scores.iter().map(|s| s.clamp(0.0, 1.0)).sum::<f64>() / scores.len() as f64;
    Ok(mean.clamp(0.0, 1.0))
}

/// Reduces a scorer output tensor to one score.
///
/// A single value is the score itself. A multiclass scorer emits
/// `[iou_0, present_0, iou_1, present_1, ...]`; the score is the mean IoU
/// over classes it flags as present (presence ≥ 0.5), or over all classes
/// if none are flagged.
pub fn reduce_score_vector(values: &[f32]) -> Result<f64> {
    match values.len() {
        0 => Err(Error::Empty("empty score tensor")),
        1 => Ok((values[0] as f64).clamp(0.0, 1.0)),
        n if n % 2 == 0 => {
            let pairs: Vec<(f64, f64)> = values.chunks(2).map(|c| (c[0] as f64, c[1] as f64)).collect();
            let present: Vec<f64> = pairs.iter().filter(|(_, p)| *p >= 0.5).map(|(iou, _)| *iou).collect();
            let pool = if present.is_empty() { pairs.iter().map(|(iou, _)| *iou).collect() } else { present };
            ensemble_score(&pool)
        }
        n => Err(Error::Shape(format!("score tensor of length {n} is neither scalar nor per-class pairs"))),
    }
}

/// Keeps the IDs whose score strictly exceeds `threshold`, preserving order.
pub fn threshold_filter<'a>(ids: impl IntoIterator<Item = &'a str>, scores: &BTreeMap<String, f64>, threshold: f64) -> Result<Vec<String>> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidArgument(format!("threshold {threshold} outside [0, 1]")));
    }
    let mut kept = Vec::new();
    for id in ids {
        let s = scores.get(id).ok_or_else(|| Error::InvalidArgument(format!("no score for pair {id}")))?;
        if *s > threshold {
            kept.push(id.to_string());
        }
    }
    Ok(kept)
}

/// Index of the best-scoring candidate if its score strictly exceeds the
/// threshold; ties go to the lower index.
pub fn best_above(scores: &[f64], threshold: f64) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.map_or(true, |b| s > scores[b]) {
            best = Some(i);
        }
    }
    best.filter(|&b| scores[b] > threshold)
}

/// Scores every record of `pair_dir` with each scorer model and averages
/// the reduced outputs per record. Scorer outputs land in
/// `scratch/k<index>`.
pub fn score_pairs(
    backend: &dyn Backend,
    models: &[PathBuf],
    pair_dir: &Path,
    ids: &[String],
    scratch: &Path,
) -> Result<BTreeMap<String, f64>> {
    if models.is_empty() {
        return Err(Error::Config("no scorer models configured".into()));
    }
    let mut per_id: BTreeMap<String, Vec<f64>> = ids.iter().map(|id| (id.clone(), Vec::new())).collect();
    for (k, model) in models.iter().enumerate() {
        let out = scratch.join(format!("k{k}"));
        backend.score(model, pair_dir, &out)?;
        for (id, scores) in per_id.iter_mut() {
            let path = tensor_path(&out, id);
            let values = read_score(&path).map_err(|e| Error::Backend(format!("{}: {e}", path.display())))?;
            scores.push(reduce_score_vector(&values).map_err(|e| Error::Backend(format!("{}: {e}", path.display())))?);
        }
    }
    per_id.into_iter().map(|(id, s)| Ok((id, ensemble_score(&s)?))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_examples() {
        let gt = ClassMask::from_rows(&[[1u8, 1, 0, 0]]).unwrap();
        assert_eq!(oracle_score(&gt, &gt, 2, true).unwrap(), 1.0);
        let half = ClassMask::from_rows(&[[1u8, 0, 0, 0]]).unwrap();
        assert_eq!(oracle_score(&half, &gt, 2, true).unwrap(), 0.5);
    }

    #[test]
    fn ensemble_examples() {
        assert_eq!(ensemble_score(&[0.5]).unwrap(), 0.5);
        assert_eq!(ensemble_score(&[0.4, 0.6]).unwrap(), 0.5);
        assert_eq!(ensemble_score(&[1.2, 1.0]).unwrap(), 1.0);
        assert!(ensemble_score(&[]).is_err());
    }

    #[test]
    fn threshold_is_strict() {
        let scores: BTreeMap<String, f64> = [("a".to_string(), 0.73), ("b".to_string(), 0.724), ("c".to_string(), 0.0)].into();
        assert_eq!(threshold_filter(["a", "b", "c"], &scores, 0.724).unwrap(), vec!["a"]);
        assert_eq!(threshold_filter(["a", "b", "c"], &scores, 0.0).unwrap(), vec!["a", "b"]);
        assert!(threshold_filter(["z"], &scores, 0.5).is_err());
        assert!(threshold_filter(["a"], &scores, 1.5).is_err());
    }

    #[test]
    fn best_candidate() {
        assert_eq!(best_above(&[0.6, 0.8, 0.8], 0.7), Some(1));
        assert_eq!(best_above(&[0.6, 0.7], 0.7), None);
        assert_eq!(best_above(&[], 0.0), None);
    }

    #[test]
    fn score_vectors() {
        assert_eq!(reduce_score_vector(&[0.25]).unwrap(), 0.25);
        assert_eq!(reduce_score_vector(&[0.5, 1.0, 0.0, 0.0, 1.0, 1.0]).unwrap(), 0.75);
        assert!(reduce_score_vector(&[0.1, 0.2, 0.3]).is_err());
    }
}
