//! Ensemble voting and Inconsistency Mask construction.
//!
//! For a binary ensemble of `n` masks with per-pixel vote sum `S`:
//! the final mask is `S == n` and the inconsistency mask is `0 < S < n`.
//! Multiclass ensembles keep a class only where all members agree.

use crate::error::{Error, Result};
use crate::raster::{argmax_lowest, check_same_dims, BinaryMask, ClassMask, ProbMap};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConsensusKind {
    Binary,
    Multiclass,
}

/// Final prediction mask and inconsistency mask of an ensemble.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConsensusOutput {
    pub kind: ConsensusKind,
    /// Agreed class per pixel, 0 wherever `im` is set. Binary consensus
    /// stores `{0, 1}`.
    pub final_mask: ClassMask,
    pub im: BinaryMask,
    /// Per-pixel foreground vote count (binary consensus only).
    pub vote_sum: Option<Vec<u16>>,
    pub n_models: usize,
}

impl ConsensusOutput {
    pub fn dims(&self) -> (usize, usize) {
        self.final_mask.dims()
    }

    /// Final mask as `{0,1}`; errors for multiclass outputs with larger IDs.
    pub fn final_binary(&self) -> Result<BinaryMask> {
        self.final_mask.to_binary()
    }

    /// Pixels that carry a non-zero final class.
    pub fn foreground_count(&self) -> usize {
        self.final_mask.data().iter().filter(|&&v| v != 0).count()
    }

    pub fn im_count(&self) -> usize {
        self.im.count_ones()
    }

    pub fn im_fraction(&self) -> f64 {
        self.im_count() as f64 / self.im.len().max(1) as f64
    }

    /// Checks that no pixel is both inconsistent and non-zero in the final mask.
    pub fn check_disjoint(&self) -> Result<()> {
        let clash = self.final_mask.data().iter().zip(self.im.data()).any(|(&f, &i)| f != 0 && i != 0);
        if clash {
            return Err(Error::InvalidArgument("final mask overlaps inconsistency mask".into()));
        }
        Ok(())
    }
}

/// `1` where `prob >= threshold`. Requires a single-channel map.
pub fn binarize<T: Scalar>(prob: &ProbMap<T>, threshold: T) -> Result<BinaryMask> {
    if prob.channels() != 1 {
        return Err(Error::ChannelMismatch { expected: 1, found: prob.channels() });
    }
    if !(threshold > T::zero() && threshold < T::one()) {
        return Err(Error::InvalidArgument(format!("threshold {threshold} outside (0,1)")));
    }
    let (h, w) = prob.dims();
    let data = prob.raster().data();
    Ok(BinaryMask::from_fn(h, w, |i| data[i] >= threshold))
}

/// Hard class assignment of a backend prediction: thresholding for a
/// single-channel map, lowest-index argmax otherwise.
pub fn hard_labels<T: Scalar>(prob: &ProbMap<T>, threshold: T) -> Result<ClassMask> {
    if prob.channels() == 1 {
        Ok(binarize(prob, threshold)?.to_class_mask())
    } else {
        Ok(prob.argmax())
    }
}

fn check_ensemble<M>(masks: &[M], dims: impl Fn(&M) -> (usize, usize)) -> Result<(usize, usize)> {
    if masks.len() < 2 {
        return Err(Error::InvalidArgument(format!("ensemble needs at least 2 masks, got {}", masks.len())));
    }
    let first = dims(&masks[0]);
    for m in &masks[1..] {
        check_same_dims(first, dims(m), "ensemble member")?;
    }
    Ok(first)
}

/// Binary predictions to final prediction mask and inconsistency mask.
pub fn im_binary(masks: &[BinaryMask]) -> Result<ConsensusOutput> {
    let (h, w) = check_ensemble(masks, BinaryMask::dims)?;
    let n = masks.len();
    if n > u16::MAX as usize {
        return Err(Error::InvalidArgument("too many ensemble members".into()));
    }
    let mut sum = vec![0u16; h * w];
    for m in masks {
        for (s, &v) in sum.iter_mut().zip(m.data()) {
            *s += v as u16;
        }
    }
    let n16 = n as u16;
    let final_mask = ClassMask::from_vec(h, w, sum.iter().map(|&s| (s == n16) as u8).collect())?;
    let im = BinaryMask::from_fn(h, w, |i| sum[i] != 0 && sum[i] != n16);
    Ok(ConsensusOutput { kind: ConsensusKind::Binary, final_mask, im, vote_sum: Some(sum), n_models: n })
}

/// Multiclass predictions to final prediction mask and inconsistency mask.
pub fn im_multiclass(masks: &[ClassMask]) -> Result<ConsensusOutput> {
    let (h, w) = check_ensemble(masks, ClassMask::dims)?;
    let first = masks[0].data();
    let agree: Vec<bool> = (0..h * w).map(|i| masks[1..].iter().all(|m| m.data()[i] == first[i])).collect();
    let final_mask = ClassMask::from_vec(h, w, first.iter().zip(&agree).map(|(&c, &a)| if a { c } else { 0 }).collect())?;
    let im = BinaryMask::from_fn(h, w, |i| !agree[i]);
    Ok(ConsensusOutput { kind: ConsensusKind::Multiclass, final_mask, im, vote_sum: None, n_models: masks.len() })
}

/// Dispatches on `kind`; binary inputs must hold only `{0, 1}`.
pub fn consensus(masks: &[ClassMask], kind: ConsensusKind) -> Result<ConsensusOutput> {
    match kind {
        ConsensusKind::Binary => {
            let bin = masks.iter().map(ClassMask::to_binary).collect::<Result<Vec<_>>>()?;
            im_binary(&bin)
        }
        ConsensusKind::Multiclass => im_multiclass(masks),
    }
}

/// Hard-voted ensemble mask under the unanimity rule: a pixel is foreground
/// only if every member says so, and any disagreement falls to background.
pub fn hard_vote(masks: &[BinaryMask]) -> Result<BinaryMask> {
    let (h, w) = check_ensemble(masks, BinaryMask::dims)?;
    Ok(BinaryMask::from_fn(h, w, |i| masks.iter().all(|m| m.is_set(i))))
}

/// Argmax of the channelwise mean probability; ties go to the lowest class.
pub fn soft_vote<T: Scalar>(probs: &[ProbMap<T>]) -> Result<ClassMask> {
    Ok(mean_prob(probs)?.argmax())
}

/// Channelwise mean of an ensemble of probability maps.
pub fn mean_prob<T: Scalar>(probs: &[ProbMap<T>]) -> Result<ProbMap<T>> {
    let (h, w) = check_ensemble(probs, ProbMap::dims)?;
    let c = probs[0].channels();
    if let Some(p) = probs.iter().find(|p| p.channels() != c) {
        return Err(Error::ChannelMismatch { expected: c, found: p.channels() });
    }
    let n = T::from_count(probs.len());
    let mut acc = vec![T::zero(); h * w * c];
    for p in probs {
        for (a, &v) in acc.iter_mut().zip(p.raster().data()) {
            *a += v;
        }
    }
    // Mean of values in [0,1] can exceed 1 by an ulp; clamp keeps the invariant.
    let data = acc.into_iter().map(|a| (a / n).min(T::one())).collect();
    ProbMap::from_vec(h, w, c, data)
}

/// Lowest-index argmax over a pixel's channel values.
pub fn argmax_pixel<T: Scalar>(values: &[T]) -> usize {
    argmax_lowest(values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bm<const W: usize>(rows: &[[u8; W]]) -> BinaryMask {
        BinaryMask::from_rows(rows).unwrap()
    }

    fn cm<const W: usize>(rows: &[[u8; W]]) -> ClassMask {
        ClassMask::from_rows(rows).unwrap()
    }

    #[test]
    fn binarize_examples() {
        let p = ProbMap::from_vec(1, 2, 1, vec![0.7f64, 0.4]).unwrap();
        assert_eq!(binarize(&p, 0.5).unwrap(), bm(&[[1, 0]]));
        let edge = ProbMap::from_vec(1, 1, 1, vec![0.5f32]).unwrap();
        assert_eq!(binarize(&edge, 0.5).unwrap(), bm(&[[1]]));
        let zeros = ProbMap::from_vec(2, 2, 1, vec![0.0f32; 4]).unwrap();
        assert_eq!(binarize(&zeros, 0.5).unwrap(), BinaryMask::zeros(2, 2));
        assert!(binarize(&zeros, 1.0).is_err());
    }

    #[test]
    fn binary_two_model_example() {
        let out = im_binary(&[bm(&[[1, 0], [1, 1]]), bm(&[[1, 0], [0, 1]])]).unwrap();
        assert_eq!(out.final_mask, cm(&[[1, 0], [0, 1]]));
        assert_eq!(out.im, bm(&[[0, 0], [1, 0]]));
        assert_eq!(out.vote_sum.as_deref(), Some(&[2u16, 0, 1, 2][..]));
    }

    #[test]
    fn identical_binary_masks() {
        let m = bm(&[[1, 0, 1], [0, 1, 1]]);
        let out = im_binary(&[m.clone(), m.clone(), m.clone()]).unwrap();
        assert_eq!(out.final_binary().unwrap(), m);
        assert!(out.im.is_empty());
    }

    #[test]
    fn multiclass_example() {
        let out = im_multiclass(&[cm(&[[2, 1]]), cm(&[[2, 3]])]).unwrap();
        assert_eq!(out.final_mask, cm(&[[2, 0]]));
        assert_eq!(out.im, bm(&[[0, 1]]));
        let m = cm(&[[4, 0, 7]]);
        let same = im_multiclass(&[m.clone(), m.clone(), m.clone()]).unwrap();
        assert_eq!(same.final_mask, m);
        assert!(same.im.is_empty());
    }

    #[test]
    fn ensemble_preconditions() {
        assert!(im_binary(&[bm(&[[1]])]).is_err());
        assert!(im_binary(&[bm(&[[1]]), bm(&[[1, 0]])]).is_err());
        assert!(im_multiclass(&[cm(&[[1]])]).is_err());
    }

    #[test]
    fn soft_vote_examples() {
        let a = ProbMap::from_vec(1, 1, 2, vec![0.6f64, 0.4]).unwrap();
        let b = ProbMap::from_vec(1, 1, 2, vec![0.2f64, 0.8]).unwrap();
        assert_eq!(soft_vote(&[a.clone(), b]).unwrap(), cm(&[[1]]));
        let t1 = ProbMap::from_vec(1, 1, 2, vec![0.7f64, 0.3]).unwrap();
        let t2 = ProbMap::from_vec(1, 1, 2, vec![0.3f64, 0.7]).unwrap();
        assert_eq!(soft_vote(&[t1, t2]).unwrap(), cm(&[[0]]));
        assert_eq!(soft_vote(&[a.clone(), a.clone(), a.clone()]).unwrap(), a.argmax());
    }

    #[test]
    fn soft_vote_channel_mismatch() {
        let a = ProbMap::from_vec(1, 1, 2, vec![0.6f32, 0.4]).unwrap();
        let b = ProbMap::from_vec(1, 1, 3, vec![0.2f32, 0.4, 0.4]).unwrap();
        assert!(matches!(soft_vote(&[a, b]), Err(Error::ChannelMismatch { .. })));
    }

    #[test]
    fn unanimous_background_is_not_inconsistent() {
        let out = im_binary(&[bm(&[[0, 0]]), bm(&[[0, 0]])]).unwrap();
        assert!(out.im.is_empty());
        assert_eq!(out.foreground_count(), 0);
    }
}
