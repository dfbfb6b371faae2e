//! Square binary erosion/dilation and inconsistency-mask refinement.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask_core::ConsensusOutput;
use crate::raster::{BinaryMask, ClassMask};

/// Square all-ones structuring element of odd size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StructuringElement(usize);

impl StructuringElement {
    pub fn new(size: usize) -> Result<Self> {
        if size == 0 || size % 2 == 0 {
            return Err(Error::InvalidArgument(format!("kernel size must be odd and >= 1, got {size}")));
        }
        Ok(Self(size))
    }

    pub fn size(self) -> usize {
        self.0
    }

    pub fn radius(self) -> usize {
        self.0 / 2
    }
}

/// Count of set pixels in the `k x k` window around every pixel, with
/// out-of-bounds pixels counted as background.
fn window_counts(mask: &BinaryMask, se: StructuringElement) -> Vec<u32> {
    let (h, w) = mask.dims();
    let stride = w + 1;
    let mut integral = vec![0u32; (h + 1) * stride];
    for y in 0..h {
        let mut row = 0u32;
        for x in 0..w {
            row += mask.at(y, x) as u32;
            integral[(y + 1) * stride + x + 1] = integral[y * stride + x + 1] + row;
        }
    }
    let r = se.radius();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
            let s = integral[y1 * stride + x1] + integral[y0 * stride + x0]
                - integral[y0 * stride + x1]
                - integral[y1 * stride + x0];
            out.push(s);
        }
    }
    out
}

/// Keeps a pixel only if its whole window is set. Pixels whose window
/// leaves the image erode away.
pub fn erode(mask: &BinaryMask, se: StructuringElement) -> BinaryMask {
    if se.size() == 1 {
        return mask.clone();
    }
    let full = (se.size() * se.size()) as u32;
    let counts = window_counts(mask, se);
    BinaryMask::from_fn(mask.height(), mask.width(), |i| counts[i] == full)
}

/// Sets a pixel if any pixel in its window is set.
pub fn dilate(mask: &BinaryMask, se: StructuringElement) -> BinaryMask {
    if se.size() == 1 {
        return mask.clone();
    }
    let counts = window_counts(mask, se);
    BinaryMask::from_fn(mask.height(), mask.width(), |i| counts[i] > 0)
}

/// Erosion/dilation kernel sizes for IM refinement; `0` skips the step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefineParams {
    #[serde(rename = "e")]
    pub erode: usize,
    #[serde(rename = "d")]
    pub dilate: usize,
}

impl RefineParams {
    pub fn new(erode: usize, dilate: usize) -> Result<Self> {
        let p = Self { erode, dilate };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, k) in [("erode", self.erode), ("dilate", self.dilate)] {
            if k != 0 && k % 2 == 0 {
                return Err(Error::InvalidArgument(format!("{name} kernel must be 0 or odd, got {k}")));
            }
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.erode <= 1 && self.dilate <= 1
    }

    fn se(k: usize) -> Option<StructuringElement> {
        (k > 1).then(|| StructuringElement(k))
    }
}

/// Refines the inconsistency mask of a consensus output.
///
/// 1. The IM is eroded with kernel `e`.
/// 2. Pixels the erosion vacated are claimed by the first (lowest ID) class
///    whose non-IM region, dilated with the erosion kernel `e`, reaches them.
///    Vacated pixels no class reaches stay in the IM.
/// 3. The IM is dilated with kernel `d`; every pixel it covers becomes IM
///    again, whatever step 2 assigned.
///
/// Every output pixel carries either a class or the IM.
pub fn refine_im(consensus: &ConsensusOutput, params: RefineParams) -> Result<ConsensusOutput> {
    params.validate()?;
    if params.is_identity() {
        return Ok(consensus.clone());
    }
    let (h, w) = consensus.dims();
    let original_im = &consensus.im;
    let original_final = consensus.final_mask.data();

    let mut core_im = match RefineParams::se(params.erode) {
        Some(se) => erode(original_im, se),
        None => original_im.clone(),
    };
    let vacated: Vec<usize> = (0..h * w).filter(|&i| original_im.is_set(i) && !core_im.is_set(i)).collect();

    let mut claims: Vec<Option<u8>> = vec![None; h * w];
    if !vacated.is_empty() {
        let claim_se = StructuringElement(params.erode);
        let mut classes: Vec<u8> =
            (0..h * w).filter(|&i| !original_im.is_set(i)).map(|i| original_final[i]).collect();
        classes.sort_unstable();
        classes.dedup();
        let mut pending = vacated.clone();
        for class in classes {
            if pending.is_empty() {
                break;
            }
            let region = BinaryMask::from_fn(h, w, |i| !original_im.is_set(i) && original_final[i] == class);
            let reach = dilate(&region, claim_se);
            pending.retain(|&i| {
                if reach.is_set(i) {
                    claims[i] = Some(class);
                    false
                } else {
                    true
                }
            });
        }
        for i in pending {
            core_im.set(i, true);
        }
    }

    let im = match RefineParams::se(params.dilate) {
        Some(se) => dilate(&core_im, se),
        None => core_im,
    };
    let data = (0..h * w)
        .map(|i| {
            if im.is_set(i) {
                0
            } else if let Some(c) = claims[i] {
                c
            } else {
                original_final[i]
            }
        })
        .collect();
    Ok(ConsensusOutput {
        kind: consensus.kind,
        final_mask: ClassMask::from_vec(h, w, data)?,
        im,
        vote_sum: consensus.vote_sum.clone(),
        n_models: consensus.n_models,
    })
}

/// Pixel-level comparison of two refinement settings on the same input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Divergence {
    pub im_pixels_a: usize,
    pub im_pixels_b: usize,
    /// Pixels whose IM membership or final class differs.
    pub differing_pixels: usize,
}

pub fn divergence(consensus: &ConsensusOutput, a: RefineParams, b: RefineParams) -> Result<Divergence> {
    let ra = refine_im(consensus, a)?;
    let rb = refine_im(consensus, b)?;
    let differing_pixels = (0..ra.im.len())
        .filter(|&i| ra.im.is_set(i) != rb.im.is_set(i) || ra.final_mask.data()[i] != rb.final_mask.data()[i])
        .count();
    Ok(Divergence { im_pixels_a: ra.im_count(), im_pixels_b: rb.im_count(), differing_pixels })
}
