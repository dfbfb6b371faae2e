//! Segmentation metrics: IoU, Dice, mIoU, mPA and mean cell count error.
//!
//! Class-averaged metrics average over the classes present in the ground
//! truth of each image; dataset aggregates are means over images.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{check_same_dims, BinaryMask, ClassMask};
use crate::scalar::{ratio_or_one, Scalar};

/// `|pred ∩ gt| / |pred ∪ gt|`, defined as 1 when both are empty.
pub fn iou<T: Scalar>(pred: &BinaryMask, gt: &BinaryMask) -> Result<T> {
    let (inter, union, _, _) = binary_counts(pred, gt)?;
    Ok(ratio_or_one(inter, union))
}

/// `2|pred ∩ gt| / (|pred| + |gt|)`, defined as 1 when both are empty.
pub fn dice<T: Scalar>(pred: &BinaryMask, gt: &BinaryMask) -> Result<T> {
    let (inter, _, p, g) = binary_counts(pred, gt)?;
    Ok(ratio_or_one(2 * inter, p + g))
}

fn binary_counts(pred: &BinaryMask, gt: &BinaryMask) -> Result<(usize, usize, usize, usize)> {
    check_same_dims(pred.dims(), gt.dims(), "pred vs gt")?;
    let (mut inter, mut union, mut p, mut g) = (0, 0, 0, 0);
    for (&a, &b) in pred.data().iter().zip(gt.data()) {
        inter += (a & b) as usize;
        union += (a | b) as usize;
        p += a as usize;
        g += b as usize;
    }
    Ok((inter, union, p, g))
}

/// Per-class pixel tallies of a prediction against ground truth.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassTally {
    pub intersection: Vec<usize>,
    pub union: Vec<usize>,
    pub gt_pixels: Vec<usize>,
    pub pred_pixels: Vec<usize>,
}

impl ClassTally {
    pub fn new(pred: &ClassMask, gt: &ClassMask, label_count: usize) -> Result<Self> {
        check_same_dims(pred.dims(), gt.dims(), "pred vs gt")?;
        pred.validate(label_count)?;
        gt.validate(label_count)?;
        let mut t = ClassTally {
            intersection: vec![0; label_count],
            union: vec![0; label_count],
            gt_pixels: vec![0; label_count],
            pred_pixels: vec![0; label_count],
        };
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            let (p, g) = (p as usize, g as usize);
            t.pred_pixels[p] += 1;
            t.gt_pixels[g] += 1;
            if p == g {
                t.intersection[p] += 1;
                t.union[p] += 1;
            } else {
                t.union[p] += 1;
                t.union[g] += 1;
            }
        }
        Ok(t)
    }

    pub fn gt_present(&self) -> Vec<usize> {
        (0..self.gt_pixels.len()).filter(|&c| self.gt_pixels[c] > 0).collect()
    }

    pub fn class_iou<T: Scalar>(&self, class: usize) -> T {
        ratio_or_one(self.intersection[class], self.union[class])
    }

    pub fn class_accuracy<T: Scalar>(&self, class: usize) -> T {
        ratio_or_one(self.intersection[class], self.gt_pixels[class])
    }
}

fn mean_over<T: Scalar>(classes: &[usize], f: impl Fn(usize) -> T) -> Result<T> {
    if classes.is_empty() {
        return Err(Error::Empty("no classes left after the class policy"));
    }
    Ok(classes.iter().map(|&c| f(c)).sum::<T>() / T::from_count(classes.len()))
}

/// Mean IoU over classes present in `gt`.
pub fn miou<T: Scalar>(pred: &ClassMask, gt: &ClassMask, label_count: usize) -> Result<T> {
    let t = ClassTally::new(pred, gt, label_count)?;
    mean_over(&t.gt_present(), |c| t.class_iou(c))
}

/// Mean IoU restricted to `classes`, still skipping classes absent from `gt`.
pub fn miou_subset<T: Scalar>(pred: &ClassMask, gt: &ClassMask, label_count: usize, classes: &[u8]) -> Result<T> {
    let t = ClassTally::new(pred, gt, label_count)?;
    let keep: Vec<usize> = t.gt_present().into_iter().filter(|c| classes.contains(&(*c as u8))).collect();
    mean_over(&keep, |c| t.class_iou(c))
}

/// Mean IoU over a subset of multilabel channels present in `gt`.
pub fn miou_channels<T: Scalar>(pred: &[BinaryMask], gt: &[BinaryMask], channels: &[usize]) -> Result<T> {
    if pred.len() != gt.len() {
        return Err(Error::ChannelMismatch { expected: gt.len(), found: pred.len() });
    }
    let mut keep = Vec::new();
    for &c in channels {
        let g = gt.get(c).ok_or_else(|| Error::InvalidArgument(format!("channel {c} out of range")))?;
        if !g.is_empty() {
            keep.push(c);
        }
    }
    let ious = keep.iter().map(|&c| iou::<T>(&pred[c], &gt[c])).collect::<Result<Vec<T>>>()?;
    mean_over(&(0..ious.len()).collect::<Vec<_>>(), |i| ious[i])
}

/// Mean pixel accuracy over classes present in `gt`.
pub fn mpa<T: Scalar>(pred: &ClassMask, gt: &ClassMask, label_count: usize) -> Result<T> {
    let t = ClassTally::new(pred, gt, label_count)?;
    mean_over(&t.gt_present(), |c| t.class_accuracy(c))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    Four,
    Eight,
}

/// Number of connected components with at least `min_area` pixels.
pub fn count_components(mask: &BinaryMask, connectivity: Connectivity, min_area: usize) -> usize {
    label_components(mask, connectivity).1.into_iter().filter(|&a| a >= min_area).count()
}

/// Component label per pixel (`0` = background, components numbered from 1)
/// and the area of each component.
pub fn label_components(mask: &BinaryMask, connectivity: Connectivity) -> (Vec<u32>, Vec<usize>) {
    let (h, w) = mask.dims();
    let mut labels = vec![0u32; h * w];
    let mut areas = Vec::new();
    let mut queue = VecDeque::new();
    let offsets: &[(isize, isize)] = match connectivity {
        Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
        Connectivity::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)],
    };
    for start in 0..h * w {
        if !mask.is_set(start) || labels[start] != 0 {
            continue;
        }
        let label = areas.len() as u32 + 1;
        labels[start] = label;
        queue.push_back(start);
        let mut area = 0;
        while let Some(i) = queue.pop_front() {
            area += 1;
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            for &(dy, dx) in offsets {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if mask.is_set(j) && labels[j] == 0 {
                    labels[j] = label;
                    queue.push_back(j);
                }
            }
        }
        areas.push(area);
    }
    (labels, areas)
}

/// Per-type cell counts from a position-point channel: each point component
/// goes to the type channel it overlaps most (ties to the lower index);
/// points overlapping no type are not counted.
pub fn count_cells(points: &BinaryMask, types: &[BinaryMask], connectivity: Connectivity, min_area: usize) -> Result<Vec<usize>> {
    for t in types {
        check_same_dims(points.dims(), t.dims(), "cell type channel")?;
    }
    let (labels, areas) = label_components(points, connectivity);
    let mut overlap = vec![vec![0usize; types.len()]; areas.len()];
    for (i, &l) in labels.iter().enumerate() {
        if l == 0 {
            continue;
        }
        for (t, m) in types.iter().enumerate() {
            if m.is_set(i) {
                overlap[l as usize - 1][t] += 1;
            }
        }
    }
    let mut counts = vec![0; types.len()];
    for (comp, ov) in overlap.iter().enumerate() {
        if areas[comp] < min_area {
            continue;
        }
        let best = crate::raster::argmax_lowest(ov);
        if ov.get(best).copied().unwrap_or(0) > 0 {
            counts[best] += 1;
        }
    }
    Ok(counts)
}

/// Mean over images of the summed absolute per-type count errors.
pub fn mcce<T: Scalar>(pred_counts: &[Vec<usize>], gt_counts: &[Vec<usize>]) -> Result<T> {
    if gt_counts.is_empty() {
        return Err(Error::Empty("MCCE needs at least one image"));
    }
    if pred_counts.len() != gt_counts.len() {
        return Err(Error::Shape(format!("{} predicted vs {} actual images", pred_counts.len(), gt_counts.len())));
    }
    let mut total = T::zero();
    for (p, c) in pred_counts.iter().zip(gt_counts) {
        if p.len() != c.len() {
            return Err(Error::ChannelMismatch { expected: c.len(), found: p.len() });
        }
        total += T::from_count(p.iter().zip(c).map(|(&a, &b)| a.abs_diff(b)).sum());
    }
    Ok(total / T::from_count(gt_counts.len()))
}

/// Metric values for one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    /// Foreground IoU (binary datasets only).
    pub iou: Option<f64>,
    pub dice: Option<f64>,
    pub miou: f64,
    pub mpa: f64,
    /// IoU per class, `None` where the class is absent from the ground truth.
    pub per_class_iou: Vec<Option<f64>>,
}

impl ImageMetrics {
    pub fn evaluate(id: impl Into<String>, pred: &ClassMask, gt: &ClassMask, label_count: usize, binary: bool) -> Result<Self> {
        let t = ClassTally::new(pred, gt, label_count)?;
        let present = t.gt_present();
        let (iou, dice) = if binary {
            let (p, g) = (pred.to_binary()?, gt.to_binary()?);
            (Some(self::iou::<f64>(&p, &g)?), Some(self::dice::<f64>(&p, &g)?))
        } else {
            (None, None)
        };
        Ok(Self {
            id: id.into(),
            iou,
            dice,
            miou: mean_over(&present, |c| t.class_iou::<f64>(c))?,
            mpa: mean_over(&present, |c| t.class_accuracy::<f64>(c))?,
            per_class_iou: (0..label_count).map(|c| present.contains(&c).then(|| t.class_iou(c))).collect(),
        })
    }

    pub fn get(&self, key: MetricKey) -> Option<f64> {
        match key {
            MetricKey::Iou => self.iou,
            MetricKey::Dice => self.dice,
            MetricKey::Miou => Some(self.miou),
            MetricKey::Mpa => Some(self.mpa),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKey {
    Iou,
    Dice,
    Miou,
    Mpa,
}

impl MetricKey {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricKey::Iou => "iou",
            MetricKey::Dice => "dice",
            MetricKey::Miou => "miou",
            MetricKey::Mpa => "mpa",
        }
    }

    /// Headline metric: IoU for binary datasets, mIoU otherwise.
    pub fn headline(binary: bool) -> Self {
        if binary {
            MetricKey::Iou
        } else {
            MetricKey::Miou
        }
    }
}

/// Per-image metrics and their means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub images: Vec<ImageMetrics>,
    pub mean_iou: Option<f64>,
    pub mean_dice: Option<f64>,
    pub mean_miou: f64,
    pub mean_mpa: f64,
    /// Mean of per-image class IoU over the images where the class is present.
    pub per_class_iou: Vec<Option<f64>>,
    pub mcce: Option<f64>,
}

impl MetricReport {
    pub fn aggregate(images: Vec<ImageMetrics>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Empty("metric report needs at least one image"));
        }
        let n = images.len() as f64;
        let opt_mean = |f: &dyn Fn(&ImageMetrics) -> Option<f64>| -> Option<f64> {
            let v: Option<Vec<f64>> = images.iter().map(f).collect();
            v.map(|v| v.iter().sum::<f64>() / v.len() as f64)
        };
        let classes = images[0].per_class_iou.len();
        let per_class_iou = (0..classes)
            .map(|c| {
                let v: Vec<f64> = images.iter().filter_map(|m| m.per_class_iou.get(c).copied().flatten()).collect();
                (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
            })
            .collect();
        Ok(Self {
            mean_iou: opt_mean(&|m| m.iou),
            mean_dice: opt_mean(&|m| m.dice),
            mean_miou: images.iter().map(|m| m.miou).sum::<f64>() / n,
            mean_mpa: images.iter().map(|m| m.mpa).sum::<f64>() / n,
            per_class_iou,
            mcce: None,
            images,
        })
    }

    pub fn get(&self, key: MetricKey) -> Option<f64> {
        match key {
            MetricKey::Iou => self.mean_iou,
            MetricKey::Dice => self.mean_dice,
            MetricKey::Miou => Some(self.mean_miou),
            MetricKey::Mpa => Some(self.mean_mpa),
        }
    }

    /// `id,iou,dice,miou,mpa` rows.
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = String::from("id,iou,dice,miou,mpa\n");
        for m in &self.images {
            out.push_str(&format!("{},{},{},{:.6},{:.6}\n", m.id, fmt(m.iou), fmt(m.dice), m.miou, m.mpa));
        }
        out
    }
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
    fn iou_dice_examples() {
        let pred = bm(&[[1, 1], [0, 0]]);
        let gt = bm(&[[1, 0], [0, 0]]);
        assert_eq!(iou::<f64>(&pred, &gt).unwrap(), 0.5);
        assert!((dice::<f64>(&pred, &gt).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(iou::<f32>(&gt, &gt).unwrap(), 1.0);
        assert_eq!(dice::<f32>(&gt, &gt).unwrap(), 1.0);
        let empty = BinaryMask::zeros(2, 2);
        assert_eq!(iou::<f64>(&empty, &empty).unwrap(), 1.0);
        assert_eq!(dice::<f64>(&empty, &empty).unwrap(), 1.0);
        assert!(iou::<f64>(&empty, &BinaryMask::zeros(2, 3)).is_err());
    }

    #[test]
    fn miou_examples() {
        let gt = cm(&[[0, 0, 1]]);
        let pred = cm(&[[0, 2, 1]]);
        // class 0: 1/2, class 1: 1/1, class 2 absent from gt
        assert_eq!(miou::<f64>(&pred, &gt, 3).unwrap(), 0.75);
        let only2 = cm(&[[2, 2, 2]]);
        let p = cm(&[[2, 2, 0]]);
        assert_eq!(miou::<f64>(&p, &only2, 3).unwrap(), 2.0 / 3.0);
    }

    #[test]
    fn miou_subset_and_empty_policy() {
        let gt = cm(&[[1, 2, 0]]);
        let pred = cm(&[[1, 0, 0]]);
        assert_eq!(miou_subset::<f64>(&pred, &gt, 3, &[1, 2]).unwrap(), 0.5);
        assert!(matches!(miou_subset::<f64>(&pred, &gt, 3, &[5]), Err(Error::Empty(_))));
    }

    #[test]
    fn mpa_examples() {
        let gt = cm(&[[0, 0, 0, 1]]);
        let pred = cm(&[[0, 0, 1, 1]]);
        assert!((mpa::<f64>(&pred, &gt, 2).unwrap() - (2.0 / 3.0 + 1.0) / 2.0).abs() < 1e-12);
        assert_eq!(mpa::<f64>(&gt, &gt, 2).unwrap(), 1.0);
        let disjoint = cm(&[[1, 1, 1, 0]]);
        assert_eq!(mpa::<f64>(&disjoint, &gt, 2).unwrap(), 0.0);
    }

    #[test]
    fn mcce_examples() {
        assert_eq!(mcce::<f64>(&[vec![2, 2]], &[vec![3, 2]]).unwrap(), 1.0);
        assert_eq!(mcce::<f64>(&[vec![3, 2]], &[vec![3, 2]]).unwrap(), 0.0);
        assert_eq!(mcce::<f64>(&[vec![1, 0], vec![0, 3]], &[vec![0, 0], vec![0, 0]]).unwrap(), 2.0);
        assert!(mcce::<f64>(&[], &[]).is_err());
    }

    #[test]
    fn components_eight_vs_four() {
        let diag = bm(&[[1, 0], [0, 1]]);
        assert_eq!(count_components(&diag, Connectivity::Eight, 1), 1);
        assert_eq!(count_components(&diag, Connectivity::Four, 1), 2);
        let blobs = bm(&[[1, 1, 0, 0, 1], [0, 0, 0, 0, 0], [1, 0, 0, 1, 1]]);
        assert_eq!(count_components(&blobs, Connectivity::Eight, 1), 4);
        assert_eq!(count_components(&blobs, Connectivity::Eight, 2), 2);
    }

    #[test]
    fn cells_assigned_by_overlap() {
        let points = bm(&[[1, 0, 0, 1], [0, 0, 0, 0]]);
        let alive = bm(&[[1, 1, 0, 0], [0, 0, 0, 0]]);
        let dead = bm(&[[0, 0, 0, 1], [0, 0, 0, 0]]);
        assert_eq!(count_cells(&points, &[alive, dead], Connectivity::Eight, 1).unwrap(), vec![1, 1]);
    }

    #[test]
    fn report_aggregation() {
        let gt = cm(&[[0, 1]]);
        let a = ImageMetrics::evaluate("a", &gt, &gt, 2, true).unwrap();
        let b = ImageMetrics::evaluate("b", &cm(&[[0, 0]]), &gt, 2, true).unwrap();
        assert_eq!(b.iou, Some(0.0));
        let r = MetricReport::aggregate(vec![a, b]).unwrap();
        assert_eq!(r.mean_iou, Some(0.5));
        assert!(r.to_csv().starts_with("id,iou,dice,miou,mpa\na,1.000000"));
    }
}
