//! Synthetic shape datasets and model-free segmenters for GPU-free runs.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset_io::{self, Dataset, DatasetManifest, MaskMode, Split};
use crate::error::{Error, Result};
use crate::metrics::{label_components, Connectivity};
use crate::pseudo_label::{CombinedDataset, LabelEncoding};
use crate::raster::{BinaryMask, ClassMask, Image, ProbMap, Raster};
use crate::scalar::Scalar;
use crate::seed;

const PALETTE: [[u8; 3]; 8] = [
    [30, 30, 30],
    [220, 60, 50],
    [60, 200, 80],
    [70, 90, 230],
    [230, 210, 60],
    [200, 80, 210],
    [60, 210, 220],
    [240, 240, 240],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Label classes including background.
    pub classes: usize,
    pub shapes_per_image: (usize, usize),
    /// RGB per class; the default palette is used when empty.
    #[serde(default)]
    pub colors: Vec<[u8; 3]>,
    /// Uniform per-pixel intensity noise amplitude.
    #[serde(default)]
    pub pixel_noise: u8,
    pub seed: u64,
}

impl SceneSpec {
    pub fn new(height: usize, width: usize, classes: usize, seed: u64) -> Self {
        Self { height, width, classes, shapes_per_image: (1, 4), colors: Vec::new(), pixel_noise: 12, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.colors.is_empty() && self.classes > PALETTE.len() {
            return Err(Error::InvalidArgument(format!("default palette covers {} classes, give colors", PALETTE.len())));
        }
        if !self.colors.is_empty() && self.colors.len() != self.classes {
            return Err(Error::InvalidArgument(format!("{} colors for {} classes", self.colors.len(), self.classes)));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::InvalidArgument("canvas must be at least 8x8".into()));
        }
        if self.shapes_per_image.0 > self.shapes_per_image.1 {
            return Err(Error::InvalidArgument("shape range min > max".into()));
        }
        Ok(())
    }

    pub fn is_binary(&self) -> bool {
        self.classes == 2
    }

    fn color(&self, class: u8) -> [u8; 3] {
        if self.colors.is_empty() {
            PALETTE[class as usize]
        } else {
            self.colors[class as usize]
        }
    }
}

/// Image and exact mask of scene `index`.
pub fn generate_scene(spec: &SceneSpec, index: usize) -> Result<(Image, ClassMask)> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = seed::rng_for(spec.seed, &format!("scene/{index}"));
    let mut mask = vec![0u8; h * w];
    let n_shapes = rng.random_range(spec.shapes_per_image.0..=spec.shapes_per_image.1);
    for _ in 0..n_shapes {
        let class = rng.random_range(1..spec.classes) as u8;
        let sh = rng.random_range(h / 8..=h / 3).max(2);
        let sw = rng.random_range(w / 8..=w / 3).max(2);
        let y0 = rng.random_range(0..=h - sh);
        let x0 = rng.random_range(0..=w - sw);
        let ellipse = rng.random_bool(0.5);
        let (cy, cx) = (y0 as f64 + sh as f64 / 2.0, x0 as f64 + sw as f64 / 2.0);
        let (ry, rx) = (sh as f64 / 2.0, sw as f64 / 2.0);
        for y in y0..y0 + sh {
            for x in x0..x0 + sw {
                let inside = !ellipse || {
                    let (dy, dx) = ((y as f64 + 0.5 - cy) / ry, (x as f64 + 0.5 - cx) / rx);
                    dy * dy + dx * dx <= 1.0
                };
                if inside {
                    mask[y * w + x] = class;
                }
            }
        }
    }
    let amp = spec.pixel_noise as i32;
    let mut data = Vec::with_capacity(h * w * 3);
    for &class in &mask {
        for v in spec.color(class) {
            let n = if amp > 0 { rng.random_range(-amp..=amp) } else { 0 };
            data.push((v as i32 + n).clamp(0, 255) as u8);
        }
    }
    Ok((Raster::new(h, w, 3, data)?, ClassMask::from_vec(h, w, mask)?))
}

/// Split sizes for a generated dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSplits {
    pub val: usize,
    pub test: usize,
    pub ld: usize,
}

impl SynthSplits {
    /// 10% validation, 10% test, and a tenth of the rest labeled.
    pub fn default_for(n_images: usize) -> Self {
        let val = n_images / 10;
        let test = n_images / 10;
        let fd = n_images - val - test;
        Self { val, test, ld: (fd / 10).max(1).min(fd) }
    }
}

pub fn scene_id(index: usize) -> String {
    format!("s{index:05}")
}

/// Writes `n_images` scenes plus a manifest under `root`.
pub fn generate_dataset(spec: &SceneSpec, n_images: usize, splits: SynthSplits, root: &Path) -> Result<Dataset> {
    spec.validate()?;
    if splits.val + splits.test > n_images {
        return Err(Error::InvalidArgument("VAL + TEST exceed the image count".into()));
    }
    (0..n_images).into_par_iter().try_for_each(|i| -> Result<()> {
        let (image, mask) = generate_scene(spec, i)?;
        let id = scene_id(i);
        dataset_io::write_image(&dataset_io::image_path(root, &id), &image)?;
        dataset_io::write_class_mask(&dataset_io::mask_path(root, &id), &mask)
    })?;
    let ids: Vec<String> = (0..n_images).map(scene_id).collect();
    let num_classes = if spec.is_binary() { 1 } else { spec.classes };
    let mut manifest = DatasetManifest::new(
        format!("synth-{}c-{}x{}", spec.classes, spec.height, spec.width),
        (spec.height, spec.width, 3),
        MaskMode::Multiclass,
        num_classes,
    );
    let fd_end = n_images - splits.val - splits.test;
    manifest.set_split(Split::VAL, ids[fd_end..fd_end + splits.val].to_vec());
    manifest.set_split(Split::TEST, ids[fd_end + splits.val..].to_vec());
    let manifest = dataset_io::split_dataset(manifest, &ids[..fd_end], splits.ld, spec.seed)?;
    manifest.save(root)?;
    Dataset::open(root)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseModel {
    /// Each pixel independently takes a different class with probability `p`.
    PixelFlip { p: f64 },
    /// Each connected object independently takes a different class with
    /// probability `p`.
    ClassConfusion { p: f64 },
    /// Pixels within `kernel / 2` of a class boundary take a neighbouring
    /// class with probability `p`.
    BoundaryJitter { kernel: usize, p: f64 },
}

impl NoiseModel {
    pub fn p(&self) -> f64 {
        match *self {
            NoiseModel::PixelFlip { p } | NoiseModel::ClassConfusion { p } | NoiseModel::BoundaryJitter { p, .. } => p,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p()) {
            return Err(Error::InvalidArgument(format!("noise probability {} outside [0, 1]", self.p())));
        }
        if let NoiseModel::BoundaryJitter { kernel, .. } = *self {
            if kernel % 2 == 0 {
                return Err(Error::InvalidArgument(format!("jitter kernel must be odd, got {kernel}")));
            }
        }
        Ok(())
    }
}

pub const SOFT_HIGH: f32 = 0.9;
pub const SOFT_LOW: f32 = 0.1;

fn other_class(rng: &mut impl Rng, class: u8, label_count: usize) -> u8 {
    let r = rng.random_range(0..label_count - 1) as u8;
    if r >= class {
        r + 1
    } else {
        r
    }
}

/// Corrupted copy of `gt` under `noise`.
pub fn corrupt(gt: &ClassMask, label_count: usize, noise: &NoiseModel, model_seed: u64) -> Result<ClassMask> {
    noise.validate()?;
    gt.validate(label_count)?;
    let mut rng = seed::rng(model_seed);
    let mut out = gt.clone();
    let (h, w) = gt.dims();
    match *noise {
        NoiseModel::PixelFlip { p } => {
            for v in out.data_mut() {
                if rng.random_bool(p) {
                    *v = other_class(&mut rng, *v, label_count);
                }
            }
        }
        NoiseModel::ClassConfusion { p } => {
            for class in 1..label_count as u8 {
                let (labels, sizes) = label_components(&gt.class_mask(class), Connectivity::Eight);
                let targets: Vec<Option<u8>> =
                    sizes.iter().map(|_| rng.random_bool(p).then(|| other_class(&mut rng, class, label_count))).collect();
                for (i, &l) in labels.iter().enumerate() {
                    if l > 0 {
                        if let Some(t) = targets[l as usize - 1] {
                            out.data_mut()[i] = t;
                        }
                    }
                }
            }
        }
        NoiseModel::BoundaryJitter { kernel, p } => {
            let r = (kernel / 2) as isize;
            let data = gt.data();
            for y in 0..h {
                for x in 0..w {
                    let own = data[y * w + x];
                    let mut others: Vec<u8> = Vec::new();
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let (yy, xx) = (y as isize + dy, x as isize + dx);
                            if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                                let c = data[yy as usize * w + xx as usize];
                                if c != own && !others.contains(&c) {
                                    others.push(c);
                                }
                            }
                        }
                    }
                    if !others.is_empty() && rng.random_bool(p) {
                        others.sort_unstable();
                        out.data_mut()[y * w + x] = others[rng.random_range(0..others.len())];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Soft one-hot probabilities for a hard mask: one channel with
/// `{0.1, 0.9}` for binary data, otherwise 0.9 on the chosen class and the
/// remaining 0.1 spread over the others.
pub fn soft_one_hot<T: Scalar>(mask: &ClassMask, label_count: usize, binary: bool) -> Result<ProbMap<T>> {
    let (h, w) = mask.dims();
    let (hi, lo) = (T::lit(SOFT_HIGH as f64), T::lit(SOFT_LOW as f64));
    if binary {
        let data = mask.data().iter().map(|&v| if v > 0 { hi } else { lo }).collect();
        return ProbMap::from_vec(h, w, 1, data);
    }
    let rest = lo / T::from_count(label_count - 1);
    let mut data = Vec::with_capacity(h * w * label_count);
    for &v in mask.data() {
        data.extend((0..label_count).map(|c| if c == v as usize { hi } else { rest }));
    }
    ProbMap::from_vec(h, w, label_count, data)
}

/// A simulated teacher: the ground truth corrupted by `noise`, softened.
pub fn noisy_oracle_predict(gt: &ClassMask, label_count: usize, binary: bool, noise: &NoiseModel, model_seed: u64) -> Result<ProbMap<f32>> {
    soft_one_hot(&corrupt(gt, label_count, noise, model_seed)?, label_count, binary)
}

/// Nearest-colour-centroid segmenter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CentroidModel {
    pub binary: bool,
    /// Trained on IM-shifted labels: predictions carry a leading IM channel
    /// that this learner never assigns.
    #[serde(default)]
    pub shifted: bool,
    pub channels: usize,
    /// Mean colour per output class; `None` when no training pixel had it.
    pub centroids: Vec<Option<Vec<f64>>>,
    pub temperature: f64,
}

pub const DEFAULT_TEMPERATURE: f64 = 8.0;

impl CentroidModel {
    pub fn label_count(&self) -> usize {
        self.centroids.len()
    }

    pub fn learned(&self) -> usize {
        self.centroids.iter().filter(|c| c.is_some()).count()
    }
}

/// Output classes a Combined Dataset trains, given its declared class count.
fn cd_label_count(declared: usize, encoding: LabelEncoding) -> (usize, bool) {
    match encoding {
        LabelEncoding::Plain if declared <= 1 => (2, true),
        LabelEncoding::Plain => (declared, false),
        LabelEncoding::ImShifted => (declared - 1, false),
    }
}

/// Fits per-class mean colours over non-IM pixels of the given records.
///
/// `declared_classes` is the CD manifest's class count. With `bootstrap`,
/// records are resampled with replacement from that seed first.
pub fn centroid_train(cd: &CombinedDataset, declared_classes: usize, bootstrap: Option<u64>) -> Result<CentroidModel> {
    if cd.is_empty() {
        return Err(Error::Empty("combined dataset has no records"));
    }
    let encoding = cd.descriptor.label_encoding;
    let (label_count, binary) = cd_label_count(declared_classes, encoding);
    let channels = cd.pairs[0].image.channels();
    let picks: Vec<usize> = match bootstrap {
        Some(s) => {
            let mut rng = seed::rng_for(s, "bootstrap");
            (0..cd.len()).map(|_| rng.random_range(0..cd.len())).collect()
        }
        None => (0..cd.len()).collect(),
    };
    let mut sums = vec![vec![0f64; channels]; label_count];
    let mut counts = vec![0u64; label_count];
    for &k in &picks {
        let pair = &cd.pairs[k];
        if pair.image.channels() != channels {
            return Err(Error::ChannelMismatch { expected: channels, found: pair.image.channels() });
        }
        for (i, &label) in pair.label.data().iter().enumerate() {
            if pair.im.is_set(i) {
                continue;
            }
            let class = match encoding {
                LabelEncoding::Plain => label as usize,
                LabelEncoding::ImShifted if label == 0 => continue,
                LabelEncoding::ImShifted => label as usize - 1,
            };
            if class >= label_count {
                return Err(Error::ClassOutOfRange { id: class as u32, classes: label_count as u32 });
            }
            counts[class] += 1;
            for (s, &v) in sums[class].iter_mut().zip(pair.image.pixel(i)) {
                *s += v as f64;
            }
        }
    }
    let centroids = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &n)| (n > 0).then(|| s.into_iter().map(|v| v / n as f64).collect()))
        .collect();
    Ok(CentroidModel { binary, shifted: encoding == LabelEncoding::ImShifted, channels, centroids, temperature: DEFAULT_TEMPERATURE })
}

/// Softmax over negative colour distances to the learned centroids.
/// Unlearned classes get probability 0; with no learned class at all the
/// output is uniform.
pub fn centroid_predict<T: Scalar>(model: &CentroidModel, image: &Image) -> Result<ProbMap<T>> {
    if image.channels() != model.channels {
        return Err(Error::ChannelMismatch { expected: model.channels, found: image.channels() });
    }
    let (h, w) = image.dims();
    let classes = model.label_count();
    let out_channels = if model.binary { 1 } else { classes + model.shifted as usize };
    let mut data = Vec::with_capacity(h * w * out_channels);
    let mut probs = vec![0f64; classes];
    for i in 0..h * w {
        let px = image.pixel(i);
        let dists: Vec<Option<f64>> = model
            .centroids
            .iter()
            .map(|c| c.as_ref().map(|c| c.iter().zip(px).map(|(m, &v)| (m - v as f64).powi(2)).sum::<f64>().sqrt()))
            .collect();
        let best = dists.iter().flatten().fold(f64::INFINITY, |a, &b| a.min(b));
        if best.is_infinite() {
            probs.fill(1.0 / classes as f64);
        } else {
            for (p, d) in probs.iter_mut().zip(&dists) {
                *p = d.map_or(0.0, |d| (-(d - best) / model.temperature).exp());
            }
            let z: f64 = probs.iter().sum();
            probs.iter_mut().for_each(|p| *p /= z);
        }
        if model.binary {
            data.push(T::lit(probs[1].clamp(0.0, 1.0)));
        } else {
            if model.shifted {
                data.push(T::zero());
            }
            data.extend(probs.iter().map(|&p| T::lit(p.clamp(0.0, 1.0))));
        }
    }
    ProbMap::from_vec(h, w, out_channels, data)
}

/// Fraction of pixels where two masks differ.
pub fn disagreement(a: &ClassMask, b: &ClassMask) -> f64 {
    let diff = a.data().iter().zip(b.data()).filter(|(x, y)| x != y).count();
    diff as f64 / a.len().max(1) as f64
}

/// `(wrong, retained)` pixel counts of `pred` against `gt` outside `im`.
pub fn retained_error(pred: &ClassMask, gt: &ClassMask, im: &BinaryMask) -> (usize, usize) {
    let mut retained = 0;
    let mut wrong = 0;
    for i in 0..gt.len() {
        if !im.is_set(i) {
            retained += 1;
            wrong += (pred.data()[i] != gt.data()[i]) as usize;
        }
    }
    (wrong, retained)
}
