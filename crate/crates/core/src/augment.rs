//! Seeded photometric and geometric augmentation with per-generation
//! strength schedules.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::dataset_io::LabelMask;
use crate::error::{Error, Result};
use crate::raster::{Geometric, Image};
use crate::seed;

/// Upper bounds for one generation. Each concrete augmentation draws every
/// parameter uniformly between "none" and these maxima.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    /// Largest box-blur kernel; `0` or `1` disables blurring.
    pub max_blur_kernel: usize,
    /// Largest additive noise amplitude in gray levels.
    pub max_noise: u8,
    /// Contrast multiplier deviation around 1.
    pub alpha_dev: f64,
    /// Brightness offset deviation around 0.
    pub beta_dev: f64,
    pub allow_hflip: bool,
    pub allow_vflip: bool,
    pub allow_rot90: bool,
}

impl AugmentationSpec {
    pub const IDENTITY: AugmentationSpec = AugmentationSpec {
        max_blur_kernel: 0,
        max_noise: 0,
        alpha_dev: 0.0,
        beta_dev: 0.0,
        allow_hflip: false,
        allow_vflip: false,
        allow_rot90: false,
    };

    pub fn validate(&self) -> Result<()> {
        if self.max_blur_kernel > 1 && self.max_blur_kernel % 2 == 0 {
            return Err(Error::InvalidArgument(format!("max blur kernel {} must be odd", self.max_blur_kernel)));
        }
        if !(0.0..1.0).contains(&self.alpha_dev) {
            return Err(Error::InvalidArgument(format!("alpha deviation {} outside [0,1)", self.alpha_dev)));
        }
        if !(self.beta_dev >= 0.0 && self.beta_dev.is_finite()) {
            return Err(Error::InvalidArgument(format!("beta deviation {} must be >= 0", self.beta_dev)));
        }
        Ok(())
    }

    /// Rounds an even blur kernel up to the next odd size; a centred box
    /// filter needs an odd window.
    fn normalized(mut self) -> Self {
        if self.max_blur_kernel > 1 && self.max_blur_kernel % 2 == 0 {
            log::debug!("blur kernel {} is even; using {}", self.max_blur_kernel, self.max_blur_kernel + 1);
            self.max_blur_kernel += 1;
        }
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
struct ScheduleEntry {
    generation: usize,
    #[serde(flatten)]
    spec: AugmentationSpec,
}

/// One augmentation spec per generation, generation 1 first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ScheduleEntry>", into = "Vec<ScheduleEntry>")]
pub struct GenerationSchedule {
    rows: Vec<AugmentationSpec>,
}

impl TryFrom<Vec<ScheduleEntry>> for GenerationSchedule {
    type Error = Error;

    fn try_from(mut entries: Vec<ScheduleEntry>) -> Result<Self> {
        entries.sort_by_key(|e| e.generation);
        for (i, e) in entries.iter().enumerate() {
            if e.generation != i + 1 {
                return Err(Error::Config(format!("schedule generations must be 1..={}", entries.len())));
            }
        }
        GenerationSchedule::new(entries.into_iter().map(|e| e.spec).collect())
    }
}

impl From<GenerationSchedule> for Vec<ScheduleEntry> {
    fn from(s: GenerationSchedule) -> Self {
        s.rows.into_iter().enumerate().map(|(i, spec)| ScheduleEntry { generation: i + 1, spec }).collect()
    }
}

impl GenerationSchedule {
    pub fn new(rows: Vec<AugmentationSpec>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Config("schedule needs at least one generation".into()));
        }
        let rows: Vec<_> = rows.into_iter().map(AugmentationSpec::normalized).collect();
        rows.iter().try_for_each(AugmentationSpec::validate)?;
        Ok(Self { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Spec for a 1-based generation.
    pub fn for_generation(&self, generation: usize) -> Result<&AugmentationSpec> {
        generation
            .checked_sub(1)
            .and_then(|i| self.rows.get(i))
            .ok_or_else(|| Error::Config(format!("schedule has no row for generation {generation}")))
    }

    /// Strongest row, used to build the augmented labeled dataset.
    pub fn max_row(&self) -> &AugmentationSpec {
        self.rows.last().expect("non-empty schedule")
    }

    pub fn preset(name: &str) -> Result<Self> {
        let text = match name.to_ascii_lowercase().as_str() {
            "isic2018" | "isic" => include_str!("../presets/isic2018.json"),
            "hela" => include_str!("../presets/hela.json"),
            "suim" => include_str!("../presets/suim.json"),
            "cityscapes" => include_str!("../presets/cityscapes.json"),
            other => return Err(Error::Config(format!("unknown augmentation preset {other:?}"))),
        };
        Ok(serde_json::from_str(text)?)
    }

    pub fn rows(&self) -> &[AugmentationSpec] {
        &self.rows
    }
}

/// Fully determined augmentation for one record.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConcreteAugmentation {
    pub blur_kernel: usize,
    pub noise_amp: u8,
    pub alpha: f64,
    pub beta: f64,
    pub hflip: bool,
    pub vflip: bool,
    pub rot90_quarter_turns: u8,
    pub seed: u64,
}

impl ConcreteAugmentation {
    pub const IDENTITY: ConcreteAugmentation = ConcreteAugmentation {
        blur_kernel: 1,
        noise_amp: 0,
        alpha: 1.0,
        beta: 0.0,
        hflip: false,
        vflip: false,
        rot90_quarter_turns: 0,
        seed: 0,
    };

    pub fn geometric(hflip: bool, vflip: bool, rot90_quarter_turns: u8) -> Self {
        Self { hflip, vflip, rot90_quarter_turns: rot90_quarter_turns % 4, ..Self::IDENTITY }
    }

    pub fn is_photometric_identity(&self) -> bool {
        self.blur_kernel <= 1 && self.noise_amp == 0 && self.alpha == 1.0 && self.beta == 0.0
    }

    pub fn is_geometric_identity(&self) -> bool {
        !self.hflip && !self.vflip && self.rot90_quarter_turns % 4 == 0
    }

    /// Compact code of the geometric part, e.g. `h1v0r3`.
    pub fn geometric_code(&self) -> String {
        format!("h{}v{}r{}", self.hflip as u8, self.vflip as u8, self.rot90_quarter_turns % 4)
    }

    pub fn parse_geometric_code(code: &str) -> Option<Self> {
        let b = code.as_bytes();
        if b.len() != 6 || b[0] != b'h' || b[2] != b'v' || b[4] != b'r' {
            return None;
        }
        let bit = |c: u8| match c {
            b'0' => Some(false),
            b'1' => Some(true),
            _ => None,
        };
        let rot = (b[5] as char).to_digit(10).filter(|r| *r < 4)? as u8;
        Some(Self::geometric(bit(b[1])?, bit(b[3])?, rot))
    }
}

/// Draws a concrete augmentation; identical `(spec, seed)` give identical
/// results.
pub fn sample(spec: &AugmentationSpec, seed: u64) -> ConcreteAugmentation {
    let mut rng = seed::rng(seed);
    let max_odd = if spec.max_blur_kernel <= 1 { 1 } else { spec.max_blur_kernel | 1 };
    let blur_kernel = 2 * rng.random_range(0..=max_odd / 2) + 1;
    let noise_amp = rng.random_range(0..=spec.max_noise);
    let alpha = if spec.alpha_dev > 0.0 { rng.random_range(1.0 - spec.alpha_dev..=1.0 + spec.alpha_dev) } else { 1.0 };
    let beta = if spec.beta_dev > 0.0 { rng.random_range(-spec.beta_dev..=spec.beta_dev) } else { 0.0 };
    let hflip = spec.allow_hflip && rng.random_bool(0.5);
    let vflip = spec.allow_vflip && rng.random_bool(0.5);
    let rot90_quarter_turns = if spec.allow_rot90 { rng.random_range(0..4u8) } else { 0 };
    ConcreteAugmentation { blur_kernel, noise_amp, alpha, beta, hflip, vflip, rot90_quarter_turns, seed: rng.next_u64() }
}

/// `clamp(round(alpha * px + beta), 0, 255)`
#[inline]
pub fn adjust_pixel(px: u8, alpha: f64, beta: f64) -> u8 {
    (alpha * px as f64 + beta).round().clamp(0.0, 255.0) as u8
}

fn box_blur(image: &Image, k: usize) -> Image {
    let (h, w, c) = (image.height(), image.width(), image.channels());
    let r = (k / 2) as isize;
    let area = (k * k) as u32;
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut sum = 0u32;
                for dy in -r..=r {
                    let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    for dx in -r..=r {
                        let sx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                        sum += image.get(sy, sx, ch) as u32;
                    }
                }
                out.set(y, x, ch, ((sum + area / 2) / area) as u8);
            }
        }
    }
    out
}

/// Photometric part only: contrast/brightness, box blur, additive noise.
pub fn apply_photometric(image: &Image, aug: &ConcreteAugmentation) -> Image {
    let mut out = if aug.alpha != 1.0 || aug.beta != 0.0 {
        image.map(|px| adjust_pixel(px, aug.alpha, aug.beta))
    } else {
        image.clone()
    };
    if aug.blur_kernel > 1 {
        out = box_blur(&out, aug.blur_kernel);
    }
    if aug.noise_amp > 0 {
        let amp = aug.noise_amp as i16;
        let mut rng = seed::rng(aug.seed);
        for v in out.data_mut() {
            let n: i16 = rng.random_range(-amp..=amp);
            *v = (*v as i16 + n).clamp(0, 255) as u8;
        }
    }
    out
}

/// Flips (horizontal, then vertical) followed by clockwise rotation.
pub fn apply_geometric<G: Geometric>(value: &G, aug: &ConcreteAugmentation) -> G {
    let mut out = if aug.hflip { value.flip_horizontal() } else { value.rotate90(0) };
    if aug.vflip {
        out = out.flip_vertical();
    }
    if aug.rot90_quarter_turns % 4 != 0 {
        out = out.rotate90(aug.rot90_quarter_turns);
    }
    out
}

/// Augments an image and, geometrically only, its mask.
pub fn apply<M: Geometric + HasDims>(image: &Image, mask: Option<&M>, aug: &ConcreteAugmentation) -> Result<(Image, Option<M>)> {
    if let Some(m) = mask {
        if m.dims() != image.dims() {
            return Err(Error::Shape(format!("mask {:?} vs image {:?}", m.dims(), image.dims())));
        }
    }
    let image = apply_geometric(&apply_photometric(image, aug), aug);
    Ok((image, mask.map(|m| apply_geometric(m, aug))))
}

/// Geometric inverse. Photometric fields are reset to identity.
///
/// With exactly one flip, `R^k F` is its own inverse; otherwise the flips
/// commute with rotation and only the turn count is negated.
pub fn invert_geometric(aug: &ConcreteAugmentation) -> ConcreteAugmentation {
    let k = aug.rot90_quarter_turns % 4;
    let turns = if aug.hflip ^ aug.vflip { k } else { (4 - k) % 4 };
    ConcreteAugmentation::geometric(aug.hflip, aug.vflip, turns)
}

/// Undoes the geometric part of `aug`.
pub fn map_back<G: Geometric>(value: &G, aug: &ConcreteAugmentation) -> G {
    apply_geometric(value, &invert_geometric(aug))
}

/// Anything with `(height, width)`.
pub trait HasDims {
    fn dims(&self) -> (usize, usize);
}

impl<P: Copy> HasDims for crate::raster::Raster<P> {
    fn dims(&self) -> (usize, usize) {
        crate::raster::Raster::dims(self)
    }
}

impl HasDims for crate::raster::BinaryMask {
    fn dims(&self) -> (usize, usize) {
        crate::raster::BinaryMask::dims(self)
    }
}

impl HasDims for crate::raster::ClassMask {
    fn dims(&self) -> (usize, usize) {
        crate::raster::ClassMask::dims(self)
    }
}

impl HasDims for LabelMask {
    fn dims(&self) -> (usize, usize) {
        match self {
            LabelMask::Class(m) => m.dims(),
            LabelMask::MultiLabel(ch) => ch.first().map(|m| m.dims()).unwrap_or((0, 0)),
        }
    }
}

impl Geometric for LabelMask {
    fn flip_horizontal(&self) -> Self {
        match self {
            LabelMask::Class(m) => LabelMask::Class(m.flip_horizontal()),
            LabelMask::MultiLabel(ch) => LabelMask::MultiLabel(ch.iter().map(Geometric::flip_horizontal).collect()),
        }
    }
    fn flip_vertical(&self) -> Self {
        match self {
            LabelMask::Class(m) => LabelMask::Class(m.flip_vertical()),
            LabelMask::MultiLabel(ch) => LabelMask::MultiLabel(ch.iter().map(Geometric::flip_vertical).collect()),
        }
    }
    fn rotate90(&self, q: u8) -> Self {
        match self {
            LabelMask::Class(m) => LabelMask::Class(m.rotate90(q)),
            LabelMask::MultiLabel(ch) => LabelMask::MultiLabel(ch.iter().map(|m| m.rotate90(q)).collect()),
        }
    }
}

/// An image with its ground-truth mask.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledRecord {
    pub id: String,
    pub image: Image,
    pub mask: LabelMask,
}

pub const ALD_VARIANTS: usize = 9;

pub fn ald_variant_id(id: &str, variant: usize) -> String {
    format!("{id}_aug{variant}")
}

/// Labeled records plus nine augmented variants of each, drawn at the
/// strongest schedule row. Output order: each original followed by its
/// variants, in input order.
pub fn build_ald(records: &[LabeledRecord], spec_at_max: &AugmentationSpec, seed: u64) -> Result<Vec<LabeledRecord>> {
    spec_at_max.validate()?;
    let mut out = Vec::with_capacity(records.len() * (ALD_VARIANTS + 1));
    for rec in records {
        out.push(rec.clone());
        for v in 1..=ALD_VARIANTS {
            let id = ald_variant_id(&rec.id, v);
            let aug = sample(spec_at_max, seed::derive_seed(seed, &format!("ald/{id}")));
            let (image, mask) = apply(&rec.image, Some(&rec.mask), &aug)?;
            out.push(LabeledRecord { id, image, mask: mask.expect("mask given") });
        }
    }
    Ok(out)
}
