//! Cost model of the width-scaled 1x1 U-Net and the EvalNet trunk.
//!
//! Parameters follow the usual convention (`k²·c_in·c_out + c_out` per
//! conv, two trainable values per batch-norm channel). FLOPs are forward
//! only and count a multiply-add as two operations.

use std::fmt::Write as _;
use std::ops::Mul;

use num_traits::FromPrimitive;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ENCODER_DEPTH: usize = 4;
pub const EVALNET_ENCODER_DEPTH: usize = 5;
/// Params(M) at α = 1 for the reference model, 256×256 RGB input, one output.
pub const REFERENCE_PARAMS_ALPHA1: f64 = 681_700.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub alpha: f64,
    pub base_filters: usize,
    pub input: (usize, usize, usize),
    pub num_outputs: usize,
}

impl ArchConfig {
    pub fn new(alpha: f64, base_filters: usize, input: (usize, usize, usize), num_outputs: usize) -> Result<Self> {
        let cfg = Self { alpha, base_filters, input, num_outputs };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.base_filters == 0 || self.num_outputs == 0 {
            return Err(Error::InvalidArgument("base_filters and num_outputs must be >= 1".into()));
        }
        let (h, w, c) = self.input;
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::InvalidArgument(format!("bad input shape {:?}", self.input)));
        }
        Ok(())
    }

    pub fn with_alpha(&self, alpha: f64) -> Self {
        Self { alpha, ..*self }
    }

    /// `⌊α · base · 2^level⌋`.
    pub fn filters(&self, level: usize) -> Result<usize> {
        let f = (self.alpha * self.base_filters as f64 * (1u64 << level) as f64 + 1e-9).floor() as usize;
        if f == 0 {
            return Err(Error::InvalidArgument(format!(
                "alpha {} with base {} leaves level {level} without filters",
                self.alpha, self.base_filters
            )));
        }
        Ok(f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv { kernel: usize },
    /// Learned 2× upsampling (transposed conv, kernel 2, stride 2).
    UpConv,
    BatchNorm,
    MaxPool,
    Add,
    Concat,
    GlobalAvgPool,
    Dense,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub c_in: usize,
    pub c_out: usize,
    /// Output spatial size.
    pub h: usize,
    pub w: usize,
}

impl Layer {
    pub fn params(&self) -> u64 {
        let (ci, co) = (self.c_in as u64, self.c_out as u64);
        match self.kind {
            LayerKind::Conv { kernel } => (kernel * kernel) as u64 * ci * co + co,
            LayerKind::UpConv => 4 * ci * co + co,
            LayerKind::Dense => ci * co + co,
            LayerKind::BatchNorm => 2 * co,
            _ => 0,
        }
    }

    pub fn flops(&self) -> u64 {
        let (ci, co, hw) = (self.c_in as u64, self.c_out as u64, (self.h * self.w) as u64);
        match self.kind {
            LayerKind::Conv { kernel } => 2 * (kernel * kernel) as u64 * ci * co * hw,
            // each input pixel scatters into a 2x2 output patch
            LayerKind::UpConv => 2 * ci * co * hw,
            LayerKind::Dense => 2 * ci * co,
            _ => 0,
        }
    }
}

struct Builder {
    layers: Vec<Layer>,
    c: usize,
    h: usize,
    w: usize,
}

impl Builder {
    fn push(&mut self, name: String, kind: LayerKind, c_out: usize) {
        match kind {
            LayerKind::MaxPool => {
                self.h /= 2;
                self.w /= 2;
            }
            LayerKind::UpConv => {
                self.h *= 2;
                self.w *= 2;
            }
            LayerKind::GlobalAvgPool => {
                self.h = 1;
                self.w = 1;
            }
            _ => {}
        }
        self.layers.push(Layer { name, kind, c_in: self.c, c_out, h: self.h, w: self.w });
        self.c = c_out;
    }

    fn conv(&mut self, name: String, kernel: usize, c_out: usize) {
        self.push(name, LayerKind::Conv { kernel }, c_out);
    }

    fn bn(&mut self, name: String) {
        let c = self.c;
        self.push(name, LayerKind::BatchNorm, c);
    }

    fn encoder_block(&mut self, prefix: &str, f: usize) {
        self.conv(format!("{prefix}.conv3"), 3, f);
        self.conv(format!("{prefix}.conv1"), 1, f);
        self.bn(format!("{prefix}.bn"));
    }
}

/// Layer list of the 1x1 U-Net: input block, four encoder blocks, bottleneck,
/// four decoder blocks and a 1×1 output conv.
///
/// Decoder blocks upsample with a learned 2× transposed conv so that the
/// upsampled map matches the skip connection's width before the addition.
pub fn unet_layers(cfg: &ArchConfig) -> Result<Vec<Layer>> {
    cfg.validate()?;
    let (h, w, c) = cfg.input;
    let mut b = Builder { layers: Vec::new(), c, h, w };
    let f0 = cfg.filters(0)?;
    b.conv("input.conv1".into(), 1, f0);
    b.bn("input.bn".into());
    let mut skips = Vec::new();
    for i in 0..ENCODER_DEPTH {
        b.encoder_block(&format!("enc{i}"), cfg.filters(i)?);
        skips.push(b.c);
        let c = b.c;
        b.push(format!("enc{i}.pool"), LayerKind::MaxPool, c);
    }
    b.encoder_block("bottleneck", cfg.filters(ENCODER_DEPTH)?);
    for i in (0..ENCODER_DEPTH).rev() {
        let f = skips[i];
        b.push(format!("dec{i}.up"), LayerKind::UpConv, f);
        b.push(format!("dec{i}.add"), LayerKind::Add, f);
        b.conv(format!("dec{i}.conv1a"), 1, f);
        b.bn(format!("dec{i}.bn_a"));
        b.encoder_block(&format!("dec{i}"), f);
    }
    b.conv("output.conv1".into(), 1, cfg.num_outputs);
    Ok(b.layers)
}

/// Layer list of the EvalNet trunk: one 3×3 conv + BN per input stream,
/// concatenation, five encoder blocks, global average pooling and a dense
/// head. `num_outputs` is 1 for binary data and `2·classes` otherwise.
pub fn evalnet_layers(cfg: &ArchConfig) -> Result<Vec<Layer>> {
    cfg.validate()?;
    let (h, w, c) = cfg.input;
    let f0 = cfg.filters(0)?;
    let mut b = Builder { layers: Vec::new(), c, h, w };
    b.conv("image.conv3".into(), 3, f0);
    b.bn("image.bn".into());
    // the prediction stream sees a one-channel mask per output class
    b.c = cfg.num_outputs.max(1);
    b.conv("mask.conv3".into(), 3, f0);
    b.bn("mask.bn".into());
    b.c = f0;
    b.push("concat".into(), LayerKind::Concat, 2 * f0);
    for i in 0..EVALNET_ENCODER_DEPTH {
        b.encoder_block(&format!("enc{i}"), cfg.filters(i)?);
        let c = b.c;
        b.push(format!("enc{i}.pool"), LayerKind::MaxPool, c);
    }
    let c = b.c;
    b.push("gap".into(), LayerKind::GlobalAvgPool, c);
    b.push("head".into(), LayerKind::Dense, cfg.num_outputs);
    Ok(b.layers)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub params: u64,
    pub flops_fwd: u64,
}

pub fn count_params(layers: &[Layer]) -> u64 {
    layers.iter().map(Layer::params).sum()
}

pub fn estimate_flops(layers: &[Layer]) -> u64 {
    layers.iter().map(Layer::flops).sum()
}

pub fn unet_cost(cfg: &ArchConfig) -> Result<CostEstimate> {
    let layers = unet_layers(cfg)?;
    Ok(CostEstimate { params: count_params(&layers), flops_fwd: estimate_flops(&layers) })
}

/// Base filter count whose α = 1 parameter count is closest to `target`.
pub fn calibrate_base(input: (usize, usize, usize), num_outputs: usize, target: f64) -> Result<(usize, CostEstimate)> {
    let mut best: Option<(usize, CostEstimate, f64)> = None;
    for base in 1..=256 {
        let cost = unet_cost(&ArchConfig::new(1.0, base, input, num_outputs)?)?;
        let gap = (cost.params as f64 - target).abs();
        if best.map_or(true, |(_, _, g)| gap < g) {
            best = Some((base, cost, gap));
        }
        if cost.params as f64 > target * 2.0 {
            break;
        }
    }
    let (base, cost, _) = best.expect("searched at least one base");
    Ok((base, cost))
}

/// `F · S · E`, exact for exact number types.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainBudget<T> {
    pub flops_per_step: T,
    pub steps_per_epoch: u64,
    pub epochs: u64,
    pub total: T,
}

pub fn total_training_flops<T>(flops_per_step: T, steps_per_epoch: u64, epochs: u64) -> TrainBudget<T>
where
    T: Clone + Mul<Output = T> + FromPrimitive,
{
    let s = T::from_u64(steps_per_epoch).expect("u64 representable");
    let e = T::from_u64(epochs).expect("u64 representable");
    let total = flops_per_step.clone() * s * e;
    TrainBudget { flops_per_step, steps_per_epoch, epochs, total }
}

/// `⌈n / batch⌉`.
pub fn steps_per_epoch(n_images: usize, batch: usize) -> Result<u64> {
    if batch == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    Ok(n_images.div_ceil(batch) as u64)
}

/// Training floor for small Combined Datasets: a third of the steps a
/// full-dataset epoch takes, rounded up.
pub fn steps_min(fd_images: usize, batch: usize) -> Result<u64> {
    Ok(steps_per_epoch(fd_images, batch)?.div_ceil(3))
}

/// Endpoints of the width ramp for a dataset preset.
pub fn alpha_endpoints(preset: &str) -> Result<(f64, f64)> {
    match preset.to_ascii_lowercase().as_str() {
        "isic2018" | "isic" => Ok((0.5, 1.5)),
        "hela" | "suim" | "cityscapes" => Ok((1.0, 2.0)),
        other => Err(Error::Config(format!("unknown alpha preset {other:?}"))),
    }
}

/// Linear ramp from `start` (generation 1) to `end` (generation `total`).
pub fn alpha_ramp(start: f64, end: f64, generation: usize, total: usize) -> Result<f64> {
    if generation == 0 || generation > total {
        return Err(Error::InvalidArgument(format!("generation {generation} outside 1..={total}")));
    }
    if total == 1 {
        return Ok(start);
    }
    Ok(start + (end - start) * (generation - 1) as f64 / (total - 1) as f64)
}

/// α for a generation over the standard five-generation schedule; approaches
/// without the Noisy Student ramp keep the start value.
pub fn alpha_schedule(preset: &str, generation: usize, noisy: bool) -> Result<f64> {
    let (start, end) = alpha_endpoints(preset)?;
    let a = alpha_ramp(start, end, generation, 5)?;
    Ok(if noisy { a } else { start })
}

/// Human-readable layer table.
pub fn layer_table(layers: &[Layer]) -> String {
    let mut out = format!("{:<16} {:<10} {:>6} {:>6} {:>9} {:>10} {:>14}\n", "layer", "kind", "c_in", "c_out", "out_hw", "params", "flops");
    for l in layers {
        let kind = match l.kind {
            LayerKind::Conv { kernel } => format!("conv{kernel}x{kernel}"),
            k => format!("{k:?}").to_lowercase(),
        };
        let _ = writeln!(
            out,
            "{:<16} {:<10} {:>6} {:>6} {:>9} {:>10} {:>14}",
            l.name,
            kind,
            l.c_in,
            l.c_out,
            format!("{}x{}", l.h, l.w),
            l.params(),
            l.flops()
        );
    }
    let _ = writeln!(out, "total params {}  flops {}", count_params(layers), estimate_flops(layers));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_bigint::BigInt;
    use num_rational::BigRational;

    fn cfg(alpha: f64, base: usize) -> ArchConfig {
        ArchConfig::new(alpha, base, (256, 256, 3), 1).unwrap()
    }

    #[test]
    fn channel_doubling() {
        let layers = unet_layers(&cfg(1.0, 16)).unwrap();
        let enc: Vec<usize> = (0..4).map(|i| layers.iter().find(|l| l.name == format!("enc{i}.conv3")).unwrap().c_out).collect();
        assert_eq!(enc, vec![16, 32, 64, 128]);
        assert_eq!(layers.iter().find(|l| l.name == "bottleneck.conv3").unwrap().c_out, 256);
        let half = unet_layers(&cfg(0.5, 16)).unwrap();
        for (a, b) in layers.iter().zip(&half) {
            if matches!(a.kind, LayerKind::Conv { .. }) && a.name != "output.conv1" {
                assert_eq!(b.c_out, a.c_out / 2, "{}", a.name);
            }
        }
        let out = layers.last().unwrap();
        assert_eq!((out.h, out.w, out.c_out), (256, 256, 1));
    }

    #[test]
    fn zero_filters_rejected() {
        assert!(unet_layers(&cfg(0.01, 16)).is_err());
        assert!(ArchConfig::new(0.0, 16, (8, 8, 3), 1).is_err());
    }

    #[test]
    fn one_by_one_conv_params() {
        let l = Layer { name: "x".into(), kind: LayerKind::Conv { kernel: 1 }, c_in: 16, c_out: 16, h: 1, w: 1 };
        assert_eq!(l.params(), 272);
        assert_eq!(l.flops(), 2 * 256);
    }

    #[test]
    fn width_scaling_ratio() {
        for base in [8, 12, 16, 32, 64] {
            let p1 = unet_cost(&cfg(1.0, base)).unwrap().params as f64;
            let p2 = unet_cost(&cfg(2.0, base)).unwrap().params as f64;
            let r = p2 / p1;
            assert!((3.8..=4.0).contains(&r), "base {base}: {r}");
        }
    }

    #[test]
    fn calibration_hits_reference() {
        let (base, cost) = calibrate_base((256, 256, 3), 1, REFERENCE_PARAMS_ALPHA1).unwrap();
        let rel = (cost.params as f64 - REFERENCE_PARAMS_ALPHA1).abs() / REFERENCE_PARAMS_ALPHA1;
        assert!(rel <= 0.15, "base {base} params {}", cost.params);
    }

    #[test]
    fn budget_is_exact() {
        assert_eq!(steps_per_epoch(2594, 32).unwrap(), 82);
        assert!(steps_per_epoch(10, 0).is_err());
        let f = BigRational::new(BigInt::from(249), BigInt::from(10_000));
        let b = total_training_flops(f, 82, 50);
        assert_eq!(b.total, BigRational::new(BigInt::from(10_209), BigInt::from(100)));
        assert_eq!(total_training_flops(0.0249f64, 82, 0).total, 0.0);
        assert_eq!(steps_min(2594, 32).unwrap(), 28);
    }

    #[test]
    fn alpha_ramps() {
        assert_eq!(alpha_schedule("isic2018", 1, true).unwrap(), 0.5);
        assert_eq!(alpha_schedule("isic2018", 5, true).unwrap(), 1.5);
        assert_eq!(alpha_schedule("isic2018", 3, true).unwrap(), 1.0);
        assert_eq!(alpha_schedule("suim", 5, true).unwrap(), 2.0);
        for g in 1..=5 {
            assert_eq!(alpha_schedule("hela", g, false).unwrap(), 1.0);
        }
        assert!(alpha_schedule("nope", 1, true).is_err());
        assert!(alpha_schedule("suim", 6, true).is_err());
    }

    #[test]
    fn evalnet_trunk_shape() {
        let layers = evalnet_layers(&cfg(1.0, 16)).unwrap();
        let head = layers.last().unwrap();
        assert_eq!((head.c_in, head.c_out), (256, 1));
        assert!(count_params(&layers) > 0);
    }
}
