//! Input/pseudo-label pairs and Combined Dataset assembly.
//!
//! Inconsistent pixels are blacked out in the input image. Multiclass
//! labels shift every class up by one and use class 0 for the IM; binary
//! labels fold the IM into background and record it in a separate mask.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::{self, ConcreteAugmentation, GenerationSchedule};
use crate::dataset_io::{self, write_json, DatasetManifest, MaskMode, Split};
use crate::error::{Error, Result};
use crate::mask_core::{ConsensusKind, ConsensusOutput};
use crate::metrics;
use crate::raster::{check_same_dims, BinaryMask, ClassMask, Image};
use crate::seed;

pub const CD_MANIFEST_FILE: &str = "cd_manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSource {
    Fd,
    Ld,
    Ald,
    Pseudo,
    PseudoAugmented,
}

/// How labels in a Combined Dataset are encoded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelEncoding {
    /// Class IDs as in the source dataset.
    Plain,
    /// Class IDs shifted up by one, class 0 marks inconsistent pixels.
    ImShifted,
}

/// A (possibly blacked-out) input image with its training label.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoPair {
    pub id: String,
    /// Record this pair derives from.
    pub base_id: String,
    pub image: Image,
    pub label: ClassMask,
    pub im: BinaryMask,
    pub source: PairSource,
    pub tier_copies: u8,
    pub augmentation: Option<ConcreteAugmentation>,
}

impl PseudoPair {
    /// A ground-truth record carried into a Combined Dataset untouched.
    pub fn labeled(id: impl Into<String>, image: Image, label: ClassMask, source: PairSource) -> Self {
        let id = id.into();
        let (h, w) = label.dims();
        Self {
            base_id: id.clone(),
            id,
            image,
            label,
            im: BinaryMask::zeros(h, w),
            source,
            tier_copies: 1,
            augmentation: None,
        }
    }

    /// Image pixels are zero wherever the IM is set.
    pub fn blackout_holds(&self) -> bool {
        let c = self.image.channels();
        (0..self.im.len()).all(|i| !self.im.is_set(i) || self.image.data()[i * c..(i + 1) * c].iter().all(|&v| v == 0))
    }
}

/// Zeroes every channel of every pixel under `im`.
pub fn blackout(image: &Image, im: &BinaryMask) -> Result<Image> {
    check_same_dims(image.dims(), im.dims(), "image vs IM")?;
    let mut out = image.clone();
    for i in 0..im.len() {
        if im.is_set(i) {
            out.pixel_mut(i).fill(0);
        }
    }
    Ok(out)
}

/// Outcome of the binary acceptance rule.
#[derive(Clone, Debug, PartialEq)]
pub enum PairDecision {
    Accepted(PseudoPair),
    Rejected { id: String, foreground_px: usize, im_px: usize },
}

impl PairDecision {
    pub fn accepted(self) -> Option<PseudoPair> {
        match self {
            PairDecision::Accepted(p) => Some(p),
            PairDecision::Rejected { .. } => None,
        }
    }
}

/// Keeps a binary pair only when its foreground strictly outnumbers its IM.
pub fn make_pair_binary(id: &str, image: &Image, consensus: &ConsensusOutput) -> Result<PairDecision> {
    let label = consensus.final_binary()?.to_class_mask();
    let (fg, im_px) = (consensus.foreground_count(), consensus.im_count());
    if fg <= im_px {
        return Ok(PairDecision::Rejected { id: id.to_string(), foreground_px: fg, im_px });
    }
    Ok(PairDecision::Accepted(PseudoPair {
        id: id.to_string(),
        base_id: id.to_string(),
        image: blackout(image, &consensus.im)?,
        label,
        im: consensus.im.clone(),
        source: PairSource::Pseudo,
        tier_copies: 1,
        augmentation: None,
    }))
}

/// `F + 1` outside the IM, `0` on it.
pub fn remap_with_im(final_mask: &ClassMask, im: &BinaryMask, label_count: usize) -> Result<ClassMask> {
    check_same_dims(final_mask.dims(), im.dims(), "final mask vs IM")?;
    final_mask.validate(label_count)?;
    if label_count >= u8::MAX as usize {
        return Err(Error::ClassOutOfRange { id: label_count as u32, classes: u8::MAX as u32 });
    }
    let data = final_mask.data().iter().enumerate().map(|(i, &c)| if im.is_set(i) { 0 } else { c + 1 }).collect();
    ClassMask::from_vec(final_mask.height(), final_mask.width(), data)
}

/// Inverse of [`remap_with_im`]: the original classes with IM pixels as 0,
/// and the IM itself.
pub fn unmap_im(label: &ClassMask) -> (ClassMask, BinaryMask) {
    let (h, w) = label.dims();
    let im = BinaryMask::from_fn(h, w, |i| label.data()[i] == 0);
    let data = label.data().iter().map(|&v| v.saturating_sub(1)).collect();
    (ClassMask::from_vec(h, w, data).expect("same dims"), im)
}

/// Multiclass pair; never rejected.
pub fn make_pair_multiclass(id: &str, image: &Image, consensus: &ConsensusOutput, label_count: usize) -> Result<PseudoPair> {
    Ok(PseudoPair {
        id: id.to_string(),
        base_id: id.to_string(),
        image: blackout(image, &consensus.im)?,
        label: remap_with_im(&consensus.final_mask, &consensus.im, label_count)?,
        im: consensus.im.clone(),
        source: PairSource::Pseudo,
        tier_copies: 1,
        augmentation: None,
    })
}

/// Pair for a consensus output, by kind.
pub fn make_pair(id: &str, image: &Image, consensus: &ConsensusOutput, label_count: usize) -> Result<PairDecision> {
    match consensus.kind {
        ConsensusKind::Binary => make_pair_binary(id, image, consensus),
        ConsensusKind::Multiclass => Ok(PairDecision::Accepted(make_pair_multiclass(id, image, consensus, label_count)?)),
    }
}

/// Score range that is split into five equal quality tiers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TierBounds {
    pub min_score: f64,
    pub max_score: f64,
}

impl TierBounds {
    pub fn new(min_score: f64, max_score: f64) -> Result<Self> {
        let b = Self { min_score, max_score };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.min_score && self.min_score < self.max_score && self.max_score <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "tier bounds need 0 <= min < max <= 1, got [{}, {}]",
                self.min_score, self.max_score
            )));
        }
        Ok(())
    }
}

pub const TIERS: u8 = 5;

/// Augmented copies for a scored pair: one below the minimum, otherwise
/// `tier + 1` with left-inclusive tiers.
///
/// Positions within `1e-9` of a tier edge count as on the edge, so a score
/// that lands on a boundary in decimal arithmetic is not demoted by
/// floating-point rounding.
pub fn tier_copies(score: f64, bounds: &TierBounds) -> u8 {
    if score < bounds.min_score {
        return 1;
    }
    let position = (score - bounds.min_score) * TIERS as f64 / (bounds.max_score - bounds.min_score);
    let tier = (position + 1e-9).floor().clamp(0.0, (TIERS - 1) as f64) as u8;
    tier + 1
}

/// IM-based Combined Dataset compositions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CdApproach {
    #[serde(rename = "IM")]
    Im,
    #[serde(rename = "IM_PLUS")]
    ImPlus,
    #[serde(rename = "IM_PLUSPLUS")]
    ImPlusPlus,
    #[serde(rename = "AIM_PLUS")]
    AimPlus,
    #[serde(rename = "AIM_PLUSPLUS")]
    AimPlusPlus,
}

impl CdApproach {
    pub fn needs_scores(self) -> bool {
        matches!(self, CdApproach::ImPlusPlus | CdApproach::AimPlusPlus)
    }

    pub fn uses_ald(self) -> bool {
        matches!(self, CdApproach::AimPlus | CdApproach::AimPlusPlus)
    }

    fn augments(self) -> bool {
        !matches!(self, CdApproach::Im)
    }

    fn keeps_unaugmented(self) -> bool {
        matches!(self, CdApproach::Im | CdApproach::AimPlus | CdApproach::AimPlusPlus)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CdRecord {
    pub id: String,
    pub base_id: String,
    pub source: PairSource,
    pub tier_copies: u8,
    pub has_im: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augmentation: Option<ConcreteAugmentation>,
}

/// What went into a Combined Dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositionDescriptor {
    pub composition: String,
    pub generation: usize,
    pub label_encoding: LabelEncoding,
    pub counts: BTreeMap<PairSource, usize>,
    pub total: usize,
    pub records: Vec<CdRecord>,
}

impl CompositionDescriptor {
    pub fn reconciles(&self) -> bool {
        self.counts.values().sum::<usize>() == self.total && self.records.len() == self.total
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CombinedDataset {
    pub pairs: Vec<PseudoPair>,
    pub descriptor: CompositionDescriptor,
}

impl CombinedDataset {
    /// Assembles a dataset from base records followed by pseudo pairs,
    /// counting each source.
    pub fn assemble(composition: impl Into<String>, generation: usize, label_encoding: LabelEncoding, pairs: Vec<PseudoPair>) -> Self {
        let mut counts = BTreeMap::new();
        for p in &pairs {
            *counts.entry(p.source).or_insert(0) += 1;
        }
        let records = pairs
            .iter()
            .map(|p| CdRecord {
                id: p.id.clone(),
                base_id: p.base_id.clone(),
                source: p.source,
                tier_copies: p.tier_copies,
                has_im: !p.im.is_empty(),
                augmentation: p.augmentation,
            })
            .collect();
        Self {
            descriptor: CompositionDescriptor {
                composition: composition.into(),
                generation,
                label_encoding,
                counts,
                total: pairs.len(),
                records,
            },
            pairs,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn count(&self, source: PairSource) -> usize {
        self.descriptor.counts.get(&source).copied().unwrap_or(0)
    }
}

/// Augments a pair: photometric changes on the image, geometric changes on
/// image, label and IM alike, then the blackout is re-applied so augmented
/// brightness or noise cannot leak into IM pixels.
pub fn augment_pair(pair: &PseudoPair, aug: &ConcreteAugmentation, id: String) -> Result<PseudoPair> {
    let (image, label) = augment::apply(&pair.image, Some(&pair.label), aug)?;
    let im = augment::apply_geometric(&pair.im, aug);
    Ok(PseudoPair {
        id,
        base_id: pair.base_id.clone(),
        image: blackout(&image, &im)?,
        label: label.expect("label given"),
        im,
        source: PairSource::PseudoAugmented,
        tier_copies: pair.tier_copies,
        augmentation: Some(*aug),
    })
}

/// Augmented copy `copy` (1-based) of `pair` for `generation`.
pub fn augmented_copy(pair: &PseudoPair, spec: &augment::AugmentationSpec, generation: usize, copy: u8, run_seed: u64) -> Result<PseudoPair> {
    let id = format!("{}_g{generation}a{copy}", pair.id);
    let aug = augment::sample(spec, seed::derive_seed(run_seed, &format!("cd/{id}")));
    augment_pair(pair, &aug, id)
}

pub struct CdInputs<'a> {
    pub approach: CdApproach,
    /// LD records (ALD for the augmented variants), already label-encoded.
    pub base: &'a [PseudoPair],
    /// Accepted pseudo pairs.
    pub pairs: &'a [PseudoPair],
    /// Quality score per pair ID (required by the `++` variants).
    pub scores: Option<&'a BTreeMap<String, f64>>,
    pub bounds: Option<TierBounds>,
    pub schedule: &'a GenerationSchedule,
    pub generation: usize,
    pub label_encoding: LabelEncoding,
    pub seed: u64,
}

/// Builds the Combined Dataset of one generation.
///
/// * IM: base + pairs as they are.
/// * IM+: base + one augmented copy of each pair.
/// * IM++: base + `tier_copies(score)` augmented copies of each pair.
/// * AIM+: ALD + one augmented copy + the unaugmented pair.
/// * AIM++: ALD + `tier_copies(score)` augmented copies + the unaugmented pair.
pub fn build_cd(inputs: CdInputs<'_>) -> Result<CombinedDataset> {
    let approach = inputs.approach;
    let expected_base = if approach.uses_ald() { PairSource::Ald } else { PairSource::Ld };
    if let Some(b) = inputs.base.iter().find(|b| b.source != expected_base) {
        return Err(Error::InvalidArgument(format!("{approach:?} expects {expected_base:?} base records, {} is {:?}", b.id, b.source)));
    }
    let spec = if approach.augments() { Some(*inputs.schedule.for_generation(inputs.generation)?) } else { None };
    let bounds = match (approach.needs_scores(), inputs.scores, inputs.bounds) {
        (false, _, _) => None,
        (true, Some(_), Some(b)) => {
            b.validate()?;
            Some(b)
        }
        (true, _, _) => return Err(Error::Config(format!("{approach:?} needs quality scores and tier bounds"))),
    };

    let mut sorted: Vec<&PseudoPair> = inputs.pairs.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));

    let mut out: Vec<PseudoPair> = inputs.base.to_vec();
    for pair in sorted {
        let copies = match bounds {
            Some(b) => {
                let score = inputs
                    .scores
                    .and_then(|s| s.get(&pair.id))
                    .ok_or_else(|| Error::Config(format!("missing quality score for {}", pair.id)))?;
                tier_copies(*score, &b)
            }
            None => 1,
        };
        let mut pair = pair.clone();
        pair.tier_copies = copies;
        pair.source = PairSource::Pseudo;
        if approach.keeps_unaugmented() {
            out.push(pair.clone());
        }
        if let Some(spec) = &spec {
            for copy in 1..=copies {
                out.push(augmented_copy(&pair, spec, inputs.generation, copy, inputs.seed)?);
            }
        }
    }
    let name = serde_json::to_value(approach)?.as_str().unwrap_or_default().to_string();
    Ok(CombinedDataset::assemble(name, inputs.generation, inputs.label_encoding, out))
}

fn im_path(root: &Path, id: &str) -> std::path::PathBuf {
    root.join("im").join(format!("{id}.png"))
}

/// Writes a Combined Dataset in the standard dataset layout plus
/// `im/<id>.png` for pairs with an IM and `cd_manifest.json`.
///
/// `num_classes` is the source dataset's class count; shifted encodings
/// declare one extra class.
pub fn write_cd(root: &Path, cd: &CombinedDataset, num_classes: usize) -> Result<()> {
    let first = cd.pairs.first().ok_or(Error::Empty("combined dataset has no records"))?;
    let declared = match cd.descriptor.label_encoding {
        LabelEncoding::Plain => num_classes,
        LabelEncoding::ImShifted => num_classes + 1,
    };
    let mut manifest = DatasetManifest::new(
        format!("cd-{}-g{}", cd.descriptor.composition, cd.descriptor.generation),
        (first.image.height(), first.image.width(), first.image.channels()),
        MaskMode::Multiclass,
        declared,
    );
    manifest.set_split(Split::FD, cd.pairs.iter().map(|p| p.id.clone()).collect());
    for p in &cd.pairs {
        p.label.validate(manifest.label_count())?;
        dataset_io::write_image(&dataset_io::image_path(root, &p.id), &p.image)?;
        dataset_io::write_class_mask(&dataset_io::mask_path(root, &p.id), &p.label)?;
        if !p.im.is_empty() {
            dataset_io::write_binary_mask(&im_path(root, &p.id), &p.im)?;
        }
    }
    manifest.save(root)?;
    write_json(&root.join(CD_MANIFEST_FILE), &cd.descriptor)
}

/// Reads a Combined Dataset written by [`write_cd`].
pub fn read_cd(root: &Path) -> Result<CombinedDataset> {
    let descriptor: CompositionDescriptor = dataset_io::read_json(&root.join(CD_MANIFEST_FILE))?;
    let manifest = DatasetManifest::load(root)?;
    let pairs = descriptor
        .records
        .iter()
        .map(|r| {
            let image = dataset_io::read_image(&dataset_io::image_path(root, &r.id))?;
            let label = dataset_io::read_class_mask(&dataset_io::mask_path(root, &r.id), manifest.label_count())?;
            let im = if r.has_im {
                dataset_io::read_binary_mask(&im_path(root, &r.id))?
            } else {
                BinaryMask::zeros(label.height(), label.width())
            };
            Ok(PseudoPair {
                id: r.id.clone(),
                base_id: r.base_id.clone(),
                image,
                label,
                im,
                source: r.source,
                tier_copies: r.tier_copies,
                augmentation: r.augmentation,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CombinedDataset { pairs, descriptor })
}

/// Training record for a learned quality scorer.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalNetRecord {
    pub image_id: String,
    /// Producing model, or `"gt"` for ground-truth exemplars.
    pub source: String,
    pub prediction: ClassMask,
    /// `[iou]` for binary data; `[iou_0, present_0, iou_1, present_1, ...]`
    /// for multiclass data, with presence taken from the ground truth.
    pub target: Vec<f64>,
}

/// Scorer training records: one per `(model, image)` prediction plus one
/// ground-truth exemplar per image.
pub fn build_evalnet_records(
    predictions: &[(String, String, ClassMask)],
    gts: &BTreeMap<String, ClassMask>,
    label_count: usize,
    binary: bool,
) -> Result<Vec<EvalNetRecord>> {
    let target = |pred: &ClassMask, gt: &ClassMask| -> Result<Vec<f64>> {
        if binary {
            Ok(vec![metrics::iou::<f64>(&pred.to_binary()?, &gt.to_binary()?)?])
        } else {
            let t = metrics::ClassTally::new(pred, gt, label_count)?;
            Ok((0..label_count).flat_map(|c| [t.class_iou::<f64>(c), (t.gt_pixels[c] > 0) as u8 as f64]).collect())
        }
    };
    let mut out = Vec::with_capacity(predictions.len() + gts.len());
    for (model, image_id, pred) in predictions {
        let gt = gts.get(image_id).ok_or_else(|| Error::MissingFile(format!("ground truth for {image_id}").into()))?;
        check_same_dims(pred.dims(), gt.dims(), "prediction vs ground truth")?;
        out.push(EvalNetRecord { image_id: image_id.clone(), source: model.clone(), prediction: pred.clone(), target: target(pred, gt)? });
    }
    for (image_id, gt) in gts {
        out.push(EvalNetRecord { image_id: image_id.clone(), source: "gt".into(), prediction: gt.clone(), target: target(gt, gt)? });
    }
    Ok(out)
}
