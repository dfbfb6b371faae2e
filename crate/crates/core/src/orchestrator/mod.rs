//! Generation loop: teachers predict the unlabeled pool, their predictions
//! become pseudo-labels, students train on the resulting Combined Dataset
//! and the best students teach the next generation.
//!
//! Every `(generation, phase)` step is checkpointed in `state.json` with a
//! digest of its artifacts, so an interrupted run resumes at the first step
//! whose artifacts are missing or changed.

pub mod config;
pub mod state;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{AlphaSource, Approach, BaseSet, RunConfig, ScheduleSource, ScorerConfig, Voting, RUN_CONFIG_FILE};
pub use state::{digest_bytes, digest_path, plan, CompletedStep, Phase, RunState, Step, STATE_FILE};

use crate::analysis::{im_statistics, ImSample, ImSummary, RunSeries};
use crate::archspec;
use crate::augment::{self, AugmentationSpec, ConcreteAugmentation, GenerationSchedule, LabeledRecord};
use crate::backend::{self, read_prediction, Backend, BackendContext, TrainRequest, VARIANT_SEP};
use crate::dataset_io::{self, read_json, write_json, Dataset, LabelMask, MaskMode, Split};
use crate::error::{Error, Result};
use crate::mask_core::{self, ConsensusKind, ConsensusOutput};
use crate::metrics::{ImageMetrics, MetricKey, MetricReport};
use crate::morphology::refine_im;
use crate::pseudo_label::{
    self, augmented_copy, build_cd, make_pair, remap_with_im, unmap_im, CdInputs, CombinedDataset, LabelEncoding,
    PairDecision, PairSource, PseudoPair, CD_MANIFEST_FILE,
};
use crate::quality::{best_above, score_pairs};
use crate::raster::{ClassMask, Image, ProbMap};
use crate::seed::derive_seed;
use crate::synth::retained_error;

pub const REPORT_FILE: &str = "report.json";
pub const QUALITY_FILE: &str = "quality.json";
pub const SCORES_FILE: &str = "scores.json";
pub const METRICS_FILE: &str = "metrics.json";

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub resume: bool,
    /// Stop once this step has completed (or been skipped as up to date).
    pub stop_after: Option<Step>,
    /// Worker threads; all cores when `None`.
    pub jobs: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub executed: Vec<Step>,
    pub skipped: Vec<Step>,
    pub finished: bool,
    pub report: Option<RunReport>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelRole {
    Teacher,
    Student,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentResult {
    pub index: usize,
    /// Model path relative to the run directory.
    pub model: String,
    pub role: ModelRole,
    pub val: f64,
    pub test: Option<f64>,
}

/// Pseudo-label bookkeeping of one Combined Dataset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CdQuality {
    pub candidates: usize,
    pub accepted: usize,
    pub rejected: usize,
    /// Labeled (non-IM) pixels of the accepted pseudo-labels.
    pub retained_px: usize,
    /// Retained pixels that disagree with the ground truth.
    pub wrong_px: usize,
    /// `wrong_px / retained_px`; `None` without ground truth for the pool.
    pub label_error: Option<f64>,
    pub im: Option<ImSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub generation: usize,
    pub approach: Approach,
    pub metric: MetricKey,
    pub alpha: f64,
    pub augmentation: Option<AugmentationSpec>,
    pub teachers: Vec<String>,
    pub cd_total: usize,
    pub cd_counts: BTreeMap<PairSource, usize>,
    pub label_encoding: LabelEncoding,
    pub quality: Option<CdQuality>,
    pub students: Vec<StudentResult>,
    /// Student indices, best first.
    pub promoted: Vec<usize>,
    pub best_val: f64,
    pub best_test: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationSummary {
    pub generation: usize,
    pub alpha: f64,
    pub cd_total: usize,
    pub best_val: f64,
    pub best_test: Option<f64>,
    pub label_error: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub approach: Approach,
    pub metric: MetricKey,
    pub generations: Vec<GenerationSummary>,
}

impl RunReport {
    pub fn load(run_dir: &Path) -> Result<Self> {
        read_json(&run_dir.join(REPORT_FILE))
    }

    /// TEST score of the best-validated student per generation (VAL when
    /// TEST was not evaluated).
    pub fn series(&self) -> RunSeries {
        RunSeries {
            approach: self.approach.to_string(),
            metric: self.metric.as_str().to_string(),
            values: self.generations.iter().map(|g| (g.generation, g.best_test.unwrap_or(g.best_val))).collect(),
        }
    }
}

/// Indices of the `k` highest scores, best first; ties go to the lower index.
pub fn select_top_k(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::InvalidArgument(format!("cannot select top {k} of {} models", scores.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("NaN validation score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

/// Ensemble vote over teacher probability maps of one image.
///
/// Hard voting keeps a label only where every member's hard label agrees
/// (background elsewhere); soft voting takes the argmax of the mean, or
/// thresholds the mean for single-channel maps.
pub fn vote(probs: &[ProbMap<f32>], voting: Voting, threshold: f32) -> Result<ClassMask> {
    let binary = probs.first().map(|p| p.channels() == 1).unwrap_or(false);
    match voting {
        Voting::Soft if binary => Ok(mask_core::binarize(&mask_core::mean_prob(probs)?, threshold)?.to_class_mask()),
        Voting::Soft => mask_core::soft_vote(probs),
        _ => {
            let labels = probs.iter().map(|p| mask_core::hard_labels(p, threshold)).collect::<Result<Vec<_>>>()?;
            let kind = if binary { ConsensusKind::Binary } else { ConsensusKind::Multiclass };
            Ok(mask_core::consensus(&labels, kind)?.final_mask)
        }
    }
}

/// Drops the IM channel of a prediction made by a model trained on
/// IM-shifted labels and renormalizes the class channels.
pub fn strip_im_channel(prob: &ProbMap<f32>) -> Result<ProbMap<f32>> {
    let c = prob.channels();
    if c < 3 {
        return Err(Error::ChannelMismatch { expected: 3, found: c });
    }
    let (h, w) = prob.dims();
    let mut data = Vec::with_capacity(h * w * (c - 1));
    for i in 0..prob.pixel_count() {
        let px = &prob.pixel(i)[1..];
        let sum: f32 = px.iter().sum();
        if sum > 0.0 {
            data.extend(px.iter().map(|v| (v / sum).min(1.0)));
        } else {
            data.extend(std::iter::repeat(1.0 / (c - 1) as f32).take(c - 1));
        }
    }
    ProbMap::from_vec(h, w, c - 1, data)
}

/// Stem of an Input Ensemble view: `<id>~<view>~<geometric code>`.
pub fn ie_stem(id: &str, view: usize, aug: &ConcreteAugmentation) -> String {
    format!("{id}{VARIANT_SEP}{view}{VARIANT_SEP}{}", aug.geometric_code())
}

/// Augmentation of view `view` of `id`; view 0 is the unaugmented input.
pub fn ie_augmentation(spec: &AugmentationSpec, id: &str, view: usize, seed: u64) -> ConcreteAugmentation {
    if view == 0 {
        ConcreteAugmentation::IDENTITY
    } else {
        augment::sample(spec, derive_seed(seed, &format!("ie/{id}/{view}")))
    }
}

/// The `views` augmented copies of one image with their stems.
pub fn ie_views(image: &Image, id: &str, spec: &AugmentationSpec, views: usize, seed: u64) -> Result<Vec<(String, Image, ConcreteAugmentation)>> {
    (0..views)
        .map(|v| {
            let aug = ie_augmentation(spec, id, v, seed);
            let (img, _) = augment::apply::<ClassMask>(image, None, &aug)?;
            Ok((ie_stem(id, v, &aug), img, aug))
        })
        .collect()
}

/// Maps each view's prediction back to the input frame and votes.
pub fn ie_consensus(views: &[(ProbMap<f32>, ConcreteAugmentation)], voting: Voting, threshold: f32) -> Result<ClassMask> {
    let probs: Vec<ProbMap<f32>> = views.iter().map(|(p, aug)| augment::map_back(p, aug)).collect();
    vote(&probs, voting, threshold)
}

/// Input Ensemble for one image: `views` augmented copies are predicted by
/// a single model, mapped back, hard-labeled and combined like a model
/// ensemble. `scratch` receives the view images and predictions.
#[allow(clippy::too_many_arguments)]
pub fn input_ensemble_predict(
    backend: &dyn Backend,
    model: &Path,
    image: &Image,
    id: &str,
    views: usize,
    spec: &AugmentationSpec,
    seed: u64,
    threshold: f32,
    scratch: &Path,
) -> Result<ConsensusOutput> {
    if views < 2 {
        return Err(Error::InvalidArgument(format!("input ensemble needs at least 2 views, got {views}")));
    }
    let (inputs, outputs) = (scratch.join("views"), scratch.join("pred"));
    ensure_dir(&inputs)?;
    let made = ie_views(image, id, spec, views, seed)?;
    for (stem, img, _) in &made {
        dataset_io::write_image(&png(&inputs, stem), img)?;
    }
    backend.predict(model, &inputs, &outputs)?;
    let mut labels = Vec::with_capacity(views);
    let mut channels = None;
    for (stem, img, aug) in &made {
        let path = backend::tensor_path(&outputs, stem);
        let c = *channels.get_or_insert(crate::dataset_io::tensor::read_prob_map(&path).map_err(|e| Error::Backend(format!("{}: {e}", path.display())))?.channels());
        let p = read_prediction(&outputs, stem, img.dims(), c)?;
        labels.push(mask_core::hard_labels(&augment::map_back(&p, aug), threshold)?);
    }
    let kind = if channels == Some(1) { ConsensusKind::Binary } else { ConsensusKind::Multiclass };
    mask_core::consensus(&labels, kind)
}

fn remove_path(path: &Path) -> Result<()> {
    let res = if path.is_dir() {
        fs::remove_dir_all(path)
    } else if path.exists() {
        fs::remove_file(path)
    } else {
        return Ok(());
    };
    res.map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn png(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.png"))
}

/// Hard link, or copy where linking is not possible.
fn link_or_copy(src: &Path, dst: &Path) -> Result<()> {
    if dst.exists() {
        return Ok(());
    }
    if fs::hard_link(src, dst).is_err() {
        fs::copy(src, dst).map_err(|e| Error::io(src, e))?;
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct EvalMetrics {
    val: MetricReport,
    test: Option<MetricReport>,
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    run_dir: PathBuf,
    dataset: Dataset,
    schedule: GenerationSchedule,
    binary: bool,
    label_count: usize,
    metric: MetricKey,
    voting: Voting,
    student: Arc<dyn Backend>,
    teacher: Option<Arc<dyn Backend>>,
    scorer: Option<Arc<dyn Backend>>,
}

impl<'a> Ctx<'a> {
    fn new(cfg: &'a RunConfig, run_dir: PathBuf) -> Result<Self> {
        let dataset = Dataset::open(&cfg.dataset)?;
        if dataset.manifest.mask_mode == MaskMode::Multilabel {
            return Err(Error::Config("the generation loop needs a multiclass dataset".into()));
        }
        let binary = dataset.manifest.is_binary();
        let bctx = BackendContext { dataset_root: cfg.dataset.clone() };
        let scorer = match (&cfg.scorer, cfg.approach.needs_scorer()) {
            (Some(s), true) => Some(backend::resolve(&s.backend, &bctx)?),
            _ => None,
        };
        let teacher = match (&cfg.teacher, cfg.approach.is_baseline_only()) {
            (Some(t), false) => Some(backend::resolve(t, &bctx)?),
            _ => None,
        };
        Ok(Self {
            cfg,
            run_dir,
            label_count: dataset.manifest.label_count(),
            schedule: cfg.schedule()?,
            binary,
            metric: cfg.selection_metric.unwrap_or(MetricKey::headline(binary)),
            voting: cfg.voting.resolve(binary),
            student: backend::resolve(&cfg.student, &bctx)?,
            teacher,
            scorer,
            dataset,
        })
    }

    fn gen_dir(&self, g: usize) -> PathBuf {
        self.run_dir.join(format!("gen{g}"))
    }

    fn output_path(&self, step: Step) -> PathBuf {
        self.gen_dir(step.generation).join(step.phase.output())
    }

    fn inputs(&self, split: Split) -> PathBuf {
        self.run_dir.join("inputs").join(split.as_str())
    }

    fn ids(&self, split: Split) -> &[String] {
        self.dataset.manifest.split(split)
    }

    fn dims(&self) -> (usize, usize) {
        let (h, w, _) = self.dataset.manifest.image_shape;
        (h, w)
    }

    fn threshold(&self) -> f32 {
        self.cfg.threshold as f32
    }

    fn backend(&self, role: ModelRole) -> &Arc<dyn Backend> {
        match (role, &self.teacher) {
            (ModelRole::Teacher, Some(t)) => t,
            _ => &self.student,
        }
    }

    fn link_inputs(&self) -> Result<()> {
        for split in [Split::ULD, Split::VAL, Split::TEST] {
            let dir = self.inputs(split);
            ensure_dir(&dir)?;
            self.ids(split)
                .par_iter()
                .try_for_each(|id| link_or_copy(&dataset_io::image_path(&self.dataset.root, id), &png(&dir, id)))?;
        }
        Ok(())
    }

    fn encoding_for(&self, generation: usize) -> LabelEncoding {
        if generation > 0 && self.cfg.approach.uses_im() && !self.binary {
            LabelEncoding::ImShifted
        } else {
            LabelEncoding::Plain
        }
    }

    fn channels(&self, encoding: LabelEncoding) -> usize {
        self.dataset.manifest.prediction_channels() + (encoding == LabelEncoding::ImShifted) as usize
    }

    /// Reads a prediction and brings it to plain class channels.
    fn load_prediction(&self, dir: &Path, stem: &str, dims: (usize, usize), encoding: LabelEncoding) -> Result<ProbMap<f32>> {
        let p = read_prediction(dir, stem, dims, self.channels(encoding))?;
        match encoding {
            LabelEncoding::Plain => Ok(p),
            LabelEncoding::ImShifted => strip_im_channel(&p),
        }
    }

    fn report(&self, g: usize) -> Result<GenerationReport> {
        read_json(&self.gen_dir(g).join(REPORT_FILE))
    }

    fn teachers(&self, g: usize) -> Result<(Vec<(PathBuf, ModelRole)>, LabelEncoding)> {
        let prev = self.report(g - 1)?;
        let n = self.cfg.approach.teacher_count(self.cfg.n_teachers, self.cfg.k_top);
        if prev.promoted.len() < n {
            return Err(Error::Config(format!("generation {} promoted {} models, {n} needed", g - 1, prev.promoted.len())));
        }
        let models = prev.promoted[..n]
            .iter()
            .map(|&i| {
                let s = &prev.students[i];
                (self.run_dir.join(&s.model), s.role)
            })
            .collect();
        Ok((models, prev.label_encoding))
    }

    fn ie_spec(&self) -> Result<&AugmentationSpec> {
        self.schedule.for_generation(self.cfg.ie_row)
    }

    fn execute(&self, step: Step) -> Result<()> {
        let out = self.output_path(step);
        remove_path(&out)?;
        let g = step.generation;
        log::info!("{} {step}", self.cfg.name);
        match step.phase {
            Phase::Predict => self.predict(g),
            Phase::Consensus => self.consensus(g),
            Phase::Cd => {
                remove_path(&self.gen_dir(g).join("cd_work"))?;
                if g == 0 {
                    self.cd_baseline()
                } else {
                    self.cd(g)
                }
            }
            Phase::Train => self.train(g),
            Phase::Evaluate => self.evaluate(g),
            Phase::Promote => self.promote(g),
        }
    }

    fn predict(&self, g: usize) -> Result<()> {
        let (teachers, encoding) = self.teachers(g)?;
        let out = self.output_path(Step { generation: g, phase: Phase::Predict });
        let uld = self.ids(Split::ULD);
        if uld.is_empty() {
            return Err(Error::Empty("the ULD split is empty"));
        }
        if self.cfg.approach == Approach::Ie {
            let views_dir = out.join("views");
            ensure_dir(&views_dir)?;
            let spec = self.ie_spec()?;
            let stems: Vec<(String, (usize, usize))> = uld
                .par_iter()
                .map(|id| {
                    let image = self.dataset.image(id)?;
                    ie_views(&image, id, spec, self.cfg.ie_variants, self.cfg.seed)?
                        .into_iter()
                        .map(|(stem, img, _)| {
                            dataset_io::write_image(&png(&views_dir, &stem), &img)?;
                            Ok((stem, img.dims()))
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .flatten()
                .collect();
            let (model, role) = &teachers[0];
            let dir = out.join("t0");
            self.backend(*role).predict(model, &views_dir, &dir)?;
            return stems.par_iter().try_for_each(|(stem, dims)| self.load_prediction(&dir, stem, *dims, encoding).map(drop));
        }
        teachers.par_iter().enumerate().try_for_each(|(j, (model, role))| {
            let dir = out.join(format!("t{j}"));
            self.backend(*role).predict(model, &self.inputs(Split::ULD), &dir)?;
            uld.iter().try_for_each(|id| self.load_prediction(&dir, id, self.dims(), encoding).map(drop))
        })
    }

    fn consensus(&self, g: usize) -> Result<()> {
        let (teachers, encoding) = self.teachers(g)?;
        let pred = self.output_path(Step { generation: g, phase: Phase::Predict });
        let out = self.output_path(Step { generation: g, phase: Phase::Consensus });
        let (final_dir, im_dir) = (out.join("final"), out.join("im"));
        let approach = self.cfg.approach;
        let dims = self.dims();
        let t = self.threshold();
        ensure_dir(&final_dir)?;
        if approach.uses_im() {
            ensure_dir(&im_dir)?;
        }
        let kind = if self.binary { ConsensusKind::Binary } else { ConsensusKind::Multiclass };
        self.ids(Split::ULD).par_iter().try_for_each(|id| -> Result<()> {
            let teacher_probs = || -> Result<Vec<ProbMap<f32>>> {
                (0..teachers.len()).map(|j| self.load_prediction(&pred.join(format!("t{j}")), id, dims, encoding)).collect()
            };
            match approach {
                Approach::EvalNet => {
                    for (j, p) in teacher_probs()?.iter().enumerate() {
                        let dir = out.join(format!("t{j}"));
                        dataset_io::write_class_mask(&png(&dir, id), &mask_core::hard_labels(p, t)?)?;
                    }
                }
                Approach::Ns => {
                    let p = &teacher_probs()?[0];
                    dataset_io::write_class_mask(&png(&final_dir, id), &mask_core::hard_labels(p, t)?)?;
                }
                Approach::Me => {
                    dataset_io::write_class_mask(&png(&final_dir, id), &vote(&teacher_probs()?, self.voting, t)?)?;
                }
                Approach::Ie => {
                    let spec = self.ie_spec()?;
                    let views = (0..self.cfg.ie_variants)
                        .map(|v| {
                            let aug = ie_augmentation(spec, id, v, self.cfg.seed);
                            let d = if aug.rot90_quarter_turns % 2 == 1 { (dims.1, dims.0) } else { dims };
                            Ok((self.load_prediction(&pred.join("t0"), &ie_stem(id, v, &aug), d, encoding)?, aug))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    dataset_io::write_class_mask(&png(&final_dir, id), &ie_consensus(&views, self.voting, t)?)?;
                }
                _ => {
                    let labels = teacher_probs()?.iter().map(|p| mask_core::hard_labels(p, t)).collect::<Result<Vec<_>>>()?;
                    let c = refine_im(&mask_core::consensus(&labels, kind)?, self.cfg.refine)?;
                    dataset_io::write_class_mask(&png(&final_dir, id), &c.final_mask)?;
                    dataset_io::write_binary_mask(&png(&im_dir, id), &c.im)?;
                }
            }
            Ok(())
        })
    }

    /// Generation-0 records (FD, LD or ALD) under `encoding`.
    fn base_pairs(&self, encoding: LabelEncoding) -> Result<Vec<PseudoPair>> {
        let m = &self.dataset.manifest;
        let load = |ids: &[String], source: PairSource| -> Result<Vec<PseudoPair>> {
            ids.par_iter()
                .map(|id| Ok(PseudoPair::labeled(id.clone(), self.dataset.image(id)?, self.dataset.class_mask(id)?, source)))
                .collect()
        };
        let mut pairs = match self.cfg.approach.base_set() {
            BaseSet::Fd => load(m.split(Split::FD), PairSource::Fd)?,
            BaseSet::Ld => load(m.split(Split::LD), PairSource::Ld)?,
            BaseSet::Ald if !m.split(Split::ALD).is_empty() => load(m.split(Split::ALD), PairSource::Ald)?,
            BaseSet::Ald => {
                let records = m
                    .split(Split::LD)
                    .par_iter()
                    .map(|id| Ok(LabeledRecord { id: id.clone(), image: self.dataset.image(id)?, mask: self.dataset.mask(id)? }))
                    .collect::<Result<Vec<_>>>()?;
                augment::build_ald(&records, self.schedule.max_row(), derive_seed(self.cfg.seed, "ald"))?
                    .into_iter()
                    .map(|r| match r.mask {
                        LabelMask::Class(mask) => Ok(PseudoPair::labeled(r.id, r.image, mask, PairSource::Ald)),
                        LabelMask::MultiLabel(_) => Err(Error::Config("multilabel masks are not supported here".into())),
                    })
                    .collect::<Result<Vec<_>>>()?
            }
        };
        if pairs.is_empty() {
            return Err(Error::Empty("no labeled records for the base set"));
        }
        if encoding == LabelEncoding::ImShifted {
            for p in &mut pairs {
                p.label = remap_with_im(&p.label, &p.im, self.label_count)?;
            }
        }
        Ok(pairs)
    }

    fn cd_baseline(&self) -> Result<()> {
        let base = self.base_pairs(LabelEncoding::Plain)?;
        let name = match self.cfg.approach.base_set() {
            BaseSet::Fd => "FD",
            BaseSet::Ld => "LD",
            BaseSet::Ald => "ALD",
        };
        let cd = CombinedDataset::assemble(name, 0, LabelEncoding::Plain, base);
        pseudo_label::write_cd(&self.gen_dir(0).join("cd"), &cd, self.dataset.manifest.num_classes)
    }

    fn scorer_models(&self) -> Result<Vec<PathBuf>> {
        let s = self.cfg.scorer.as_ref().ok_or_else(|| Error::Config("no scorer configured".into()))?;
        if !s.models.is_empty() {
            return Ok(s.models.clone());
        }
        let scorer = self.scorer.as_ref().ok_or_else(|| Error::Config("no scorer configured".into()))?;
        let dir = self.run_dir.join("scorers");
        ensure_dir(&dir)?;
        (0..s.count)
            .map(|i| {
                let model = dir.join(format!("k{i}.model"));
                if !model.exists() {
                    scorer.train(&TrainRequest {
                        cd_dir: &self.gen_dir(0).join("cd"),
                        model_out: &model,
                        alpha: 1.0,
                        epochs: self.cfg.epochs,
                        batch: self.cfg.batch,
                        steps_min: 0,
                        seed: derive_seed(self.cfg.seed, &format!("scorer{i}")),
                    })?;
                }
                Ok(model)
            })
            .collect()
    }

    /// Scores pseudo pairs; the pair directory uses the Combined Dataset layout.
    fn score(&self, pairs: &[PseudoPair], encoding: LabelEncoding, work: &Path, g: usize) -> Result<BTreeMap<String, f64>> {
        if pairs.is_empty() {
            return Ok(BTreeMap::new());
        }
        let scorer = self.scorer.as_ref().ok_or_else(|| Error::Config("no scorer configured".into()))?;
        let pair_dir = work.join("pairs");
        let cd = CombinedDataset::assemble("pairs", g, encoding, pairs.to_vec());
        pseudo_label::write_cd(&pair_dir, &cd, self.dataset.manifest.num_classes)?;
        let ids: Vec<String> = pairs.iter().map(|p| p.id.clone()).collect();
        score_pairs(scorer.as_ref(), &self.scorer_models()?, &pair_dir, &ids, &work.join("scores"))
    }

    fn cd(&self, g: usize) -> Result<()> {
        let approach = self.cfg.approach;
        let encoding = self.encoding_for(g);
        let cons = self.output_path(Step { generation: g, phase: Phase::Consensus });
        let out = self.output_path(Step { generation: g, phase: Phase::Cd });
        let work = self.gen_dir(g).join("cd_work");
        let uld = self.ids(Split::ULD);
        let kind = if self.binary { ConsensusKind::Binary } else { ConsensusKind::Multiclass };
        let mut scores_json = serde_json::Value::Null;

        let (accepted, samples): (Vec<PseudoPair>, Vec<ImSample>) = if approach == Approach::EvalNet {
            let n = approach.teacher_count(self.cfg.n_teachers, self.cfg.k_top);
            let per_teacher = (0..n)
                .map(|j| {
                    let dir = cons.join(format!("t{j}"));
                    let pairs = uld
                        .par_iter()
                        .map(|id| {
                            let label = dataset_io::read_class_mask(&png(&dir, id), self.label_count)?;
                            Ok(PseudoPair::labeled(id.clone(), self.dataset.image(id)?, label, PairSource::Pseudo))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let scores = self.score(&pairs, LabelEncoding::Plain, &work.join(format!("t{j}")), g)?;
                    Ok((pairs, scores))
                })
                .collect::<Result<Vec<_>>>()?;
            let threshold = self.cfg.evalnet_threshold.unwrap_or(0.0);
            let mut table = BTreeMap::new();
            let mut accepted = Vec::new();
            for (i, id) in uld.iter().enumerate() {
                let s: Vec<f64> = per_teacher.iter().map(|(_, sc)| sc[id]).collect();
                if let Some(best) = best_above(&s, threshold) {
                    accepted.push(per_teacher[best].0[i].clone());
                }
                table.insert(id.clone(), s);
            }
            scores_json = serde_json::to_value(&table)?;
            (accepted, Vec::new())
        } else {
            let decisions = uld
                .par_iter()
                .map(|id| {
                    let image = self.dataset.image(id)?;
                    let final_mask = dataset_io::read_class_mask(&png(&cons.join("final"), id), self.label_count)?;
                    if !approach.uses_im() {
                        return Ok((Some(PseudoPair::labeled(id.clone(), image, final_mask, PairSource::Pseudo)), None));
                    }
                    let im = dataset_io::read_binary_mask(&png(&cons.join("im"), id))?;
                    let n_models = approach.teacher_count(self.cfg.n_teachers, self.cfg.k_top);
                    let c = ConsensusOutput { kind, final_mask, im, vote_sum: None, n_models };
                    let sample = ImSample { im_px: c.im_count(), total_px: c.im.len(), accepted: false };
                    Ok(match make_pair(id, &image, &c, self.label_count)? {
                        PairDecision::Accepted(p) => (Some(p), Some(ImSample { accepted: true, ..sample })),
                        PairDecision::Rejected { .. } => (None, Some(sample)),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let samples = decisions.iter().filter_map(|(_, s)| *s).collect();
            (decisions.into_iter().filter_map(|(p, _)| p).collect(), samples)
        };

        let mut quality = CdQuality {
            candidates: uld.len(),
            accepted: accepted.len(),
            rejected: uld.len() - accepted.len(),
            im: (!samples.is_empty()).then(|| im_statistics(&samples)).transpose()?,
            ..Default::default()
        };
        let mut have_gt = !accepted.is_empty();
        for p in &accepted {
            if !self.dataset.has_mask(&p.base_id) {
                have_gt = false;
                break;
            }
            let gt = self.dataset.class_mask(&p.base_id)?;
            let plain = match encoding {
                LabelEncoding::Plain => p.label.clone(),
                LabelEncoding::ImShifted => unmap_im(&p.label).0,
            };
            let (wrong, retained) = retained_error(&plain, &gt, &p.im);
            quality.wrong_px += wrong;
            quality.retained_px += retained;
        }
        if have_gt && quality.retained_px > 0 {
            quality.label_error = Some(quality.wrong_px as f64 / quality.retained_px as f64);
        }

        let base = self.base_pairs(encoding)?;
        let cd_seed = derive_seed(self.cfg.seed, &format!("cd/gen{g}"));
        let cd = match approach.cd_approach() {
            Some(cd_approach) => {
                let scores = if cd_approach.needs_scores() {
                    let s = self.score(&accepted, encoding, &work, g)?;
                    scores_json = serde_json::to_value(&s)?;
                    Some(s)
                } else {
                    None
                };
                build_cd(CdInputs {
                    approach: cd_approach,
                    base: &base,
                    pairs: &accepted,
                    scores: scores.as_ref(),
                    bounds: self.cfg.tier_bounds,
                    schedule: &self.schedule,
                    generation: g,
                    label_encoding: encoding,
                    seed: cd_seed,
                })?
            }
            None => {
                let mut pairs = base;
                if approach == Approach::Ns {
                    let spec = self.schedule.for_generation(g)?;
                    let augmented = accepted
                        .par_iter()
                        .map(|p| augmented_copy(p, spec, g, 1, cd_seed))
                        .collect::<Result<Vec<_>>>()?;
                    pairs.extend(augmented);
                } else {
                    pairs.extend(accepted);
                }
                CombinedDataset::assemble(approach.as_str(), g, encoding, pairs)
            }
        };
        pseudo_label::write_cd(&out, &cd, self.dataset.manifest.num_classes)?;
        write_json(&out.join(QUALITY_FILE), &quality)?;
        if !scores_json.is_null() {
            write_json(&out.join(SCORES_FILE), &scores_json)?;
        }
        Ok(())
    }

    /// Role of the models trained in generation `g`.
    fn role(&self, g: usize) -> ModelRole {
        if g == 0 && self.teacher.is_some() {
            ModelRole::Teacher
        } else {
            ModelRole::Student
        }
    }

    fn model_rel(g: usize, k: usize) -> String {
        format!("gen{g}/students/models/s{k}.model")
    }

    fn train(&self, g: usize) -> Result<()> {
        let cd_dir = self.output_path(Step { generation: g, phase: Phase::Cd });
        ensure_dir(&self.output_path(Step { generation: g, phase: Phase::Train }))?;
        let alpha = self.cfg.alpha_for(g)?;
        let steps_min = if self.cfg.approach == Approach::EvalNet {
            archspec::steps_min(self.ids(Split::FD).len().max(1), self.cfg.batch)?
        } else {
            0
        };
        let backend = self.backend(self.role(g));
        (0..self.cfg.n_students).into_par_iter().try_for_each(|k| {
            backend.train(&TrainRequest {
                cd_dir: &cd_dir,
                model_out: &self.run_dir.join(Self::model_rel(g, k)),
                alpha,
                epochs: self.cfg.epochs,
                batch: self.cfg.batch,
                steps_min,
                seed: derive_seed(self.cfg.seed, &format!("gen{g}/student{k}")),
            })
        })
    }

    fn evaluate_split(&self, model: &Path, role: ModelRole, split: Split, out: &Path, encoding: LabelEncoding) -> Result<MetricReport> {
        let ids = self.ids(split);
        if ids.is_empty() {
            return Err(Error::Empty("evaluation split is empty"));
        }
        self.backend(role).predict(model, &self.inputs(split), out)?;
        let images = ids
            .par_iter()
            .map(|id| {
                let p = self.load_prediction(out, id, self.dims(), encoding)?;
                let pred = mask_core::hard_labels(&p, self.threshold())?;
                ImageMetrics::evaluate(id.clone(), &pred, &self.dataset.class_mask(id)?, self.label_count, self.binary)
            })
            .collect::<Result<Vec<_>>>()?;
        MetricReport::aggregate(images)
    }

    fn gen_encoding(&self, g: usize) -> Result<LabelEncoding> {
        let d: pseudo_label::CompositionDescriptor =
            read_json(&self.output_path(Step { generation: g, phase: Phase::Cd }).join(CD_MANIFEST_FILE))?;
        Ok(d.label_encoding)
    }

    fn evaluate(&self, g: usize) -> Result<()> {
        let encoding = self.gen_encoding(g)?;
        let out = self.output_path(Step { generation: g, phase: Phase::Evaluate });
        let role = self.role(g);
        let with_test = self.cfg.evaluate_test && !self.ids(Split::TEST).is_empty();
        (0..self.cfg.n_students).into_par_iter().try_for_each(|k| {
            let model = self.run_dir.join(Self::model_rel(g, k));
            let dir = out.join(format!("s{k}"));
            let val = self.evaluate_split(&model, role, Split::VAL, &dir.join("VAL"), encoding)?;
            let test = if with_test { Some(self.evaluate_split(&model, role, Split::TEST, &dir.join("TEST"), encoding)?) } else { None };
            write_json(&dir.join(METRICS_FILE), &EvalMetrics { val, test })
        })
    }

    fn promote(&self, g: usize) -> Result<()> {
        let eval = self.output_path(Step { generation: g, phase: Phase::Evaluate });
        let role = self.role(g);
        let metric = self.metric;
        let students = (0..self.cfg.n_students)
            .map(|k| {
                let m: EvalMetrics = read_json(&eval.join(format!("s{k}")).join(METRICS_FILE))?;
                let get = |r: &MetricReport| {
                    r.get(metric).ok_or_else(|| Error::Config(format!("metric {} unavailable for this dataset", metric.as_str())))
                };
                Ok(StudentResult {
                    index: k,
                    model: Self::model_rel(g, k),
                    role,
                    val: get(&m.val)?,
                    test: m.test.as_ref().map(get).transpose()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let promoted = select_top_k(&students.iter().map(|s| s.val).collect::<Vec<_>>(), self.cfg.k_top)?;
        let cd_dir = self.output_path(Step { generation: g, phase: Phase::Cd });
        let descriptor: pseudo_label::CompositionDescriptor = read_json(&cd_dir.join(CD_MANIFEST_FILE))?;
        let quality_path = cd_dir.join(QUALITY_FILE);
        let quality = if quality_path.is_file() { Some(read_json(&quality_path)?) } else { None };
        let teachers = if g == 0 {
            Vec::new()
        } else {
            let prev = self.report(g - 1)?;
            let n = self.cfg.approach.teacher_count(self.cfg.n_teachers, self.cfg.k_top);
            prev.promoted[..n].iter().map(|&i| prev.students[i].model.clone()).collect()
        };
        let augmentation = match self.cfg.approach {
            a if g > 0 && a.is_noisy() => Some(*self.schedule.for_generation(g)?),
            _ => None,
        };
        let best = &students[promoted[0]];
        let report = GenerationReport {
            generation: g,
            approach: self.cfg.approach,
            metric,
            alpha: self.cfg.alpha_for(g)?,
            augmentation,
            teachers,
            cd_total: descriptor.total,
            cd_counts: descriptor.counts,
            label_encoding: descriptor.label_encoding,
            quality,
            best_val: best.val,
            best_test: best.test,
            promoted,
            students,
        };
        write_json(&self.output_path(Step { generation: g, phase: Phase::Promote }), &report)
    }

    fn run_report(&self, last: usize) -> Result<RunReport> {
        let generations = (0..=last)
            .map(|g| {
                let r = self.report(g)?;
                Ok(GenerationSummary {
                    generation: g,
                    alpha: r.alpha,
                    cd_total: r.cd_total,
                    best_val: r.best_val,
                    best_test: r.best_test,
                    label_error: r.quality.and_then(|q| q.label_error),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RunReport { name: self.cfg.name.clone(), approach: self.cfg.approach, metric: self.metric, generations })
    }
}

/// Runs (or resumes) the generation loop described by `cfg`.
pub fn run(cfg: &RunConfig, opts: &RunOptions) -> Result<RunOutcome> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| run_in_pool(cfg, opts))
}

fn run_in_pool(cfg: &RunConfig, opts: &RunOptions) -> Result<RunOutcome> {
    let run_dir = cfg.run_dir();
    ensure_dir(&run_dir)?;
    // the location of a run is not part of what it computes
    let config_digest = digest_bytes(&serde_json::to_vec(&RunConfig { output: None, ..cfg.clone() })?);
    let mut state = match RunState::load(&run_dir)? {
        Some(_) if !opts.resume => {
            return Err(Error::Config(format!("{} already holds a run; resume it or choose another output", run_dir.display())))
        }
        Some(s) if s.config_digest != config_digest => {
            return Err(Error::Config("the run configuration changed since the run started".into()))
        }
        Some(s) => s,
        None => RunState { config_digest, completed: Vec::new() },
    };
    write_json(&run_dir.join(RUN_CONFIG_FILE), cfg)?;
    let ctx = Ctx::new(cfg, run_dir.clone())?;
    ctx.link_inputs()?;

    let last = if cfg.approach.is_baseline_only() { 0 } else { cfg.generations };
    let steps = plan(last);
    if let Some(stop) = opts.stop_after {
        if !steps.contains(&stop) {
            return Err(Error::InvalidArgument(format!("{stop} is not a step of this run")));
        }
    }
    let mut outcome = RunOutcome { run_dir: run_dir.clone(), executed: Vec::new(), skipped: Vec::new(), finished: false, report: None };
    let mut stale = false;
    for (i, &step) in steps.iter().enumerate() {
        let out = ctx.output_path(step);
        let up_to_date = !stale
            && match state.completed.get(i) {
                Some(done) => done.step == step && digest_path(&out)?.as_deref() == Some(done.digest.as_str()),
                None => false,
            };
        if up_to_date {
            outcome.skipped.push(step);
        } else {
            stale = true;
            state.completed.truncate(i);
            ctx.execute(step)?;
            let digest = digest_path(&out)?.ok_or_else(|| Error::MissingFile(out.clone()))?;
            state.completed.push(CompletedStep { step, digest });
            state.save(&run_dir)?;
            outcome.executed.push(step);
        }
        if opts.stop_after == Some(step) && i + 1 < steps.len() {
            return Ok(outcome);
        }
    }
    let report = ctx.run_report(last)?;
    write_json(&run_dir.join(REPORT_FILE), &report)?;
    outcome.finished = true;
    outcome.report = Some(report);
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, SceneSpec, SynthSplits};

    #[test]
    fn top_k_ties_go_low() {
        assert_eq!(select_top_k(&[0.5, 0.9, 0.9, 0.1], 2).unwrap(), vec![1, 2]);
        assert_eq!(select_top_k(&[0.3, 0.3, 0.3], 3).unwrap(), vec![0, 1, 2]);
        assert!(select_top_k(&[0.3], 2).is_err());
        assert!(select_top_k(&[0.3, f64::NAN], 1).is_err());
    }

    #[test]
    fn votes() {
        let p = |v: Vec<f32>| ProbMap::from_vec(1, 2, 1, v).unwrap();
        let probs = [p(vec![0.9, 0.6]), p(vec![0.8, 0.3])];
        assert_eq!(vote(&probs, Voting::Hard, 0.5).unwrap().data(), &[1, 0]);
        assert_eq!(vote(&probs, Voting::Soft, 0.5).unwrap().data(), &[1, 0]);
        let q = |v: Vec<f32>| ProbMap::from_vec(1, 1, 3, v).unwrap();
        let multi = [q(vec![0.5, 0.4, 0.1]), q(vec![0.1, 0.6, 0.3])];
        assert_eq!(vote(&multi, Voting::Soft, 0.5).unwrap().data(), &[1]);
        assert_eq!(vote(&multi, Voting::Hard, 0.5).unwrap().data(), &[0]);
    }

    #[test]
    fn im_channel_is_stripped() {
        let p = ProbMap::from_vec(1, 2, 3, vec![0.0, 0.25, 0.75, 1.0, 0.0, 0.0]).unwrap();
        let s = strip_im_channel(&p).unwrap();
        assert_eq!(s.channels(), 2);
        assert_eq!(s.raster().data(), &[0.25, 0.75, 0.5, 0.5]);
    }

    #[test]
    fn ie_round_trip() {
        let spec = GenerationSchedule::preset("isic2018").unwrap().rows()[2];
        let image = Image::new(3, 5, 1, (0..15).collect()).unwrap();
        let views = ie_views(&image, "a", &spec, 4, 7).unwrap();
        assert_eq!(views.len(), 4);
        assert_eq!(views[0].1, image);
        assert!(views.iter().all(|(stem, _, _)| stem.starts_with("a~")));
        let gt = ProbMap::from_vec(3, 5, 1, (0..15).map(|i| (i % 2) as f32).collect()).unwrap();
        let preds: Vec<_> = views.iter().map(|(_, _, aug)| (augment::apply_geometric(&gt, aug), *aug)).collect();
        let back = ie_consensus(&preds, Voting::Hard, 0.5).unwrap();
        assert_eq!(back, mask_core::hard_labels(&gt, 0.5).unwrap());
    }

    #[test]
    fn input_ensemble_of_exact_oracle_agrees() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let ds = generate_dataset(&SceneSpec::new(16, 16, 3, 2), 10, SynthSplits::default_for(10), &data).unwrap();
        let ctx = BackendContext { dataset_root: data.clone() };
        let b = backend::resolve(&backend::BackendSpec::Builtin("builtin:noisy_oracle?p=0".into()), &ctx).unwrap();
        let model = dir.path().join("m");
        b.train(&TrainRequest { cd_dir: &data, model_out: &model, alpha: 1.0, epochs: 1, batch: 1, steps_min: 0, seed: 1 }).unwrap();
        let id = &ds.manifest.split(Split::FD)[0];
        let spec = GenerationSchedule::preset("isic2018").unwrap().rows()[4];
        let c = input_ensemble_predict(b.as_ref(), &model, &ds.image(id).unwrap(), id, 3, &spec, 9, 0.5, &dir.path().join("s")).unwrap();
        assert!(c.im.is_empty());
        assert_eq!(c.final_mask, ds.class_mask(id).unwrap());
    }

    fn small_run(dir: &Path, approach: Approach) -> RunConfig {
        let data = dir.join("data");
        if !data.exists() {
            generate_dataset(&SceneSpec::new(12, 12, 3, 5), 40, SynthSplits::default_for(40), &data).unwrap();
        }
        let mut cfg = RunConfig::new(format!("t-{approach}"), &data, approach);
        cfg.output = Some(dir.join("runs").join(approach.as_str()));
        cfg.generations = 2;
        cfg.n_students = 3;
        cfg.teacher = Some(backend::BackendSpec::Builtin("builtin:noisy_oracle?p=0.1".into()));
        cfg
    }

    #[test]
    fn im_run_resumes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_run(dir.path(), Approach::Im);
        let stop = Step { generation: 1, phase: Phase::Cd };
        let first = run(&cfg, &RunOptions { stop_after: Some(stop), jobs: Some(2), ..Default::default() }).unwrap();
        assert!(!first.finished);
        assert_eq!(*first.executed.last().unwrap(), stop);
        assert!(run(&cfg, &RunOptions::default()).is_err(), "existing state needs resume");
        let second = run(&cfg, &RunOptions { resume: true, ..Default::default() }).unwrap();
        assert!(second.finished);
        assert_eq!(second.skipped.len(), first.executed.len());
        let report = second.report.unwrap();
        assert_eq!(report.generations.len(), 3);
        let g1: GenerationReport = read_json(&cfg.run_dir().join("gen1").join(REPORT_FILE)).unwrap();
        assert_eq!(g1.label_encoding, LabelEncoding::ImShifted);
        assert_eq!(g1.promoted.len(), 2);
        assert!(g1.quality.unwrap().im.is_some());
    }

    #[test]
    fn baseline_runs_one_generation() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_run(dir.path(), Approach::Ldt);
        cfg.teacher = None;
        let out = run(&cfg, &RunOptions::default()).unwrap();
        assert_eq!(out.executed.len(), 4);
        assert_eq!(out.report.unwrap().generations.len(), 1);
    }
}
