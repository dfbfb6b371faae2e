use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::archspec;
use crate::augment::GenerationSchedule;
use crate::backend::BackendSpec;
use crate::dataset_io::read_json;
use crate::error::{Error, Result};
use crate::metrics::MetricKey;
use crate::morphology::RefineParams;
use crate::pseudo_label::{CdApproach, TierBounds};

pub const RUN_CONFIG_FILE: &str = "run.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Approach {
    #[serde(rename = "FDT")]
    Fdt,
    #[serde(rename = "LDT")]
    Ldt,
    #[serde(rename = "ALDT")]
    Aldt,
    #[serde(rename = "ME")]
    Me,
    #[serde(rename = "IE")]
    Ie,
    #[serde(rename = "NS")]
    Ns,
    #[serde(rename = "EVALNET")]
    EvalNet,
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

/// Records the generation-0 models train on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaseSet {
    Fd,
    Ld,
    Ald,
}

impl Approach {
    pub const ALL: [Approach; 12] = [
        Approach::Fdt,
        Approach::Ldt,
        Approach::Aldt,
        Approach::Me,
        Approach::Ie,
        Approach::Ns,
        Approach::EvalNet,
        Approach::Im,
        Approach::ImPlus,
        Approach::ImPlusPlus,
        Approach::AimPlus,
        Approach::AimPlusPlus,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Approach::Fdt => "FDT",
            Approach::Ldt => "LDT",
            Approach::Aldt => "ALDT",
            Approach::Me => "ME",
            Approach::Ie => "IE",
            Approach::Ns => "NS",
            Approach::EvalNet => "EVALNET",
            Approach::Im => "IM",
            Approach::ImPlus => "IM_PLUS",
            Approach::ImPlusPlus => "IM_PLUSPLUS",
            Approach::AimPlus => "AIM_PLUS",
            Approach::AimPlusPlus => "AIM_PLUSPLUS",
        }
    }

    /// Single training run with no generation loop.
    pub fn is_baseline_only(self) -> bool {
        matches!(self, Approach::Fdt | Approach::Ldt | Approach::Aldt)
    }

    pub fn base_set(self) -> BaseSet {
        match self {
            Approach::Fdt => BaseSet::Fd,
            Approach::Aldt | Approach::AimPlus | Approach::AimPlusPlus => BaseSet::Ald,
            _ => BaseSet::Ld,
        }
    }

    pub fn cd_approach(self) -> Option<CdApproach> {
        match self {
            Approach::Im => Some(CdApproach::Im),
            Approach::ImPlus => Some(CdApproach::ImPlus),
            Approach::ImPlusPlus => Some(CdApproach::ImPlusPlus),
            Approach::AimPlus => Some(CdApproach::AimPlus),
            Approach::AimPlusPlus => Some(CdApproach::AimPlusPlus),
            _ => None,
        }
    }

    pub fn uses_im(self) -> bool {
        self.cd_approach().is_some()
    }

    /// Approaches that ramp model width and augmentation strength.
    pub fn is_noisy(self) -> bool {
        matches!(self, Approach::Ns | Approach::ImPlus | Approach::ImPlusPlus | Approach::AimPlus | Approach::AimPlusPlus)
    }

    pub fn needs_scorer(self) -> bool {
        matches!(self, Approach::EvalNet | Approach::ImPlusPlus | Approach::AimPlusPlus)
    }

    /// Teachers that predict the ULD each generation.
    pub fn teacher_count(self, n_teachers: usize, k_top: usize) -> usize {
        match self {
            Approach::Ie | Approach::Ns => 1,
            Approach::EvalNet => k_top,
            _ => n_teachers,
        }
    }
}

impl std::fmt::Display for Approach {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Approach {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Approach::ALL
            .into_iter()
            .find(|a| a.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown approach {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Voting {
    /// Hard for binary data, soft for multiclass.
    #[default]
    Auto,
    Hard,
    Soft,
}

impl Voting {
    pub fn resolve(self, binary: bool) -> Voting {
        match self {
            Voting::Auto if binary => Voting::Hard,
            Voting::Auto => Voting::Soft,
            v => v,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScheduleSource {
    Preset(String),
    Inline(GenerationSchedule),
}

impl ScheduleSource {
    pub fn load(&self) -> Result<GenerationSchedule> {
        match self {
            ScheduleSource::Preset(name) => GenerationSchedule::preset(name),
            ScheduleSource::Inline(s) => Ok(s.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AlphaSource {
    Preset(String),
    Range { start: f64, end: f64 },
}

impl AlphaSource {
    pub fn endpoints(&self) -> Result<(f64, f64)> {
        match self {
            AlphaSource::Preset(name) => archspec::alpha_endpoints(name),
            AlphaSource::Range { start, end } if *start > 0.0 && *end > 0.0 => Ok((*start, *end)),
            AlphaSource::Range { .. } => Err(Error::Config("alpha range must be positive".into())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorerConfig {
    pub backend: BackendSpec,
    /// Trained scorer models; when empty, `count` models are trained on the
    /// generation-0 Combined Dataset.
    #[serde(default)]
    pub models: Vec<PathBuf>,
    #[serde(default = "one")]
    pub count: usize,
}

fn one() -> usize {
    1
}
fn five() -> usize {
    5
}
fn two() -> usize {
    2
}
fn fifty() -> usize {
    50
}
fn thirty_two() -> usize {
    32
}
fn half() -> f64 {
    0.5
}
fn four() -> usize {
    4
}
fn yes() -> bool {
    true
}
fn default_schedule() -> ScheduleSource {
    ScheduleSource::Preset("isic2018".into())
}
fn default_student() -> BackendSpec {
    BackendSpec::Builtin("builtin:centroid".into())
}

/// Contents of `run.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    /// Dataset root holding `manifest.json`.
    pub dataset: PathBuf,
    /// Run directory; defaults to `runs/<name>` next to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    pub approach: Approach,
    #[serde(default = "five")]
    pub generations: usize,
    #[serde(default = "two")]
    pub k_top: usize,
    #[serde(default = "five")]
    pub n_students: usize,
    #[serde(default = "two")]
    pub n_teachers: usize,
    #[serde(default)]
    pub voting: Voting,
    #[serde(default)]
    pub refine: RefineParams,
    #[serde(default = "default_schedule")]
    pub schedule: ScheduleSource,
    /// Width ramp; defaults to the schedule preset's endpoints, else 1 → 2.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<AlphaSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tier_bounds: Option<TierBounds>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evalnet_threshold: Option<f64>,
    /// Views per image for the Input Ensemble; the first is the unaugmented image.
    #[serde(default = "four")]
    pub ie_variants: usize,
    /// Schedule row whose strength the Input Ensemble views use.
    #[serde(default = "one")]
    pub ie_row: usize,
    #[serde(default = "fifty")]
    pub epochs: usize,
    #[serde(default = "thirty_two")]
    pub batch: usize,
    /// Validation metric for promotion; IoU for binary data, mIoU otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection_metric: Option<MetricKey>,
    /// Probability threshold for single-channel predictions.
    #[serde(default = "half")]
    pub threshold: f64,
    #[serde(default = "default_student")]
    pub student: BackendSpec,
    /// Backend for the generation-0 models that teach generation 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher: Option<BackendSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scorer: Option<ScorerConfig>,
    #[serde(default = "yes")]
    pub evaluate_test: bool,
    #[serde(default)]
    pub seed: u64,
}

impl RunConfig {
    pub fn new(name: impl Into<String>, dataset: impl Into<PathBuf>, approach: Approach) -> Self {
        let mut cfg: RunConfig = serde_json::from_value(serde_json::json!({
            "name": name.into(),
            "dataset": dataset.into(),
            "approach": approach,
        }))
        .expect("defaults deserialize");
        cfg.output = None;
        cfg
    }

    /// Loads `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: RunConfig = read_json(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.resolve_paths(&base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.dataset);
        match &mut self.output {
            Some(o) => fix(o),
            None => self.output = Some(base.join("runs").join(&self.name)),
        }
        if let Some(s) = &mut self.scorer {
            s.models.iter_mut().for_each(fix);
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output.clone().unwrap_or_else(|| PathBuf::from("runs").join(&self.name))
    }

    pub fn schedule(&self) -> Result<GenerationSchedule> {
        self.schedule.load()
    }

    pub fn alpha_endpoints(&self) -> Result<(f64, f64)> {
        match (&self.alpha, &self.schedule) {
            (Some(a), _) => a.endpoints(),
            (None, ScheduleSource::Preset(name)) => archspec::alpha_endpoints(name).or(Ok((1.0, 2.0))),
            (None, _) => Ok((1.0, 2.0)),
        }
    }

    /// α for a generation (0 is the baseline).
    pub fn alpha_for(&self, generation: usize) -> Result<f64> {
        let (start, end) = self.alpha_endpoints()?;
        if !self.approach.is_noisy() || generation == 0 {
            return Ok(start);
        }
        archspec::alpha_ramp(start, end, generation, self.generations)
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.approach;
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!("bad run name {:?}", self.name)));
        }
        if self.generations == 0 {
            return Err(Error::Config("generations must be >= 1".into()));
        }
        if self.n_students == 0 || self.k_top == 0 || self.k_top > self.n_students {
            return Err(Error::Config(format!("need 1 <= k_top ({}) <= n_students ({})", self.k_top, self.n_students)));
        }
        if matches!(a, Approach::Me) || a.uses_im() {
            if self.n_teachers < 2 || self.n_teachers > self.k_top {
                return Err(Error::Config(format!(
                    "{a} needs 2 <= n_teachers ({}) <= k_top ({})",
                    self.n_teachers, self.k_top
                )));
            }
        }
        if a == Approach::EvalNet && self.k_top < 1 {
            return Err(Error::Config("EVALNET needs at least one teacher".into()));
        }
        self.refine.validate()?;
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        let schedule = self.schedule()?;
        if a.is_noisy() && !a.is_baseline_only() && schedule.len() < self.generations {
            return Err(Error::Config(format!(
                "schedule has {} rows for {} generations",
                schedule.len(),
                self.generations
            )));
        }
        if a == Approach::Ie {
            if self.ie_variants < 2 {
                return Err(Error::Config("IE needs at least 2 variants".into()));
            }
            schedule.for_generation(self.ie_row)?;
        }
        self.alpha_endpoints()?;
        if a.needs_scorer() && self.scorer.is_none() {
            return Err(Error::Config(format!("{a} needs a scorer backend")));
        }
        if matches!(a, Approach::ImPlusPlus | Approach::AimPlusPlus) {
            self.tier_bounds.ok_or_else(|| Error::Config(format!("{a} needs tier_bounds")))?.validate()?;
        }
        if a == Approach::EvalNet {
            let t = self.evalnet_threshold.ok_or_else(|| Error::Config("EVALNET needs evalnet_threshold".into()))?;
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("evalnet_threshold {t} outside [0, 1]")));
            }
        }
        if let Some(s) = &self.scorer {
            if s.models.is_empty() && s.count == 0 {
                return Err(Error::Config("scorer needs models or count >= 1".into()));
            }
        }
        Ok(())
    }
}
