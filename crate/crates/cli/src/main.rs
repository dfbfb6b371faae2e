//! `imask` command line: every pipeline stage as a scriptable subcommand.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 backend failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use imask::analysis::{self, class_frequency, emit_report};
use imask::archspec::{self, ArchConfig};
use imask::augment::{self, GenerationSchedule, LabeledRecord};
use imask::backend::{self, list_stems, BackendContext, BackendSpec, TENSOR_EXT};
use imask::dataset_io::tensor::{read_prob_map, FORMAT_VERSION};
use imask::dataset_io::{self, read_json, write_json, Dataset, DatasetManifest, LabelMask, Split, MANIFEST_VERSION};
use imask::mask_core::{self, ConsensusKind, ConsensusOutput};
use imask::metrics::{ImageMetrics, MetricReport};
use imask::morphology::{refine_im, RefineParams};
use imask::orchestrator::{self, RunConfig, RunOptions, RunReport, Step, Voting};
use imask::pseudo_label::{self, build_cd, make_pair, remap_with_im, CdApproach, CdInputs, LabelEncoding, PairSource, PseudoPair, TierBounds};
use imask::quality::score_pairs;
use imask::synth::{generate_dataset, SceneSpec, SynthSplits};
use imask::{ClassMask, Error, ProbMap};

#[derive(Parser, Debug)]
#[command(name = "imask", about = "Inconsistency-mask pseudo-labelling and self-training pipeline")]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: logical cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// More logging; repeat for debug output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw the labeled subset (LD) from FD and write the manifest back.
    Split(SplitArgs),
    /// Add nine augmented variants of every LD record (the ALD split).
    Augment(AugmentArgs),
    /// Vote over probability tensors.
    Vote(VoteArgs),
    /// Final mask and inconsistency mask of an ensemble of hard masks.
    Im(ImArgs),
    /// Erode and dilate an inconsistency mask.
    Refine(RefineArgs),
    /// Assemble a Combined Dataset from consensus outputs.
    BuildCd(BuildCdArgs),
    /// Score predictions against ground truth.
    Metrics(MetricsArgs),
    /// Score pseudo-label pairs with a scorer backend.
    Score(ScoreArgs),
    /// Layer table and cost of the 1x1 U-Net.
    Archspec(ArchspecArgs),
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Run (or resume) a generation loop.
    Run(RunArgs),
    /// Charts and tables over finished runs.
    Analyze(AnalyzeArgs),
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// LD size; defaults to the dataset's published count, else 10% of FD.
    #[arg(long)]
    ld_count: Option<usize>,
}

#[derive(Args, Debug)]
struct AugmentArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Schedule preset name or JSON file; its strongest row is used.
    #[arg(long, default_value = "isic2018")]
    schedule: String,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VoteKind {
    Hard,
    Soft,
}

#[derive(Args, Debug)]
struct VoteArgs {
    /// Probability tensors (`.imt`) of one image.
    #[arg(long, num_args = 2.., required = true)]
    preds: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "hard")]
    voting: VoteKind,
    #[arg(long, default_value_t = 0.5)]
    threshold: f32,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Binary,
    Multiclass,
}

impl Mode {
    fn kind(self) -> ConsensusKind {
        match self {
            Mode::Binary => ConsensusKind::Binary,
            Mode::Multiclass => ConsensusKind::Multiclass,
        }
    }
}

#[derive(Args, Debug)]
struct ImArgs {
    /// Hard masks (`.png`) or probability tensors (`.imt`).
    #[arg(long, num_args = 2.., required = true)]
    preds: Vec<PathBuf>,
    #[arg(long, value_enum)]
    mode: Mode,
    /// Threshold for single-channel tensors.
    #[arg(long, default_value_t = 0.5)]
    threshold: f32,
    #[arg(long)]
    out_f: PathBuf,
    #[arg(long)]
    out_im: PathBuf,
}

#[derive(Args, Debug)]
struct RefineArgs {
    #[arg(long = "f")]
    final_mask: PathBuf,
    #[arg(long)]
    im: PathBuf,
    #[arg(long, value_enum)]
    mode: Mode,
    #[arg(long, default_value_t = 0)]
    erode: usize,
    #[arg(long, default_value_t = 0)]
    dilate: usize,
    #[arg(long)]
    out_f: PathBuf,
    #[arg(long)]
    out_im: PathBuf,
}

#[derive(Args, Debug)]
struct BuildCdArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// IM, IM_PLUS, IM_PLUSPLUS, AIM_PLUS or AIM_PLUSPLUS.
    #[arg(long)]
    approach: String,
    /// Directory of final masks, one `<id>.png` per ULD record.
    #[arg(long)]
    final_dir: PathBuf,
    #[arg(long)]
    im_dir: PathBuf,
    #[arg(long, default_value_t = 1)]
    generation: usize,
    #[arg(long, default_value = "isic2018")]
    schedule: String,
    /// `{ "<id>": score }` for the `++` approaches.
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long)]
    tier_min: Option<f64>,
    #[arg(long)]
    tier_max: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct MetricsArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Predictions: `<id>.imt` tensors or `<id>.png` hard masks.
    #[arg(long)]
    pred_dir: PathBuf,
    #[arg(long, default_value = "VAL")]
    split: String,
    #[arg(long, default_value_t = 0.5)]
    threshold: f32,
    #[arg(long)]
    out_csv: PathBuf,
    #[arg(long)]
    out_json: PathBuf,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    /// Dataset with ground truth (for the oracle scorer).
    #[arg(long)]
    dataset: PathBuf,
    /// Pair directory in Combined Dataset layout.
    #[arg(long)]
    pair_dir: PathBuf,
    /// Scorer backend: a `builtin:` name or a JSON backend spec.
    #[arg(long, default_value = "builtin:oracle")]
    scorer: String,
    #[arg(long = "model")]
    models: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ArchspecArgs {
    #[arg(long, num_args = 1.., default_values_t = [1.0])]
    alpha: Vec<f64>,
    /// Base filter count; calibrated against the reference size when omitted.
    #[arg(long)]
    base: Option<usize>,
    /// Input shape `HxWxC`.
    #[arg(long, default_value = "256x256x3")]
    input: String,
    #[arg(long, default_value_t = 1)]
    outputs: usize,
    /// The scorer network instead of the segmenter.
    #[arg(long)]
    evalnet: bool,
    /// Also write the cost CSV here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    /// Classes including background; 2 makes a binary dataset.
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 1)]
    min_shapes: usize,
    #[arg(long, default_value_t = 4)]
    max_shapes: usize,
    #[arg(long, default_value_t = 12)]
    pixel_noise: u8,
    #[arg(long)]
    val: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
    #[arg(long)]
    ld: Option<usize>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    resume: bool,
    /// Stop after a step such as `gen2:cd`.
    #[arg(long)]
    stop_after: Option<String>,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    /// Run directories.
    #[arg(long = "run", num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
    /// Output directory (default: `<first run>/analysis`).
    #[arg(long)]
    out: Option<PathBuf>,
}

type CliResult<T> = std::result::Result<T, Failure>;

#[derive(Debug)]
enum Failure {
    Usage(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Lib(Error::Config(_)) => 1,
            Failure::Lib(e) if e.is_backend() => 3,
            Failure::Lib(_) => 2,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => f.write_str(m),
            Failure::Lib(e) => write!(f, "{e}"),
        }
    }
}

fn version() -> &'static str {
    let v = format!("{} (manifest v{MANIFEST_VERSION}, tensor {FORMAT_VERSION})", imask::VERSION);
    Box::leak(v.into_boxed_str())
}

fn main() -> ExitCode {
    let cmd = Cli::command().version(version());
    let cli = match cmd.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.jobs {
        if n == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(1);
        }
        // Only fails if a pool already exists, which cannot happen this early.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::Split(a) => split(a, seed),
        Command::Augment(a) => augment_ald(a, seed),
        Command::Vote(a) => vote(a),
        Command::Im(a) => im(a),
        Command::Refine(a) => refine(a),
        Command::BuildCd(a) => build_cd_cmd(a, seed),
        Command::Metrics(a) => metrics(a),
        Command::Score(a) => score(a),
        Command::Archspec(a) => archspec_cmd(a),
        Command::Synth(a) => synth(a, seed),
        Command::Run(a) => run(a, cli.seed, cli.jobs),
        Command::Analyze(a) => analyze(a),
    }
}

fn split(a: &SplitArgs, seed: u64) -> CliResult<()> {
    let manifest = DatasetManifest::load(&a.dataset)?;
    let fd = manifest.split(Split::FD).to_vec();
    if fd.is_empty() {
        return Err(usage("manifest has no FD split"));
    }
    let ld = a.ld_count.or_else(|| dataset_io::default_ld_count(&manifest.name)).unwrap_or((fd.len() / 10).max(1));
    let manifest = dataset_io::split_dataset(manifest, &fd, ld, seed)?;
    manifest.save(&a.dataset)?;
    println!("LD {} ULD {}", manifest.split(Split::LD).len(), manifest.split(Split::ULD).len());
    Ok(())
}

fn load_schedule(name: &str) -> CliResult<GenerationSchedule> {
    let path = Path::new(name);
    if path.is_file() {
        Ok(GenerationSchedule::new(read_json(path)?)?)
    } else {
        Ok(GenerationSchedule::preset(name)?)
    }
}

fn augment_ald(a: &AugmentArgs, seed: u64) -> CliResult<()> {
    let ds = Dataset::open(&a.dataset)?;
    let schedule = load_schedule(&a.schedule)?;
    let records = ds
        .manifest
        .split(Split::LD)
        .iter()
        .map(|id| Ok(LabeledRecord { id: id.clone(), image: ds.image(id)?, mask: ds.mask(id)? }))
        .collect::<imask::Result<Vec<_>>>()?;
    if records.is_empty() {
        return Err(usage("dataset has no LD split; run `split` first"));
    }
    let ald = augment::build_ald(&records, schedule.max_row(), seed)?;
    for r in ald.iter().filter(|r| !ds.manifest.split(Split::LD).contains(&r.id)) {
        ds.write_record(&r.id, &r.image, Some(&r.mask))?;
    }
    let mut manifest = ds.manifest.clone();
    manifest.set_split(Split::ALD, ald.iter().map(|r| r.id.clone()).collect());
    manifest.save(&a.dataset)?;
    println!("ALD {}", ald.len());
    Ok(())
}

fn read_probs(paths: &[PathBuf]) -> CliResult<Vec<ProbMap<f32>>> {
    Ok(paths.iter().map(|p| read_prob_map(p)).collect::<imask::Result<Vec<_>>>()?)
}

fn vote(a: &VoteArgs) -> CliResult<()> {
    let probs = read_probs(&a.preds)?;
    let voting = match a.voting {
        VoteKind::Hard => Voting::Hard,
        VoteKind::Soft => Voting::Soft,
    };
    let mask = orchestrator::vote(&probs, voting, a.threshold)?;
    dataset_io::write_class_mask(&a.out, &mask)?;
    Ok(())
}

fn read_hard(path: &Path, mode: Mode, threshold: f32) -> CliResult<ClassMask> {
    if path.extension().and_then(|e| e.to_str()) == Some(TENSOR_EXT) {
        return Ok(mask_core::hard_labels(&read_prob_map(path)?, threshold)?);
    }
    Ok(match mode {
        Mode::Binary => dataset_io::read_binary_mask(path)?.to_class_mask(),
        Mode::Multiclass => dataset_io::read_class_mask(path, 256)?,
    })
}

fn write_consensus(c: &ConsensusOutput, out_f: &Path, out_im: &Path) -> CliResult<()> {
    dataset_io::write_class_mask(out_f, &c.final_mask)?;
    dataset_io::write_binary_mask(out_im, &c.im)?;
    Ok(())
}

fn im(a: &ImArgs) -> CliResult<()> {
    let masks = a.preds.iter().map(|p| read_hard(p, a.mode, a.threshold)).collect::<CliResult<Vec<_>>>()?;
    let c = mask_core::consensus(&masks, a.mode.kind())?;
    write_consensus(&c, &a.out_f, &a.out_im)?;
    println!("im_fraction {:.6}", c.im_fraction());
    Ok(())
}

fn refine(a: &RefineArgs) -> CliResult<()> {
    let final_mask = read_hard(&a.final_mask, a.mode, 0.5)?;
    let im = dataset_io::read_binary_mask(&a.im)?;
    let c = ConsensusOutput { kind: a.mode.kind(), final_mask, im, vote_sum: None, n_models: 2 };
    c.check_disjoint()?;
    let params = RefineParams::new(a.erode, a.dilate).map_err(|e| usage(e.to_string()))?;
    let out = refine_im(&c, params)?;
    write_consensus(&out, &a.out_f, &a.out_im)?;
    println!("im_fraction {:.6}", out.im_fraction());
    Ok(())
}

fn build_cd_cmd(a: &BuildCdArgs, seed: u64) -> CliResult<()> {
    let approach: CdApproach = serde_json::from_value(serde_json::Value::String(a.approach.to_ascii_uppercase()))
        .map_err(|_| usage(format!("unknown IM approach {:?}", a.approach)))?;
    let ds = Dataset::open(&a.dataset)?;
    let m = &ds.manifest;
    let (label_count, binary) = (m.label_count(), m.is_binary());
    let encoding = if binary { LabelEncoding::Plain } else { LabelEncoding::ImShifted };
    let kind = if binary { ConsensusKind::Binary } else { ConsensusKind::Multiclass };
    let schedule = load_schedule(&a.schedule)?;

    let mut accepted = Vec::new();
    let mut rejected = 0usize;
    for id in list_stems(&a.final_dir, "png")? {
        let final_mask = dataset_io::read_class_mask(&a.final_dir.join(format!("{id}.png")), label_count)?;
        let im = dataset_io::read_binary_mask(&a.im_dir.join(format!("{id}.png")))?;
        let c = ConsensusOutput { kind, final_mask, im, vote_sum: None, n_models: 2 };
        match make_pair(&id, &ds.image(&id)?, &c, label_count)?.accepted() {
            Some(p) => accepted.push(p),
            None => rejected += 1,
        }
    }

    let base_source = if approach.uses_ald() { PairSource::Ald } else { PairSource::Ld };
    let base_records: Vec<LabeledRecord> = if approach.uses_ald() && !m.split(Split::ALD).is_empty() {
        m.split(Split::ALD)
            .iter()
            .map(|id| Ok(LabeledRecord { id: id.clone(), image: ds.image(id)?, mask: ds.mask(id)? }))
            .collect::<imask::Result<_>>()?
    } else {
        let ld = m
            .split(Split::LD)
            .iter()
            .map(|id| Ok(LabeledRecord { id: id.clone(), image: ds.image(id)?, mask: ds.mask(id)? }))
            .collect::<imask::Result<Vec<_>>>()?;
        if approach.uses_ald() {
            augment::build_ald(&ld, schedule.max_row(), imask::seed::derive_seed(seed, "ald"))?
        } else {
            ld
        }
    };
    let base = base_records
        .into_iter()
        .map(|r| match r.mask {
            LabelMask::Class(mask) => {
                let mut p = PseudoPair::labeled(r.id, r.image, mask, base_source);
                if encoding == LabelEncoding::ImShifted {
                    p.label = remap_with_im(&p.label, &p.im, label_count)?;
                }
                Ok(p)
            }
            LabelMask::MultiLabel(_) => Err(Error::Config("multilabel datasets are not supported".into())),
        })
        .collect::<imask::Result<Vec<_>>>()?;

    let scores: Option<BTreeMap<String, f64>> = a.scores.as_deref().map(read_json).transpose()?;
    let bounds = match (a.tier_min, a.tier_max) {
        (Some(lo), Some(hi)) => Some(TierBounds::new(lo, hi).map_err(|e| usage(e.to_string()))?),
        (None, None) => None,
        _ => return Err(usage("give both --tier-min and --tier-max")),
    };
    let cd = build_cd(CdInputs {
        approach,
        base: &base,
        pairs: &accepted,
        scores: scores.as_ref(),
        bounds,
        schedule: &schedule,
        generation: a.generation,
        label_encoding: encoding,
        seed: imask::seed::derive_seed(seed, &format!("cd/gen{}", a.generation)),
    })?;
    pseudo_label::write_cd(&a.out, &cd, m.num_classes)?;
    println!("total {} accepted {} rejected {rejected}", cd.len(), accepted.len());
    Ok(())
}

fn metrics(a: &MetricsArgs) -> CliResult<()> {
    let split: Split = serde_json::from_value(serde_json::Value::String(a.split.to_ascii_uppercase()))
        .map_err(|_| usage(format!("unknown split {:?}", a.split)))?;
    let ds = Dataset::open(&a.dataset)?;
    let m = &ds.manifest;
    let ids = m.split(split);
    if ids.is_empty() {
        return Err(usage(format!("split {} is empty", a.split)));
    }
    let images = ids
        .iter()
        .map(|id| {
            let tensor = backend::tensor_path(&a.pred_dir, id);
            let pred = if tensor.is_file() {
                let mut prob = read_prob_map(&tensor)?;
                // students trained on IM-shifted labels carry a leading IM channel
                if !m.is_binary() && prob.channels() == m.label_count() + 1 {
                    prob = orchestrator::strip_im_channel(&prob)?;
                }
                mask_core::hard_labels(&prob, a.threshold)?
            } else {
                dataset_io::read_class_mask(&a.pred_dir.join(format!("{id}.png")), m.label_count())?
            };
            Ok(ImageMetrics::evaluate(id.clone(), &pred, &ds.class_mask(id)?, m.label_count(), m.is_binary())?)
        })
        .collect::<CliResult<Vec<_>>>()?;
    let report = MetricReport::aggregate(images)?;
    if let Some(dir) = a.out_csv.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(&a.out_csv, report.to_csv()).map_err(|e| Error::io(&a.out_csv, e))?;
    write_json(&a.out_json, &report)?;
    println!("miou {:.6} mpa {:.6}", report.mean_miou, report.mean_mpa);
    if let Some(iou) = report.mean_iou {
        println!("iou {iou:.6}");
    }
    Ok(())
}

fn parse_backend(s: &str) -> CliResult<BackendSpec> {
    if s.trim_start().starts_with('{') {
        serde_json::from_str(s).map_err(|e| usage(format!("bad backend spec: {e}")))
    } else {
        Ok(BackendSpec::Builtin(s.to_string()))
    }
}

fn score(a: &ScoreArgs) -> CliResult<()> {
    let spec = parse_backend(&a.scorer)?;
    let b = backend::resolve(&spec, &BackendContext { dataset_root: a.dataset.clone() })?;
    let cd = pseudo_label::read_cd(&a.pair_dir)?;
    let ids: Vec<String> = cd.pairs.iter().map(|p| p.id.clone()).collect();
    let models = if a.models.is_empty() { vec![a.out.join("scorer.model")] } else { a.models.clone() };
    let scores = score_pairs(b.as_ref(), &models, &a.pair_dir, &ids, &a.out.join("raw"))?;
    write_json(&a.out.join("scores.json"), &scores)?;
    println!("scored {}", scores.len());
    Ok(())
}

fn parse_shape(s: &str) -> CliResult<(usize, usize, usize)> {
    let parts: Vec<usize> = s.split('x').map(|p| p.parse()).collect::<Result<_, _>>().map_err(|_| usage(format!("bad shape {s:?}")))?;
    match parts[..] {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(usage(format!("shape must be HxWxC, got {s:?}"))),
    }
}

fn archspec_cmd(a: &ArchspecArgs) -> CliResult<()> {
    let input = parse_shape(&a.input)?;
    let base = match a.base {
        Some(b) => b,
        None => archspec::calibrate_base(input, a.outputs, archspec::REFERENCE_PARAMS_ALPHA1 as f64)?.0,
    };
    let mut csv = String::from("alpha,params,flops\n");
    for (i, &alpha) in a.alpha.iter().enumerate() {
        let cfg = ArchConfig::new(alpha, base, input, a.outputs).map_err(|e| usage(e.to_string()))?;
        let layers = if a.evalnet { archspec::evalnet_layers(&cfg)? } else { archspec::unet_layers(&cfg)? };
        if i == 0 {
            println!("base_filters {base}");
            print!("{}", archspec::layer_table(&layers));
        }
        csv.push_str(&format!("{alpha},{},{}\n", archspec::count_params(&layers), archspec::estimate_flops(&layers)));
    }
    print!("{csv}");
    if let Some(path) = &a.csv {
        std::fs::write(path, &csv).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn synth(a: &SynthArgs, seed: u64) -> CliResult<()> {
    let mut spec = SceneSpec::new(a.height, a.width, a.classes, seed);
    spec.shapes_per_image = (a.min_shapes, a.max_shapes);
    spec.pixel_noise = a.pixel_noise;
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let d = SynthSplits::default_for(a.n);
    let splits = SynthSplits { val: a.val.unwrap_or(d.val), test: a.test.unwrap_or(d.test), ld: a.ld.unwrap_or(d.ld) };
    let ds = generate_dataset(&spec, a.n, splits, &a.out)?;
    let m = &ds.manifest;
    println!(
        "FD {} LD {} ULD {} VAL {} TEST {}",
        m.split(Split::FD).len(),
        m.split(Split::LD).len(),
        m.split(Split::ULD).len(),
        m.split(Split::VAL).len(),
        m.split(Split::TEST).len()
    );
    Ok(())
}

fn run(a: &RunArgs, seed: Option<u64>, jobs: Option<usize>) -> CliResult<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let stop_after = a.stop_after.as_deref().map(str::parse::<Step>).transpose().map_err(|e| usage(e.to_string()))?;
    let outcome = orchestrator::run(&cfg, &RunOptions { resume: a.resume, stop_after, jobs })?;
    println!(
        "{}: executed {} skipped {} steps{}",
        outcome.run_dir.display(),
        outcome.executed.len(),
        outcome.skipped.len(),
        if outcome.finished { "" } else { " (stopped early)" }
    );
    if let Some(r) = outcome.report {
        for g in &r.generations {
            let test = g.best_test.map(|t| format!(" test {t:.4}")).unwrap_or_default();
            println!("gen{} {} val {:.4}{test}", g.generation, r.metric.as_str(), g.best_val);
        }
    }
    Ok(())
}

fn analyze(a: &AnalyzeArgs) -> CliResult<()> {
    let out = a.out.clone().unwrap_or_else(|| a.runs[0].join("analysis"));
    let reports = a.runs.iter().map(|r| RunReport::load(r)).collect::<imask::Result<Vec<_>>>()?;
    let series: Vec<_> = reports.iter().map(RunReport::series).collect();
    let points = emit_report(&series, &out)?;

    for (run_dir, report) in a.runs.iter().zip(&reports) {
        let cfg: RunConfig = read_json(&run_dir.join(orchestrator::RUN_CONFIG_FILE))?;
        let ds = Dataset::open(&cfg.dataset)?;
        let classes = ds.manifest.label_count();
        let fd = ds.manifest.split(Split::FD).iter().map(|id| ds.class_mask(id)).collect::<imask::Result<Vec<_>>>()?;
        let reference = class_frequency(&fd, classes, false)?;
        for g in &report.generations {
            let cd = pseudo_label::read_cd(&run_dir.join(format!("gen{}", g.generation)).join("cd"))?;
            let shifted = cd.descriptor.label_encoding == LabelEncoding::ImShifted;
            let labels: Vec<ClassMask> = cd.pairs.into_iter().map(|p| p.label).collect();
            let table = class_frequency(&labels, classes, shifted)?.with_reference(&reference)?;
            let name = format!("frequency_{}_gen{}.csv", report.name, g.generation);
            let path = out.join(name);
            std::fs::write(&path, table.to_csv(ds.manifest.class_names.as_deref())).map_err(|e| Error::io(&path, e))?;
            analysis::write_frequency(&path.with_extension("json"), &table)?;
        }
    }
    println!("{} points written to {}", points.len(), out.display());
    Ok(())
}
