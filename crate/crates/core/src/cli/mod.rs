//! The `slash` command line: data generation, training sweeps, evaluation,
//! figure export and the gradient check.
//!
//! Exit codes: 0 success, 1 usage, 2 data or file error, 3 numeric abort.

pub mod config;
pub mod viz;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::data::{
    apply_annotation_policy, generate_dataset, load_dataset, save_dataset, AnnotationPolicy, BackgroundKind,
    DataError, Dataset, DatasetConfig,
};
use crate::metrics::aggregate_seeds;
use crate::model::{checkpoint_dtype, CheckpointError, KernelKind, Model, ModelConfig};
use crate::tensor::{FdOptions, Real};
use crate::training::{evaluate, loss_gradient_check, train_seeds, RunOptions, TrainError};

use config::{apply_variant, Dtype, ExperimentConfig, VARIANTS};

/// Default root for outputs when `--out` is not given.
pub const OUTPUT_ROOT_ENV: &str = "SLASH_OUTPUT_ROOT";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            Self::Usage(_) => 1,
            Self::Data(_) => 2,
            Self::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Self::Usage(m) | Self::Data(m) | Self::Numeric(m) => m,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Config(_) => Self::Usage(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite(d) => Self::Numeric(format!("non-finite loss: {d}")),
            TrainError::Config(m) => Self::Usage(m),
            TrainError::Data(d) => d.into(),
            TrainError::Tensor(t) => Self::Usage(t.to_string()),
            other => Self::Data(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "slash", version, about = "Slot attention with attention refining kernels and point supervision")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset to a directory.
    GenerateData(GenerateArgs),
    /// Train one run per seed and aggregate their final metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset and print the metric report.
    Eval(EvalArgs),
    /// Export attention and point figures for chosen samples.
    Viz(VizArgs),
    /// Finite-difference check of the full training loss on a tiny model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5000)]
    size: usize,
    #[arg(long, default_value = "stripes")]
    difficulty: BackgroundKind,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    /// Annotate images with the default policy (or the fractions below).
    #[arg(long)]
    annotate: bool,
    #[arg(long)]
    image_fraction: Option<f64>,
    #[arg(long)]
    object_fraction: Option<f64>,
    #[arg(long, default_value_t = 0)]
    annotation_seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment config file (`[section]` and `key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// `a..b` (inclusive) or a comma-separated list.
    #[arg(long, default_value = "0..0")]
    seeds: String,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Method preset applied before `--set` overrides.
    #[arg(long)]
    variant: Option<String>,
    /// `section.key=value`, repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    label: Option<String>,
    #[arg(long)]
    threads: Option<usize>,
    /// Training-state checkpoint to continue from; single seed only.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Evaluate only the first N samples (0 = all).
    #[arg(long, default_value_t = 0)]
    samples: usize,
    /// Slot-noise seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "eval")]
    label: String,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VizArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    sample_ids: Vec<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Slot-noise seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value = "wnconv")]
    kernel: KernelKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3e-5)]
    h: f64,
    /// Probe this many entries per tensor (0 = every entry).
    #[arg(long, default_value_t = 0)]
    per_tensor: usize,
    #[arg(long, default_value_t = 3)]
    kink_retries: usize,
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
    #[arg(long)]
    no_ippe: bool,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::GenerateData(a) => generate_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Viz(a) => viz_cmd(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}

fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

/// `a..b` (inclusive) or `a,b,c`.
pub fn parse_seeds(spec: &str) -> Result<Vec<u64>, String> {
    let num = |s: &str| s.trim().parse::<u64>().map_err(|e| format!("seed `{s}`: {e}"));
    let seeds = if let Some((a, b)) = spec.split_once("..") {
        let (a, b) = (num(a)?, num(b)?);
        if a > b {
            return Err(format!("empty seed range `{spec}`"));
        }
        (a..=b).collect()
    } else {
        spec.split(',').map(num).collect::<Result<Vec<_>, _>>()?
    };
    let mut seen = std::collections::HashSet::new();
    if let Some(d) = seeds.iter().find(|s| !seen.insert(**s)) {
        return Err(format!("seed {d} is listed twice"));
    }
    Ok(seeds)
}

fn generate_data(a: GenerateArgs) -> Result<(), CliError> {
    if a.size == 0 {
        return Err(CliError::Usage("--size must be positive".into()));
    }
    let cfg = DatasetConfig {
        seed: a.seed,
        size: a.size,
        height: a.height,
        width: a.width,
        difficulty: a.difficulty,
        ..DatasetConfig::default()
    };
    let mut data = generate_dataset(&cfg)?;
    if a.annotate || a.image_fraction.is_some() || a.object_fraction.is_some() {
        let d = AnnotationPolicy::default();
        let policy = AnnotationPolicy {
            image_fraction: a.image_fraction.unwrap_or(d.image_fraction),
            object_fraction: a.object_fraction.unwrap_or(d.object_fraction),
            seed: a.annotation_seed,
        };
        apply_annotation_policy(&mut data, &policy)?;
    }
    let out = a
        .out
        .unwrap_or_else(|| output_root().join("data").join(format!("{}-seed{}-n{}", a.difficulty, a.seed, a.size)));
    save_dataset(&data, &out)?;
    println!(
        "kind=data out={} samples={} annotated={} dropped_objects={} difficulty={}",
        out.display(),
        data.len(),
        data.annotated_count(),
        data.dropped_objects(),
        a.difficulty
    );
    Ok(())
}

fn resolve_config(a: &TrainArgs) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(io_error(path))?;
            ExperimentConfig::from_text(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(v) = &a.variant {
        apply_variant(&mut cfg, v).map_err(CliError::Usage)?;
    }
    for o in &a.overrides {
        cfg.apply_override(o).map_err(CliError::Usage)?;
    }
    if let Some(t) = a.threads {
        cfg.threads = t;
    }
    cfg.validate().map_err(CliError::Usage)?;
    Ok(cfg)
}

fn load_or_generate(path: Option<&Path>, config: DatasetConfig) -> Result<Dataset, CliError> {
    match path {
        Some(p) => Ok(load_dataset(p)?),
        None => Ok(generate_dataset(&config)?),
    }
}

fn check_dims(data: &Dataset, model: &ModelConfig, what: &str) -> Result<(), CliError> {
    let c = &data.config;
    if (c.height, c.width) != (model.height, model.width) {
        return Err(CliError::Data(format!(
            "{what} images are {}x{}, the model expects {}x{}",
            c.height, c.width, model.height, model.width
        )));
    }
    Ok(())
}

/// Training set with the configured annotation policy and a validation set
/// stripped of every annotation.
fn experiment_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset), CliError> {
    let d = &cfg.data;
    let mut train = load_or_generate(d.path.as_deref(), cfg.dataset_config(d.seed, d.size))?;
    apply_annotation_policy(&mut train, &cfg.annotation)?;
    let mut val = load_or_generate(d.val_path.as_deref(), cfg.dataset_config(d.val_seed, d.val_size))?;
    strip_annotations(&mut val);
    check_dims(&train, &cfg.train.model, "training")?;
    check_dims(&val, &cfg.train.model, "validation")?;
    Ok((train, val))
}

fn strip_annotations(data: &mut Dataset) {
    for s in &mut data.samples {
        s.clear_annotation();
    }
    data.policy = None;
}

fn train(a: TrainArgs) -> Result<(), CliError> {
    let seeds = parse_seeds(&a.seeds).map_err(CliError::Usage)?;
    if a.resume.is_some() && seeds.len() != 1 {
        return Err(CliError::Usage("--resume takes exactly one seed".into()));
    }
    if let Some(v) = &a.variant {
        if !VARIANTS.contains(&v.as_str()) {
            return Err(CliError::Usage(format!("unknown variant `{v}`; expected one of {}", VARIANTS.join(", "))));
        }
    }
    let cfg = resolve_config(&a)?;
    let label = a.label.clone().or_else(|| a.variant.clone()).unwrap_or_else(|| "custom".into());
    let out = a.out.clone().unwrap_or_else(|| output_root().join(&label));
    fs::create_dir_all(&out).map_err(io_error(&out))?;
    let resolved = cfg.to_text();
    let cfg_path = out.join("config.ini");
    fs::write(&cfg_path, &resolved).map_err(io_error(&cfg_path))?;

    let (train_data, val_data) = experiment_data(&cfg)?;
    let options = RunOptions {
        label: label.clone(),
        resume: a.resume.clone(),
        extra: json!({
            "variant": a.variant,
            "dtype": cfg.dtype,
            "resolved_config": resolved,
        }),
    };
    let sweep = match cfg.dtype {
        Dtype::F32 => train_seeds::<f32>(&cfg.train, &train_data, &val_data, &seeds, &out, &options, cfg.threads)?,
        Dtype::F64 => train_seeds::<f64>(&cfg.train, &train_data, &val_data, &seeds, &out, &options, cfg.threads)?,
    };
    let r = &sweep.report;
    println!(
        "kind=summary label={label} seeds={} ari={:.4}±{:.4} miou={:.4}±{:.4} out={}",
        seeds.len(),
        r.ari.mean,
        r.ari.std,
        r.miou.mean,
        r.miou.std,
        out.display()
    );
    Ok(())
}

fn load_checkpoint_model<T: Real>(path: &Path) -> Result<Model<T>, CliError> {
    Ok(Model::<T>::load(path)?)
}

/// Evaluation dataset with annotations removed; inference never sees points.
fn eval_dataset(path: &Path, model: &ModelConfig) -> Result<Dataset, CliError> {
    let mut data = load_dataset(path)?;
    strip_annotations(&mut data);
    check_dims(&data, model, "dataset")?;
    Ok(data)
}

fn eval_with<T: Real>(a: &EvalArgs) -> Result<String, CliError> {
    let model = load_checkpoint_model::<T>(&a.checkpoint)?;
    let data = eval_dataset(&a.dataset, &model.config)?;
    let metrics = evaluate(&model, &data, a.seed, a.samples)?;
    Ok(aggregate_seeds(&a.label, &[metrics]).map_err(|e| CliError::Data(e.to_string()))?.to_json())
}

fn checkpoint_kind(path: &Path) -> Result<Dtype, CliError> {
    match checkpoint_dtype(path)?.as_str() {
        "f32" => Ok(Dtype::F32),
        "f64" => Ok(Dtype::F64),
        other => Err(CliError::Data(format!("{}: unsupported dtype {other}", path.display()))),
    }
}

fn eval(a: EvalArgs) -> Result<(), CliError> {
    let report = match checkpoint_kind(&a.checkpoint)? {
        Dtype::F32 => eval_with::<f32>(&a)?,
        Dtype::F64 => eval_with::<f64>(&a)?,
    };
    if let Some(out) = &a.out {
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io_error(dir))?;
        }
        fs::write(out, &report).map_err(io_error(out))?;
    }
    println!("{report}");
    Ok(())
}

fn viz_with<T: Real>(a: &VizArgs, out: &Path) -> Result<(), CliError> {
    let model = load_checkpoint_model::<T>(&a.checkpoint)?;
    let data = eval_dataset(&a.dataset, &model.config)?;
    let exported = viz::export(&model, &data, &a.sample_ids, a.seed, out).map_err(CliError::Data)?;
    for s in &exported {
        println!("kind=viz sample={} png={}", s.id, out.join(format!("sample-{}.png", s.id)).display());
    }
    Ok(())
}

fn viz_cmd(a: VizArgs) -> Result<(), CliError> {
    if a.sample_ids.is_empty() {
        return Err(CliError::Usage("--sample-ids is empty".into()));
    }
    let out = a.out.clone().unwrap_or_else(|| output_root().join("viz"));
    match checkpoint_kind(&a.checkpoint)? {
        Dtype::F32 => viz_with::<f32>(&a, &out),
        Dtype::F64 => viz_with::<f64>(&a, &out),
    }
}

fn gradcheck(a: GradcheckArgs) -> Result<(), CliError> {
    if !(a.h > 0.0 && a.h.is_finite()) {
        return Err(CliError::Usage("--h must be positive".into()));
    }
    let mut config = ModelConfig::tiny();
    config.kernel.kind = a.kernel;
    config.ippe_enabled = !a.no_ippe;
    let fd = FdOptions {
        h: a.h,
        kink_retries: a.kink_retries,
    };
    let per_tensor = (a.per_tensor > 0).then_some(a.per_tensor);
    let report = loss_gradient_check(config, a.seed, per_tensor, fd)?;
    println!(
        "kind=gradcheck kernel={} seed={} checked={} refined={} max_rel_error={:e}",
        a.kernel.name(),
        a.seed,
        report.checked,
        report.refined,
        report.max_rel_error
    );
    if report.max_rel_error > a.tolerance {
        return Err(CliError::Numeric(format!(
            "max relative error {:e} exceeds {:e}",
            report.max_rel_error, a.tolerance
        )));
    }
    Ok(())
}
