use std::fs;
use std::hash::Hasher;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::trainer::{evaluate, Counters, StepLog, TrainConfig, Trainer};
use super::TrainError;
use crate::data::{AnnotationPolicy, Dataset, DatasetConfig};
use crate::metrics::{aggregate_seeds, MetricReport, SeedMetrics};
use crate::model::{Checkpoint, CheckpointError};
use crate::tensor::Real;

pub const RUN_FORMAT: &str = "slash-run";
pub const RUN_VERSION: u32 = 1;
const STATE_KIND: &str = "slash-train-state";

pub type StepRecord = StepLog;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub metrics: SeedMetrics,
}

/// Everything a finished (or resumed) run records about itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub format_version: u32,
    pub label: String,
    pub version: String,
    pub config_hash: String,
    pub config: TrainConfig,
    pub dataset_seed: u64,
    pub dataset: DatasetConfig,
    pub policy: Option<AnnotationPolicy>,
    pub val_dataset_seed: u64,
    pub model_seed: u64,
    pub trajectory: Vec<StepRecord>,
    pub evaluations: Vec<EvalRecord>,
    /// Relative to the run directory.
    pub checkpoints: Vec<String>,
    pub resumed_from: Option<String>,
    pub counters: Counters,
    pub final_metrics: Option<SeedMetrics>,
    /// Caller-supplied context, such as the resolved experiment config.
    #[serde(default)]
    pub extra: Value,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub label: String,
    pub resume: Option<PathBuf>,
    pub extra: Value,
}

fn fnv_hex(text: &str) -> String {
    let mut h = FnvHasher::default();
    h.write(text.as_bytes());
    format!("{:016x}", h.finish())
}

/// Stable hash of the full training config.
pub fn config_hash(config: &TrainConfig) -> String {
    fnv_hex(&serde_json::to_string(config).expect("config serializes"))
}

/// Hash of the fields a resumed run must share with its checkpoint; budget
/// and cadences may differ.
fn compat_hash(config: &TrainConfig) -> String {
    let v = json!({
        "model": config.model,
        "loss": config.loss,
        "schedule": config.schedule,
        "batch_size": config.batch_size,
    });
    fnv_hex(&v.to_string())
}

fn eval_due(config: &TrainConfig, step: u64) -> bool {
    step == 0 || (config.eval_every > 0 && step % config.eval_every == 0)
}

fn checkpoint_due(config: &TrainConfig, step: u64) -> bool {
    step == config.steps || (config.checkpoint_every > 0 && step % config.checkpoint_every == 0)
}

struct History {
    trajectory: Vec<StepRecord>,
    evaluations: Vec<EvalRecord>,
}

fn state_checkpoint<T: Real>(trainer: &Trainer<T>, hist: &History, dataset_seed: u64) -> Checkpoint<T> {
    let meta = json!({
        "kind": STATE_KIND,
        "train": trainer.config,
        "compat_hash": compat_hash(&trainer.config),
        "seed": trainer.seed,
        "dataset_seed": dataset_seed,
        "step": trainer.step(),
        "rng_word_pos": trainer.rng_word_pos().to_string(),
        "counters": trainer.counters,
        "trajectory": hist.trajectory,
        "evaluations": hist.evaluations,
    });
    let mut ckpt = Checkpoint::new(meta);
    trainer.model.write_checkpoint(&mut ckpt);
    let params = &trainer.model.params;
    for (i, name) in params.names().iter().enumerate() {
        ckpt.push(format!("adam/m/{name}"), trainer.adam.m[i].clone());
        ckpt.push(format!("adam/v/{name}"), trainer.adam.v[i].clone());
    }
    ckpt
}

fn field<'a, D: Deserialize<'a>>(meta: &'a Value, key: &str) -> Result<D, TrainError> {
    let v = meta
        .get(key)
        .ok_or_else(|| CheckpointError::Format(format!("training state lacks `{key}`")))?;
    D::deserialize(v).map_err(|e| CheckpointError::Format(format!("`{key}`: {e}")).into())
}

fn restore<T: Real>(
    trainer: &mut Trainer<T>,
    ckpt: &Checkpoint<T>,
    dataset_seed: u64,
) -> Result<History, TrainError> {
    let meta = &ckpt.meta;
    if meta.get("kind").and_then(Value::as_str) != Some(STATE_KIND) {
        return Err(TrainError::Incompatible("checkpoint holds no training state".into()));
    }
    let want = compat_hash(&trainer.config);
    let found: String = field(meta, "compat_hash")?;
    if found != want {
        return Err(TrainError::Incompatible(format!(
            "checkpoint was trained with config {found}, this run uses {want}"
        )));
    }
    let seed: u64 = field(meta, "seed")?;
    let ds: u64 = field(meta, "dataset_seed")?;
    if seed != trainer.seed || ds != dataset_seed {
        return Err(TrainError::Incompatible(format!(
            "checkpoint has seed {seed} on dataset {ds}, this run has seed {} on dataset {dataset_seed}",
            trainer.seed
        )));
    }
    let step: u64 = field(meta, "step")?;
    if step > trainer.config.steps {
        return Err(TrainError::Incompatible(format!(
            "checkpoint is at step {step}, past the budget of {}",
            trainer.config.steps
        )));
    }
    let restored = crate::model::Model::from_checkpoint(ckpt)?;
    trainer.model.params = restored.params;
    let names = trainer.model.params.names().to_vec();
    for (i, name) in names.iter().enumerate() {
        for (kind, slot) in [("m", &mut trainer.adam.m[i]), ("v", &mut trainer.adam.v[i])] {
            let key = format!("adam/{kind}/{name}");
            let t = ckpt.get(&key).ok_or_else(|| CheckpointError::Mismatch(format!("missing {key}")))?;
            if t.shape() != slot.shape() {
                return Err(CheckpointError::Mismatch(format!("{key} has shape {:?}", t.shape())).into());
            }
            *slot = t.clone();
        }
    }
    trainer.adam.step = step;
    let pos: String = field(meta, "rng_word_pos")?;
    let pos: u128 = pos
        .parse()
        .map_err(|_| CheckpointError::Format(format!("bad rng position {pos}")))?;
    trainer.set_rng_word_pos(pos);
    trainer.counters = field(meta, "counters")?;
    let mut evaluations: Vec<EvalRecord> = field(meta, "evaluations")?;
    evaluations.retain(|e| eval_due(&trainer.config, e.step));
    Ok(History {
        trajectory: field(meta, "trajectory")?,
        evaluations,
    })
}

#[derive(Serialize)]
struct CsvRow {
    step: u64,
    lr: Option<f64>,
    loss: Option<f64>,
    recon: Option<f64>,
    point: Option<f64>,
    val_ari: Option<f64>,
    val_miou: Option<f64>,
    val_fg_ari: Option<f64>,
}

fn metrics_csv(m: &RunManifest) -> Result<Vec<u8>, TrainError> {
    let mut steps: Vec<u64> = m.trajectory.iter().map(|t| t.step).chain(m.evaluations.iter().map(|e| e.step)).collect();
    steps.sort_unstable();
    steps.dedup();
    let mut w = csv::Writer::from_writer(Vec::new());
    for s in steps {
        let t = m.trajectory.iter().find(|t| t.step == s);
        let e = m.evaluations.iter().find(|e| e.step == s).map(|e| &e.metrics);
        w.serialize(CsvRow {
            step: s,
            lr: t.map(|t| t.lr),
            loss: t.map(|t| t.loss),
            recon: t.map(|t| t.recon),
            point: t.map(|t| t.point),
            val_ari: e.map(|e| e.ari),
            val_miou: e.map(|e| e.miou),
            val_fg_ari: e.and_then(|e| e.fg_ari),
        })
        .map_err(|e| TrainError::Config(e.to_string()))?;
    }
    w.into_inner().map_err(|e| TrainError::Config(e.to_string()))
}

fn write_outputs(dir: &Path, m: &RunManifest) -> Result<(), TrainError> {
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(m).expect("manifest serializes");
    fs::write(&path, text).map_err(TrainError::io(&path))?;
    let path = dir.join("metrics.csv");
    fs::write(&path, metrics_csv(m)?).map_err(TrainError::io(&path))
}

pub fn load_manifest(path: &Path) -> Result<RunManifest, TrainError> {
    let text = fs::read_to_string(path).map_err(TrainError::io(path))?;
    let m: RunManifest =
        serde_json::from_str(&text).map_err(|e| TrainError::Config(format!("{}: {e}", path.display())))?;
    if m.format != RUN_FORMAT || m.format_version != RUN_VERSION {
        return Err(TrainError::Incompatible(format!(
            "{}: {} v{} is not {RUN_FORMAT} v{RUN_VERSION}",
            path.display(),
            m.format,
            m.format_version
        )));
    }
    Ok(m)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".into(), |v| format!("{v:.6}"))
}

fn log_eval(label: &str, seed: u64, r: &EvalRecord) {
    println!(
        "kind=eval label={label} seed={seed} step={} ari={:.6} miou={:.6} fg_ari={}",
        r.step,
        r.metrics.ari,
        r.metrics.miou,
        fmt_opt(r.metrics.fg_ari)
    );
}

/// Trains one seed to the configured budget inside `out_dir`, writing
/// `manifest.json`, `metrics.csv` and `checkpoints/step-N.ckpt`.
///
/// Validation runs at step 0, on the `eval_every` cadence and at the end.
/// With `options.resume` the model, optimizer, random stream and history
/// are restored from a training-state checkpoint first.
pub fn train_run<T: Real>(
    config: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    seed: u64,
    out_dir: &Path,
    options: &RunOptions,
) -> Result<RunManifest, TrainError> {
    config.validate()?;
    let mc = &config.model;
    for (name, d) in [("training", train), ("validation", val)] {
        if d.is_empty() {
            return Err(TrainError::Config(format!("{name} set is empty")));
        }
        if (d.config.height, d.config.width) != (mc.height, mc.width) {
            return Err(TrainError::Config(format!(
                "{name} images are {}x{}, the model expects {}x{}",
                d.config.height, d.config.width, mc.height, mc.width
            )));
        }
    }
    let ckpt_dir = out_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(TrainError::io(&ckpt_dir))?;

    let dataset_seed = train.config.seed;
    let mut trainer = Trainer::<T>::new(config.clone(), seed)?;
    let log = config.log_every > 0;
    let label = options.label.as_str();
    let mut hist = match &options.resume {
        Some(path) => restore(&mut trainer, &Checkpoint::load(path)?, dataset_seed)?,
        None => History {
            trajectory: Vec::new(),
            evaluations: Vec::new(),
        },
    };
    let eval_at = |trainer: &Trainer<T>, hist: &mut History| -> Result<(), TrainError> {
        let metrics = evaluate(&trainer.model, val, seed, config.eval_samples)?;
        let rec = EvalRecord {
            step: trainer.step(),
            metrics,
        };
        if log {
            log_eval(label, seed, &rec);
        }
        hist.evaluations.push(rec);
        Ok(())
    };
    if trainer.step() == 0 && hist.evaluations.is_empty() {
        eval_at(&trainer, &mut hist)?;
    }

    let mut manifest = RunManifest {
        format: RUN_FORMAT.into(),
        format_version: RUN_VERSION,
        label: label.into(),
        version: format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")),
        config_hash: config_hash(config),
        config: config.clone(),
        dataset_seed,
        dataset: train.config.clone(),
        policy: train.policy.clone(),
        val_dataset_seed: val.config.seed,
        model_seed: seed,
        trajectory: Vec::new(),
        evaluations: Vec::new(),
        checkpoints: Vec::new(),
        resumed_from: options.resume.as_ref().map(|p| p.display().to_string()),
        counters: trainer.counters,
        final_metrics: None,
        extra: options.extra.clone(),
    };

    while trainer.step() < config.steps {
        let rec = trainer.train_step(train)?;
        let step = rec.step;
        if log && (step % config.log_every == 0 || step == config.steps) {
            println!(
                "kind=train label={label} seed={seed} step={step} lr={:.6e} loss={:.6} recon={:.6} point={:.6}",
                rec.lr, rec.loss, rec.recon, rec.point
            );
        }
        hist.trajectory.push(rec);
        if eval_due(config, step) || step == config.steps {
            eval_at(&trainer, &mut hist)?;
        }
        if checkpoint_due(config, step) {
            let rel = format!("checkpoints/step-{step}.ckpt");
            state_checkpoint(&trainer, &hist, dataset_seed).save(&out_dir.join(&rel))?;
            manifest.checkpoints.push(rel);
            manifest.trajectory.clone_from(&hist.trajectory);
            manifest.evaluations.clone_from(&hist.evaluations);
            manifest.counters = trainer.counters;
            write_outputs(out_dir, &manifest)?;
        }
    }
    if hist.evaluations.last().is_none_or(|e| e.step != trainer.step()) {
        eval_at(&trainer, &mut hist)?;
    }
    manifest.final_metrics = hist.evaluations.last().map(|e| e.metrics.clone());
    manifest.trajectory = hist.trajectory;
    manifest.evaluations = hist.evaluations;
    manifest.counters = trainer.counters;
    write_outputs(out_dir, &manifest)?;
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub manifests: Vec<RunManifest>,
    pub report: MetricReport,
}

/// Independent runs for each seed under `out_root/seed-<s>`, at most
/// `threads` at a time, then `aggregate.json` and `aggregate.csv` over their
/// final validation metrics.
pub fn train_seeds<T: Real>(
    config: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    seeds: &[u64],
    out_root: &Path,
    options: &RunOptions,
    threads: usize,
) -> Result<SweepResult, TrainError> {
    if seeds.is_empty() {
        return Err(TrainError::Config("no seeds to run".into()));
    }
    if options.resume.is_some() && seeds.len() != 1 {
        return Err(TrainError::Config("resuming takes exactly one seed".into()));
    }
    fs::create_dir_all(out_root).map_err(TrainError::io(out_root))?;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunManifest, TrainError>>>> =
        Mutex::new((0..seeds.len()).map(|_| None).collect());
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(&seed) = seeds.get(i) else { break };
        let dir = out_root.join(format!("seed-{seed}"));
        let r = train_run::<T>(config, train, val, seed, &dir, options);
        results.lock().expect("no worker panicked")[i] = Some(r);
    };
    std::thread::scope(|s| {
        for _ in 1..threads.clamp(1, seeds.len()) {
            s.spawn(worker);
        }
        worker();
    });
    let manifests = results
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every seed ran"))
        .collect::<Result<Vec<_>, _>>()?;
    let per_seed: Vec<SeedMetrics> = manifests
        .iter()
        .map(|m| m.final_metrics.clone().expect("every run evaluates at the end"))
        .collect();
    let report = aggregate_seeds(&options.label, &per_seed)?;
    let path = out_root.join("aggregate.json");
    fs::write(&path, report.to_json()).map_err(TrainError::io(&path))?;
    let path = out_root.join("aggregate.csv");
    fs::write(&path, MetricReport::to_csv(std::slice::from_ref(&report))).map_err(TrainError::io(&path))?;
    Ok(SweepResult { manifests, report })
}
