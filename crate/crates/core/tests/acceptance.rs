//! Acceptance criteria. Each prints one `PASS`, `FAIL` or `NOT RUN` line to
//! stdout (uncaptured) and the target fails if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slash::data::{apply_annotation_policy, generate_dataset, AnnotationPolicy, BackgroundKind, DatasetConfig, RenderedSample};
use slash::metrics::{ari, constructed_bleeding_case, fg_ari, hungarian, miou, BleedingReport, CostMatrix, Segmentation};
use slash::model::{
    ark_apply, plain_slot_attention_forward, plain_slot_attention_infer, ForwardInput, KernelKind, KernelVariant, Mode,
    Model, ModelConfig,
};
use slash::tensor::{FdOptions, Tape, Tensor};
use slash::training::{loss_gradient_check, train_seeds, RunOptions, Schedule, TrainConfig, Trainer};

type Check = Result<String, String>;

fn say(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

/// Runs one criterion, catching panics, and reports it.
fn criterion(name: &str, f: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let r = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into());
        Err(format!("panic: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    match &r {
        Ok(d) => say(&format!("acceptance PASS    {name} ({secs:.1}s): {d}")),
        Err(d) => say(&format!("acceptance FAIL    {name} ({secs:.1}s): {d}")),
    }
    r.is_ok()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration, what: &str) -> Result<(), String> {
    ensure(elapsed <= limit, || format!("{what} took {:.1}s, limit {}s", elapsed.as_secs_f64(), limit.as_secs()))
}

// ---------- oracles ----------

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

/// Minimum over every injective assignment of the shorter side, summed in
/// row order.
fn brute_force_assignment(rows: usize, cols: usize, cost: &[f64]) -> f64 {
    let n = rows.max(cols);
    let mut best = f64::INFINITY;
    for p in permutations(n) {
        let mut total = 0.0;
        for (r, &c) in p.iter().enumerate().take(rows) {
            if c < cols {
                total += cost[r * cols + c];
            }
        }
        best = best.min(total);
    }
    best
}

fn choose2(n: u64) -> f64 {
    (n * n.saturating_sub(1) / 2) as f64
}

fn same_partition(pairs: &[(u32, u32)]) -> bool {
    let (mut ab, mut ba) = (BTreeMap::new(), BTreeMap::new());
    pairs.iter().all(|&(a, b)| *ab.entry(a).or_insert(b) == b && *ba.entry(b).or_insert(a) == a)
}

/// Textbook ARI from the contingency table.
fn ari_oracle(pairs: &[(u32, u32)]) -> f64 {
    let mut table: BTreeMap<(u32, u32), u64> = BTreeMap::new();
    let (mut rows, mut cols): (BTreeMap<u32, u64>, BTreeMap<u32, u64>) = Default::default();
    for &(a, b) in pairs {
        *table.entry((a, b)).or_default() += 1;
        *rows.entry(a).or_default() += 1;
        *cols.entry(b).or_default() += 1;
    }
    let index: f64 = table.values().map(|&v| choose2(v)).sum();
    let a: f64 = rows.values().map(|&v| choose2(v)).sum();
    let b: f64 = cols.values().map(|&v| choose2(v)).sum();
    let expected = a * b / choose2(pairs.len() as u64);
    let max = (a + b) / 2.0;
    if max == expected {
        return if same_partition(pairs) { 1.0 } else { 0.0 };
    }
    (index - expected) / (max - expected)
}

/// Best total IoU over partial injections of ground-truth segments into
/// predicted ones, divided by the ground-truth segment count.
fn miou_oracle(pred: &[u32], gt: &[u32]) -> f64 {
    let pids: Vec<u32> = pred.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let gids: Vec<u32> = gt.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let iou = |p: u32, g: u32| {
        let inter = pred.iter().zip(gt).filter(|&(&a, &b)| a == p && b == g).count();
        let union = pred.iter().zip(gt).filter(|&(&a, &b)| a == p || b == g).count();
        inter as f64 / union as f64
    };
    fn best(g: usize, used: &mut Vec<bool>, gids: &[u32], pids: &[u32], iou: &dyn Fn(u32, u32) -> f64) -> f64 {
        if g == gids.len() {
            return 0.0;
        }
        let mut b = best(g + 1, used, gids, pids, iou);
        for (i, &p) in pids.iter().enumerate() {
            if !used[i] {
                used[i] = true;
                b = b.max(iou(p, gids[g]) + best(g + 1, used, gids, pids, iou));
                used[i] = false;
            }
        }
        b
    }
    best(0, &mut vec![false; pids.len()], &gids, &pids, &iou) / gids.len() as f64
}

fn oracle_equivalence() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..200 {
        let (rows, cols) = (rng.random_range(1..=7), rng.random_range(1..=7));
        let integer = case % 2 == 0;
        let cost: Vec<f64> = (0..rows * cols)
            .map(|_| if integer { rng.random_range(0..10) as f64 } else { rng.random_range(-5.0..5.0) })
            .collect();
        let a = hungarian(&CostMatrix::new(rows, cols, cost.clone()).unwrap()).unwrap();
        let want = brute_force_assignment(rows, cols, &cost);
        let mut pairs: Vec<(usize, usize)> = a.pairs().collect();
        pairs.sort();
        let got: f64 = pairs.iter().map(|&(r, c)| cost[r * cols + c]).sum();
        ensure(pairs.len() == rows.min(cols), || format!("case {case}: {} pairs for {rows}x{cols}", pairs.len()))?;
        ensure(got == want, || format!("case {case} ({rows}x{cols}): hungarian {got}, brute force {want}"))?;
    }
    let mut worst = 0.0f64;
    for case in 0..100 {
        let (kp, kg) = (rng.random_range(1..=5u32), rng.random_range(2..=5u32));
        let pred: Vec<u32> = (0..64).map(|_| rng.random_range(0..kp)).collect();
        let mut gt: Vec<u32> = (0..64).map(|_| rng.random_range(0..kg)).collect();
        gt[rng.random_range(0..64)] = 1;
        if case % 10 == 0 {
            gt = pred.iter().map(|&p| (p * 7 + 1) % 11).collect();
        }
        let (ps, gs) = (Segmentation::new(8, 8, pred.clone()).unwrap(), Segmentation::new(8, 8, gt.clone()).unwrap());
        let all: Vec<(u32, u32)> = pred.iter().copied().zip(gt.iter().copied()).collect();
        let fg: Vec<(u32, u32)> = all.iter().copied().filter(|&(_, g)| g != 0).collect();
        for (name, got, want) in [
            ("ari", ari(&ps, &gs).unwrap(), ari_oracle(&all)),
            ("fg_ari", fg_ari(&ps, &gs).unwrap(), ari_oracle(&fg)),
            ("miou", miou(&ps, &gs).unwrap(), miou_oracle(&pred, &gt)),
        ] {
            let e = (got - want).abs();
            worst = worst.max(e);
            ensure(e <= 1e-10, || format!("segmentation {case}: {name} {got} vs oracle {want}"))?;
        }
    }
    within(start.elapsed(), Duration::from_secs(60), "oracle suite")?;
    Ok(format!("200 assignments exact, 100 segmentations max |err| {worst:.1e}"))
}

fn gradient_suite() -> Check {
    let start = Instant::now();
    let mut detail = Vec::new();
    for seed in [0, 1] {
        let fd = FdOptions { h: 3e-5, kink_retries: 3 };
        let r = loss_gradient_check(ModelConfig::tiny(), seed, None, fd).map_err(|e| e.to_string())?;
        ensure(r.max_rel_error <= 1e-3, || {
            format!("seed {seed}: max rel error {:.3e} at {:?} (tape {}, fd {})", r.max_rel_error, r.worst, r.tape_grad, r.numeric_grad)
        })?;
        detail.push(format!("seed {seed}: {} entries, {} refined, max {:.2e}", r.checked, r.refined, r.max_rel_error));
    }
    within(start.elapsed(), Duration::from_secs(300), "gradient suite")?;
    Ok(detail.join("; "))
}

fn random_sample(rng: &mut ChaCha8Rng, h: usize, w: usize) -> RenderedSample {
    let n = rng.random_range(1..=2);
    let gt_points: Vec<[f64; 2]> = (0..n).map(|_| [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)]).collect();
    let annotated = rng.random_bool(0.5);
    RenderedSample {
        height: h,
        width: w,
        pixels: (0..h * w * 3).map(|_| rng.random()).collect(),
        segmentation: Segmentation::new(h, w, vec![0; h * w]).unwrap(),
        annotated_objects: if annotated { (1..=n).collect() } else { Vec::new() },
        gt_points,
        annotated,
        dropped_objects: 0,
    }
}

fn constraint_suite() -> Check {
    let config = TrainConfig {
        model: ModelConfig::tiny(),
        schedule: Schedule { base_lr: 1e-2, warmup_steps: 0, decay_half_life: 0 },
        batch_size: 2,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::<f32>::new(config, 3).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let (mut worst_sum, mut min_entry, mut moved) = (0.0f64, f64::INFINITY, 0.0f64);
    let initial = trainer.model.ark_kernel().unwrap().to_f64_vec();
    for step in 1..=500 {
        let batch = [random_sample(&mut rng, 8, 8), random_sample(&mut rng, 8, 8)];
        let refs: Vec<&RenderedSample> = batch.iter().collect();
        trainer.train_on(&refs, &[0, 1]).map_err(|e| format!("step {step}: {e}"))?;
        let k = trainer.model.ark_kernel().unwrap().to_f64_vec();
        let sum: f64 = k.iter().sum();
        worst_sum = worst_sum.max((sum - 1.0).abs());
        min_entry = k.iter().copied().fold(min_entry, f64::min);
        ensure((sum - 1.0).abs() <= 1e-6 && k.iter().all(|&v| v >= 0.0), || format!("step {step}: kernel {k:?}"))?;
        moved = moved.max(k.iter().zip(&initial).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    ensure(moved > 1e-3, || format!("kernel barely trained (max change {moved:.1e})"))?;

    let mut worst = [0.0f64; 3];
    let kinds = [KernelKind::Wnconv, KernelKind::Gaussian, KernelKind::Identity, KernelKind::Temperature, KernelKind::Conv];
    for f in 0..50 {
        let kind = kinds[f % kinds.len()];
        let cfg = ModelConfig {
            height: 16,
            width: 16,
            slots: 3 + f % 5,
            kernel: KernelVariant { kind, tau: [0.5, 1.0, 2.0][f % 3], ..KernelVariant::default() },
            ippe_enabled: f % 2 == 0,
            ..ModelConfig::tiny()
        };
        let model = Model::<f32>::new(cfg, 100 + f as u64).map_err(|e| e.to_string())?;
        let image = Tensor::from_fn(&[16, 16, 3], |_| rng.random_range(0.0f32..1.0));
        let pred = model.infer(&image, &model.sample_noise(&mut rng)).map_err(|e| e.to_string())?;
        let k = model.config.slots;
        for it in &pred.iterations {
            let (a, wt) = (it.attn.to_f64_vec(), it.weights.to_f64_vec());
            for row in a.chunks(k) {
                worst[0] = worst[0].max((row.iter().sum::<f64>() - 1.0).abs());
            }
            for j in 0..k {
                worst[1] = worst[1].max((wt.iter().skip(j).step_by(k).sum::<f64>() - 1.0).abs());
            }
        }
        let m = pred.mixture.to_f64_vec();
        for px in 0..256 {
            worst[2] = worst[2].max(((0..k).map(|j| m[j * 256 + px]).sum::<f64>() - 1.0).abs());
        }
    }
    ensure(worst.iter().all(|&e| e <= 1e-5), || format!("sum errors attn/W/mixture {worst:?}"))?;
    Ok(format!(
        "500 steps: kernel sum err ≤ {worst_sum:.1e}, min entry {min_entry:.2e}; 50 forwards: attn {:.1e}, W {:.1e}, mixture {:.1e}",
        worst[0], worst[1], worst[2]
    ))
}

fn reduction() -> Check {
    for seed in 0..20u64 {
        let cfg = ModelConfig {
            kernel: KernelVariant { kind: KernelKind::Identity, tau: 1.0, ..KernelVariant::default() },
            ippe_enabled: false,
            height: 32,
            width: 32,
            ..ModelConfig::default()
        };
        let model = Model::<f32>::new(cfg, seed).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 500);
        let image = Tensor::from_fn(&[32, 32, 3], |_| rng.random_range(0.0f32..1.0));
        let noise = model.sample_noise(&mut rng);
        let a = model.infer(&image, &noise).map_err(|e| e.to_string())?;
        let b = plain_slot_attention_infer(&model, &image, &noise).map_err(|e| e.to_string())?;
        let same = a.slots.bit_eq(&b.slots)
            && a.reconstruction.bit_eq(&b.reconstruction)
            && a.mixture.bit_eq(&b.mixture)
            && a.per_slot_rgb.bit_eq(&b.per_slot_rgb)
            && a.iterations.iter().zip(&b.iterations).all(|(x, y)| {
                x.logits.bit_eq(&y.logits) && x.attn.bit_eq(&y.attn) && x.weights.bit_eq(&y.weights)
            });
        ensure(same, || format!("seed {seed}: inference differs from plain slot attention"))?;

        let (mut t1, mut t2) = (Tape::new(), Tape::new());
        let (p1, p2) = (model.params.bind(&mut t1), model.params.bind(&mut t2));
        let input = ForwardInput { image: &image, noise: &noise, points: None, mode: Mode::Train };
        let o1 = model.forward(&mut t1, &p1, &input).map_err(|e| e.to_string())?;
        let o2 = plain_slot_attention_forward(&model, &mut t2, &p2, &image, &noise).map_err(|e| e.to_string())?;
        let (r1, r2) = (t1.value(o1.decoder.reconstruction), t2.value(o2.decoder.reconstruction));
        ensure(r1.bit_eq(r2), || format!("seed {seed}: training forward differs"))?;
    }
    Ok("20 seeds bit-identical (inference and training forward, 32x32, K=7)".into())
}

fn ark_contraction() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for case in 0..100 {
        let (h, w, k) = (rng.random_range(1..=12), rng.random_range(1..=12), rng.random_range(1..=4));
        let s = [1, 3, 5, 7][rng.random_range(0..4)];
        let scale = [1e-3, 1.0, 1e3][case % 3];
        let logits = Tensor::<f64>::from_fn(&[h * w, k], |_| rng.random_range(-1.0..1.0) * scale);
        let raw: Vec<f64> = (0..s * s).map(|_| if rng.random_bool(0.3) { 0.0 } else { rng.random::<f64>() }).collect();
        let total: f64 = raw.iter().sum();
        let kernel = if total > 0.0 {
            Tensor::from_fn(&[s, s], |i| raw[i] / total)
        } else {
            Tensor::from_fn(&[s, s], |i| if i == 0 { 1.0 } else { 0.0 })
        };
        let mut tape = Tape::new();
        let (l, kv) = (tape.constant(logits.clone()), tape.constant(kernel));
        let out = ark_apply(&mut tape, l, kv, h, w).map_err(|e| e.to_string())?;
        let (a, b) = (logits.to_f64_vec(), tape.value(out).to_f64_vec());
        for j in 0..k {
            let col = |d: &[f64]| d.iter().skip(j).step_by(k).copied().collect::<Vec<_>>();
            let (i, o) = (col(&a), col(&b));
            let (imax, imin) = (i.iter().copied().fold(f64::MIN, f64::max), i.iter().copied().fold(f64::MAX, f64::min));
            let (omax, omin) = (o.iter().copied().fold(f64::MIN, f64::max), o.iter().copied().fold(f64::MAX, f64::min));
            ensure(omax <= imax && omin >= imin, || {
                format!("case {case} map {j}: output [{omin}, {omax}] escapes input [{imin}, {imax}]")
            })?;
        }
    }
    Ok("100 maps, output max/min within input max/min with no tolerance".into())
}

fn bleeding_demonstration() -> Check {
    let (pred, gt) = constructed_bleeding_case(32, 3);
    let r = BleedingReport::compute(&pred, &gt).map_err(|e| e.to_string())?;
    ensure(r.fg_ari == 1.0 && r.ari <= 0.9 && r.miou <= 0.9, || format!("{r:?}"))?;
    Ok(format!("fg_ari = {} exactly, ari = {:.4}, miou = {:.4}", r.fg_ari, r.ari, r.miou))
}

fn annotation_exactness() -> Check {
    let mut data = generate_dataset(&DatasetConfig { size: 1000, ..DatasetConfig::default() }).map_err(|e| e.to_string())?;
    apply_annotation_policy(&mut data, &AnnotationPolicy::default()).map_err(|e| e.to_string())?;
    let annotated = data.annotated_count();
    ensure(annotated == 100, || format!("{annotated} annotated images, expected 100"))?;
    let fours: Vec<&RenderedSample> = data.samples.iter().filter(|s| s.annotated && s.num_objects() == 4).collect();
    ensure(!fours.is_empty(), || "no annotated 4-object image to inspect".into())?;
    ensure(fours.iter().all(|s| s.annotated_objects.len() == 3), || "a 4-object image without 3 annotated objects".into())?;
    Ok(format!("100/1000 annotated; {} annotated 4-object images, each with 3 points", fours.len()))
}

const DETERMINISM_CONFIG: &str = "\
[model]
height = 16
width = 16
slots = 4
slot_dim = 16
enc_dim = 16
attn_dim = 16
iterations = 2
conv_channels = 8
conv_kernel = 3
mlp_hidden = 32

[kernel]
size = 3

[train]
steps = 100
batch_size = 4
eval_every = 50
checkpoint_every = 50
log_every = 0
eval_samples = 8
threads = 1

[data]
size = 64
val_size = 8
min_objects = 1
max_objects = 4
min_spacing = 0.2

[annotation]
image_fraction = 0.25
";

fn determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    fs::write(tmp.path().join("c.ini"), DETERMINISM_CONFIG).map_err(|e| e.to_string())?;
    let run = |out: &str| -> Result<Vec<u8>, String> {
        let o = Command::new(env!("CARGO_BIN_EXE_slash"))
            .args(["train", "--config", "c.ini", "--variant", "slash", "--seeds", "0..0", "--out", out])
            .current_dir(tmp.path())
            .output()
            .map_err(|e| e.to_string())?;
        ensure(o.status.success(), || String::from_utf8_lossy(&o.stderr).into_owned())?;
        fs::read(tmp.path().join(out).join("seed-0/metrics.csv")).map_err(|e| e.to_string())
    };
    let (a, b) = (run("a")?, run("b")?);
    let rows = a.iter().filter(|&&c| c == b'\n').count() - 1;
    ensure(rows >= 100, || format!("metrics.csv has {rows} rows"))?;
    ensure(a == b, || "metrics.csv differs between invocations".into())?;
    Ok(format!("two CLI runs of 100 steps: metrics.csv ({rows} rows, {} bytes) identical", a.len()))
}

#[test]
fn acceptance_criteria() {
    say("acceptance NOTE    paper-scale tables: not reproducible at desk scale; covered by the property and relative criteria below");
    let results = [
        criterion("oracle equivalence", oracle_equivalence),
        criterion("gradient suite", gradient_suite),
        criterion("constraint suite", constraint_suite),
        criterion("reduction to plain slot attention", reduction),
        criterion("kernel contraction", ark_contraction),
        criterion("bleeding-metric demonstration", bleeding_demonstration),
        criterion("annotation policy exactness", annotation_exactness),
        criterion("determinism", determinism),
    ];
    say(
        "acceptance NOT RUN stability (10 seeds x 20k steps, 5k 64x64 stripes images, SLASH vs plain SA): \
         needs hours on many cores; run `cargo test --release --test acceptance -- --ignored stability`",
    );
    let failed = results.iter().filter(|&&ok| !ok).count();
    assert_eq!(failed, 0, "{failed} acceptance criteria failed");
}

/// Desk-scale stability protocol: full SLASH against plain slot attention,
/// 10 seeds each on 5000 stripes images at 64×64 for 20k steps.
#[test]
#[ignore = "hours of compute; run explicitly"]
fn stability() {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let root = std::env::var_os("SLASH_OUTPUT_ROOT").map_or_else(|| std::env::temp_dir().join("slash-stability"), Into::into);
    let root: &Path = &root;
    let dataset = |seed, size| DatasetConfig { seed, size, difficulty: BackgroundKind::Stripes, ..DatasetConfig::default() };
    let mut train = generate_dataset(&dataset(0, 5000)).unwrap();
    apply_annotation_policy(&mut train, &AnnotationPolicy::default()).unwrap();
    let val = generate_dataset(&dataset(1, 1000)).unwrap();
    let seeds: Vec<u64> = (0..10).collect();
    let sweep = |label: &str, model: ModelConfig| {
        let config = TrainConfig { model, ..TrainConfig::default() };
        let options = RunOptions { label: label.into(), ..RunOptions::default() };
        train_seeds::<f32>(&config, &train, &val, &seeds, &root.join(label), &options, threads).unwrap().report
    };
    let slash = sweep("slash", ModelConfig::default());
    let sa = sweep("sa", ModelConfig::default().plain());
    let line = |r: &slash::metrics::MetricReport| {
        format!("{}: ari {:.4}±{:.4} miou {:.4}±{:.4}", r.label, r.ari.mean, r.ari.std, r.miou.mean, r.miou.std)
    };
    let better = slash.ari.mean > sa.ari.mean && slash.miou.mean > sa.miou.mean;
    let steadier = slash.ari.std < sa.ari.std;
    let verdict = if better && steadier { "PASS" } else { "FAIL" };
    say(&format!("acceptance {verdict}    stability: {} vs {}", line(&slash), line(&sa)));
    assert!(better && steadier);
}
