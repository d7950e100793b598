use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = "\
[model]
height = 8
width = 8
slots = 3
slot_dim = 16
enc_dim = 16
attn_dim = 16
iterations = 2
conv_channels = 8
conv_kernel = 3
mlp_hidden = 16

[kernel]
size = 3

[train]
steps = 4
batch_size = 2
eval_every = 2
checkpoint_every = 2
log_every = 0
eval_samples = 4

[data]
size = 12
val_size = 4
min_objects = 1
max_objects = 3
min_spacing = 0.3
min_size = 0.15
max_size = 0.2
";

fn slash(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slash"))
        .args(args)
        .current_dir(root)
        .env("SLASH_OUTPUT_ROOT", root.join("out"))
        .output()
        .expect("binary runs")
}

fn ok(root: &Path, args: &[&str]) -> String {
    let o = slash(root, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn setup() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("tiny.ini"), TINY).unwrap();
    tmp
}

fn tiny_dataset(root: &Path, name: &str) {
    ok(root, &["generate-data", "--seed", "5", "--size", "5", "--height", "8", "--width", "8", "--out", name]);
}

#[test]
fn generate_data_is_reproducible_and_records_the_background() {
    let tmp = setup();
    let root = tmp.path();
    for out in ["a", "b"] {
        ok(root, &["generate-data", "--seed", "2", "--size", "4", "--height", "16", "--width", "16", "--difficulty", "texture", "--out", out]);
    }
    assert_eq!(dir_bytes(&root.join("a")), dir_bytes(&root.join("b")));
    let manifest: Value = serde_json::from_str(&fs::read_to_string(root.join("a/manifest.json")).unwrap()).unwrap();
    assert!(manifest.to_string().contains("\"texture\""), "{manifest}");
}

#[test]
fn usage_errors_exit_with_one() {
    let tmp = setup();
    let root = tmp.path();
    assert_eq!(slash(root, &["generate-data", "--size", "0"]).status.code(), Some(1));
    assert_eq!(slash(root, &["train", "--variant", "nope"]).status.code(), Some(1));
    assert_eq!(slash(root, &["train", "--config", "tiny.ini", "--set", "model.slots=1"]).status.code(), Some(1));
    assert_eq!(slash(root, &["train", "--seeds", "0..1", "--resume", "x.ckpt"]).status.code(), Some(1));
    assert!(!root.join("out").exists());
}

#[test]
fn missing_inputs_exit_with_two() {
    let tmp = setup();
    let root = tmp.path();
    tiny_dataset(root, "d");
    let o = slash(root, &["eval", "--checkpoint", "missing.ckpt", "--dataset", "d"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.ckpt"));
    assert_eq!(slash(root, &["train", "--config", "absent.ini"]).status.code(), Some(2));
}

#[test]
fn seed_sweep_writes_manifests_and_an_aggregate() {
    let tmp = setup();
    let root = tmp.path();
    let stdout = ok(root, &["train", "--config", "tiny.ini", "--seeds", "0..1", "--variant", "slash"]);
    assert!(stdout.contains("kind=summary label=slash seeds=2"), "{stdout}");
    let run = root.join("out/slash");
    for s in 0..2 {
        let m: Value = serde_json::from_str(&fs::read_to_string(run.join(format!("seed-{s}/manifest.json"))).unwrap()).unwrap();
        assert_eq!(m["label"], "slash");
        assert_eq!(m["model_seed"], s);
        assert!(m["extra"]["resolved_config"].as_str().unwrap().contains("ippe = true"));
    }
    let csv = fs::read_to_string(run.join("aggregate.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| l.starts_with("slash,")).count(), 3, "{csv}");
    let echoed = fs::read_to_string(run.join("config.ini")).unwrap();
    assert!(echoed.contains("kind = wnconv") && echoed.contains("steps = 4"));
}

#[test]
fn evaluation_is_repeatable() {
    let tmp = setup();
    let root = tmp.path();
    ok(root, &["train", "--config", "tiny.ini", "--out", "run"]);
    tiny_dataset(root, "d");
    let args = ["eval", "--checkpoint", "run/seed-0/checkpoints/step-4.ckpt", "--dataset", "d"];
    let (a, b) = (ok(root, &args), ok(root, &args));
    assert_eq!(a, b);
    let report: Value = serde_json::from_str(&a).unwrap();
    assert_eq!(report["per_seed"][0]["samples"], 5);
}

fn viz_arrays(root: &Path, variant: &str) -> Value {
    let run = format!("run-{variant}");
    ok(root, &["train", "--config", "tiny.ini", "--variant", variant, "--out", &run]);
    let ckpt = format!("{run}/seed-0/checkpoints/step-4.ckpt");
    let out = format!("viz-{variant}");
    ok(root, &["viz", "--checkpoint", &ckpt, "--dataset", "d", "--sample-ids", "0,3", "--out", &out]);
    let png = image::open(root.join(&out).join("sample-3.png")).unwrap();
    assert!(png.width() > 0);
    let first = fs::read(root.join(&out).join("sample-0.png")).unwrap();
    ok(root, &["viz", "--checkpoint", &ckpt, "--dataset", "d", "--sample-ids", "0", "--out", "again"]);
    assert_eq!(first, fs::read(root.join("again/sample-0.png")).unwrap());
    serde_json::from_str(&fs::read_to_string(root.join(&out).join("attention.json")).unwrap()).unwrap()
}

#[test]
fn viz_exports_slot_panels_before_and_after_the_kernel() {
    let tmp = setup();
    let root = tmp.path();
    tiny_dataset(root, "d");

    let sa = viz_arrays(root, "sa");
    for sample in sa["samples"].as_array().unwrap() {
        for it in sample["iterations"].as_array().unwrap() {
            assert_eq!(it["logits_before"].as_array().unwrap().len(), 3);
            assert_eq!(it["logits_before"], it["logits_after"]);
        }
    }

    let wn = viz_arrays(root, "wnconv");
    assert_eq!(wn["samples"].as_array().unwrap().len(), 2);
    for sample in wn["samples"].as_array().unwrap() {
        for it in sample["iterations"].as_array().unwrap() {
            let f = |k: &str| -> Vec<f64> { it[k].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect() };
            let (bmax, amax, bmin, amin) = (f("before_max"), f("after_max"), f("before_min"), f("after_min"));
            assert_eq!(amax.len(), 3);
            for j in 0..3 {
                assert!(amax[j] <= bmax[j] && amin[j] >= bmin[j], "slot {j}: {amin:?}..{amax:?} vs {bmin:?}..{bmax:?}");
            }
        }
    }
}

#[test]
fn gradcheck_reports_and_flags_failures() {
    let tmp = setup();
    let root = tmp.path();
    let out = ok(root, &["gradcheck", "--per-tensor", "1"]);
    assert!(out.starts_with("kind=gradcheck kernel=wnconv"), "{out}");
    assert_eq!(slash(root, &["gradcheck", "--per-tensor", "1", "--tolerance", "0"]).status.code(), Some(3));
}
