//! Kernel ablation at toy scale: each method preset trained on the same data
//! for a few seeds, one aggregate row per method and metric.

use slash::cli::config::{apply_variant, ExperimentConfig};
use slash::data::{apply_annotation_policy, generate_dataset};
use slash::metrics::MetricReport;
use slash::training::{train_seeds, RunOptions};

const BASE: &str = "
[model]
height = 16
width = 16
slots = 4
slot_dim = 32
enc_dim = 32
attn_dim = 32
mlp_hidden = 64
conv_channels = 16
conv_kernel = 3

[kernel]
size = 3

[schedule]
base_lr = 0.001
warmup_steps = 20

[train]
steps = 80
batch_size = 8
eval_every = 0
checkpoint_every = 0
log_every = 0

[data]
size = 300
val_size = 32
min_objects = 1
max_objects = 3
min_spacing = 0.25
min_size = 0.12
max_size = 0.2
";

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = std::env::temp_dir().join("slash-example-ablation");
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let base = ExperimentConfig::from_text(BASE)?;
    let mut train = generate_dataset(&base.dataset_config(base.data.seed, base.data.size))?;
    apply_annotation_policy(&mut train, &base.annotation)?;
    let val = generate_dataset(&base.dataset_config(base.data.val_seed, base.data.val_size))?;

    let mut reports = Vec::new();
    for variant in ["sa", "tau2", "gaussian", "conv", "wnconv", "slash"] {
        let mut cfg = base.clone();
        apply_variant(&mut cfg, variant)?;
        cfg.validate()?;
        let options = RunOptions { label: variant.into(), ..RunOptions::default() };
        let sweep = train_seeds::<f32>(&cfg.train, &train, &val, &[0, 1], &root.join(variant), &options, threads)?;
        eprintln!("{variant}: done");
        reports.push(sweep.report);
    }
    print!("{}", MetricReport::to_csv(&reports));
    Ok(())
}
