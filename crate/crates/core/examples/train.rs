//! Trains a small model on 16×16 scenes, then reloads the final checkpoint
//! and exports attention figures for a few validation images.

use std::path::PathBuf;

use slash::cli::viz;
use slash::data::{apply_annotation_policy, generate_dataset, AnnotationPolicy, DatasetConfig, SceneConfig};
use slash::model::{Model, ModelConfig};
use slash::training::{evaluate, train_run, RunOptions, Schedule, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("slash-example-train"));
    let steps: u64 = std::env::args().nth(2).map_or(Ok(300), |s| s.parse())?;
    let scene = SceneConfig { min_objects: 1, max_objects: 3, min_spacing: 0.25, min_size: 0.12, max_size: 0.2 };
    let data = |seed, size| DatasetConfig { seed, size, height: 16, width: 16, scene: scene.clone(), ..DatasetConfig::default() };
    let mut train = generate_dataset(&data(0, 400))?;
    apply_annotation_policy(&mut train, &AnnotationPolicy { image_fraction: 0.25, ..AnnotationPolicy::default() })?;
    let val = generate_dataset(&data(1, 32))?;

    let model = ModelConfig { height: 16, width: 16, slots: 4, slot_dim: 32, enc_dim: 32, attn_dim: 32, mlp_hidden: 64, conv_channels: 16, conv_kernel: 3, ..ModelConfig::default() };
    let config = TrainConfig {
        model,
        schedule: Schedule { base_lr: 1e-3, warmup_steps: 50, decay_half_life: 2000 },
        steps,
        batch_size: 8,
        eval_every: 100,
        checkpoint_every: 100,
        log_every: 50,
        ..TrainConfig::default()
    };
    let manifest = train_run::<f32>(&config, &train, &val, 0, &out, &RunOptions { label: "example".into(), ..RunOptions::default() })?;
    println!("counters: {:?}", manifest.counters);

    let last = out.join(manifest.checkpoints.last().expect("final step is saved"));
    let model = Model::<f32>::load(&last)?;
    let m = evaluate(&model, &val, 0, 0)?;
    println!("reloaded {}: ari {:.4} miou {:.4}", last.display(), m.ari, m.miou);
    let figures = out.join("viz");
    viz::export(&model, &val, &[0, 1, 2], 0, &figures)?;
    println!("figures in {}", figures.display());
    Ok(())
}
