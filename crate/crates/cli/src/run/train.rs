//! `esmlab train-denoiser`: fit the toy conditional denoiser on a procedural
//! dataset and write a reloadable checkpoint.

use super::Failure;
use crate::config::TrainDenoiserConfig;
use crate::output::{out_root, run_dir, write_csv, write_json};
use esmlab_core::checkpoint::save_denoiser;
use esmlab_core::denoiser::{train_denoiser, DenoiserModel, TrainConfig};
use serde::Serialize;
use std::path::Path;

#[derive(Serialize)]
struct LossRow {
    step: usize,
    loss: f64,
}

#[derive(Serialize)]
struct TrainSummary {
    side: usize,
    num_classes: usize,
    hidden_width: usize,
    hidden_layers: usize,
    steps: usize,
    batch_size: usize,
    /// Mean loss over the first and last 50 recorded steps.
    initial_loss: f64,
    final_loss: f64,
    checkpoint: String,
}

fn window_mean(curve: &[f64], from_end: bool) -> f64 {
    let k = curve.len().min(50);
    let slice = if from_end {
        &curve[curve.len() - k..]
    } else {
        &curve[..k]
    };
    slice.iter().sum::<f64>() / k as f64
}

pub fn cmd_train(out_flag: Option<&Path>, cfg: TrainDenoiserConfig) -> Result<(), Failure> {
    if cfg.train.steps == 0 {
        return Err(Failure::Config("train.steps must be at least 1".into()));
    }
    let dataset = cfg.dataset.build()?;
    let sched = cfg.schedule.build()?;
    let model_cfg = cfg.model.to_config(dataset.side(), dataset.num_classes());
    let mut model = DenoiserModel::<f32>::init(model_cfg, cfg.model.seed)?;

    let dir = run_dir(&out_root(out_flag), &cfg.run_name)?;
    let curve = train_denoiser(
        &mut model,
        &dataset,
        &sched,
        TrainConfig {
            steps: cfg.train.steps,
            lr: cfg.train.lr,
            batch_size: cfg.train.batch_size,
            cond_drop_prob: cfg.train.cond_drop_prob,
            seed: cfg.train.seed,
        },
    )?;

    let rows: Vec<LossRow> = curve
        .iter()
        .enumerate()
        .map(|(step, &loss)| LossRow { step, loss })
        .collect();
    write_csv(&dir.join("loss.csv"), &rows)?;

    let ckpt = dir.join("denoiser.ckpt");
    save_denoiser(&ckpt, &model, cfg.schedule)?;

    let summary = TrainSummary {
        side: dataset.side(),
        num_classes: dataset.num_classes(),
        hidden_width: model.config().hidden_width,
        hidden_layers: model.config().hidden_layers,
        steps: cfg.train.steps,
        batch_size: cfg.train.batch_size,
        initial_loss: window_mean(&curve, false),
        final_loss: window_mean(&curve, true),
        checkpoint: ckpt.display().to_string(),
    };
    write_json(&dir.join("summary.json"), &summary)?;

    println!(
        "trained denoiser: side {}, {} classes, {} steps, loss {:.4} -> {:.4}",
        summary.side, summary.num_classes, summary.steps, summary.initial_loss, summary.final_loss
    );
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}
