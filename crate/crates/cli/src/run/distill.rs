//! `esmlab distill`: optimize a splat scene against a frozen denoiser with
//! the selected gradient estimator, optionally resuming from a snapshot.

use super::{
    check_distill_inputs, load_adapter, load_model, load_scene, run_distill_once, DistillJob,
    Failure, ResumeState,
};
use crate::config::DistillFileConfig;
use crate::output::{out_root, run_dir};
use esmlab_core::distill::LossKind;
use std::path::{Path, PathBuf};

/// Resolves a `--resume <scene snapshot>` path into the loop state it
/// encodes. The adapter snapshot is the sibling file with `scene` replaced
/// by `adapter` in its name; the esm loss requires it.
fn resume_state(
    path: &Path,
    cfg: &DistillFileConfig,
    model_cfg: &esmlab_core::denoiser::DenoiserConfig,
    side: usize,
) -> Result<ResumeState, Failure> {
    let (scene, meta) = load_scene(path)?;
    if meta.side != side {
        return Err(Failure::Config(format!(
            "snapshot side {} does not match dataset side {side}",
            meta.side
        )));
    }
    if meta.seed != cfg.distill.seed || meta.label != cfg.distill.label {
        return Err(Failure::Config(format!(
            "snapshot was taken with seed {} / label {}, config says seed {} / label {}; \
             resuming under different sampling would not continue the same run",
            meta.seed, meta.label, cfg.distill.seed, cfg.distill.label
        )));
    }
    if meta.next_iteration >= cfg.distill.iterations {
        return Err(Failure::Config(format!(
            "snapshot is already at iteration {} of a {}-iteration run; nothing to resume",
            meta.next_iteration, cfg.distill.iterations
        )));
    }
    let adapter = if cfg.distill.loss == LossKind::Esm {
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Failure::Config(format!("unusable snapshot path {}", path.display())))?;
        let adapter_path = path.with_file_name(name.replacen("scene", "adapter", 1));
        if adapter_path == *path || !adapter_path.exists() {
            return Err(Failure::Config(format!(
                "the esm loss needs the adapter snapshot next to the scene one \
                 (looked for {})",
                adapter_path.display()
            )));
        }
        Some(load_adapter(&adapter_path, model_cfg)?)
    } else {
        None
    };
    Ok(ResumeState {
        scene,
        adapter,
        start_iteration: meta.next_iteration,
    })
}

pub fn cmd_distill(
    out_flag: Option<&Path>,
    cfg: DistillFileConfig,
    resume: Option<PathBuf>,
) -> Result<(), Failure> {
    let (model, sched, _) = load_model(&cfg.checkpoint)?;
    let dataset = cfg.dataset.build()?;
    let side = check_distill_inputs(&model, &sched, &dataset, &cfg.distill, cfg.scene.n_splats)?;

    // `iterations` in the file counts the whole run; on resume the loop call
    // only performs the remainder.
    let (resume, run_name, run_cfg) = match resume {
        None => (None, cfg.run_name.clone(), cfg.distill.clone()),
        Some(path) => {
            let state = resume_state(&path, &cfg, model.config(), side)?;
            let name = format!("{}-from-{}", cfg.run_name, state.start_iteration);
            let mut rc = cfg.distill.clone();
            rc.iterations = cfg.distill.iterations - state.start_iteration;
            (Some(state), name, rc)
        }
    };

    let dir = run_dir(&out_root(out_flag), &run_name)?;
    let outcome = run_distill_once(
        &dir,
        DistillJob {
            model: &model,
            sched: &sched,
            dataset: &dataset,
            cfg: run_cfg,
            scene_spec: cfg.scene,
            pose_jitter: cfg.pose_jitter,
            snapshot_every: cfg.snapshot_every,
            resume,
        },
    )?;
    if !outcome.final_mse.is_finite() {
        return Err(Failure::Numeric(format!(
            "final render mse is not finite ({})",
            outcome.final_mse
        )));
    }

    println!(
        "distilled {} iterations ({} loss, label {}): mse {:.5} -> {:.5} ({:.1}% drop), sharpness {:.4}",
        outcome.iterations_run,
        cfg.distill.loss,
        cfg.distill.label,
        outcome.initial_mse,
        outcome.final_mse,
        100.0 * (outcome.initial_mse - outcome.final_mse) / outcome.initial_mse,
        outcome.sharpness
    );
    println!("wrote {}", dir.display());
    Ok(())
}
