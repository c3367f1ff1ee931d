//! `esmlab init-compare`: the same distillation run from a random scene and
//! from a data-fitted scene, paired across seeds.

use super::{check_distill_inputs, load_model, run_distill_once, subdir, DistillJob, Failure};
use crate::config::{InitCompareConfig, InitKind, SceneSpec};
use crate::output::{median, out_root, run_dir, write_contact_sheet, write_csv, write_json};
use serde::Serialize;
use std::path::Path;

#[derive(Serialize)]
struct InitRow {
    init: String,
    seed: u64,
    diverged: bool,
    initial_mse: f64,
    final_mse: f64,
    sharpness: f64,
    error: String,
}

#[derive(Serialize)]
struct InitCompareSummary {
    seeds: Vec<u64>,
    n_splats: usize,
    median_random_mse: f64,
    median_fitted_mse: f64,
    /// Whether the data-fitted arm's median final MSE is at most the random
    /// arm's.
    fitted_le_random: bool,
    diverged_total: usize,
}

const ARMS: [(InitKind, &str); 2] = [
    (InitKind::Random, "random"),
    (InitKind::DataFitted, "data_fitted"),
];

pub fn cmd_init_compare(out_flag: Option<&Path>, cfg: InitCompareConfig) -> Result<(), Failure> {
    let (model, sched, _) = load_model(&cfg.checkpoint)?;
    let dataset = cfg.dataset.build()?;
    let n_splats = cfg.splats();
    let side = check_distill_inputs(&model, &sched, &dataset, &cfg.distill, n_splats)?;
    if cfg.seeds.is_empty() {
        return Err(Failure::Config("init-compare needs at least one seed".into()));
    }

    let dir = run_dir(&out_root(out_flag), &cfg.run_name)?;
    let runs_root = subdir(&dir, "runs")?;

    let mut rows = Vec::new();
    let mut tiles: Vec<Option<Vec<f32>>> = Vec::new();
    for (kind, arm) in ARMS {
        for &seed in &cfg.seeds {
            let mut rc = cfg.distill.clone();
            rc.seed = seed;
            let sub = subdir(&runs_root, &format!("{arm}_seed_{seed}"))?;
            let result = run_distill_once(
                &sub,
                DistillJob {
                    model: &model,
                    sched: &sched,
                    dataset: &dataset,
                    cfg: rc,
                    scene_spec: SceneSpec {
                        n_splats,
                        init: kind,
                    },
                    pose_jitter: cfg.pose_jitter,
                    snapshot_every: 0,
                    resume: None,
                },
            );
            let row = match result {
                Ok(o) if o.final_mse.is_finite() => {
                    println!(
                        "{arm} seed={seed}: mse {:.5} -> {:.5}, sharpness {:.4}",
                        o.initial_mse, o.final_mse, o.sharpness
                    );
                    tiles.push(Some(o.final_render));
                    InitRow {
                        init: arm.into(),
                        seed,
                        diverged: false,
                        initial_mse: o.initial_mse,
                        final_mse: o.final_mse,
                        sharpness: o.sharpness,
                        error: String::new(),
                    }
                }
                Ok(o) => {
                    println!("{arm} seed={seed}: DIVERGED (non-finite final mse)");
                    tiles.push(None);
                    InitRow {
                        init: arm.into(),
                        seed,
                        diverged: true,
                        initial_mse: o.initial_mse,
                        final_mse: f64::NAN,
                        sharpness: f64::NAN,
                        error: "non-finite final mse".into(),
                    }
                }
                Err(Failure::Numeric(msg)) => {
                    println!("{arm} seed={seed}: DIVERGED ({msg})");
                    tiles.push(None);
                    InitRow {
                        init: arm.into(),
                        seed,
                        diverged: true,
                        initial_mse: f64::NAN,
                        final_mse: f64::NAN,
                        sharpness: f64::NAN,
                        error: msg,
                    }
                }
                Err(other) => return Err(other),
            };
            rows.push(row);
        }
    }

    write_csv(&dir.join("compare.csv"), &rows)?;
    write_contact_sheet(&dir.join("contact_sheet.png"), &tiles, side, cfg.seeds.len())?;

    let arm_median = |arm: &str| -> f64 {
        let mses: Vec<f64> = rows
            .iter()
            .filter(|r| r.init == arm && r.final_mse.is_finite())
            .map(|r| r.final_mse)
            .collect();
        if mses.is_empty() {
            f64::NAN
        } else {
            median(&mses)
        }
    };
    let median_random_mse = arm_median("random");
    let median_fitted_mse = arm_median("data_fitted");
    let summary = InitCompareSummary {
        seeds: cfg.seeds.clone(),
        n_splats,
        median_random_mse,
        median_fitted_mse,
        fitted_le_random: median_fitted_mse <= median_random_mse,
        diverged_total: rows.iter().filter(|r| r.diverged).count(),
    };
    println!(
        "median final mse: random {:.5}, data-fitted {:.5} ({})",
        summary.median_random_mse,
        summary.median_fitted_mse,
        if summary.fitted_le_random {
            "data-fitted <= random"
        } else {
            "random < data-fitted"
        }
    );
    write_json(&dir.join("summary.json"), &summary)?;
    println!("wrote {}", dir.display());
    Ok(())
}
