//! `esmlab sweep`: grid one distillation hyperparameter across seeds. A run
//! that diverges is recorded and the sweep moves on; only setup problems
//! abort the whole grid.

use super::{
    check_distill_inputs, fmt_value, run_distill_once, subdir, DistillJob, Failure,
};
use crate::config::{SweepFileConfig, SweepParameter};
use crate::output::{median, out_root, run_dir, write_contact_sheet, write_csv, write_json};
use esmlab_core::distill::DistillConfig;
use std::path::Path;

use super::load_model;
use serde::Serialize;

#[derive(Serialize)]
struct SweepRow {
    parameter: String,
    value: f64,
    seed: u64,
    diverged: bool,
    initial_mse: f64,
    final_mse: f64,
    sharpness: f64,
    error: String,
}

#[derive(Serialize)]
struct ValueSummary {
    value: f64,
    median_final_mse: f64,
    median_sharpness: f64,
    diverged: usize,
}

#[derive(Serialize)]
struct SweepSummary {
    parameter: String,
    seeds: Vec<u64>,
    per_value: Vec<ValueSummary>,
    /// max − min of the per-value median MSEs (finite medians only).
    median_spread: f64,
    diverged_total: usize,
}

fn apply(base: &DistillConfig, parameter: SweepParameter, v: f64) -> DistillConfig {
    let mut c = base.clone();
    match parameter {
        SweepParameter::Rho => c.rho = v,
        SweepParameter::DeltaS => c.delta_s = v as usize,
        SweepParameter::DeltaT => c.delta_t = v as usize,
    }
    c
}

pub fn cmd_sweep(out_flag: Option<&Path>, cfg: SweepFileConfig) -> Result<(), Failure> {
    let (model, sched, _) = load_model(&cfg.checkpoint)?;
    let dataset = cfg.dataset.build()?;
    let side = check_distill_inputs(&model, &sched, &dataset, &cfg.base, cfg.scene.n_splats)?;
    if cfg.values.is_empty() {
        return Err(Failure::Config("sweep needs at least one value".into()));
    }
    if cfg.seeds.is_empty() {
        return Err(Failure::Config("sweep needs at least one seed".into()));
    }
    // Every grid point must be well-formed before any directory is created.
    for &v in &cfg.values {
        if matches!(cfg.parameter, SweepParameter::DeltaS | SweepParameter::DeltaT)
            && (v.fract() != 0.0 || v < 1.0)
        {
            return Err(Failure::Config(format!(
                "{} values must be positive integers, got {v}",
                cfg.parameter
            )));
        }
        apply(&cfg.base, cfg.parameter, v).validate(&sched)?;
    }

    let dir = run_dir(&out_root(out_flag), &cfg.run_name)?;
    let runs_root = subdir(&dir, "runs")?;

    let mut rows = Vec::new();
    let mut tiles: Vec<Option<Vec<f32>>> = Vec::new();
    for &value in &cfg.values {
        for &seed in &cfg.seeds {
            let mut rc = apply(&cfg.base, cfg.parameter, value);
            rc.seed = seed;
            let sub = subdir(
                &runs_root,
                &format!("{}_{}_seed_{}", cfg.parameter, fmt_value(value), seed),
            )?;
            let result = run_distill_once(
                &sub,
                DistillJob {
                    model: &model,
                    sched: &sched,
                    dataset: &dataset,
                    cfg: rc,
                    scene_spec: cfg.scene,
                    pose_jitter: cfg.pose_jitter,
                    snapshot_every: 0,
                    resume: None,
                },
            );
            let row = match result {
                Ok(o) if o.final_mse.is_finite() => {
                    println!(
                        "{}={} seed={}: final mse {:.5}, sharpness {:.4}",
                        cfg.parameter,
                        fmt_value(value),
                        seed,
                        o.final_mse,
                        o.sharpness
                    );
                    tiles.push(Some(o.final_render));
                    SweepRow {
                        parameter: cfg.parameter.to_string(),
                        value,
                        seed,
                        diverged: false,
                        initial_mse: o.initial_mse,
                        final_mse: o.final_mse,
                        sharpness: o.sharpness,
                        error: String::new(),
                    }
                }
                Ok(o) => {
                    println!(
                        "{}={} seed={}: DIVERGED (non-finite final mse)",
                        cfg.parameter,
                        fmt_value(value),
                        seed
                    );
                    tiles.push(None);
                    SweepRow {
                        parameter: cfg.parameter.to_string(),
                        value,
                        seed,
                        diverged: true,
                        initial_mse: o.initial_mse,
                        final_mse: f64::NAN,
                        sharpness: f64::NAN,
                        error: "non-finite final mse".into(),
                    }
                }
                Err(Failure::Numeric(msg)) => {
                    println!(
                        "{}={} seed={}: DIVERGED ({msg})",
                        cfg.parameter,
                        fmt_value(value),
                        seed
                    );
                    tiles.push(None);
                    SweepRow {
                        parameter: cfg.parameter.to_string(),
                        value,
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

    write_csv(&dir.join("summary.csv"), &rows)?;
    write_contact_sheet(&dir.join("contact_sheet.png"), &tiles, side, cfg.seeds.len())?;

    let mut per_value = Vec::new();
    for &value in &cfg.values {
        let group: Vec<&SweepRow> = rows.iter().filter(|r| r.value == value).collect();
        let mses: Vec<f64> = group
            .iter()
            .filter(|r| r.final_mse.is_finite())
            .map(|r| r.final_mse)
            .collect();
        let sharps: Vec<f64> = group
            .iter()
            .filter(|r| r.sharpness.is_finite())
            .map(|r| r.sharpness)
            .collect();
        per_value.push(ValueSummary {
            value,
            median_final_mse: if mses.is_empty() {
                f64::NAN
            } else {
                median(&mses)
            },
            median_sharpness: if sharps.is_empty() {
                f64::NAN
            } else {
                median(&sharps)
            },
            diverged: group.iter().filter(|r| r.diverged).count(),
        });
    }
    let finite_medians: Vec<f64> = per_value
        .iter()
        .map(|v| v.median_final_mse)
        .filter(|m| m.is_finite())
        .collect();
    let median_spread = if finite_medians.is_empty() {
        f64::NAN
    } else {
        finite_medians.iter().cloned().fold(f64::MIN, f64::max)
            - finite_medians.iter().cloned().fold(f64::MAX, f64::min)
    };
    let diverged_total = rows.iter().filter(|r| r.diverged).count();
    for v in &per_value {
        println!(
            "{}={}: median final mse {:.5} ({} diverged)",
            cfg.parameter,
            fmt_value(v.value),
            v.median_final_mse,
            v.diverged
        );
    }
    println!("median spread across values: {median_spread:.5}");
    write_json(
        &dir.join("summary.json"),
        &SweepSummary {
            parameter: cfg.parameter.to_string(),
            seeds: cfg.seeds.clone(),
            per_value,
            median_spread,
            diverged_total,
        },
    )?;
    println!("wrote {}", dir.display());
    Ok(())
}
