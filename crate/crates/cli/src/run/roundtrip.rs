//! `esmlab roundtrip`: measure naive vs coupled inversion round-trip error
//! on a trained denoiser over a grid of interval widths.

use super::{load_model, Failure};
use crate::config::{Precision, RoundtripConfig};
use crate::output::{median, out_root, run_dir, write_csv, write_json};
use esmlab_core::denoiser::{Condition, DenoiserModel};
use esmlab_core::inversion::{coupled_round_trip_error, naive_round_trip_error};
use esmlab_core::rng::{randn, rng, stream};
use esmlab_core::schedule::NoiseSchedule;
use esmlab_core::tensor::{Scalar, Tensor};
use rand::Rng;
use serde::Serialize;
use std::path::Path;

#[derive(Serialize)]
struct RoundtripRow {
    state: usize,
    s: usize,
    delta: usize,
    t: usize,
    naive_err: f64,
    coupled_err: f64,
}

#[derive(Serialize)]
struct DeltaSummary {
    delta: usize,
    median_naive: f64,
    median_coupled: f64,
    /// median_naive / median_coupled.
    ratio: f64,
    max_coupled: f64,
}

#[derive(Serialize)]
struct RoundtripSummary {
    precision: Precision,
    states: usize,
    rho: f64,
    seed: u64,
    per_delta: Vec<DeltaSummary>,
}

/// The measurement itself, generic over the arithmetic the round trips run
/// in. The latent draws go through f64 first, so both precisions visit the
/// same states.
fn measure<S: Scalar>(
    model: &DenoiserModel<S>,
    sched: &NoiseSchedule,
    cfg: &RoundtripConfig,
) -> Result<Vec<RoundtripRow>, Failure> {
    let d = model.config().dim();
    let max_delta = *cfg.delta_grid.iter().max().expect("validated non-empty");
    let eps = model.eps_fn(Condition::Null, 1.0);
    let mut r = rng(cfg.seed, stream::EVAL);
    let mut rows = Vec::with_capacity(cfg.states * cfg.delta_grid.len());
    for state in 0..cfg.states {
        let x: Tensor<S> = randn(vec![d], &mut r);
        let s = r.random_range(0..=sched.t_max() - max_delta);
        for &delta in &cfg.delta_grid {
            let t = s + delta;
            rows.push(RoundtripRow {
                state,
                s,
                delta,
                t,
                naive_err: naive_round_trip_error(&x, s, t, &eps, sched)?,
                coupled_err: coupled_round_trip_error(&x, s, t, cfg.rho, &eps, sched)?,
            });
        }
    }
    Ok(rows)
}

pub fn cmd_roundtrip(out_flag: Option<&Path>, cfg: RoundtripConfig) -> Result<(), Failure> {
    let (model, sched, _) = load_model(&cfg.checkpoint)?;
    if cfg.states == 0 {
        return Err(Failure::Config("states must be at least 1".into()));
    }
    if cfg.delta_grid.is_empty() {
        return Err(Failure::Config("delta_grid must be non-empty".into()));
    }
    for &delta in &cfg.delta_grid {
        if delta == 0 || delta > sched.t_max() {
            return Err(Failure::Config(format!(
                "delta {delta} out of range 1..={}",
                sched.t_max()
            )));
        }
    }
    if !(cfg.rho > 0.0 && cfg.rho <= 1.0) {
        return Err(Failure::Config(format!(
            "rho must be in (0, 1], got {}",
            cfg.rho
        )));
    }

    let rows = match cfg.precision {
        Precision::F32 => measure(&model, &sched, &cfg)?,
        Precision::F64 => measure(&model.cast::<f64>(), &sched, &cfg)?,
    };

    let dir = run_dir(&out_root(out_flag), &cfg.run_name)?;
    write_csv(&dir.join("roundtrip.csv"), &rows)?;

    let mut per_delta = Vec::new();
    let mut grid = cfg.delta_grid.clone();
    grid.sort_unstable();
    grid.dedup();
    for &delta in &grid {
        let naive: Vec<f64> = rows
            .iter()
            .filter(|r| r.delta == delta)
            .map(|r| r.naive_err)
            .collect();
        let coupled: Vec<f64> = rows
            .iter()
            .filter(|r| r.delta == delta)
            .map(|r| r.coupled_err)
            .collect();
        let median_naive = median(&naive);
        let median_coupled = median(&coupled);
        let max_coupled = coupled.iter().cloned().fold(0.0, f64::max);
        per_delta.push(DeltaSummary {
            delta,
            median_naive,
            median_coupled,
            ratio: median_naive / median_coupled.max(1e-300),
            max_coupled,
        });
    }
    for ds in &per_delta {
        println!(
            "delta {:>4}: naive median {:.3e}, coupled median {:.3e} (max {:.3e}), ratio {:.1e}",
            ds.delta, ds.median_naive, ds.median_coupled, ds.max_coupled, ds.ratio
        );
    }
    write_json(
        &dir.join("summary.json"),
        &RoundtripSummary {
            precision: cfg.precision,
            states: cfg.states,
            rho: cfg.rho,
            seed: cfg.seed,
            per_delta,
        },
    )?;
    println!("wrote {}", dir.display());
    Ok(())
}
