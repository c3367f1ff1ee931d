//! Central finite-difference checking of analytic gradients.
//!
//! Every hand-derived backward pass in the lab (tape ops, the rasterizer
//! VJP, the adapter update) is validated against the same second-order
//! central difference, in f64. Large tensors are spot-checked on an evenly
//! spaced coordinate subset so the denoiser's ~300k parameters stay cheap.

use crate::error::Result;
use crate::store::ParamStore;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Per-parameter relative error above which the check fails.
    pub rel_tolerance: f64,
    /// Max coordinates probed per tensor (0 = all).
    pub max_coords_per_tensor: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-3,
            rel_tolerance: 1e-4,
            max_coords_per_tensor: 24,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// ‖g_analytic − g_fd‖ / max(‖g_fd‖, ‖g_analytic‖) over all probed
    /// coordinates pooled together.
    pub rel_err: f64,
    /// Worst single parameter tensor and its relative error.
    pub worst: Option<(String, f64)>,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_err.is_finite() && self.rel_err < tol
    }
}

/// Evenly spaced probe indices covering `[0, len)`.
fn probe_indices(len: usize, max: usize) -> Vec<usize> {
    if max == 0 || len <= max {
        (0..len).collect()
    } else {
        (0..max).map(|k| k * len / max).collect()
    }
}

/// Compares the gradients already accumulated in `store` against central
/// finite differences of `loss`. `loss` must be a pure function of the
/// parameter values; it is re-evaluated with single coordinates nudged by
/// ±step.
pub fn check_grads<F>(
    store: &ParamStore<f64>,
    names: &[String],
    mut loss: F,
    config: GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore<f64>) -> Result<f64>,
{
    let mut work = store.clone();
    let mut diff_sq = 0.0;
    let mut fd_sq = 0.0;
    let mut an_sq = 0.0;
    let mut coords = 0usize;
    let mut worst: Option<(String, f64)> = None;

    for name in names {
        let len = store.value(name)?.len();
        let analytic = store.get(name)?.grad.clone();
        let mut t_diff = 0.0;
        let mut t_fd = 0.0;
        let mut t_an = 0.0;
        for i in probe_indices(len, config.max_coords_per_tensor) {
            let base = store.value(name)?.data()[i];
            work.value_mut(name)?.data_mut()[i] = base + config.step;
            let up = loss(&work)?;
            work.value_mut(name)?.data_mut()[i] = base - config.step;
            let down = loss(&work)?;
            work.value_mut(name)?.data_mut()[i] = base;
            let fd = (up - down) / (2.0 * config.step);
            let an = analytic.data()[i];
            t_diff += (an - fd) * (an - fd);
            t_fd += fd * fd;
            t_an += an * an;
            coords += 1;
        }
        let denom = t_fd.sqrt().max(t_an.sqrt()).max(1e-12);
        let rel = t_diff.sqrt() / denom;
        if worst.as_ref().map_or(true, |(_, w)| rel > *w) {
            worst = Some((name.clone(), rel));
        }
        diff_sq += t_diff;
        fd_sq += t_fd;
        an_sq += t_an;
    }

    let denom = fd_sq.sqrt().max(an_sq.sqrt()).max(1e-12);
    Ok(GradCheckReport {
        rel_err: diff_sq.sqrt() / denom,
        worst,
        coords_checked: coords,
    })
}
