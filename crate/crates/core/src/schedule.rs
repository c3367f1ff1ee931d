//! Discrete diffusion noise schedule and the deterministic DDIM transitions.
//!
//! All coefficient tables are built and stored in f64 and indexed by the
//! absolute timestep `t ∈ [0, T]`, with the convention `ᾱ_0 = 1` (so step 0
//! is the identity / clean-data row). The two transition maps below are
//! exact algebraic inverses of each other for a *fixed* noise tensor; every
//! inversion scheme in this crate is built from them.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

/// Absolute timestep index in `[0, T]`.
pub type Timestep = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
}

/// The serializable description of a schedule (config files, checkpoints).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleParams {
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: ScheduleKind,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams {
            t_max: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
            kind: ScheduleKind::Linear,
        }
    }
}

impl ScheduleParams {
    pub fn build(&self) -> Result<NoiseSchedule> {
        build_schedule(self.t_max, self.beta_start, self.beta_end, self.kind)
    }
}

/// Immutable coefficient tables; freely shared across threads.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    t_max: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    /// DDPM-equivalent stochastic-sampler variance; kept for reference and
    /// identity tests. All transition maps here run with σ = 0.
    sigma: Vec<f64>,
}

/// Builds the tables for a linear β ramp. Index 0 holds the identity row
/// (β=0, α=1, ᾱ=1, σ=0); rows 1..=T hold the ramp.
pub fn build_schedule(
    t_max: usize,
    beta_start: f64,
    beta_end: f64,
    kind: ScheduleKind,
) -> Result<NoiseSchedule> {
    let ScheduleKind::Linear = kind;
    if t_max < 2 {
        return Err(Error::Config(format!("schedule needs T >= 2, got {t_max}")));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "betas must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let mut beta = vec![0.0; t_max + 1];
    let mut alpha = vec![1.0; t_max + 1];
    let mut alpha_bar = vec![1.0; t_max + 1];
    let mut sigma = vec![0.0; t_max + 1];
    for t in 1..=t_max {
        let frac = (t - 1) as f64 / (t_max - 1) as f64;
        beta[t] = beta_start + frac * (beta_end - beta_start);
        alpha[t] = 1.0 - beta[t];
        alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
        // σ_t² = (1 − ᾱ_{t−1})/(1 − ᾱ_t) · (1 − ᾱ_t/ᾱ_{t−1})
        sigma[t] = ((1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t])
            * (1.0 - alpha_bar[t] / alpha_bar[t - 1]))
            .sqrt();
    }
    let sched = NoiseSchedule {
        t_max,
        beta,
        alpha,
        alpha_bar,
        sigma,
    };
    sched.validate()?;
    Ok(sched)
}

impl NoiseSchedule {
    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn beta(&self, t: Timestep) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: Timestep) -> f64 {
        self.alpha[t]
    }

    pub fn alpha_bar(&self, t: Timestep) -> f64 {
        self.alpha_bar[t]
    }

    pub fn sigma(&self, t: Timestep) -> f64 {
        self.sigma[t]
    }

    pub fn sqrt_alpha_bar(&self, t: Timestep) -> f64 {
        self.alpha_bar[t].sqrt()
    }

    pub fn sqrt_one_minus_alpha_bar(&self, t: Timestep) -> f64 {
        (1.0 - self.alpha_bar[t]).sqrt()
    }

    fn validate(&self) -> Result<()> {
        for t in 1..=self.t_max {
            if !(self.beta[t] > 0.0 && self.beta[t] < 1.0) {
                return Err(Error::Config(format!("beta[{t}] out of (0,1)")));
            }
            if self.alpha_bar[t] >= self.alpha_bar[t - 1] {
                return Err(Error::Config(format!(
                    "alpha_bar not strictly decreasing at t={t}"
                )));
            }
            if self.alpha_bar[t] <= 0.0 {
                return Err(Error::Config(format!("alpha_bar[{t}] underflowed")));
            }
        }
        Ok(())
    }

    fn check_step(&self, s: Timestep, t: Timestep, op: &'static str) -> Result<()> {
        if s >= t || t > self.t_max {
            return Err(Error::contract(format!(
                "{op} requires 0 <= s < t <= {}, got s={s}, t={t}",
                self.t_max
            )));
        }
        Ok(())
    }
}

/// Forward marginal: √ᾱ_t·x0 + √(1−ᾱ_t)·noise. At t = 0 this is `x0`.
pub fn q_sample<S: Scalar>(
    x0: &Tensor<S>,
    t: Timestep,
    noise: &Tensor<S>,
    sched: &NoiseSchedule,
) -> Result<Tensor<S>> {
    if x0.shape() != noise.shape() {
        return Err(Error::shape(
            "q_sample",
            format!("x0 {:?} vs noise {:?}", x0.shape(), noise.shape()),
        ));
    }
    if t > sched.t_max() {
        return Err(Error::contract(format!(
            "q_sample timestep {t} exceeds T={}",
            sched.t_max()
        )));
    }
    if t == 0 {
        return Ok(x0.clone());
    }
    let a = S::from_f64(sched.sqrt_alpha_bar(t));
    let b = S::from_f64(sched.sqrt_one_minus_alpha_bar(t));
    Ok(x0.zip_map(noise, |x, e| a * x + b * e))
}

/// Deterministic t → s step (s < t) for a given noise estimate:
/// x_s = √ᾱ_s·(x_t − √(1−ᾱ_t)·eps)/√ᾱ_t + √(1−ᾱ_s)·eps.
pub fn ddim_generation_step<S: Scalar>(
    x_t: &Tensor<S>,
    eps: &Tensor<S>,
    t: Timestep,
    s: Timestep,
    sched: &NoiseSchedule,
) -> Result<Tensor<S>> {
    sched.check_step(s, t, "ddim_generation_step")?;
    if x_t.shape() != eps.shape() {
        return Err(Error::shape(
            "ddim_generation_step",
            format!("x {:?} vs eps {:?}", x_t.shape(), eps.shape()),
        ));
    }
    let cx = (sched.alpha_bar(s) / sched.alpha_bar(t)).sqrt();
    let ce = sched.sqrt_one_minus_alpha_bar(s) - cx * sched.sqrt_one_minus_alpha_bar(t);
    let (cx, ce) = (S::from_f64(cx), S::from_f64(ce));
    Ok(x_t.zip_map(eps, |x, e| cx * x + ce * e))
}

/// Deterministic s → t transition (s < t) for a given noise estimate:
/// x_t = √ᾱ_t·(x_s − √(1−ᾱ_s)·eps)/√ᾱ_s + √(1−ᾱ_t)·eps.
///
/// Which noise estimate is supplied — ε(x_s, s) for the plain scheme or the
/// partner-evaluated estimate for the coupled one — is the caller's choice.
pub fn ddim_inversion_transition<S: Scalar>(
    x_s: &Tensor<S>,
    eps: &Tensor<S>,
    s: Timestep,
    t: Timestep,
    sched: &NoiseSchedule,
) -> Result<Tensor<S>> {
    sched.check_step(s, t, "ddim_inversion_transition")?;
    if x_s.shape() != eps.shape() {
        return Err(Error::shape(
            "ddim_inversion_transition",
            format!("x {:?} vs eps {:?}", x_s.shape(), eps.shape()),
        ));
    }
    let cx = (sched.alpha_bar(t) / sched.alpha_bar(s)).sqrt();
    let ce = sched.sqrt_one_minus_alpha_bar(t) - cx * sched.sqrt_one_minus_alpha_bar(s);
    let (cx, ce) = (S::from_f64(cx), S::from_f64(ce));
    Ok(x_s.zip_map(eps, |x, e| cx * x + ce * e))
}

pub fn default_schedule() -> NoiseSchedule {
    build_schedule(1000, 1e-4, 2e-2, ScheduleKind::Linear)
        .expect("default schedule parameters are valid")
}
