//! Distillation of a frozen denoiser into a splat scene.
//!
//! Three gradient estimators share one skeleton — render, build a noise-space
//! residual, push it through the rasterizer VJP:
//!
//! * **SDS**: residual ε̂(x_t, t, y) − e against the very noise e that made
//!   x_t from the render.
//! * **ISM**: invert the render to x_s, jump the interval s → t with one
//!   straight-line step, residual ε(x_t, t, y) − ε(x_s, s, ∅).
//! * **ESM**: same residual, but x_t comes from the *coupled* inversion
//!   driven by the adapter predictor ε_lo and ρ-mixing, so the interval step
//!   is exactly reversible instead of approximate.
//!
//! The denoiser and adapter are inputs to the residual only; no gradient ever
//! reaches them from the scene update (the loop certifies this with
//! parameter fingerprints on top of the borrow checker).
//!
//! Determinism contract: iteration k draws from [`iteration_rng`]`(seed, k)`
//! in a fixed order — pose, then (ESM only) the adapter's (τ, e), then the
//! estimator's own (t, e). Replaying an iteration needs only (seed, k).

use crate::denoiser::{predict_eps, Condition, DenoiserModel};
use crate::error::{Error, Result};
use crate::inversion::{coupled_invert, naive_interval_step, naive_invert, CoupledState};
use crate::lora::{lora_train_step, LoraAdapter};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{self, stream};
use crate::schedule::{q_sample, NoiseSchedule, Timestep};
use crate::splat::{render, render_vjp, CameraPose, SplatScene, SCENE_PARAMS};
use crate::store::ParamStore;
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Sds,
    Ism,
    Esm,
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sds" => Ok(LossKind::Sds),
            "ism" => Ok(LossKind::Ism),
            "esm" => Ok(LossKind::Esm),
            other => Err(Error::Config(format!(
                "unknown loss '{other}' (expected sds, ism, or esm)"
            ))),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::Sds => "sds",
            LossKind::Ism => "ism",
            LossKind::Esm => "esm",
        })
    }
}

/// Weighting ω(t) applied to the residual before the VJP.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OmegaMode {
    Constant,
    OneMinusAlphaBar,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub loss: LossKind,
    /// Mixing ratio of the coupled inversion (ESM only).
    pub rho: f64,
    /// Sub-step size of the multi-step inversion 0 → s.
    pub delta_s: usize,
    /// Interval width: s = max(t − delta_t, 0).
    pub delta_t: usize,
    pub iterations: usize,
    pub omega_mode: OmegaMode,
    /// Extra constant factor on ω(t); gradients are linear in it.
    pub omega_scale: f64,
    /// Classifier-free blend for the conditional prediction.
    pub guidance: f64,
    pub t_min: Timestep,
    pub t_max: Timestep,
    /// Class label distilled toward.
    pub label: usize,
    /// Adam learning rate on the scene.
    pub lr: f64,
    /// Adam learning rate on the adapter (ESM only).
    pub lora_lr: f64,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            loss: LossKind::Esm,
            rho: 0.93,
            delta_s: 200,
            delta_t: 50,
            iterations: 5000,
            omega_mode: OmegaMode::Constant,
            omega_scale: 1.0,
            guidance: 1.0,
            t_min: 1,
            t_max: 1000,
            label: 0,
            lr: 1e-2,
            lora_lr: 1e-3,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::Config(format!("rho must be in (0, 1], got {}", self.rho)));
        }
        if self.delta_s == 0 || self.delta_t == 0 {
            return Err(Error::Config("delta_s and delta_t must be >= 1".into()));
        }
        if self.t_min < 1 || self.t_min >= self.t_max || self.t_max > sched.t_max() {
            return Err(Error::Config(format!(
                "need 1 <= t_min < t_max <= {}, got [{}, {}]",
                sched.t_max(),
                self.t_min,
                self.t_max
            )));
        }
        if self.lr <= 0.0 || self.lora_lr <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !self.guidance.is_finite() || !self.omega_scale.is_finite() {
            return Err(Error::Config("guidance and omega_scale must be finite".into()));
        }
        Ok(())
    }
}

/// Squared-norm bookkeeping of one estimator evaluation. With
/// Δ = ε(x_t,t,y) − ε(x_s,s,∅) and x_int the unmixed coupled intermediate:
/// `eps_ism` = ‖Δ‖², `term1` = ‖ε(x_t,t,y) − ε(x_int,t,∅)‖²,
/// `term2` = ‖ε(x_int,t,∅) − ε(x_s,s,∅)‖², `eps_esm` = term1 + term2.
/// Estimators without an x_int leave the decomposition fields at zero.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct ErrorReport {
    pub eps_ism: f64,
    pub eps_esm: f64,
    pub term1: f64,
    pub term2: f64,
    pub eta_norm: f64,
    pub delta_norm: f64,
}

/// One estimator evaluation: scene gradients (as store values) plus the
/// diagnostics and the sampled interval.
pub struct GradientStep<S: Scalar = f32> {
    pub grads: ParamStore<S>,
    pub report: ErrorReport,
    pub t: Timestep,
    pub s: Timestep,
}

fn omega_value(cfg: &DistillConfig, sched: &NoiseSchedule, t: Timestep) -> f64 {
    let base = match cfg.omega_mode {
        OmegaMode::Constant => 1.0,
        OmegaMode::OneMinusAlphaBar => 1.0 - sched.alpha_bar(t),
    };
    cfg.omega_scale * base
}

/// Denoisers are defined for t ≥ 1; formulas that mention t = 0 evaluate at 1.
fn eval_t(t: Timestep) -> Timestep {
    t.max(1)
}

fn flat_render<S: Scalar>(
    scene: &SplatScene<S>,
    pose: &CameraPose,
    side: usize,
) -> Result<Tensor<S>> {
    if scene.channels() != 1 {
        return Err(Error::contract(format!(
            "distillation drives a single-channel scene, got {} color channels",
            scene.channels()
        )));
    }
    let out = render(scene, pose, side)?;
    Ok(out.image.reshape(vec![side * side]))
}

fn scene_grads<S: Scalar>(
    scene: &SplatScene<S>,
    pose: &CameraPose,
    side: usize,
    residual: &Tensor<S>,
    omega: f64,
) -> Result<ParamStore<S>> {
    let cot = residual
        .scale(S::from_f64(omega))
        .reshape(vec![1, side, side]);
    render_vjp(scene, pose, side, &cot)
}

fn check_model<S: Scalar>(model: &DenoiserModel<S>, cfg: &DistillConfig) -> Result<usize> {
    if model.config().num_classes <= cfg.label {
        return Err(Error::Config(format!(
            "label {} out of range for {} classes",
            cfg.label,
            model.config().num_classes
        )));
    }
    Ok(model.config().side)
}

/// Baseline estimator: noise the render once and chase the denoiser's
/// direction, residual ω(t)·(ε̂(x_t, t, y) − e).
pub fn sds_gradient<S: Scalar>(
    scene: &SplatScene<S>,
    pose: &CameraPose,
    model: &DenoiserModel<S>,
    sched: &NoiseSchedule,
    cfg: &DistillConfig,
    r: &mut ChaCha8Rng,
) -> Result<GradientStep<S>> {
    cfg.validate(sched)?;
    let side = check_model(model, cfg)?;
    let t = r.random_range(cfg.t_min..=cfg.t_max);
    let e = rng::randn::<S>(vec![side * side], r);

    let x0 = flat_render(scene, pose, side)?;
    let x_t = q_sample(&x0, t, &e, sched)?;
    let eps_hat = predict_eps(model, &x_t, t, Condition::Label(cfg.label), cfg.guidance)?;
    let delta = eps_hat.sub(&e);
    let grads = scene_grads(scene, pose, side, &delta, omega_value(cfg, sched, t))?;
    let delta_norm = delta.norm();
    Ok(GradientStep {
        grads,
        report: ErrorReport {
            eps_ism: delta_norm * delta_norm,
            delta_norm,
            ..ErrorReport::default()
        },
        t,
        s: 0,
    })
}

/// Interval estimator: invert the render to x_s, take one straight-line jump
/// to x_t, residual ω(t)·(ε(x_t, t, y) − ε(x_s, s, ∅)).
pub fn ism_gradient<S: Scalar>(
    scene: &SplatScene<S>,
    pose: &CameraPose,
    model: &DenoiserModel<S>,
    sched: &NoiseSchedule,
    cfg: &DistillConfig,
    r: &mut ChaCha8Rng,
) -> Result<GradientStep<S>> {
    cfg.validate(sched)?;
    let side = check_model(model, cfg)?;
    let t = r.random_range(cfg.t_min..=cfg.t_max);
    let s = t.saturating_sub(cfg.delta_t);

    let x0 = flat_render(scene, pose, side)?;
    let uncond = model.eps_fn(Condition::Null, 1.0);
    let (x_s, _) = naive_invert(&x0, s, cfg.delta_s, &uncond, sched)?;
    let x_t = naive_interval_step(&x_s, s, t, &uncond, sched)?;

    let eps_cond = predict_eps(model, &x_t, t, Condition::Label(cfg.label), cfg.guidance)?;
    let eps_s = predict_eps(model, &x_s, eval_t(s), Condition::Null, 1.0)?;
    let delta = eps_cond.sub(&eps_s);
    let grads = scene_grads(scene, pose, side, &delta, omega_value(cfg, sched, t))?;
    let delta_norm = delta.norm();
    Ok(GradientStep {
        grads,
        report: ErrorReport {
            eps_ism: delta_norm * delta_norm,
            delta_norm,
            ..ErrorReport::default()
        },
        t,
        s,
    })
}

/// Exact-interval estimator: like ISM, but the jump s → t is the coupled,
/// exactly reversible inversion driven by the adapter predictor ε_lo with
/// mixing ratio ρ. Also reports the two-term error decomposition measured
/// through the unmixed intermediate x_int.
pub fn esm_gradient<S: Scalar>(
    scene: &SplatScene<S>,
    pose: &CameraPose,
    model: &DenoiserModel<S>,
    adapter: &LoraAdapter<S>,
    sched: &NoiseSchedule,
    cfg: &DistillConfig,
    r: &mut ChaCha8Rng,
) -> Result<GradientStep<S>> {
    cfg.validate(sched)?;
    let side = check_model(model, cfg)?;
    let t = r.random_range(cfg.t_min..=cfg.t_max);
    let s = t.saturating_sub(cfg.delta_t);

    let x0 = flat_render(scene, pose, side)?;
    let uncond = model.eps_fn(Condition::Null, 1.0);
    let (x_s, _) = naive_invert(&x0, s, cfg.delta_s, &uncond, sched)?;

    let eps_lo = adapter.eps_fn(model, Condition::Null);
    let state = CoupledState::new(x_s.clone(), s);
    let (up, x_int) = coupled_invert(&state, t, &eps_lo, cfg.rho, sched)?;
    let x_t = up.x;

    let eps_cond = predict_eps(model, &x_t, t, Condition::Label(cfg.label), cfg.guidance)?;
    let eps_s = predict_eps(model, &x_s, eval_t(s), Condition::Null, 1.0)?;
    let eps_int = predict_eps(model, &x_int, t, Condition::Null, 1.0)?;

    let delta = eps_cond.sub(&eps_s);
    let grads = scene_grads(scene, pose, side, &delta, omega_value(cfg, sched, t))?;
    let delta_norm = delta.norm();
    let term1 = eps_cond.sub(&eps_int).norm_sq();
    let term2 = eps_int.sub(&eps_s).norm_sq();
    Ok(GradientStep {
        grads,
        report: ErrorReport {
            eps_ism: delta_norm * delta_norm,
            eps_esm: term1 + term2,
            term1,
            term2,
            eta_norm: term2.sqrt(),
            delta_norm,
        },
        t,
        s,
    })
}

/// Scalar collinear model of the two error measures: with residual magnitude
/// ‖Δ‖ = `delta_norm` and an intermediate offset η along the same direction,
/// the interval estimator accumulates ‖Δ‖² while the exact-interval
/// estimator accumulates (‖Δ‖ − η)² + η². The expansion
/// eps_esm = eps_ism + 2η(η − ‖Δ‖) is an algebraic identity; `residual`
/// measures how far the floating-point evaluation drifts from it.
#[derive(Clone, Copy, Debug)]
pub struct ErrorIdentity {
    pub eps_ism: f64,
    pub eps_esm: f64,
    pub residual: f64,
    /// Whether 0 < η < ‖Δ‖ held — the regime where eps_esm < eps_ism is
    /// guaranteed. Values are computed either way.
    pub assumption_ok: bool,
}

pub fn error_identity_check(delta_norm: f64, eta: f64) -> ErrorIdentity {
    let eps_ism = delta_norm * delta_norm;
    let eps_esm = (delta_norm - eta) * (delta_norm - eta) + eta * eta;
    let residual = eps_esm - (eps_ism + 2.0 * eta * (eta - delta_norm));
    ErrorIdentity {
        eps_ism,
        eps_esm,
        residual,
        assumption_ok: eta > 0.0 && eta < delta_norm,
    }
}

/// One CSV row of the optimization log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IterRecord {
    pub iteration: usize,
    pub t: Timestep,
    pub s: Timestep,
    pub loss_variant: LossKind,
    pub eps_ism: f64,
    pub eps_esm: f64,
    pub term1: f64,
    pub term2: f64,
    pub eta_norm: f64,
    pub delta_norm: f64,
    pub grad_norm: f64,
    pub lora_loss: f64,
}

#[derive(Clone, Debug)]
pub struct DistillRun<S: Scalar = f32> {
    pub scene: SplatScene<S>,
    pub records: Vec<IterRecord>,
}

/// The RNG feeding iteration `k`; depends only on (seed, k) so any iteration
/// can be replayed without running its predecessors.
pub fn iteration_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    let mixed = seed ^ (iteration as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    rng::rng(mixed, stream::DISTILL)
}

/// Runs `cfg.iterations` scene updates: sample a pose, (ESM) one adapter
/// update on the current render, evaluate the selected estimator, Adam step
/// on the scene. The denoiser is frozen throughout; a fingerprint check
/// certifies it. Aborts with a diagnostic on the first non-finite gradient.
pub fn distill_loop<S: Scalar>(
    scene: SplatScene<S>,
    pose_sampler: &mut dyn FnMut(&mut ChaCha8Rng) -> CameraPose,
    model: &DenoiserModel<S>,
    adapter: Option<&mut LoraAdapter<S>>,
    sched: &NoiseSchedule,
    cfg: &DistillConfig,
) -> Result<DistillRun<S>> {
    distill_loop_with(scene, pose_sampler, model, adapter, sched, cfg, 0, None)
}

/// Observer called after each completed iteration with the iteration index,
/// the updated scene, and the adapter (if one is training). Harnesses hang
/// snapshot writers here; an error aborts the loop.
pub type IterationHook<'a, S> =
    &'a mut dyn FnMut(usize, &SplatScene<S>, Option<&LoraAdapter<S>>) -> Result<()>;

/// [`distill_loop`] with resumable numbering and an artifact hook.
///
/// Iteration numbers — and therefore the per-iteration RNG streams — start
/// at `start_iteration`, so a run resumed from a snapshot taken after k
/// iterations and launched with `start_iteration = k` draws the same
/// (pose, t, noise) sequence the unbroken run would have seen from there.
/// `cfg.iterations` counts the iterations *this* call performs. Optimizer
/// moments are not carried across the boundary.
#[allow(clippy::too_many_arguments)]
pub fn distill_loop_with<S: Scalar>(
    mut scene: SplatScene<S>,
    pose_sampler: &mut dyn FnMut(&mut ChaCha8Rng) -> CameraPose,
    model: &DenoiserModel<S>,
    mut adapter: Option<&mut LoraAdapter<S>>,
    sched: &NoiseSchedule,
    cfg: &DistillConfig,
    start_iteration: usize,
    mut hook: Option<IterationHook<'_, S>>,
) -> Result<DistillRun<S>> {
    cfg.validate(sched)?;
    let side = check_model(model, cfg)?;
    if cfg.loss == LossKind::Esm && adapter.is_none() {
        return Err(Error::Config(
            "the esm loss requires an adapter".into(),
        ));
    }
    let model_print = model.params.fingerprint();
    let mut scene_opt = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut lora_opt = Adam::new(AdamConfig::with_lr(cfg.lora_lr));
    let mut records = Vec::with_capacity(cfg.iterations);

    for iteration in start_iteration..start_iteration + cfg.iterations {
        let mut r = iteration_rng(cfg.seed, iteration);
        let pose = pose_sampler(&mut r);

        let mut lora_loss = 0.0;
        let step = match cfg.loss {
            LossKind::Sds => sds_gradient(&scene, &pose, model, sched, cfg, &mut r)?,
            LossKind::Ism => ism_gradient(&scene, &pose, model, sched, cfg, &mut r)?,
            LossKind::Esm => {
                let ad = adapter.as_deref_mut().expect("checked above");
                let x0 = flat_render(&scene, &pose, side)?;
                lora_loss = lora_train_step(model, ad, &x0, sched, &mut lora_opt, &mut r)?;
                esm_gradient(&scene, &pose, model, ad, sched, cfg, &mut r)?
            }
        };

        let grad_norm = SCENE_PARAMS
            .iter()
            .map(|name| step.grads.value(name).map(|g| g.norm_sq()))
            .sum::<Result<f64>>()?
            .sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite {
                context: format!(
                    "distillation gradient at iteration {iteration} (seed {})",
                    cfg.seed
                ),
            });
        }
        scene.accumulate_grads(&step.grads)?;
        scene_opt.step(&mut scene.params)?;

        records.push(IterRecord {
            iteration,
            t: step.t,
            s: step.s,
            loss_variant: cfg.loss,
            eps_ism: step.report.eps_ism,
            eps_esm: step.report.eps_esm,
            term1: step.report.term1,
            term2: step.report.term2,
            eta_norm: step.report.eta_norm,
            delta_norm: step.report.delta_norm,
            grad_norm,
            lora_loss,
        });
        if let Some(h) = hook.as_mut() {
            h(iteration, &scene, adapter.as_deref())?;
        }
    }

    if model.params.fingerprint() != model_print {
        return Err(Error::contract("frozen denoiser parameters changed during distillation"));
    }
    Ok(DistillRun { scene, records })
}

/// Pixel MSE between the identity-pose render and a flat target image.
pub fn render_mse<S: Scalar>(scene: &SplatScene<S>, target: &Tensor<S>) -> Result<f64> {
    let d = target.len();
    let side = (d as f64).sqrt().round() as usize;
    if side * side != d {
        return Err(Error::shape(
            "render_mse",
            format!("target length {d} is not a square"),
        ));
    }
    let img = flat_render(scene, &CameraPose::identity(), side)?;
    Ok(img.sub(target).norm_sq() / d as f64)
}
