//! Inversion machinery: plain multi-step DDIM inversion, the coupled
//! auxiliary-variable scheme whose round trip is exact to machine precision,
//! and the ρ-mixing algebra between them.
//!
//! The plain (naive) schemes re-evaluate the noise predictor on the variable
//! being advanced, so inverting them would require solving an implicit
//! equation; running the transition backwards with a re-evaluated ε only
//! approximates the starting state. The coupled scheme instead advances two
//! copies of the state, always feeding the predictor the *partner* copy.
//! Every predictor evaluation used on the way up can be reproduced verbatim
//! on the way down, which makes the reverse map exact up to rounding — for
//! any predictor, trained or not.

use crate::denoiser::NoisePredictor;
use crate::error::{Error, Result};
use crate::schedule::{
    ddim_generation_step, ddim_inversion_transition, NoiseSchedule, Timestep,
};
use crate::tensor::{Scalar, Tensor};

/// Paired state for the coupled scheme. After [`coupled_invert`], `x` holds
/// the ρ-mixed latent at `t` and `x_aux` holds the auxiliary intermediate
/// x′_int — exactly the pair needed to reverse the step.
#[derive(Clone, Debug)]
pub struct CoupledState<S: Scalar = f32> {
    pub x: Tensor<S>,
    pub x_aux: Tensor<S>,
    pub t: Timestep,
}

impl<S: Scalar> CoupledState<S> {
    /// Fresh pair at timestep `t`: the auxiliary copy starts equal to `x`.
    pub fn new(x: Tensor<S>, t: Timestep) -> Self {
        let x_aux = x.clone();
        CoupledState { x, x_aux, t }
    }
}

/// Record of one multi-step inversion: the target timesteps visited (strictly
/// increasing) and the latent after each sub-step.
#[derive(Clone, Debug)]
pub struct InversionTrace<S: Scalar = f32> {
    pub timesteps: Vec<Timestep>,
    pub latents: Vec<Tensor<S>>,
    /// Filled by round-trip experiments that come back to the start.
    pub reconstruction_error: Option<f64>,
}

impl<S: Scalar> InversionTrace<S> {
    fn empty() -> Self {
        InversionTrace {
            timesteps: Vec::new(),
            latents: Vec::new(),
            reconstruction_error: None,
        }
    }
}

/// The predictor cannot be queried at t = 0; when a formula calls for ε(·, 0)
/// we evaluate at the earliest valid timestep instead.
fn eval_t(t: Timestep) -> Timestep {
    t.max(1)
}

/// Multi-step inversion from `from` up to `to` in sub-steps of `delta`
/// (the last step is shortened to land exactly on `to`). Each sub-step
/// `cur → next` uses the straight-line approximation ε = eps_fn(x_cur, next):
/// the predictor sees the *current* latent but the *target* timestep.
pub fn multi_step_invert<S: Scalar>(
    x_start: &Tensor<S>,
    from: Timestep,
    to: Timestep,
    delta: usize,
    eps_fn: &dyn NoisePredictor<S>,
    sched: &NoiseSchedule,
) -> Result<(Tensor<S>, InversionTrace<S>)> {
    if to > sched.t_max() {
        return Err(Error::contract(format!(
            "inversion target {to} exceeds T={}",
            sched.t_max()
        )));
    }
    if from > to {
        return Err(Error::contract(format!(
            "inversion runs forward in t: from={from} > to={to}"
        )));
    }
    if delta == 0 {
        return Err(Error::contract("inversion sub-step must be >= 1"));
    }
    let mut trace = InversionTrace::empty();
    let mut x = x_start.clone();
    let mut cur = from;
    while cur < to {
        let next = (cur + delta).min(to);
        let eps = eps_fn.eps(&x, eval_t(next))?;
        x = ddim_inversion_transition(&x, &eps, cur, next, sched)?;
        trace.timesteps.push(next);
        trace.latents.push(x.clone());
        cur = next;
    }
    Ok((x, trace))
}

/// Plain inversion of clean data x0 up to timestep `s` in sub-steps of
/// `delta_s`. `s = 0` returns x0 unchanged with an empty trace.
pub fn naive_invert<S: Scalar>(
    x0: &Tensor<S>,
    s: Timestep,
    delta_s: usize,
    eps_fn: &dyn NoisePredictor<S>,
    sched: &NoiseSchedule,
) -> Result<(Tensor<S>, InversionTrace<S>)> {
    multi_step_invert(x0, 0, s, delta_s, eps_fn, sched)
}

/// Single-jump interval transition s → t with ε evaluated once at the
/// *source* state and timestep: x_t = transition(x_s, ε(x_s, s), s, t).
pub fn naive_interval_step<S: Scalar>(
    x_s: &Tensor<S>,
    s: Timestep,
    t: Timestep,
    eps_fn: &dyn NoisePredictor<S>,
    sched: &NoiseSchedule,
) -> Result<Tensor<S>> {
    let eps = eps_fn.eps(x_s, eval_t(s))?;
    ddim_inversion_transition(x_s, &eps, s, t, sched)
}

fn check_rho(rho: f64) -> Result<()> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::contract(format!("rho must be in (0, 1], got {rho}")));
    }
    Ok(())
}

/// Mixing rule: x_t = (1/ρ)·[x_int − (1−ρ)·x′_int].
pub fn mix<S: Scalar>(x_int: &Tensor<S>, x_aux_int: &Tensor<S>, rho: f64) -> Result<Tensor<S>> {
    check_rho(rho)?;
    let a = S::from_f64(1.0 / rho);
    let b = S::from_f64((1.0 - rho) / rho);
    Ok(x_int.zip_map(x_aux_int, |xi, xa| a * xi - b * xa))
}

/// Inverse of [`mix`]: x_int = ρ·x_t + (1−ρ)·x′_int.
pub fn unmix<S: Scalar>(x_t: &Tensor<S>, x_aux_int: &Tensor<S>, rho: f64) -> Result<Tensor<S>> {
    check_rho(rho)?;
    let a = S::from_f64(rho);
    let b = S::from_f64(1.0 - rho);
    Ok(x_t.zip_map(x_aux_int, |xt, xa| a * xt + b * xa))
}

/// One coupled inversion step s → t with mixing ratio ρ.
///
/// Starting from the pair (x_s, x′_s) at s = `state.t`:
///
/// 1. x′_int = transition(x′_s, ε(x_s, s), s → t)   — partner drives
/// 2. x_int  = transition(x_s, ε(x′_int, s), s → t) — partner drives
/// 3. x_t    = (1/ρ)·[x_int − (1−ρ)·x′_int]
///
/// Each predictor input differs from the variable being advanced, so both
/// evaluations can be replayed exactly when reversing. Returns the new state
/// carrying (x_t, x′_int) plus the unmixed x_int for diagnostics.
pub fn coupled_invert<S: Scalar>(
    state: &CoupledState<S>,
    t: Timestep,
    eps_fn: &dyn NoisePredictor<S>,
    rho: f64,
    sched: &NoiseSchedule,
) -> Result<(CoupledState<S>, Tensor<S>)> {
    check_rho(rho)?;
    let s = state.t;
    let eps_from_x = eps_fn.eps(&state.x, eval_t(s))?;
    let x_aux_int = ddim_inversion_transition(&state.x_aux, &eps_from_x, s, t, sched)?;
    let eps_from_aux = eps_fn.eps(&x_aux_int, eval_t(s))?;
    let x_int = ddim_inversion_transition(&state.x, &eps_from_aux, s, t, sched)?;
    let x_t = mix(&x_int, &x_aux_int, rho)?;
    Ok((
        CoupledState {
            x: x_t,
            x_aux: x_aux_int,
            t,
        },
        x_int,
    ))
}

/// Exact reverse of the coupled step, from the *unmixed* pair
/// (x_int, x′_int) at t back to (x_s, x′_s) at s. Order matters: x_s is
/// recovered first (its generating ε depended only on x′_int), and the
/// recovered x_s then reproduces the ε that generated x′_int.
pub fn coupled_exact_reverse<S: Scalar>(
    x_int: &Tensor<S>,
    x_aux_int: &Tensor<S>,
    t: Timestep,
    s: Timestep,
    eps_fn: &dyn NoisePredictor<S>,
    sched: &NoiseSchedule,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let eps_from_aux = eps_fn.eps(x_aux_int, eval_t(s))?;
    let x_s = ddim_generation_step(x_int, &eps_from_aux, t, s, sched)?;
    let eps_from_x = eps_fn.eps(&x_s, eval_t(s))?;
    let x_aux_s = ddim_generation_step(x_aux_int, &eps_from_x, t, s, sched)?;
    Ok((x_s, x_aux_s))
}

/// Reverses a state produced by [`coupled_invert`] (which carries the mixed
/// x_t and x′_int): unmixes, then runs the exact reverse.
pub fn coupled_reverse_state<S: Scalar>(
    state: &CoupledState<S>,
    s: Timestep,
    eps_fn: &dyn NoisePredictor<S>,
    rho: f64,
    sched: &NoiseSchedule,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let x_int = unmix(&state.x, &state.x_aux, rho)?;
    coupled_exact_reverse(&x_int, &state.x_aux, state.t, s, eps_fn, sched)
}

/// Relative reconstruction error of the coupled round trip s → t → s,
/// starting from a fresh pair (x_aux = x). Returns the worse of the two
/// recovered components' relative errors.
pub fn coupled_round_trip_error<S: Scalar>(
    x_s: &Tensor<S>,
    s: Timestep,
    t: Timestep,
    rho: f64,
    eps_fn: &dyn NoisePredictor<S>,
    sched: &NoiseSchedule,
) -> Result<f64> {
    let state = CoupledState::new(x_s.clone(), s);
    let (up, _) = coupled_invert(&state, t, eps_fn, rho, sched)?;
    let (x_rec, x_aux_rec) = coupled_reverse_state(&up, s, eps_fn, rho, sched)?;
    Ok(x_rec.rel_err(x_s).max(x_aux_rec.rel_err(x_s)))
}

/// Relative reconstruction error of the plain round trip: one naive interval
/// jump s → t, then a standard generation step back with ε re-evaluated at
/// (x_t, t). This is the baseline the coupled scheme is measured against.
pub fn naive_round_trip_error<S: Scalar>(
    x_s: &Tensor<S>,
    s: Timestep,
    t: Timestep,
    eps_fn: &dyn NoisePredictor<S>,
    sched: &NoiseSchedule,
) -> Result<f64> {
    let x_t = naive_interval_step(x_s, s, t, eps_fn, sched)?;
    let eps_back = eps_fn.eps(&x_t, t)?;
    let x_rec = ddim_generation_step(&x_t, &eps_back, t, s, sched)?;
    Ok(x_rec.rel_err(x_s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{DenoiserConfig, DenoiserModel, GaussianOracle};
    use crate::rng::{self, stream};
    use crate::schedule::default_schedule;
    use proptest::prelude::*;

    fn zero_eps<S: Scalar>() -> impl NoisePredictor<S> {
        |x: &Tensor<S>, _t: Timestep| Ok(Tensor::zeros(x.shape().to_vec()))
    }

    fn test_oracle() -> GaussianOracle<f64> {
        let mu = Tensor::new(vec![8], vec![0.1, 0.6, 0.3, 0.9, 0.2, 0.5, 0.0, 0.7]);
        GaussianOracle::new(mu, 0.16).unwrap()
    }

    /// Random-weight (nonlinear, untrained) network for exactness checks.
    fn random_net() -> DenoiserModel<f64> {
        let config = DenoiserConfig {
            side: 2,
            num_classes: 2,
            hidden_width: 24,
            hidden_layers: 2,
            time_embed_dim: 8,
            class_embed_dim: 4,
        };
        let mut model = DenoiserModel::<f64>::init(config, 21).unwrap();
        let mut r = rng::rng(22, stream::EVAL);
        let shape = model.params.value("out.weight").unwrap().shape().to_vec();
        *model.params.value_mut("out.weight").unwrap() = rng::randn(shape, &mut r).scale(0.3);
        model
    }

    #[test]
    fn naive_invert_at_zero_is_identity() {
        let sched = default_schedule();
        let x0 = Tensor::<f64>::new(vec![2], vec![0.3, -0.4]);
        let (x, trace) = naive_invert(&x0, 0, 100, &zero_eps(), &sched).unwrap();
        assert_eq!(x.data(), x0.data());
        assert!(trace.timesteps.is_empty());
    }

    #[test]
    fn naive_invert_with_zero_eps_telescopes() {
        // Every sub-step is a pure rescale, so the product telescopes to
        // √ᾱ_s regardless of the sub-step size.
        let sched = default_schedule();
        let x0 = Tensor::<f64>::new(vec![3], vec![1.0, -0.5, 0.25]);
        for (s, delta) in [(600usize, 200usize), (500, 137), (730, 730)] {
            let (x, trace) = naive_invert(&x0, s, delta, &zero_eps(), &sched).unwrap();
            let c = sched.sqrt_alpha_bar(s);
            for (got, want) in x.data().iter().zip(x0.data()) {
                assert!((got - c * want).abs() < 1e-12, "s={s}, delta={delta}");
            }
            assert_eq!(*trace.timesteps.last().unwrap(), s);
            assert!(trace.timesteps.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn naive_invert_partial_final_step_lands_exactly() {
        let sched = default_schedule();
        let x0 = Tensor::<f64>::new(vec![2], vec![0.5, 0.5]);
        let oracle = GaussianOracle::new(Tensor::new(vec![2], vec![0.1, 0.6]), 0.16).unwrap();
        let eps = oracle.eps_fn(&sched);
        // 450 = 2 full steps of 200 + one partial of 50.
        let (_, trace) = naive_invert(&x0, 450, 200, &eps, &sched).unwrap();
        assert_eq!(trace.timesteps, vec![200, 400, 450]);
    }

    #[test]
    fn naive_inversion_error_grows_with_substep_size() {
        let sched = default_schedule();
        let mut r = rng::rng(31, stream::EVAL);
        let x0 = rng::randn::<f64>(vec![8], &mut r).scale(0.3);
        let oracle = test_oracle();
        let eps = oracle.eps_fn(&sched);
        let s = 800;
        let (reference, _) = naive_invert(&x0, s, 1, &eps, &sched).unwrap();
        let mut errs = Vec::new();
        for delta in [50usize, 100, 150, 200] {
            let (coarse, _) = naive_invert(&x0, s, delta, &eps, &sched).unwrap();
            errs.push(coarse.rel_err(&reference));
        }
        for w in errs.windows(2) {
            assert!(w[0] < w[1], "errors not increasing: {errs:?}");
        }
        assert!(errs[0] > 0.0);
    }

    #[test]
    fn interval_step_error_nondecreasing_in_width() {
        let sched = default_schedule();
        let mut r = rng::rng(32, stream::EVAL);
        let oracle = test_oracle();
        let eps = oracle.eps_fn(&sched);
        let s = 600;
        let x0 = rng::randn::<f64>(vec![8], &mut r).scale(0.3);
        let (x_s, _) = naive_invert(&x0, s, 1, &eps, &sched).unwrap();
        let mut errs = Vec::new();
        for dt in [25usize, 50, 150, 200] {
            let t = s + dt;
            let jump = naive_interval_step(&x_s, s, t, &eps, &sched).unwrap();
            let (fine, _) = multi_step_invert(&x_s, s, t, 1, &eps, &sched).unwrap();
            errs.push(jump.rel_err(&fine));
        }
        for w in errs.windows(2) {
            assert!(w[0] <= w[1], "errors decreased: {errs:?}");
        }
    }

    #[test]
    fn mix_rho_one_is_identity_on_x_int() {
        let mut r = rng::rng(33, stream::EVAL);
        let a = rng::randn::<f32>(vec![16], &mut r);
        let b = rng::randn::<f32>(vec![16], &mut r);
        let mixed = mix(&a, &b, 1.0).unwrap();
        assert_eq!(mixed.data(), a.data());
        let un = unmix(&mixed, &b, 1.0).unwrap();
        assert_eq!(un.data(), a.data());
    }

    #[test]
    fn mix_unmix_round_trip_32bit() {
        let mut r = rng::rng(34, stream::EVAL);
        let x_int = rng::randn::<f32>(vec![64], &mut r);
        let x_aux = rng::randn::<f32>(vec![64], &mut r);
        let mixed = mix(&x_int, &x_aux, 0.93).unwrap();
        let back = unmix(&mixed, &x_aux, 0.93).unwrap();
        let max_dev = back.sub(&x_int).max_abs();
        assert!(max_dev < 1e-6, "max abs deviation {max_dev}");
    }

    #[test]
    fn equal_pair_mixes_to_itself() {
        let v = Tensor::<f64>::new(vec![3], vec![0.4, -1.2, 2.0]);
        for rho in [0.1, 0.5, 0.93] {
            let mixed = mix(&v, &v, rho).unwrap();
            assert!(mixed.rel_err(&v) < 1e-12);
            let un = unmix(&mixed, &v, rho).unwrap();
            assert!(un.rel_err(&v) < 1e-12);
        }
    }

    #[test]
    fn rho_bounds_are_enforced() {
        let v = Tensor::<f64>::zeros(vec![2]);
        assert!(mix(&v, &v, 0.0).is_err());
        assert!(mix(&v, &v, 1.2).is_err());
        assert!(unmix(&v, &v, -0.5).is_err());
        let sched = default_schedule();
        let state = CoupledState::new(v, 100);
        assert!(coupled_invert(&state, 300, &zero_eps::<f64>(), 0.0, &sched).is_err());
    }

    #[test]
    fn coupled_with_zero_eps_is_pure_rescale_any_rho() {
        let sched = default_schedule();
        let x_s = Tensor::<f64>::new(vec![4], vec![0.2, -0.8, 1.1, 0.0]);
        let want = x_s.scale((sched.alpha_bar(500) / sched.alpha_bar(100)).sqrt());
        for rho in [0.1, 0.5, 1.0] {
            let state = CoupledState::new(x_s.clone(), 100);
            let (up, x_int) = coupled_invert(&state, 500, &zero_eps(), rho, &sched).unwrap();
            assert!(x_int.rel_err(&want) < 1e-12);
            assert!(up.x_aux.rel_err(&want) < 1e-12);
            assert!(up.x.rel_err(&want) < 1e-12, "rho={rho}");
        }
    }

    #[test]
    fn coupled_rho_one_returns_x_int_exactly() {
        let sched = default_schedule();
        let oracle = test_oracle();
        let eps = oracle.eps_fn(&sched);
        let mut r = rng::rng(35, stream::EVAL);
        let x_s = rng::randn::<f64>(vec![8], &mut r);
        let state = CoupledState::new(x_s, 250);
        let (up, x_int) = coupled_invert(&state, 600, &eps, 1.0, &sched).unwrap();
        assert_eq!(up.x.data(), x_int.data());
    }

    #[test]
    fn coupled_matches_literal_formula_transcription() {
        // Independent re-derivation: the update written out exactly as the
        // two-line formula, with the non-factored coefficient arrangement.
        let sched = default_schedule();
        let oracle = test_oracle();
        let eps = oracle.eps_fn(&sched);
        let mut r = rng::rng(36, stream::EVAL);
        let x_s = rng::randn::<f64>(vec![8], &mut r);
        let (s, t) = (300usize, 550usize);
        let state = CoupledState::new(x_s.clone(), s);
        let (up, x_int) = coupled_invert(&state, t, &eps, 0.93, &sched).unwrap();

        let ab_s = sched.alpha_bar(s);
        let ab_t = sched.alpha_bar(t);
        let transcribe = |x: &Tensor<f64>, e: &Tensor<f64>| -> Tensor<f64> {
            x.zip_map(e, |xv, ev| {
                ab_t.sqrt() * (xv - (1.0 - ab_s).sqrt() * ev) / ab_s.sqrt()
                    + (1.0 - ab_t).sqrt() * ev
            })
        };
        let e1 = eps.eps(&x_s, s).unwrap();
        let aux_int = transcribe(&x_s, &e1); // x'_s == x_s at init
        let e2 = eps.eps(&aux_int, s).unwrap();
        let int = transcribe(&x_s, &e2);
        let mixed = int.zip_map(&aux_int, |a, b| (a - (1.0 - 0.93) * b) / 0.93);

        assert!(x_int.rel_err(&int) < 1e-6);
        assert!(up.x_aux.rel_err(&aux_int) < 1e-6);
        assert!(up.x.rel_err(&mixed) < 1e-6);
    }

    #[test]
    fn round_trip_zero_eps_is_identity() {
        let sched = default_schedule();
        let x_s = Tensor::<f64>::new(vec![4], vec![0.7, -0.1, 0.4, 1.3]);
        let err = coupled_round_trip_error(&x_s, 200, 800, 0.5, &zero_eps(), &sched).unwrap();
        assert!(err < 1e-12, "err {err}");
    }

    #[test]
    fn round_trip_exact_for_random_network() {
        // The central claim: exactness holds for an arbitrary nonlinear
        // predictor, not just well-behaved ones.
        let sched = default_schedule();
        let model = random_net();
        let eps = model.eps_fn(crate::denoiser::Condition::Null, 1.0);
        let mut r = rng::rng(37, stream::EVAL);
        for &(s, t, rho) in &[(0usize, 200usize, 0.93), (150, 350, 0.5), (400, 1000, 0.07), (999, 1000, 1.0)] {
            let x_s = rng::randn::<f64>(vec![4], &mut r);
            let err = coupled_round_trip_error(&x_s, s, t, rho, &eps, &sched).unwrap();
            assert!(err < 1e-10, "(s={s}, t={t}, rho={rho}): err {err}");
        }
    }

    #[test]
    fn round_trip_beats_naive_with_oracle() {
        let sched = default_schedule();
        let oracle = test_oracle();
        let eps = oracle.eps_fn(&sched);
        let mut r = rng::rng(38, stream::EVAL);
        let x0 = rng::randn::<f64>(vec![8], &mut r).scale(0.3);
        let (x_s, _) = naive_invert(&x0, 400, 1, &eps, &sched).unwrap();
        let t = 600;
        let naive = naive_round_trip_error(&x_s, 400, t, &eps, &sched).unwrap();
        let coupled = coupled_round_trip_error(&x_s, 400, t, 0.93, &eps, &sched).unwrap();
        assert!(
            coupled * 10.0 <= naive,
            "coupled {coupled} not 10x better than naive {naive}"
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn round_trip_exact_for_sampled_triples(
            seed in 0u64..500,
            s_raw in 0usize..999,
            dt in 1usize..400,
            rho_pct in 5u32..=100,
        ) {
            let sched = default_schedule();
            let oracle = test_oracle();
            let eps = oracle.eps_fn(&sched);
            let s = s_raw;
            let t = (s + dt).min(1000);
            let rho = rho_pct as f64 / 100.0;
            let mut r = rng::rng(seed, stream::EVAL);
            let x_s = rng::randn::<f64>(vec![8], &mut r);
            let err = coupled_round_trip_error(&x_s, s, t, rho, &eps, &sched).unwrap();
            prop_assert!(err < 1e-10, "(s={}, t={}, rho={}): err {}", s, t, rho, err);
        }

        #[test]
        fn mixing_maps_are_mutually_inverse(
            seed in 0u64..500,
            rho_pct in 1u32..=100,
        ) {
            let rho = rho_pct as f64 / 100.0;
            let mut r = rng::rng(seed, stream::EVAL);
            let x_int = rng::randn::<f64>(vec![8], &mut r);
            let x_aux = rng::randn::<f64>(vec![8], &mut r);
            let there = mix(&x_int, &x_aux, rho).unwrap();
            let back = unmix(&there, &x_aux, rho).unwrap();
            prop_assert!(back.rel_err(&x_int) < 1e-12);
            // and in the other composition order
            let back2 = mix(&unmix(&there, &x_aux, rho).unwrap(), &x_aux, rho).unwrap();
            prop_assert!(back2.rel_err(&there) < 1e-12);
        }
    }
}
