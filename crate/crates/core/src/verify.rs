//! Self-contained verification suite: every module's key invariants packed
//! into named, machine-readable property checks over tiny internal fixtures.
//! The whole suite builds its own models and scenes (nothing is read from
//! disk) and finishes in seconds.

use crate::denoiser::{predict_eps, time_embedding, Condition, DenoiserConfig, DenoiserModel};
use crate::distill::{error_identity_check, esm_gradient, DistillConfig, LossKind};
use crate::error::Result;
use crate::gradcheck::{check_grads, GradCheckConfig};
use crate::inversion::{
    coupled_round_trip_error, mix, naive_round_trip_error, unmix,
};
use crate::lora::{predict_eps_lora, LoraAdapter, LoraConfig};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{self, stream};
use crate::schedule::{build_schedule, q_sample, NoiseSchedule, ScheduleKind};
use crate::splat::{init_scene, render, render_vjp, CameraPose, InitMode, SplatScene, SCENE_PARAMS};
use crate::store::ParamStore;
use crate::tape::Tape;
use crate::tensor::Tensor;
use rand::Rng;
use serde::Serialize;

/// Outcome of one named property check. `measured` is the quantity compared
/// against `threshold` (direction depends on the property; `passed` is
/// authoritative).
#[derive(Clone, Debug, Serialize)]
pub struct PropertyResult {
    pub property: String,
    pub passed: bool,
    pub measured: f64,
    pub threshold: f64,
    pub detail: String,
}

impl PropertyResult {
    fn below(name: &str, measured: f64, threshold: f64, detail: impl Into<String>) -> Self {
        PropertyResult {
            property: name.into(),
            passed: measured.is_finite() && measured < threshold,
            measured,
            threshold,
            detail: detail.into(),
        }
    }

    fn at_least(name: &str, measured: f64, threshold: f64, detail: impl Into<String>) -> Self {
        PropertyResult {
            property: name.into(),
            passed: measured.is_finite() && measured >= threshold,
            measured,
            threshold,
            detail: detail.into(),
        }
    }
}

fn small_sched() -> NoiseSchedule {
    build_schedule(200, 1e-4, 2e-2, ScheduleKind::Linear).expect("static params")
}

fn tiny_model(seed: u64) -> DenoiserModel<f64> {
    let config = DenoiserConfig {
        side: 4,
        num_classes: 2,
        hidden_width: 32,
        hidden_layers: 2,
        time_embed_dim: 8,
        class_embed_dim: 4,
    };
    let mut model = DenoiserModel::<f64>::init(config, seed).expect("static config");
    let mut r = rng::rng(seed.wrapping_add(1000), stream::VERIFY);
    let shape = model
        .params
        .value("out.weight")
        .expect("init layout")
        .shape()
        .to_vec();
    *model.params.value_mut("out.weight").expect("init layout") =
        rng::randn(shape, &mut r).scale(0.15);
    model
}

/// The mixing/unmixing round trip as a parameterized check, so the suite's
/// own failure path can be exercised by swapping in a broken mixing rule.
pub fn mixing_identity_check(
    mix_fn: &dyn Fn(&Tensor<f64>, &Tensor<f64>, f64) -> Result<Tensor<f64>>,
) -> PropertyResult {
    let mut r = rng::rng(11, stream::VERIFY);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let x_int = rng::randn::<f64>(vec![12], &mut r);
        let x_aux = rng::randn::<f64>(vec![12], &mut r);
        let rho = r.random_range(0.05..=1.0);
        let mixed = match mix_fn(&x_int, &x_aux, rho) {
            Ok(m) => m,
            Err(e) => {
                return PropertyResult {
                    property: "mixing-identity".into(),
                    passed: false,
                    measured: f64::INFINITY,
                    threshold: 1e-12,
                    detail: format!("mix failed: {e}"),
                }
            }
        };
        let back = match unmix(&mixed, &x_aux, rho) {
            Ok(b) => b,
            Err(e) => {
                return PropertyResult {
                    property: "mixing-identity".into(),
                    passed: false,
                    measured: f64::INFINITY,
                    threshold: 1e-12,
                    detail: format!("unmix failed: {e}"),
                }
            }
        };
        worst = worst.max(back.rel_err(&x_int));
    }
    PropertyResult::below(
        "mixing-identity",
        worst,
        1e-12,
        "unmix(mix(x)) recovers x over random pairs and rho",
    )
}

fn check_schedule_shape(sched: &NoiseSchedule) -> Vec<PropertyResult> {
    let mut min_drop = f64::INFINITY;
    let mut sigma_in_range = true;
    for t in 1..=sched.t_max() {
        min_drop = min_drop.min(sched.alpha_bar(t - 1) - sched.alpha_bar(t));
        let s = sched.sigma(t);
        sigma_in_range &= (0.0..=1.0).contains(&s);
    }
    // Independent product oracle in log space.
    let mut log_sum = 0.0;
    let mut worst_rel = 0.0f64;
    for t in 1..=sched.t_max() {
        log_sum += sched.alpha(t).ln();
        let oracle = log_sum.exp();
        worst_rel = worst_rel.max((sched.alpha_bar(t) - oracle).abs() / oracle);
    }
    vec![
        PropertyResult::at_least(
            "schedule-alpha-bar-strictly-decreasing",
            min_drop,
            0.0,
            format!("sigma range ok: {sigma_in_range}"),
        ),
        PropertyResult::below(
            "schedule-product-identity",
            worst_rel,
            1e-6,
            "cumulative alpha-bar vs independent log-space product",
        ),
    ]
}

fn check_q_sample_moments(sched: &NoiseSchedule) -> PropertyResult {
    let mut r = rng::rng(21, stream::VERIFY);
    let t = sched.t_max() / 2;
    let x0 = Tensor::<f64>::full(vec![4], 0.7);
    let n = 20_000;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n {
        let e = rng::randn::<f64>(vec![4], &mut r);
        let xt = q_sample(&x0, t, &e, sched).expect("shapes fixed");
        for v in xt.data() {
            sum += v;
            sum_sq += v * v;
        }
    }
    let count = (n * 4) as f64;
    let mean = sum / count;
    let var = sum_sq / count - mean * mean;
    let want_mean = sched.sqrt_alpha_bar(t) * 0.7;
    let want_var = 1.0 - sched.alpha_bar(t);
    let dev = ((mean - want_mean) / want_mean)
        .abs()
        .max(((var - want_var) / want_var).abs());
    PropertyResult::below(
        "q-sample-moments",
        dev,
        0.05,
        format!("mean {mean:.4} vs {want_mean:.4}, var {var:.4} vs {want_var:.4}"),
    )
}

fn check_tape_gradients() -> Vec<PropertyResult> {
    // Small two-layer network loss vs finite differences.
    let mut r = rng::rng(31, stream::VERIFY);
    let mut store = ParamStore::<f64>::new();
    store
        .insert("w0", rng::randn::<f64>(vec![6, 5], &mut r).scale(0.5))
        .expect("fresh store");
    store
        .insert("b0", rng::randn::<f64>(vec![6], &mut r).scale(0.1))
        .expect("fresh store");
    store
        .insert("w1", rng::randn::<f64>(vec![3, 6], &mut r).scale(0.5))
        .expect("fresh store");
    let x = rng::randn::<f64>(vec![2, 5], &mut r);
    let target = rng::randn::<f64>(vec![2, 3], &mut r);

    let loss_fn = |params: &ParamStore<f64>| -> Result<(f64, Option<ParamStore<f64>>)> {
        let mut tape = Tape::new();
        let binding = crate::tape::StoreBinding::bind_all(&mut tape, params);
        let xn = tape.constant(x.clone());
        let tn = tape.constant(target.clone());
        let h = tape.linear(
            xn,
            binding.node("w0").expect("bound"),
            binding.node("b0").expect("bound"),
        )?;
        let h = tape.silu(h);
        let zero_bias = tape.constant(Tensor::zeros(vec![3]));
        let y = tape.linear(h, binding.node("w1").expect("bound"), zero_bias)?;
        let loss = tape.mse(y, tn)?;
        let v = tape.value(loss).data()[0];
        let cots = tape.backward(loss, Tensor::scalar(1.0))?;
        let mut grads = params.clone();
        grads.zero_grads();
        binding.accumulate_into(&cots, &mut grads)?;
        Ok((v, Some(grads)))
    };

    let (_, grads) = loss_fn(&store).expect("forward");
    let grads = grads.expect("grads");
    let with_grads = {
        let mut s = store.clone();
        for name in s.names() {
            let g = grads.get(&name).expect("same names").grad.clone();
            s.accumulate_grad(&name, &g).expect("same shapes");
        }
        s
    };
    let report = check_grads(
        &with_grads,
        &with_grads.names(),
        |p| loss_fn(p).map(|(v, _)| v),
        GradCheckConfig {
            step: 1e-5,
            rel_tolerance: 1e-6,
            max_coords_per_tensor: 0,
        },
    )
    .expect("fd probe");

    // Cotangent linearity of the same graph's VJP.
    let lin_dev = {
        let mut tape = Tape::new();
        let binding = crate::tape::StoreBinding::bind_all(&mut tape, &store);
        let xn = tape.constant(x.clone());
        let h = tape
            .linear(
                xn,
                binding.node("w0").expect("bound"),
                binding.node("b0").expect("bound"),
            )
            .expect("shapes fixed");
        let h = tape.silu(h);
        let zero_bias = tape.constant(Tensor::zeros(vec![3]));
        let y = tape
            .linear(h, binding.node("w1").expect("bound"), zero_bias)
            .expect("shapes fixed");
        let mut r2 = rng::rng(32, stream::VERIFY);
        let c1 = rng::randn::<f64>(vec![2, 3], &mut r2);
        let c2 = rng::randn::<f64>(vec![2, 3], &mut r2);
        let (a, b) = (0.9, -1.7);
        let combo = c1.scale(a).add(&c2.scale(b));
        let g1 = tape.backward(y, c1).expect("vjp");
        let g2 = tape.backward(y, c2).expect("vjp");
        let gc = tape.backward(y, combo).expect("vjp");
        let mut dev = 0.0f64;
        for i in 0..gc.len() {
            if let (Some(gc_t), Some(g1_t), Some(g2_t)) = (&gc[i], &g1[i], &g2[i]) {
                let lin = g1_t.scale(a).add(&g2_t.scale(b));
                dev = dev.max(gc_t.rel_err(&lin));
            }
        }
        dev
    };

    vec![
        PropertyResult::below(
            "tape-gradients-match-finite-differences",
            report.rel_err,
            1e-6,
            format!("{} coordinates probed", report.coords_checked),
        ),
        PropertyResult::below(
            "tape-vjp-linear-in-cotangent",
            lin_dev,
            1e-12,
            "gradients of a*c1 + b*c2 vs linear combination",
        ),
    ]
}

fn check_adam_descent() -> PropertyResult {
    let mut store = ParamStore::<f64>::new();
    store
        .insert("w", Tensor::new(vec![3], vec![5.0, -4.0, 2.5]))
        .expect("fresh store");
    let mut opt = Adam::new(AdamConfig::with_lr(0.1));
    let mut prev = f64::INFINITY;
    let mut monotone = true;
    let mut last = 0.0;
    // 20 steps keep every coordinate short of the minimum, where Adam's
    // momentum would start oscillating and break strict descent.
    for _ in 0..20 {
        let loss: f64 = store
            .value("w")
            .expect("inserted")
            .data()
            .iter()
            .map(|v| v * v)
            .sum();
        monotone &= loss <= prev + 1e-9;
        prev = loss;
        last = loss;
        let g = store.value("w").expect("inserted").scale(2.0);
        store.accumulate_grad("w", &g).expect("shape");
        opt.step(&mut store).expect("finite");
    }
    PropertyResult {
        property: "adam-monotone-on-quadratic".into(),
        passed: monotone && last < 23.0,
        measured: last,
        threshold: 23.0,
        detail: format!("monotone: {monotone}, final loss {last:.4}"),
    }
}

fn check_inversion(sched: &NoiseSchedule) -> Vec<PropertyResult> {
    let model = tiny_model(41);
    let eps = model.eps_fn(Condition::Null, 1.0);
    let mut r = rng::rng(42, stream::VERIFY);
    let mut worst_coupled = 0.0f64;
    let mut naive_errs = Vec::new();
    for _ in 0..10 {
        let x = rng::randn::<f64>(vec![16], &mut r);
        let t = r.random_range(100..=sched.t_max());
        let s = t - r.random_range(25..=90);
        let rho = r.random_range(0.2..=1.0);
        worst_coupled =
            worst_coupled.max(coupled_round_trip_error(&x, s, t, rho, &eps, sched).expect("run"));
        naive_errs.push(naive_round_trip_error(&x, s, t, &eps, sched).expect("run"));
    }
    naive_errs.sort_by(f64::total_cmp);
    let naive_median = naive_errs[naive_errs.len() / 2];

    // Naive error grows with the interval width.
    let x = rng::randn::<f64>(vec![16], &mut r);
    let mut grid_errs = Vec::new();
    for delta in [25usize, 50, 150, 190] {
        let t = sched.t_max();
        let s = t - delta;
        grid_errs.push(naive_round_trip_error(&x, s, t, &eps, sched).expect("run"));
    }
    let nondecreasing = grid_errs.windows(2).all(|w| w[1] >= w[0] * 0.999);

    vec![
        PropertyResult::below(
            "coupled-round-trip-exact",
            worst_coupled,
            1e-10,
            "nonlinear predictor, random (s, t, rho)",
        ),
        PropertyResult::at_least(
            "naive-round-trip-error-dominates-coupled",
            naive_median / worst_coupled.max(1e-300),
            10.0,
            format!("naive median {naive_median:.3e} vs coupled worst {worst_coupled:.3e}"),
        ),
        PropertyResult {
            property: "naive-error-nondecreasing-in-interval".into(),
            passed: nondecreasing,
            measured: grid_errs[grid_errs.len() - 1] / grid_errs[0].max(1e-300),
            threshold: 1.0,
            detail: format!("errors over widening intervals: {grid_errs:?}"),
        },
    ]
}

fn check_denoiser(sched: &NoiseSchedule) -> Vec<PropertyResult> {
    // Fresh model predicts exactly zero.
    let fresh = DenoiserModel::<f64>::init(
        DenoiserConfig {
            side: 4,
            num_classes: 2,
            hidden_width: 16,
            hidden_layers: 2,
            time_embed_dim: 8,
            class_embed_dim: 4,
        },
        51,
    )
    .expect("static config");
    let mut r = rng::rng(52, stream::VERIFY);
    let x = rng::randn::<f64>(vec![16], &mut r);
    let zero_out = predict_eps(&fresh, &x, 100, Condition::Label(0), 1.0)
        .expect("valid input")
        .max_abs();

    // Classifier-free blend is the stated affine combination.
    let model = tiny_model(53);
    let g = 3.0;
    let blended = predict_eps(&model, &x, 80, Condition::Label(1), g).expect("valid input");
    let e_null = predict_eps(&model, &x, 80, Condition::Null, 1.0).expect("valid input");
    let e_cond = predict_eps(&model, &x, 80, Condition::Label(1), 1.0).expect("valid input");
    let manual = e_null.add(&e_cond.sub(&e_null).scale(g));
    let blend_dev = blended.rel_err(&manual);

    // Time embedding: bounded and discriminative.
    let e1 = time_embedding(1, 32);
    let e2 = time_embedding(sched.t_max(), 32);
    let bounded = e1
        .iter()
        .chain(&e2)
        .all(|v| (-1.0 - 1e-12..=1.0 + 1e-12).contains(v));
    let sep: f64 = e1
        .iter()
        .zip(&e2)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();

    vec![
        PropertyResult::below(
            "fresh-denoiser-predicts-zero",
            zero_out,
            1e-300,
            "zero-initialized output layer",
        ),
        PropertyResult::below(
            "guidance-blend-is-affine",
            blend_dev,
            1e-12,
            "g=3 blend vs manual combination",
        ),
        PropertyResult {
            property: "time-embedding-bounded-and-separating".into(),
            passed: bounded && sep > 0.1,
            measured: sep,
            threshold: 0.1,
            detail: format!("bounded: {bounded}"),
        },
    ]
}

fn check_lora() -> Vec<PropertyResult> {
    let model = tiny_model(61);
    let fresh = LoraAdapter::init(model.config(), LoraConfig::default(), 62).expect("static");
    let mut r = rng::rng(63, stream::VERIFY);
    let x = rng::randn::<f64>(vec![16], &mut r);
    let with = predict_eps_lora(&model, &fresh, &x, 90, Condition::Null).expect("valid");
    let without = predict_eps(&model, &x, 90, Condition::Null, 1.0).expect("valid");
    let fresh_dev = with.sub(&without).max_abs();

    // Rank-1 adapter equals an explicit weight merge.
    let mut adapter = fresh.clone();
    let mut merged = model.clone();
    for layer in 0..adapter.num_layers() {
        let a_name = format!("lora.fc{layer}.a");
        let b_name = format!("lora.fc{layer}.b");
        let b_shape = adapter.params.value(&b_name).expect("layout").shape().to_vec();
        *adapter.params.value_mut(&b_name).expect("layout") =
            rng::randn::<f64>(b_shape, &mut r).scale(0.05);
        let a = adapter.params.value(&a_name).expect("layout").clone();
        let b = adapter.params.value(&b_name).expect("layout").clone();
        let delta = b.matmul(&a).expect("conformable").scale(adapter.config().scale);
        let w_name = format!("fc{layer}.weight");
        let w = merged.params.value(&w_name).expect("layout").clone();
        *merged.params.value_mut(&w_name).expect("layout") = w.add(&delta);
    }
    let adapted = predict_eps_lora(&model, &adapter, &x, 90, Condition::Null).expect("valid");
    let direct = predict_eps(&merged, &x, 90, Condition::Null, 1.0).expect("valid");
    let merge_dev = adapted.rel_err(&direct);

    vec![
        PropertyResult::below(
            "fresh-adapter-is-identity",
            fresh_dev,
            1e-300,
            "zero-initialized B factor",
        ),
        PropertyResult::below(
            "adapter-equals-explicit-weight-merge",
            merge_dev,
            1e-12,
            "W + scale*B*A merged by hand",
        ),
    ]
}

fn check_renderer() -> Vec<PropertyResult> {
    let side = 12;
    let scene = init_scene::<f64>(InitMode::Random, 4, side, 71).expect("static");
    let pose = CameraPose {
        angle: 0.1,
        translation: [0.4, -0.2],
        zoom: 1.05,
    };
    let mut r = rng::rng(72, stream::VERIFY);
    let cot = rng::randn::<f64>(vec![1, side, side], &mut r);

    let mut store = scene.params.clone();
    let grads = render_vjp(&scene, &pose, side, &cot).expect("valid");
    for name in SCENE_PARAMS {
        store
            .accumulate_grad(name, grads.value(name).expect("layout"))
            .expect("shape");
    }
    let report = check_grads(
        &store,
        &store.names(),
        |params| {
            let probe = SplatScene::new(params.clone())?;
            let out = render(&probe, &pose, side)?;
            Ok(out
                .image
                .data()
                .iter()
                .zip(cot.data())
                .map(|(a, b)| a * b)
                .sum())
        },
        GradCheckConfig {
            step: 1e-4,
            rel_tolerance: 1e-3,
            max_coords_per_tensor: 0,
        },
    )
    .expect("fd probe");

    // Coverage mass monotone in opacity.
    let base_mass = render(&scene, &CameraPose::identity(), side)
        .expect("valid")
        .coverage
        .sum();
    let mut bumped = scene.clone();
    bumped
        .params
        .value_mut("opacity_logits")
        .expect("layout")
        .data_mut()[0] += 0.5;
    let bumped_mass = render(&bumped, &CameraPose::identity(), side)
        .expect("valid")
        .coverage
        .sum();

    // Low-opacity order insensitivity.
    let mut low = scene.clone();
    let n = low.n_splats();
    *low.params.value_mut("opacity_logits").expect("layout") = Tensor::full(vec![n], -3.5);
    let fwd = render(&low, &CameraPose::identity(), side).expect("valid");
    let mut rev_params = ParamStore::new();
    for name in SCENE_PARAMS {
        let t = low.params.value(name).expect("layout");
        let rows = t.shape()[0];
        let w = t.len() / rows;
        let mut data = Vec::with_capacity(t.len());
        for i in (0..rows).rev() {
            data.extend_from_slice(&t.data()[i * w..(i + 1) * w]);
        }
        rev_params
            .insert(name, Tensor::new(t.shape().to_vec(), data))
            .expect("fresh store");
    }
    let rev = SplatScene::new(rev_params).expect("same shapes");
    let bwd = render(&rev, &CameraPose::identity(), side).expect("valid");
    let order_dev = fwd.image.sub(&bwd.image).max_abs();

    vec![
        PropertyResult::below(
            "renderer-vjp-matches-finite-differences",
            report.rel_err,
            1e-3,
            format!("{} coordinates probed", report.coords_checked),
        ),
        PropertyResult::at_least(
            "coverage-mass-monotone-in-opacity",
            bumped_mass - base_mass,
            0.0,
            format!("{base_mass:.4} -> {bumped_mass:.4}"),
        ),
        PropertyResult::below(
            "low-opacity-compositing-order-insensitive",
            order_dev,
            1e-3,
            "forward vs reversed splat order at opacity < 0.05",
        ),
    ]
}

fn check_distill(sched: &NoiseSchedule) -> Vec<PropertyResult> {
    // The scalar error identity over many random pairs.
    let mut r = rng::rng(81, stream::VERIFY);
    let mut worst_residual = 0.0f64;
    let mut all_improved = true;
    for _ in 0..1000 {
        let delta: f64 = r.random_range(1e-3..10.0);
        let eta = delta * r.random_range(0.001..0.999);
        let id = error_identity_check(delta, eta);
        worst_residual = worst_residual.max(id.residual.abs());
        all_improved &= id.eps_esm < id.eps_ism;
    }
    let worked = error_identity_check(2.0, 0.5);

    // Stop-gradient: the estimator leaves model and adapter untouched.
    let model = tiny_model(82);
    let adapter = LoraAdapter::init(model.config(), LoraConfig::default(), 83).expect("static");
    let scene = init_scene::<f64>(InitMode::Random, 4, 4, 84).expect("static");
    let cfg = DistillConfig {
        loss: LossKind::Esm,
        delta_s: 60,
        delta_t: 40,
        t_min: 10,
        t_max: sched.t_max(),
        ..DistillConfig::default()
    };
    let before = (model.params.fingerprint(), adapter.params.fingerprint());
    let mut r2 = rng::rng(85, stream::VERIFY);
    let step = esm_gradient(
        &scene,
        &CameraPose::identity(),
        &model,
        &adapter,
        sched,
        &cfg,
        &mut r2,
    )
    .expect("valid");
    let untouched =
        before == (model.params.fingerprint(), adapter.params.fingerprint());

    vec![
        PropertyResult {
            property: "error-identity-residual".into(),
            passed: worst_residual < 1e-12 && all_improved,
            measured: worst_residual,
            threshold: 1e-12,
            detail: format!("all eps_esm < eps_ism: {all_improved}"),
        },
        PropertyResult {
            property: "error-identity-worked-instance".into(),
            passed: worked.eps_ism == 4.0 && worked.eps_esm == 2.5 && worked.residual == 0.0,
            measured: worked.eps_esm,
            threshold: 2.5,
            detail: "delta 2, eta 0.5".into(),
        },
        PropertyResult {
            property: "estimator-stop-gradient".into(),
            passed: untouched && step.report.eps_esm >= 0.0,
            measured: if untouched { 0.0 } else { 1.0 },
            threshold: 0.5,
            detail: "model/adapter fingerprints unchanged by esm gradient".into(),
        },
    ]
}

fn check_checkpoint_round_trip() -> PropertyResult {
    let dir = std::env::temp_dir().join(format!("esmlab-verify-{}", std::process::id()));
    let run = || -> Result<bool> {
        std::fs::create_dir_all(&dir)?;
        let path = dir.join("probe.ckpt");
        let mut store = ParamStore::<f32>::new();
        let mut r = rng::rng(91, stream::VERIFY);
        store.insert("a", rng::randn::<f32>(vec![3, 4], &mut r))?;
        store.insert("b", rng::randn::<f32>(vec![7], &mut r))?;
        crate::checkpoint::save_store(&path, "probe", serde_json::Value::Null, &store)?;
        let (_, loaded) = crate::checkpoint::load_store(&path)?;
        Ok(loaded.fingerprint() == store.fingerprint())
    };
    let outcome = run();
    let _ = std::fs::remove_dir_all(&dir);
    match outcome {
        Ok(same) => PropertyResult {
            property: "checkpoint-round-trip".into(),
            passed: same,
            measured: if same { 0.0 } else { 1.0 },
            threshold: 0.5,
            detail: "save/load preserves names, shapes, and bits".into(),
        },
        Err(e) => PropertyResult {
            property: "checkpoint-round-trip".into(),
            passed: false,
            measured: f64::INFINITY,
            threshold: 0.5,
            detail: format!("io failure: {e}"),
        },
    }
}

fn check_loop_determinism(sched: &NoiseSchedule) -> PropertyResult {
    let model = tiny_model(95);
    let cfg = DistillConfig {
        loss: LossKind::Ism,
        iterations: 2,
        delta_s: 60,
        delta_t: 40,
        t_min: 10,
        t_max: sched.t_max(),
        seed: 17,
        ..DistillConfig::default()
    };
    let run = || {
        crate::distill::distill_loop(
            init_scene::<f64>(InitMode::Random, 4, 4, 96).expect("static"),
            &mut |r: &mut rand_chacha::ChaCha8Rng| crate::splat::sample_pose(r, 4),
            &model,
            None,
            sched,
            &cfg,
        )
        .expect("valid")
    };
    let a = run();
    let b = run();
    let same_scene = a.scene.params.fingerprint() == b.scene.params.fingerprint();
    let same_log = a
        .records
        .iter()
        .zip(&b.records)
        .all(|(x, y)| x.t == y.t && x.grad_norm == y.grad_norm && x.eps_ism == y.eps_ism);
    PropertyResult {
        property: "distill-loop-replayable".into(),
        passed: same_scene && same_log,
        measured: if same_scene && same_log { 0.0 } else { 1.0 },
        threshold: 0.5,
        detail: "two runs with one seed produce identical scenes and logs".into(),
    }
}

/// Runs the complete suite. Pure apart from a checkpoint probe in the
/// temp directory; finishes in seconds.
pub fn run_all() -> Vec<PropertyResult> {
    let sched = small_sched();
    let mut results = Vec::new();
    results.extend(check_schedule_shape(&sched));
    results.push(check_q_sample_moments(&sched));
    results.extend(check_tape_gradients());
    results.push(check_adam_descent());
    results.push(mixing_identity_check(&|a, b, rho| mix(a, b, rho)));
    results.extend(check_inversion(&sched));
    results.extend(check_denoiser(&sched));
    results.extend(check_lora());
    results.extend(check_renderer());
    results.extend(check_distill(&sched));
    results.push(check_checkpoint_round_trip());
    results.push(check_loop_determinism(&sched));
    results
}
