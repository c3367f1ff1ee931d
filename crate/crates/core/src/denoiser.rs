//! The noise predictor ε(x, t, c): a small conditional MLP trained from
//! scratch, plus a closed-form optimal predictor for isotropic Gaussian data.
//!
//! The oracle exists so inversion exactness can be certified against a
//! predictor with zero training error; the MLP is what distillation actually
//! runs against. Both are exposed through the [`NoisePredictor`] trait so the
//! inversion code is agnostic to which one drives it.

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{self, stream};
use crate::schedule::{NoiseSchedule, Timestep};
use crate::store::ParamStore;
use crate::tape::{bind_constants, NodeId, StoreBinding, Tape};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Conditioning input: the class label plays the role of the prompt, with a
/// dedicated null token for unconditional prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Condition {
    Null,
    Label(usize),
}

impl Condition {
    /// Row index into the class-embedding table; the null token is the last
    /// row.
    pub fn embed_id(self, num_classes: usize) -> Result<usize> {
        match self {
            Condition::Null => Ok(num_classes),
            Condition::Label(l) if l < num_classes => Ok(l),
            Condition::Label(l) => Err(Error::contract(format!(
                "label {l} out of range for {num_classes} classes"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub side: usize,
    pub num_classes: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub time_embed_dim: usize,
    pub class_embed_dim: usize,
}

impl DenoiserConfig {
    pub fn new(side: usize, num_classes: usize) -> Self {
        DenoiserConfig {
            side,
            num_classes,
            hidden_width: 256,
            hidden_layers: 3,
            time_embed_dim: 32,
            class_embed_dim: 16,
        }
    }

    pub fn dim(&self) -> usize {
        self.side * self.side
    }

    pub fn input_dim(&self) -> usize {
        self.dim() + self.time_embed_dim + self.class_embed_dim
    }

    fn validate(&self) -> Result<()> {
        if self.side == 0 || self.num_classes == 0 || self.hidden_width == 0 {
            return Err(Error::Config("denoiser dims must be positive".into()));
        }
        if self.hidden_layers == 0 {
            return Err(Error::Config("need at least one hidden layer".into()));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(Error::Config(
                "time_embed_dim must be even and >= 2".into(),
            ));
        }
        if self.class_embed_dim == 0 {
            return Err(Error::Config("class_embed_dim must be positive".into()));
        }
        Ok(())
    }
}

/// MLP over [flattened image | sinusoidal time embedding | class embedding].
/// The output layer is zero-initialized, so a fresh model predicts ε̂ = 0
/// everywhere — a useful fixed point for tests.
#[derive(Clone, Debug)]
pub struct DenoiserModel<S: Scalar = f32> {
    config: DenoiserConfig,
    pub params: ParamStore<S>,
}

impl<S: Scalar> DenoiserModel<S> {
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::rng(seed, stream::MODEL_INIT);
        let mut params = ParamStore::new();
        let mut prev = config.input_dim();
        for i in 0..config.hidden_layers {
            let std = (2.0 / prev as f64).sqrt();
            let w = rng::randn::<S>(vec![config.hidden_width, prev], &mut r)
                .scale(S::from_f64(std));
            params.insert(format!("fc{i}.weight"), w)?;
            params.insert(format!("fc{i}.bias"), Tensor::zeros(vec![config.hidden_width]))?;
            prev = config.hidden_width;
        }
        params.insert("out.weight", Tensor::zeros(vec![config.dim(), prev]))?;
        params.insert("out.bias", Tensor::zeros(vec![config.dim()]))?;
        let table = rng::randn::<S>(
            vec![config.num_classes + 1, config.class_embed_dim],
            &mut r,
        )
        .scale(S::from_f64(0.5));
        params.insert("class_embed.table", table)?;
        Ok(DenoiserModel { config, params })
    }

    pub fn from_parts(config: DenoiserConfig, params: ParamStore<S>) -> Result<Self> {
        config.validate()?;
        // Spot-check the shapes that the forward pass will rely on.
        let w0 = params.value("fc0.weight")?;
        if w0.shape() != [config.hidden_width, config.input_dim()] {
            return Err(Error::shape(
                "denoiser",
                format!("fc0.weight {:?} vs config {:?}", w0.shape(), config),
            ));
        }
        let out = params.value("out.weight")?;
        if out.shape() != [config.dim(), config.hidden_width] {
            return Err(Error::shape(
                "denoiser",
                format!("out.weight {:?} vs config {:?}", out.shape(), config),
            ));
        }
        Ok(DenoiserModel { config, params })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn cast<T: Scalar>(&self) -> DenoiserModel<T> {
        DenoiserModel {
            config: self.config,
            params: self.params.cast::<T>(),
        }
    }

    /// The predictor as a closure over (x, t), for the inversion drivers.
    pub fn eps_fn(&self, c: Condition, guidance: f64) -> impl NoisePredictor<S> + '_ {
        move |x: &Tensor<S>, t: Timestep| predict_eps(self, x, t, c, guidance)
    }
}

/// Sinusoidal embedding of an absolute timestep: `dim/2` sines followed by
/// `dim/2` cosines on a geometric frequency ladder from 1 down to 1e-4.
pub fn time_embedding(t: Timestep, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let exponent = if half > 1 { k as f64 / (half - 1) as f64 } else { 0.0 };
        let freq = (-(10_000f64).ln() * exponent).exp();
        let angle = t as f64 * freq;
        out[k] = angle.sin();
        out[half + k] = angle.cos();
    }
    out
}

/// Optional low-rank perturbations per hidden layer: (A node [r,in],
/// B node [out,r], scale). Entry `i` applies to `fc{i}`.
pub struct LayerAdapters {
    pub per_layer: Vec<Option<(NodeId, NodeId, f64)>>,
}

/// Records the full forward pass on `tape`. `lookup` resolves parameter
/// names to already-bound tape nodes, so callers decide which parameters are
/// differentiable. Returns the [B, d] output node.
pub fn forward_batch<S: Scalar>(
    tape: &mut Tape<S>,
    lookup: &dyn Fn(&str) -> Option<NodeId>,
    config: &DenoiserConfig,
    x: NodeId,
    ts: &[Timestep],
    cond_ids: &[usize],
    adapters: Option<&LayerAdapters>,
) -> Result<NodeId> {
    let b = tape.value(x).shape()[0];
    if ts.len() != b || cond_ids.len() != b {
        return Err(Error::contract(format!(
            "forward_batch: {b} rows vs {} timesteps / {} conditions",
            ts.len(),
            cond_ids.len()
        )));
    }
    let fetch = |name: &str| {
        lookup(name).ok_or_else(|| Error::contract(format!("parameter '{name}' not bound")))
    };

    let mut t_data = Vec::with_capacity(b * config.time_embed_dim);
    for &t in ts {
        t_data.extend(
            time_embedding(t, config.time_embed_dim)
                .into_iter()
                .map(S::from_f64),
        );
    }
    let t_embed = tape.constant(Tensor::new(vec![b, config.time_embed_dim], t_data));
    let table = fetch("class_embed.table")?;
    let c_embed = tape.gather_rows(table, cond_ids)?;

    let mut h = tape.concat_cols(x, t_embed)?;
    h = tape.concat_cols(h, c_embed)?;
    for i in 0..config.hidden_layers {
        let w = fetch(&format!("fc{i}.weight"))?;
        let bias = fetch(&format!("fc{i}.bias"))?;
        let mut z = tape.linear(h, w, bias)?;
        if let Some(ad) = adapters {
            if let Some(Some((a, bm, scale))) = ad.per_layer.get(i) {
                let za = tape.matmul_nt(h, *a)?;
                let zb = tape.matmul_nt(za, *bm)?;
                let scaled = tape.scale(zb, *scale);
                z = tape.add(z, scaled)?;
            }
        }
        h = tape.silu(z);
    }
    let w = fetch("out.weight")?;
    let bias = fetch("out.bias")?;
    tape.linear(h, w, bias)
}

/// Plain (inference) forward pass for a batch at per-row timesteps.
fn forward_inference<S: Scalar>(
    model: &DenoiserModel<S>,
    x: &Tensor<S>,
    ts: &[Timestep],
    cond_ids: &[usize],
) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let nodes = bind_constants(&mut tape, &model.params);
    let xid = tape.constant(x.clone());
    let out = forward_batch(
        &mut tape,
        &|n| nodes.get(n).copied(),
        &model.config,
        xid,
        ts,
        cond_ids,
        None,
    )?;
    Ok(tape.value(out).clone())
}

/// Normalizes a `[d]` state or `[B, d]` batch to batch form; the flag
/// records whether the caller passed a single state.
pub(crate) fn to_batch<S: Scalar>(
    x: &Tensor<S>,
    d: usize,
    op: &'static str,
) -> Result<(Tensor<S>, bool)> {
    if x.shape().len() == 1 && x.len() == d {
        Ok((x.clone().reshape(vec![1, d]), true))
    } else if x.shape().len() == 2 && x.shape()[1] == d {
        Ok((x.clone(), false))
    } else {
        Err(Error::shape(
            op,
            format!("state {:?} vs dim {d}", x.shape()),
        ))
    }
}

/// ε prediction with optional classifier-free blending. `x` may be a single
/// state `[d]` or a batch `[B, d]` sharing one timestep.
///
/// * guidance g = 1 (or a null condition): one forward pass.
/// * otherwise: ε̂ = ε_null + g·(ε_label − ε_null).
pub fn predict_eps<S: Scalar>(
    model: &DenoiserModel<S>,
    x: &Tensor<S>,
    t: Timestep,
    c: Condition,
    guidance: f64,
) -> Result<Tensor<S>> {
    if t == 0 {
        return Err(Error::contract("predict_eps requires t >= 1 (t = 0 is clean data)"));
    }
    let d = model.config.dim();
    let (batch, single) = to_batch(x, d, "predict_eps")?;
    let b = batch.shape()[0];
    let ts = vec![t; b];
    let null_id = Condition::Null.embed_id(model.config.num_classes)?;
    let cond_id = c.embed_id(model.config.num_classes)?;

    let out = if guidance == 1.0 || cond_id == null_id {
        forward_inference(model, &batch, &ts, &vec![cond_id; b])?
    } else {
        let eps_null = forward_inference(model, &batch, &ts, &vec![null_id; b])?;
        let eps_cond = forward_inference(model, &batch, &ts, &vec![cond_id; b])?;
        let g = S::from_f64(guidance);
        eps_null.zip_map(&eps_cond, |n, c| n + g * (c - n))
    };
    Ok(if single { out.reshape(vec![d]) } else { out })
}

/// Anything that maps a noisy state and timestep to a noise estimate.
/// Closures qualify via the blanket impl.
pub trait NoisePredictor<S: Scalar> {
    fn eps(&self, x: &Tensor<S>, t: Timestep) -> Result<Tensor<S>>;
}

impl<S, F> NoisePredictor<S> for F
where
    S: Scalar,
    F: Fn(&Tensor<S>, Timestep) -> Result<Tensor<S>>,
{
    fn eps(&self, x: &Tensor<S>, t: Timestep) -> Result<Tensor<S>> {
        self(x, t)
    }
}

/// Closed-form optimal predictor for data x0 ~ N(μ, var_d·I):
/// ε*(x, t) = √(1−ᾱ_t)·(x − √ᾱ_t·μ) / (ᾱ_t·var_d + 1 − ᾱ_t), affine in x.
#[derive(Clone, Debug)]
pub struct GaussianOracle<S: Scalar = f32> {
    pub mu: Tensor<S>,
    pub var_d: f64,
}

impl<S: Scalar> GaussianOracle<S> {
    pub fn new(mu: Tensor<S>, var_d: f64) -> Result<Self> {
        if var_d <= 0.0 {
            return Err(Error::Config(format!("var_d must be > 0, got {var_d}")));
        }
        Ok(GaussianOracle { mu, var_d })
    }

    pub fn eps_fn<'a>(&'a self, sched: &'a NoiseSchedule) -> impl NoisePredictor<S> + 'a {
        move |x: &Tensor<S>, t: Timestep| oracle_eps(self, x, t, sched)
    }
}

pub fn oracle_eps<S: Scalar>(
    oracle: &GaussianOracle<S>,
    x: &Tensor<S>,
    t: Timestep,
    sched: &NoiseSchedule,
) -> Result<Tensor<S>> {
    if t == 0 {
        return Err(Error::contract("oracle_eps requires t >= 1"));
    }
    let d = oracle.mu.len();
    let ab = sched.alpha_bar(t);
    let coef = (1.0 - ab).sqrt() / (ab * oracle.var_d + 1.0 - ab);
    let shift = ab.sqrt();
    let (coef, shift) = (S::from_f64(coef), S::from_f64(shift));
    let apply_row = |row: &[S], out: &mut Vec<S>| {
        for (xi, mi) in row.iter().zip(oracle.mu.data()) {
            out.push(coef * (*xi - shift * *mi));
        }
    };
    if x.shape().len() == 1 && x.len() == d {
        let mut out = Vec::with_capacity(d);
        apply_row(x.data(), &mut out);
        Ok(Tensor::new(vec![d], out))
    } else if x.shape().len() == 2 && x.shape()[1] == d {
        let b = x.shape()[0];
        let mut out = Vec::with_capacity(b * d);
        for i in 0..b {
            apply_row(x.row(i), &mut out);
        }
        Ok(Tensor::new(vec![b, d], out))
    } else {
        Err(Error::shape(
            "oracle_eps",
            format!("state {:?} vs mu dim {d}", x.shape()),
        ))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Probability of replacing a sample's label with the null token, which
    /// is what makes classifier-free blending possible later.
    pub cond_drop_prob: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 5000,
            lr: 1e-3,
            batch_size: 32,
            cond_drop_prob: 0.1,
            seed: 0,
        }
    }
}

/// Denoising training: minimize E‖ε(√ᾱ_τ·x0 + √(1−ᾱ_τ)·e, τ, c) − e‖² over
/// the dataset with τ ~ U(1, T). Returns the per-step loss curve.
pub fn train_denoiser<S: Scalar>(
    model: &mut DenoiserModel<S>,
    dataset: &LabeledDataset<S>,
    sched: &NoiseSchedule,
    cfg: TrainConfig,
) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&cfg.cond_drop_prob) {
        return Err(Error::Config(format!(
            "cond_drop_prob must be in [0,1], got {}",
            cfg.cond_drop_prob
        )));
    }
    if dataset.side() != model.config.side {
        return Err(Error::Config(format!(
            "dataset side {} vs model side {}",
            dataset.side(),
            model.config.side
        )));
    }
    if dataset.num_classes() > model.config.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model embeds {}",
            dataset.num_classes(),
            model.config.num_classes
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }

    let mut r = rng::rng(cfg.seed, stream::TRAIN);
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr));
    let b = cfg.batch_size;
    let d = model.config.dim();
    let t_max = sched.t_max();
    let null_id = model.config.num_classes;
    let mut curve = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let (x0, labels) = dataset.sample_batch(b, &mut r);
        let ts: Vec<Timestep> = (0..b).map(|_| r.random_range(1..=t_max)).collect();
        let noise = rng::randn::<S>(vec![b, d], &mut r);
        let ids: Vec<usize> = labels
            .iter()
            .map(|&l| {
                if r.random::<f64>() < cfg.cond_drop_prob {
                    null_id
                } else {
                    l
                }
            })
            .collect();

        // Per-row forward marginal (each row has its own timestep).
        let mut xt = Vec::with_capacity(b * d);
        for (i, &t) in ts.iter().enumerate() {
            let a = S::from_f64(sched.sqrt_alpha_bar(t));
            let s1 = S::from_f64(sched.sqrt_one_minus_alpha_bar(t));
            for (x, e) in x0.row(i).iter().zip(noise.row(i)) {
                xt.push(a * *x + s1 * *e);
            }
        }

        let mut tape = Tape::new();
        let binding = StoreBinding::bind_all(&mut tape, &model.params);
        let x_node = tape.constant(Tensor::new(vec![b, d], xt));
        let target = tape.constant(noise);
        let out = forward_batch(
            &mut tape,
            &|n| binding.node(n),
            &model.config,
            x_node,
            &ts,
            &ids,
            None,
        )?;
        let loss = tape.mse(out, target)?;
        let loss_val = tape.value(loss).data()[0].to_f64();
        if !loss_val.is_finite() {
            return Err(Error::NonFinite {
                context: format!(
                    "denoiser training loss at step {step} (seed {}, lr {})",
                    cfg.seed, cfg.lr
                ),
            });
        }
        let cots = tape.backward(loss, Tensor::scalar(S::one()))?;
        binding.accumulate_into(&cots, &mut model.params)?;
        opt.step(&mut model.params)?;
        curve.push(loss_val);
    }
    Ok(curve)
}
