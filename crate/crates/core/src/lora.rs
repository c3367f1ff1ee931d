//! Low-rank adapters over the denoiser's hidden layers.
//!
//! Each adapted layer gets factors A [r × in] and B [out × r]; the effective
//! weight is W + scale·B·A. B starts at zero, so a fresh adapter leaves the
//! base prediction bit-identical — the adapted predictor and the base
//! predictor only diverge once the adapter has been trained. The adapter is
//! what tracks the drifting rendered distribution during distillation while
//! the base model stays frozen.

use crate::denoiser::{
    forward_batch, to_batch, Condition, DenoiserConfig, DenoiserModel, LayerAdapters,
    NoisePredictor,
};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::rng::{self};
use crate::schedule::{q_sample, NoiseSchedule, Timestep};
use crate::store::ParamStore;
use crate::tape::{bind_constants, StoreBinding, Tape};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub scale: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig { rank: 4, scale: 1.0 }
    }
}

#[derive(Clone, Debug)]
pub struct LoraAdapter<S: Scalar = f32> {
    config: LoraConfig,
    /// (in, out) of each adapted hidden layer, in layer order.
    layer_dims: Vec<(usize, usize)>,
    pub params: ParamStore<S>,
}

fn a_name(layer: usize) -> String {
    format!("lora.fc{layer}.a")
}

fn b_name(layer: usize) -> String {
    format!("lora.fc{layer}.b")
}

impl<S: Scalar> LoraAdapter<S> {
    /// Fresh adapter for every hidden layer of `base_config`: A is small
    /// random, B is zero.
    pub fn init(base_config: &DenoiserConfig, config: LoraConfig, seed: u64) -> Result<Self> {
        if config.rank == 0 {
            return Err(Error::Config("adapter rank must be >= 1".into()));
        }
        let mut layer_dims = Vec::new();
        let mut prev = base_config.input_dim();
        for _ in 0..base_config.hidden_layers {
            layer_dims.push((prev, base_config.hidden_width));
            prev = base_config.hidden_width;
        }
        let min_dim = layer_dims
            .iter()
            .map(|&(i, o)| i.min(o))
            .min()
            .expect("at least one hidden layer");
        if config.rank * 2 > min_dim {
            return Err(Error::Config(format!(
                "rank {} too large for layer dims (min {min_dim})",
                config.rank
            )));
        }
        let mut r = rng::rng(seed, rng::stream::MODEL_INIT);
        let mut params = ParamStore::new();
        for (layer, &(in_dim, out_dim)) in layer_dims.iter().enumerate() {
            let std = 1.0 / (in_dim as f64).sqrt();
            let a = rng::randn::<S>(vec![config.rank, in_dim], &mut r).scale(S::from_f64(std));
            params.insert(a_name(layer), a)?;
            params.insert(b_name(layer), Tensor::zeros(vec![out_dim, config.rank]))?;
        }
        Ok(LoraAdapter {
            config,
            layer_dims,
            params,
        })
    }

    pub fn from_parts(
        base_config: &DenoiserConfig,
        config: LoraConfig,
        params: ParamStore<S>,
    ) -> Result<Self> {
        let template = LoraAdapter::<S>::init(base_config, config, 0)?;
        for (layer, &(in_dim, out_dim)) in template.layer_dims.iter().enumerate() {
            let a = params.value(&a_name(layer))?;
            let b = params.value(&b_name(layer))?;
            if a.shape() != [config.rank, in_dim] || b.shape() != [out_dim, config.rank] {
                return Err(Error::shape(
                    "lora",
                    format!(
                        "layer {layer}: A {:?} / B {:?} vs expected [{},{in_dim}] / [{out_dim},{}]",
                        a.shape(),
                        b.shape(),
                        config.rank,
                        config.rank
                    ),
                ));
            }
        }
        Ok(LoraAdapter {
            config,
            layer_dims: template.layer_dims,
            params,
        })
    }

    pub fn config(&self) -> LoraConfig {
        self.config
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len()
    }

    pub fn cast<T: Scalar>(&self) -> LoraAdapter<T> {
        LoraAdapter {
            config: self.config,
            layer_dims: self.layer_dims.clone(),
            params: self.params.cast::<T>(),
        }
    }

    /// The adapted predictor ε_lo as a closure over (x, t).
    pub fn eps_fn<'a>(
        &'a self,
        base: &'a DenoiserModel<S>,
        c: Condition,
    ) -> impl NoisePredictor<S> + 'a {
        move |x: &Tensor<S>, t: Timestep| predict_eps_lora(base, self, x, t, c)
    }
}

/// Forward pass with each adapted weight W replaced by W + scale·B·A; the
/// base model is untouched. Accepts `[d]` or `[B, d]` states.
pub fn predict_eps_lora<S: Scalar>(
    base: &DenoiserModel<S>,
    adapter: &LoraAdapter<S>,
    x: &Tensor<S>,
    t: Timestep,
    c: Condition,
) -> Result<Tensor<S>> {
    if t == 0 {
        return Err(Error::contract("predict_eps_lora requires t >= 1"));
    }
    let d = base.config().dim();
    let (batch, single) = to_batch(x, d, "predict_eps_lora")?;
    let b = batch.shape()[0];
    let cond_id = c.embed_id(base.config().num_classes)?;

    let mut tape = Tape::new();
    let base_nodes = bind_constants(&mut tape, &base.params);
    let adapter_nodes = bind_constants(&mut tape, &adapter.params);
    let adapters = layer_adapters(adapter, &|n| adapter_nodes.get(n).copied())?;
    let x_node = tape.constant(batch);
    let out = forward_batch(
        &mut tape,
        &|n| base_nodes.get(n).copied(),
        base.config(),
        x_node,
        &vec![t; b],
        &vec![cond_id; b],
        Some(&adapters),
    )?;
    let out = tape.value(out).clone();
    Ok(if single { out.reshape(vec![d]) } else { out })
}

fn layer_adapters<S: Scalar>(
    adapter: &LoraAdapter<S>,
    lookup: &dyn Fn(&str) -> Option<crate::tape::NodeId>,
) -> Result<LayerAdapters> {
    let mut per_layer = Vec::with_capacity(adapter.num_layers());
    for layer in 0..adapter.num_layers() {
        let a = lookup(&a_name(layer))
            .ok_or_else(|| Error::contract(format!("adapter factor '{}' not bound", a_name(layer))))?;
        let b = lookup(&b_name(layer))
            .ok_or_else(|| Error::contract(format!("adapter factor '{}' not bound", b_name(layer))))?;
        per_layer.push(Some((a, b, adapter.config.scale)));
    }
    Ok(LayerAdapters { per_layer })
}

/// Denoising loss of the adapted predictor at a fixed (x_t, τ, e) triple:
/// mean‖ε_lo(x_t, τ, ∅) − e‖². Pure value, no gradients.
pub fn lora_dsm_loss<S: Scalar>(
    base: &DenoiserModel<S>,
    adapter: &LoraAdapter<S>,
    x_t: &Tensor<S>,
    tau: Timestep,
    target: &Tensor<S>,
) -> Result<f64> {
    let eps = predict_eps_lora(base, adapter, x_t, tau, Condition::Null)?;
    if eps.shape() != target.shape() {
        return Err(Error::shape(
            "lora_dsm_loss",
            format!("eps {:?} vs target {:?}", eps.shape(), target.shape()),
        ));
    }
    Ok(eps.sub(target).norm_sq() / eps.len() as f64)
}

/// Same loss, with gradients accumulated into the adapter's A/B factors.
/// The base parameters enter as constants, so nothing can flow into them.
pub fn lora_dsm_loss_backward<S: Scalar>(
    base: &DenoiserModel<S>,
    adapter: &mut LoraAdapter<S>,
    x_t: &Tensor<S>,
    tau: Timestep,
    target: &Tensor<S>,
) -> Result<f64> {
    let d = base.config().dim();
    let (batch, _) = to_batch(x_t, d, "lora_dsm_loss_backward")?;
    let (target_batch, _) = to_batch(target, d, "lora_dsm_loss_backward")?;
    let b = batch.shape()[0];
    let cond_id = Condition::Null.embed_id(base.config().num_classes)?;

    let mut tape = Tape::new();
    let base_nodes = bind_constants(&mut tape, &base.params);
    let binding = StoreBinding::bind_all(&mut tape, &adapter.params);
    let adapters = layer_adapters(adapter, &|n| binding.node(n))?;
    let x_node = tape.constant(batch);
    let target_node = tape.constant(target_batch);
    let lookup = move |n: &str| base_nodes.get(n).copied();
    let out = forward_batch(
        &mut tape,
        &lookup,
        base.config(),
        x_node,
        &vec![tau; b],
        &vec![cond_id; b],
        Some(&adapters),
    )?;
    let loss = tape.mse(out, target_node)?;
    let loss_val = tape.value(loss).data()[0].to_f64();
    let cots = tape.backward(loss, Tensor::scalar(S::one()))?;
    binding.accumulate_into(&cots, &mut adapter.params)?;
    Ok(loss_val)
}

/// One online adapter update against the current render: draw τ ~ U(1, T)
/// and e ~ N(0, I), noise the render to x_τ, and take an optimizer step on
/// mean‖ε_lo(x_τ, τ, ∅) − e‖². Only A/B move; the base stays frozen.
pub fn lora_train_step<S: Scalar>(
    base: &DenoiserModel<S>,
    adapter: &mut LoraAdapter<S>,
    x0_render: &Tensor<S>,
    sched: &NoiseSchedule,
    opt: &mut Adam,
    r: &mut ChaCha8Rng,
) -> Result<f64> {
    let tau = r.random_range(1..=sched.t_max());
    let noise = rng::randn::<S>(x0_render.shape().to_vec(), r);
    let x_t = q_sample(x0_render, tau, &noise, sched)?;
    let loss = lora_dsm_loss_backward(base, adapter, &x_t, tau, &noise)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            context: format!("adapter loss at tau={tau}"),
        });
    }
    opt.step(&mut adapter.params)?;
    Ok(loss)
}
