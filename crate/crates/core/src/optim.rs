//! Adam with bias correction, operating in place on a [`ParamStore`].

use crate::error::{Error, Result};
use crate::store::ParamStore;
use crate::tensor::{Scalar, Tensor};
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

/// First/second-moment state is kept per parameter name in f64 so that the
/// f32 and f64 builds of a model trace the same trajectory up to rounding.
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update using the gradients accumulated in `store`, then
    /// zeroes them. Rejects non-finite gradients by name so a blown-up run
    /// points at the offending tensor.
    pub fn step<S: Scalar>(&mut self, store: &mut ParamStore<S>) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let b1 = self.config.beta1;
        let b2 = self.config.beta2;
        let corr1 = 1.0 - b1.powi(t);
        let corr2 = 1.0 - b2.powi(t);
        let lr = self.config.lr;
        let eps = self.config.eps;

        for (name, entry) in store.iter_mut() {
            if !entry.grad.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("gradient of '{name}'"),
                });
            }
            let n = entry.value.len();
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; n]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; n]);
            let grads = entry.grad.data();
            let values = entry.value.data_mut();
            for i in 0..n {
                let g = grads[i].to_f64();
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let m_hat = m[i] / corr1;
                let v_hat = v[i] / corr2;
                let delta = lr * m_hat / (v_hat.sqrt() + eps);
                values[i] = S::from_f64(values[i].to_f64() - delta);
            }
            entry.grad = Tensor::zeros(entry.value.shape().to_vec());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_roughly_lr() {
        // With grad 1 the bias-corrected moments are m̂=1, v̂=1, so the first
        // update is lr · 1/(1 + eps) ≈ lr.
        let mut store = ParamStore::<f64>::new();
        store
            .insert("w", Tensor::new(vec![1], vec![1.0]))
            .unwrap();
        store
            .accumulate_grad("w", &Tensor::new(vec![1], vec![1.0]))
            .unwrap();
        let mut opt = Adam::new(AdamConfig::with_lr(0.1));
        opt.step(&mut store).unwrap();
        let w = store.value("w").unwrap().data()[0];
        assert!((w - 0.9).abs() < 1e-6, "got {w}");
        // Gradient slot is cleared after the step.
        assert_eq!(store.get("w").unwrap().grad.data()[0], 0.0);
    }

    #[test]
    fn non_finite_gradient_is_named() {
        let mut store = ParamStore::<f64>::new();
        store
            .insert("layer.weight", Tensor::new(vec![1], vec![1.0]))
            .unwrap();
        store
            .accumulate_grad("layer.weight", &Tensor::new(vec![1], vec![f64::NAN]))
            .unwrap();
        let mut opt = Adam::new(AdamConfig::default());
        let err = opt.step(&mut store).unwrap_err();
        assert!(err.to_string().contains("layer.weight"), "{err}");
    }

    #[test]
    fn zero_grads_leave_values_unchanged() {
        let mut store = ParamStore::<f64>::new();
        store
            .insert("w", Tensor::new(vec![2], vec![1.5, -2.0]))
            .unwrap();
        let mut opt = Adam::new(AdamConfig::with_lr(0.1));
        opt.step(&mut store).unwrap();
        assert_eq!(store.value("w").unwrap().data(), &[1.5, -2.0]);
    }

    #[test]
    fn repeated_positive_grad_descends_monotonically() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::new(vec![1], vec![1.0])).unwrap();
        let mut opt = Adam::new(AdamConfig::with_lr(0.1));
        let mut prev = 1.0;
        for _ in 0..5 {
            store
                .accumulate_grad("w", &Tensor::new(vec![1], vec![1.0]))
                .unwrap();
            opt.step(&mut store).unwrap();
            let w = store.value("w").unwrap().data()[0];
            assert!(w < prev, "not descending: {w} !< {prev}");
            prev = w;
        }
    }

    #[test]
    fn converges_on_quadratic() {
        // Minimise (w - 3)^2 from w = 0.
        let mut store = ParamStore::<f64>::new();
        store
            .insert("w", Tensor::new(vec![1], vec![0.0]))
            .unwrap();
        let mut opt = Adam::new(AdamConfig::with_lr(0.05));
        for _ in 0..2000 {
            let w = store.value("w").unwrap().data()[0];
            let g = 2.0 * (w - 3.0);
            store
                .accumulate_grad("w", &Tensor::new(vec![1], vec![g]))
                .unwrap();
            opt.step(&mut store).unwrap();
        }
        let w = store.value("w").unwrap().data()[0];
        assert!((w - 3.0).abs() < 1e-3, "got {w}");
    }
}
