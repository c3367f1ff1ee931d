//! Named parameter storage: each entry keeps a value tensor and a gradient
//! tensor of the same shape. Model weights, LoRA factors and splat scenes all
//! live in a `ParamStore`, which is what the optimizer and the finite
//! difference checker operate on.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use std::collections::BTreeMap;

#[derive(Clone, Debug)]
pub struct ParamEntry<S: Scalar> {
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
}

/// Ordered (by name) collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S: Scalar = f32> {
    entries: BTreeMap<String, ParamEntry<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            entries: BTreeMap::new(),
        }
    }

    /// Registers a parameter with a zeroed gradient. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter '{name}'")));
        }
        let grad = Tensor::zeros(value.shape().to_vec());
        self.entries.insert(name, ParamEntry { value, grad });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry<S>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter '{name}'")))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<S>> {
        Ok(&self.get(name)?.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| Error::contract(format!("unknown parameter '{name}'")))
    }

    /// Adds `delta` into the stored gradient for `name`.
    pub fn accumulate_grad(&mut self, name: &str, delta: &Tensor<S>) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter '{name}'")))?;
        if entry.grad.shape() != delta.shape() {
            return Err(Error::shape(
                "accumulate_grad",
                format!(
                    "'{name}': grad {:?} vs delta {:?}",
                    entry.grad.shape(),
                    delta.shape()
                ),
            ));
        }
        entry.grad = entry.grad.add(delta);
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for entry in self.entries.values_mut() {
            entry.grad = Tensor::zeros(entry.value.shape().to_vec());
        }
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry<S>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ParamEntry<S>)> {
        self.entries.iter_mut()
    }

    /// Euclidean norm over all gradients.
    pub fn grad_norm(&self) -> f64 {
        self.entries
            .values()
            .map(|e| e.grad.norm_sq())
            .sum::<f64>()
            .sqrt()
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (name, entry) in &self.entries {
            out.insert(name.clone(), entry.value.cast::<T>())
                .expect("names unique by construction");
        }
        out
    }

    /// Order-independent content hash of the parameter values. Used by the
    /// stop-gradient checks to certify that a store was not touched.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, entry) in &self.entries {
            for b in name.as_bytes() {
                h = (h ^ *b as u64).wrapping_mul(0x100_0000_01b3);
            }
            for v in entry.value.data() {
                h = (h ^ v.to_f64().to_bits()).wrapping_mul(0x100_0000_01b3);
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.insert("w", Tensor::zeros(vec![2])).unwrap();
        assert!(store.insert("w", Tensor::zeros(vec![2])).is_err());
    }

    #[test]
    fn fingerprint_tracks_values() {
        let mut store = ParamStore::<f32>::new();
        store.insert("w", Tensor::new(vec![2], vec![1.0, 2.0])).unwrap();
        let before = store.fingerprint();
        store.value_mut("w").unwrap().data_mut()[0] = 1.5;
        assert_ne!(before, store.fingerprint());
        store.value_mut("w").unwrap().data_mut()[0] = 1.0;
        assert_eq!(before, store.fingerprint());
    }

    #[test]
    fn grad_accumulation_checks_shape() {
        let mut store = ParamStore::<f32>::new();
        store.insert("w", Tensor::zeros(vec![2])).unwrap();
        assert!(store
            .accumulate_grad("w", &Tensor::zeros(vec![3]))
            .is_err());
        store
            .accumulate_grad("w", &Tensor::new(vec![2], vec![1.0, -1.0]))
            .unwrap();
        assert_eq!(store.get("w").unwrap().grad.data(), &[1.0, -1.0]);
    }
}
