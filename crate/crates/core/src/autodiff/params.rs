//! Named trainable parameters and the SGD-with-momentum update.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to one parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
struct Param {
    name: String,
    value: Tensor,
    velocity: Tensor,
}

/// Owns every trainable tensor of a model, addressable by stable name
/// (for checkpoints) or by [`ParamId`] (for graph construction and
/// optimizer steps). Insertion order is the canonical ordering used
/// everywhere results must be reproducible.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    /// Registers a parameter. Names must be unique within the store.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name:?}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id.0);
        let velocity = Tensor::zeros(value.shape());
        self.params.push(Param {
            name,
            value,
            velocity,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    /// Parameters in insertion order as `(id, name, value)`.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p.name.as_str(), &p.value))
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// One SGD step with classical momentum:
    /// `v <- momentum * v - lr * g`, then `p <- p + v`.
    /// Parameters without a gradient entry are left untouched.
    pub fn sgd_step(&mut self, grads: &Grads, lr: f64, momentum: f64) -> Result<()> {
        for (idx, grad) in grads.by_param.iter() {
            let param = self
                .params
                .get_mut(*idx)
                .ok_or_else(|| Error::invalid("gradient for unknown parameter"))?;
            if grad.shape() != param.value.shape() {
                return Err(Error::ShapeMismatch {
                    context: "sgd_step gradient",
                    expected: param.value.shape().to_vec(),
                    got: grad.shape().to_vec(),
                });
            }
            grad.check_finite("sgd_step gradient")?;
            let v = param.velocity.data_mut();
            let p = param.value.data_mut();
            for i in 0..v.len() {
                v[i] = momentum * v[i] - lr * grad.data()[i];
                p[i] += v[i];
            }
        }
        Ok(())
    }

    /// Clears all momentum buffers, as when a new training phase starts.
    pub fn reset_velocity(&mut self) {
        for p in &mut self.params {
            p.velocity = Tensor::zeros(p.value.shape());
        }
    }
}

/// Gradients keyed by parameter, as produced by a backward pass.
#[derive(Debug, Clone, Default)]
pub struct Grads {
    by_param: HashMap<usize, Tensor>,
}

impl Grads {
    pub fn new() -> Grads {
        Grads::default()
    }

    /// Adds `grad` into the entry for `id`, accumulating if the parameter
    /// already has a gradient (shared weights hit this path).
    pub fn accumulate(&mut self, id: ParamId, grad: Tensor) {
        match self.by_param.get_mut(&id.0) {
            Some(existing) => {
                debug_assert_eq!(existing.shape(), grad.shape());
                for (e, g) in existing.data_mut().iter_mut().zip(grad.data()) {
                    *e += g;
                }
            }
            None => {
                self.by_param.insert(id.0, grad);
            }
        }
    }

    /// Folds another gradient set into this one, accumulating where
    /// both hold an entry for the same parameter.
    pub fn merge(&mut self, other: Grads) {
        for (id, grad) in other.by_param {
            self.accumulate(ParamId(id), grad);
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(&id.0)
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    /// Scales every gradient in place, as when averaging over a batch.
    pub fn scale(&mut self, factor: f64) {
        for g in self.by_param.values_mut() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }

    /// Largest absolute gradient entry, for divergence checks.
    pub fn max_abs(&self) -> f64 {
        self.by_param
            .values()
            .flat_map(|g| g.data().iter())
            .fold(0.0, |acc, &v| acc.max(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(&[2])).unwrap();
        assert!(store.add("w", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn sgd_momentum_accumulates_velocity() {
        let mut store = ParamStore::new();
        let id = store
            .add("w", Tensor::from_vec(&[1], vec![1.0]).unwrap())
            .unwrap();
        let mut grads = Grads::new();
        grads.accumulate(id, Tensor::from_vec(&[1], vec![2.0]).unwrap());
        // step 1: v = -0.1 * 2 = -0.2, p = 0.8
        store.sgd_step(&grads, 0.1, 0.9).unwrap();
        assert!((store.get(id).data()[0] - 0.8).abs() < 1e-12);
        // step 2 with same grad: v = 0.9 * -0.2 - 0.2 = -0.38, p = 0.42
        store.sgd_step(&grads, 0.1, 0.9).unwrap();
        assert!((store.get(id).data()[0] - 0.42).abs() < 1e-12);
    }

    #[test]
    fn grads_accumulate_shared_use() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::zeros(&[2])).unwrap();
        let mut grads = Grads::new();
        grads.accumulate(id, Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        grads.accumulate(id, Tensor::from_vec(&[2], vec![0.5, 0.5]).unwrap());
        assert_eq!(grads.get(id).unwrap().data(), &[1.5, 2.5]);
    }
}
