//! Named parameter storage.
//!
//! Names follow `stream/block/layer/tensor`, e.g.
//! `context/backbone/stage3/unit12/conv2/weight` or `boundary/ggc/bn_out/beta`.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand_distr::{Distribution, Normal};
use tbnet_tensor::Tensor;

use crate::error::{Error, Result};
use crate::rng::substream;

/// How a parameter is initialised.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Gaussian with standard deviation `sqrt(2 / fan_in)`.
    HeNormal { fan_in: usize },
    Normal { std: f64 },
    Zeros,
    Ones,
}

impl Init {
    /// Draws the tensor for parameter `name`. The stream depends only on
    /// `(seed, name)`, so values do not depend on creation order.
    pub fn sample(self, shape: &[usize], seed: u64, name: &str) -> Tensor {
        match self {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, 1.0),
            Init::HeNormal { fan_in } => Init::Normal {
                std: (2.0 / fan_in.max(1) as f64).sqrt(),
            }
            .sample(shape, seed, name),
            Init::Normal { std } => {
                let mut rng = substream(seed, name, 0);
                let normal = Normal::new(0.0, std).expect("finite std");
                Tensor::from_fn(shape, |_| normal.sample(&mut rng))
            }
        }
    }
}

/// Trainable tensors and non-trainable buffers (batch-norm running statistics), by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Arc<Tensor>>,
    buffers: BTreeMap<String, Arc<Tensor>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&Arc<Tensor>> {
        self.params.get(name)
    }

    pub fn buffer(&self, name: &str) -> Option<&Arc<Tensor>> {
        self.buffers.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), Arc::new(t));
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, t: Tensor) {
        self.buffers.insert(name.into(), Arc::new(t));
    }

    /// Mutable access, cloning the tensor first if a graph still shares it.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(Arc::make_mut)
    }

    pub fn buffer_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.buffers.get_mut(name).map(Arc::make_mut)
    }

    /// Replaces an existing parameter, keeping its shape.
    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Validation(format!("no parameter named `{name}`")))?;
        if slot.shape() != t.shape() {
            return Err(Error::Shape(format!(
                "`{name}` has shape {:?}, got {:?}",
                slot.shape(),
                t.shape()
            )));
        }
        *slot = Arc::new(t);
        Ok(())
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Number of parameter tensors.
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|t| t.all_finite())
    }
}

pub const BACKBONE_PREFIX: &str = "context/backbone/";

/// Copies externally trained backbone weights into `store`.
///
/// Keys are relative to the backbone (e.g. `stage1/unit1/conv1/weight`).
/// Returns the number of tensors replaced; unknown names or shape mismatches
/// are errors so a partially matching checkpoint is never half-applied.
pub fn load_backbone_weights(store: &mut ParamStore, weights: &BTreeMap<String, Tensor>) -> Result<usize> {
    for (k, t) in weights {
        let full = format!("{BACKBONE_PREFIX}{k}");
        match store.get(&full) {
            None => return Err(Error::Load(format!("backbone has no parameter `{k}`"))),
            Some(cur) if cur.shape() != t.shape() => {
                return Err(Error::Load(format!(
                    "backbone parameter `{k}` has shape {:?}, weights have {:?}",
                    cur.shape(),
                    t.shape()
                )))
            }
            Some(_) => {}
        }
    }
    for (k, t) in weights {
        store.set(&format!("{BACKBONE_PREFIX}{k}"), t.clone())?;
    }
    Ok(weights.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn he_normal_is_keyed_by_name() {
        let a = Init::HeNormal { fan_in: 50 }.sample(&[400], 3, "x/weight");
        let b = Init::HeNormal { fan_in: 50 }.sample(&[400], 3, "x/weight");
        let c = Init::HeNormal { fan_in: 50 }.sample(&[400], 3, "y/weight");
        assert_eq!(a, b);
        assert_ne!(a, c);
        let var = a.data().iter().map(|v| v * v).sum::<f64>() / 400.0;
        assert!((var - 2.0 / 50.0).abs() < 0.01, "{var}");
    }

    #[test]
    fn set_checks_shape() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::zeros(&[2]));
        assert!(s.set("a", Tensor::zeros(&[3])).is_err());
        assert!(s.set("b", Tensor::zeros(&[2])).is_err());
        s.set("a", Tensor::full(&[2], 1.0)).unwrap();
        assert_eq!(s.num_scalars(), 2);
    }
}
