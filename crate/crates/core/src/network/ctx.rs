//! Forward-pass context: resolves named parameters onto a [`Graph`] and
//! provides the layer helpers the streams are built from.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::Arc;

use tbnet_tensor::{BatchStats, Graph, Tensor, Var};

use super::params::{Init, ParamStore};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Weight std of the final 1×1 prediction layers.
pub const HEAD_INIT_STD: f64 = 0.01;

/// Which statistics batch norms normalise with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Statistics of the current batch; observed statistics are collected.
    Train,
    /// Running statistics stored in the parameter buffers.
    Eval,
}

enum Store<'a> {
    Shared(&'a ParamStore),
    /// Parameters are created on first use.
    Building { store: RefCell<ParamStore>, seed: u64 },
}

pub struct Ctx<'a> {
    g: &'a Graph,
    store: Store<'a>,
    mode: Mode,
    vars: RefCell<BTreeMap<String, Var>>,
    stats: RefCell<Vec<(String, BatchStats)>>,
}

impl<'a> Ctx<'a> {
    pub fn new(g: &'a Graph, store: &'a ParamStore, mode: Mode) -> Self {
        Self {
            g,
            store: Store::Shared(store),
            mode,
            vars: RefCell::default(),
            stats: RefCell::default(),
        }
    }

    /// A context that initialises every parameter it is asked for.
    pub fn building(g: &'a Graph, seed: u64) -> Self {
        Self {
            g,
            store: Store::Building {
                store: RefCell::default(),
                seed,
            },
            mode: Mode::Train,
            vars: RefCell::default(),
            stats: RefCell::default(),
        }
    }

    pub fn graph(&self) -> &'a Graph {
        self.g
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// The store filled by a building context.
    pub fn into_store(self) -> Option<ParamStore> {
        match self.store {
            Store::Building { store, .. } => Some(store.into_inner()),
            Store::Shared(_) => None,
        }
    }

    /// Parameter leaves used so far, by name.
    pub fn param_vars(&self) -> BTreeMap<String, Var> {
        self.vars.borrow().clone()
    }

    /// Batch statistics observed by train-mode batch norms, keyed by layer name.
    pub fn take_stats(&self) -> Vec<(String, BatchStats)> {
        std::mem::take(&mut self.stats.borrow_mut())
    }

    fn fetch(&self, name: &str, shape: &[usize], init: Init, buffer: bool) -> Result<Arc<Tensor>> {
        let t = match &self.store {
            Store::Shared(s) => {
                let found = if buffer { s.buffer(name) } else { s.get(name) };
                found
                    .cloned()
                    .ok_or_else(|| Error::ConfigConflict(format!("missing parameter `{name}`")))?
            }
            Store::Building { store, seed } => {
                let mut s = store.borrow_mut();
                let found = if buffer { s.buffer(name) } else { s.get(name) };
                match found {
                    Some(t) => t.clone(),
                    None => {
                        let t = init.sample(shape, *seed, name);
                        if buffer {
                            s.insert_buffer(name, t);
                        } else {
                            s.insert(name, t);
                        }
                        let found = if buffer { s.buffer(name) } else { s.get(name) };
                        found.expect("just inserted").clone()
                    }
                }
            }
        };
        if t.shape() != shape {
            return Err(Error::ConfigConflict(format!(
                "parameter `{name}` has shape {:?}, the network expects {:?}",
                t.shape(),
                shape
            )));
        }
        Ok(t)
    }

    /// The trainable leaf `name`.
    pub fn param(&self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        if let Some(v) = self.vars.borrow().get(name) {
            return Ok(v.clone());
        }
        let v = self.g.param(self.fetch(name, shape, init, false)?);
        self.vars.borrow_mut().insert(name.to_string(), v.clone());
        Ok(v)
    }

    fn buffer(&self, name: &str, shape: &[usize], init: Init) -> Result<Arc<Tensor>> {
        self.fetch(name, shape, init, true)
    }

    pub fn conv(&self, name: &str, x: &Var, cout: usize, k: usize, stride: usize, bias: bool) -> Result<Var> {
        let cin = x.shape()[1];
        let w = self.param(
            &format!("{name}/weight"),
            &[cout, cin, k, k],
            Init::HeNormal { fan_in: cin * k * k },
        )?;
        let b = if bias {
            Some(self.param(&format!("{name}/bias"), &[cout], Init::Zeros)?)
        } else {
            None
        };
        Ok(self.g.conv2d(x, &w, b.as_ref(), stride, k / 2)?)
    }

    /// 1×1 prediction layer with small initial weights, so the network starts
    /// near a uniform prediction instead of a saturated one.
    pub fn head_conv(&self, name: &str, x: &Var, cout: usize) -> Result<Var> {
        let cin = x.shape()[1];
        let w = self.param(&format!("{name}/weight"), &[cout, cin, 1, 1], Init::Normal { std: HEAD_INIT_STD })?;
        let b = self.param(&format!("{name}/bias"), &[cout], Init::Zeros)?;
        Ok(self.g.conv2d(x, &w, Some(&b), 1, 0)?)
    }

    /// Transposed convolution with kernel 4, stride 2, padding 1 (exact 2× upsampling).
    pub fn up_conv(&self, name: &str, x: &Var, cout: usize) -> Result<Var> {
        let cin = x.shape()[1];
        let w = self.param(
            &format!("{name}/weight"),
            &[cin, cout, 4, 4],
            Init::HeNormal { fan_in: cin * 4 },
        )?;
        let b = self.param(&format!("{name}/bias"), &[cout], Init::Zeros)?;
        Ok(self.g.conv_transpose2d(x, &w, Some(&b), 2, 1)?)
    }

    pub fn bn(&self, name: &str, x: &Var) -> Result<Var> {
        let c = x.shape()[1];
        let gamma = self.param(&format!("{name}/gamma"), &[c], Init::Ones)?;
        let beta = self.param(&format!("{name}/beta"), &[c], Init::Zeros)?;
        let mean = self.buffer(&format!("{name}/running_mean"), &[c], Init::Zeros)?;
        let var = self.buffer(&format!("{name}/running_var"), &[c], Init::Ones)?;
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.g.batch_norm_train(x, &gamma, &beta, BN_EPS)?;
                self.stats.borrow_mut().push((name.to_string(), stats));
                Ok(y)
            }
            Mode::Eval => Ok(self
                .g
                .batch_norm_eval(x, &gamma, &beta, mean.data(), var.data(), BN_EPS)?),
        }
    }

    pub fn relu(&self, x: &Var) -> Var {
        self.g.relu(x)
    }

    pub fn bn_relu(&self, name: &str, x: &Var) -> Result<Var> {
        Ok(self.g.relu(&self.bn(name, x)?))
    }
}

/// Folds observed batch statistics into the running buffers:
/// `running = (1 - m)·running + m·batch`, with the unbiased batch variance.
pub fn update_running_stats(store: &mut ParamStore, stats: &[(String, BatchStats)]) -> Result<()> {
    for (name, s) in stats {
        let unbias = if s.count > 1 {
            s.count as f64 / (s.count - 1) as f64
        } else {
            1.0
        };
        for (suffix, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
            let key = format!("{name}/{suffix}");
            let buf = store
                .buffer_mut(&key)
                .ok_or_else(|| Error::Validation(format!("no buffer `{key}`")))?;
            let scale = if suffix == "running_var" { unbias } else { 1.0 };
            for (r, b) in buf.data_mut().iter_mut().zip(batch.iter()) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b * scale;
            }
        }
    }
    Ok(())
}
