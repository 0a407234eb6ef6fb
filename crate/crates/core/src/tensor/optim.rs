use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled (AdamW-style) decay; also applied by SGD.
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First-order optimizer with per-parameter moment state.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate must be > 0, got {}", config.lr)));
        }
        Ok(Self {
            config,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if self.m.len() != params.len() {
            self.m = params.ids().map(|id| Tensor::zeros(params.value(id).shape().to_vec())).collect();
            self.v = self.m.clone();
        }
        if let Some(id) = params.ids().find(|&id| !params.grad(id).is_finite()) {
            return Err(Error::NonFinite(format!("gradient of `{}`", params.name(id))));
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let ids: Vec<_> = params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let (w, g) = params.value_and_grad_mut(id);
            let w = w.data_mut();
            let g = g.data_mut();
            match c.kind {
                OptimizerKind::Sgd => {
                    for (wi, gi) in w.iter_mut().zip(g.iter()) {
                        *wi -= c.lr * (gi + c.weight_decay * *wi);
                    }
                }
                OptimizerKind::Adam => {
                    let m = self.m[k].data_mut();
                    let v = self.v[k].data_mut();
                    for i in 0..w.len() {
                        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        w[i] -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * w[i]);
                    }
                }
            }
            g.iter_mut().for_each(|x| *x = 0.0);
        }
        Ok(())
    }
}
