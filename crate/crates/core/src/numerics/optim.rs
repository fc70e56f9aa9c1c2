use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Bias-corrected adaptive moments.
    Adam { beta1: f64, beta2: f64, eps: f64 },
    /// Plain gradient descent with optional heavy-ball momentum.
    Sgd { momentum: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub kind: OptimizerKind,
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig {
            lr,
            kind: OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
        }
    }

    pub fn sgd(lr: f64) -> Self {
        OptimizerConfig {
            lr,
            kind: OptimizerKind::Sgd { momentum: 0.0 },
        }
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::adam(1e-3)
    }
}

/// Per-parameter moment buffers plus the update counter.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    steps: u64,
    first: Vec<Option<Vec<f64>>>,
    second: Vec<Option<Vec<f64>>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Optimizer {
            config,
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    fn buffer(slots: &mut Vec<Option<Vec<f64>>>, id: ParamId, len: usize) -> Result<&mut Vec<f64>> {
        if slots.len() <= id.index() {
            slots.resize(id.index() + 1, None);
        }
        let buf = slots[id.index()].get_or_insert_with(|| vec![0.0; len]);
        if buf.len() != len {
            return Err(Error::dim(
                "optimizer_step",
                format!("moment buffer of {} for parameter of {}", buf.len(), len),
            ));
        }
        Ok(buf)
    }

    /// Applies one update to the listed parameters.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, ids: &[ParamId]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::dim(
                "optimizer_step",
                format!("{} gradients for {} parameters", grads.len(), store.len()),
            ));
        }
        for &id in ids {
            if grads.get(id).shape() != store.get(id).shape() {
                return Err(Error::dim(
                    "optimizer_step",
                    format!(
                        "{}: gradient {:?} vs parameter {:?}",
                        store.name(id),
                        grads.get(id).shape(),
                        store.get(id).shape()
                    ),
                ));
            }
        }
        self.steps += 1;
        let lr = self.config.lr;
        match self.config.kind {
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for &id in ids {
                    let g = grads.get(id).data();
                    let m = Self::buffer(&mut self.first, id, g.len())?;
                    for (m, g) in m.iter_mut().zip(g) {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                    }
                    let v = Self::buffer(&mut self.second, id, g.len())?;
                    for (v, g) in v.iter_mut().zip(g) {
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                    }
                    let m = self.first[id.index()].as_ref().unwrap();
                    let v = self.second[id.index()].as_ref().unwrap();
                    for ((p, m), v) in store.get_mut(id).data_mut().iter_mut().zip(m).zip(v) {
                        *p -= lr * (m / c1) / ((v / c2).sqrt() + eps);
                    }
                }
            }
            OptimizerKind::Sgd { momentum } => {
                for &id in ids {
                    let g = grads.get(id).data();
                    if momentum == 0.0 {
                        for (p, g) in store.get_mut(id).data_mut().iter_mut().zip(g) {
                            *p -= lr * g;
                        }
                    } else {
                        let vel = Self::buffer(&mut self.first, id, g.len())?;
                        for (v, g) in vel.iter_mut().zip(g) {
                            *v = momentum * *v + g;
                        }
                        let vel = self.first[id.index()].as_ref().unwrap();
                        for (p, v) in store.get_mut(id).data_mut().iter_mut().zip(vel) {
                            *p -= lr * v;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
