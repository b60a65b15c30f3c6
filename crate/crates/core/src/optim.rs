//! First-order optimizers that step one [`ParamGroup`] of a store.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::params::{ParamGroup, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    /// Adam with a per-tensor trust ratio `‖w‖ / ‖update‖`.
    Lamb,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 0.0,
        }
    }

    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            ..Self::adam(lr)
        }
    }
}

#[derive(Debug)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    group: ParamGroup,
    moments: BTreeMap<ParamId, (Vec<f64>, Vec<f64>)>,
    steps: u64,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, group: ParamGroup) -> Self {
        Self {
            cfg,
            group,
            moments: BTreeMap::new(),
            steps: 0,
        }
    }

    pub fn group(&self) -> ParamGroup {
        self.group
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update to every parameter of this optimizer's group using
    /// the store's accumulated gradients. Other groups are left untouched.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.steps += 1;
        let t = self.steps as i32;
        let c = self.cfg.clone();
        for id in store.ids_in(self.group) {
            let p = store.get_mut(id);
            match c.kind {
                OptimizerKind::Sgd => {
                    for (w, g) in p.value.data_mut().iter_mut().zip(&p.grad) {
                        *w -= c.lr * (g + c.weight_decay * *w);
                    }
                }
                OptimizerKind::Adam | OptimizerKind::Lamb => {
                    let n = p.grad.len();
                    let (m, v) = self
                        .moments
                        .entry(id)
                        .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
                    let bc1 = 1.0 - c.beta1.powi(t);
                    let bc2 = 1.0 - c.beta2.powi(t);
                    let mut update = vec![0.0; n];
                    for i in 0..n {
                        let g = p.grad[i];
                        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                        let mh = m[i] / bc1;
                        let vh = v[i] / bc2;
                        update[i] = mh / (vh.sqrt() + c.eps) + c.weight_decay * p.value.data()[i];
                    }
                    let ratio = if c.kind == OptimizerKind::Lamb {
                        let wn = norm(p.value.data());
                        let un = norm(&update);
                        if wn > 0.0 && un > 0.0 {
                            wn / un
                        } else {
                            1.0
                        }
                    } else {
                        1.0
                    };
                    for (w, u) in p.value.data_mut().iter_mut().zip(&update) {
                        *w -= c.lr * ratio * u;
                    }
                }
            }
        }
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Rescales the gradients of `group` so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, group: ParamGroup, max_norm: f64) -> f64 {
    let ids = store.ids_in(group);
    let total: f64 = ids
        .iter()
        .map(|&id| store.get(id).grad.iter().map(|g| g * g).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total.is_finite() {
        let f = max_norm / total;
        for id in ids {
            store.get_mut(id).grad.iter_mut().for_each(|g| *g *= f);
        }
    }
    total
}
