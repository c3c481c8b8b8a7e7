use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::ParameterStore;
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Multiplier applied to the learning rate on a loss plateau.
    pub lr_decay_factor: f64,
    /// Iterations per plateau comparison window.
    pub plateau_window: usize,
    pub max_iters: usize,
    /// Save a checkpoint every this many iterations (0 disables periodic saves).
    pub checkpoint_every: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-2,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_size: 8,
            lr_decay_factor: 0.9,
            plateau_window: 100,
            max_iters: 2000,
            checkpoint_every: 100,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("optim: {m}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return bad("lr_decay_factor must lie in (0, 1]");
        }
        if self.plateau_window == 0 {
            return bad("plateau_window must be at least 1");
        }
        Ok(())
    }
}

/// Hyperparameters of a single update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdStep {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// `v <- momentum * v - lr * (grad + wd * w); w <- w + v` for every
/// parameter, with decay only on kinds that decay. All gradients are checked
/// before anything is updated.
pub fn sgd_step<T: Real>(store: &mut ParameterStore<T>, grads: &BTreeMap<String, Vec<T>>, step: SgdStep) -> Result<()> {
    for (name, p) in store.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Arity(format!("no gradient for parameter {name}")))?;
        if g.len() != p.value.len() {
            return Err(Error::shape(
                "data",
                format!(
                    "gradient for {name} has {} values, parameter {}",
                    g.len(),
                    p.value.len()
                ),
            ));
        }
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(format!("{name}[{i}] = {}", g[i])));
        }
    }
    let lr = T::from_f64(step.lr);
    let m = T::from_f64(step.momentum);
    for (name, p) in store.iter_mut() {
        let wd = if p.kind.decays() {
            T::from_f64(step.weight_decay)
        } else {
            T::zero()
        };
        let g = &grads[name];
        let w = p.value.data_mut();
        let v = p.momentum.data_mut();
        for i in 0..w.len() {
            v[i] = m * v[i] - lr * (g[i] + wd * w[i]);
            w[i] += v[i];
        }
    }
    Ok(())
}
