use serde::{Deserialize, Serialize};

use crate::data_io::BinaryMask;
use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Real, Tensor};

/// Per-level loss weights. `None` means weight one at every level.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: Option<Vec<f64>>,
}

impl LossConfig {
    /// Weights for `levels` levels, validated.
    pub fn alpha(&self, levels: usize) -> Result<Vec<f64>> {
        match &self.alpha {
            None => Ok(vec![1.0; levels]),
            Some(a) if a.len() != levels => Err(Error::Config(format!(
                "loss: alpha has {} entries for {levels} levels",
                a.len()
            ))),
            Some(a) if a.iter().any(|v| !(v.is_finite() && *v >= 0.0)) => Err(Error::Config(
                "loss: alpha entries must be finite and non-negative".into(),
            )),
            Some(a) => Ok(a.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassBalance {
    /// Background fraction; weights the foreground term.
    pub beta: f64,
    /// Foreground fraction; weights the background term.
    pub one_minus_beta: f64,
    /// True when the mask has a single class, so one loss term vanishes.
    pub degenerate: bool,
}

pub fn class_balance(mask: &BinaryMask) -> ClassBalance {
    let total = mask.data().len();
    let fg = mask.foreground_count();
    let beta = (total - fg) as f64 / total as f64;
    ClassBalance {
        beta,
        one_minus_beta: 1.0 - beta,
        degenerate: fg == 0 || fg == total,
    }
}

/// Deeply supervised loss on a graph: `sum_l alpha_l * CE_l`, where each
/// term is the class-balanced cross-entropy of level `l`'s logits summed over
/// all pixels of the batch. `target` is `(n, h, w)` and `betas` holds one
/// foreground weight per sample.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    logits: &[NodeId],
    target: &[u8],
    betas: &[T],
    alpha: &[f64],
) -> Result<NodeId> {
    if logits.len() != alpha.len() {
        return Err(Error::Arity(format!(
            "{} levels but {} loss weights",
            logits.len(),
            alpha.len()
        )));
    }
    let terms = logits
        .iter()
        .map(|&s| g.balanced_ce(s, target, betas))
        .collect::<Result<Vec<_>>>()?;
    let weights: Vec<T> = alpha.iter().map(|&a| T::from_f64(a)).collect();
    g.weighted_sum(&terms, &weights)
}

/// Loss of one sample's 2-channel logits `(1, 2, h, w)` against its mask.
pub fn level_loss<T: Real>(logits: &Tensor<T>, mask: &BinaryMask, beta: f64) -> Result<f64> {
    let d = logits.dims();
    if d.n != 1 || (d.h, d.w) != (mask.height(), mask.width()) {
        return Err(Error::shape(
            "h/w",
            format!("logits {d} vs mask {}x{}", mask.height(), mask.width()),
        ));
    }
    let mut g = Graph::new();
    let s = g.constant(logits.clone());
    let l = g.balanced_ce(s, mask.data(), &[T::from_f64(beta)])?;
    Ok(g.value(l).item().as_f64())
}
