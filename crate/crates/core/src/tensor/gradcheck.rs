use super::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |numeric|)` over all entries.
    pub max_rel_error: f64,
    /// `(parameter index, entry index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub entries: usize,
    /// Every checked entry, in parameter order.
    pub details: Vec<EntryCheck>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EntryCheck {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl EntryCheck {
    pub fn rel_error(&self) -> f64 {
        (self.analytic - self.numeric).abs() / self.numeric.abs().max(1.0)
    }
}

fn evaluate<F>(f: &F, params: &[Tensor<f64>], keep_grads: bool) -> Result<(f64, Vec<Vec<f64>>)>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &ids)?;
    let value = g.value(out);
    if value.len() != 1 {
        return Err(Error::Check(format!(
            "function output has dims {}, expected a scalar",
            value.dims()
        )));
    }
    let v = value.item();
    if !v.is_finite() {
        return Err(Error::Check(format!("function value is {v}")));
    }
    if !keep_grads {
        return Ok((v, vec![]));
    }
    g.backward(out)?;
    let grads = ids
        .iter()
        .zip(params)
        .map(|(&id, p)| g.grad(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();
    Ok((v, grads))
}

/// Compares reverse-mode gradients of a scalar graph function against
/// central differences with step `h`, at 64-bit precision.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    if !(1e-6..=1e-3).contains(&h) {
        return Err(Error::Check(format!("step {h} outside [1e-6, 1e-3]")));
    }
    let (_, analytic) = evaluate(&f, params, true)?;
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries: 0,
        details: Vec::with_capacity(params.iter().map(Tensor::len).sum()),
    };
    for p in 0..work.len() {
        for i in 0..work[p].len() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + h;
            let (plus, _) = evaluate(&f, &work, false)?;
            work[p].data_mut()[i] = orig - h;
            let (minus, _) = evaluate(&f, &work, false)?;
            work[p].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let entry = EntryCheck {
                param: p,
                index: i,
                analytic: analytic[p][i],
                numeric,
            };
            let err = entry.rel_error();
            report.details.push(entry);
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((p, i));
            }
            report.entries += 1;
        }
    }
    Ok(report)
}

/// Forward and backward one-sided difference quotients of `f` along entry
/// `index` of parameter `param`.
pub fn one_sided_slopes<F>(f: F, params: &[Tensor<f64>], param: usize, index: usize, step: f64) -> Result<(f64, f64)>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let orig = work
        .get(param)
        .and_then(|t| t.data().get(index).copied())
        .ok_or_else(|| Error::Check(format!("no entry {index} in parameter {param}")))?;
    let (center, _) = evaluate(&f, &work, false)?;
    work[param].data_mut()[index] = orig + step;
    let (plus, _) = evaluate(&f, &work, false)?;
    work[param].data_mut()[index] = orig - step;
    let (minus, _) = evaluate(&f, &work, false)?;
    Ok(((plus - center) / step, (center - minus) / step))
}
