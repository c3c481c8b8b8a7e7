use super::batchnorm::{bn_backward, bn_forward, BatchStats, BnCache, BnMode};
use super::conv::{conv_backward, conv_forward, ConvSpec};
use super::ops::{
    balanced_ce_backward, balanced_ce_forward, maxpool2_forward, sigmoid, softmax_channels_backward,
    softmax_channels_forward,
};
use super::{Dims, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv { spec: ConvSpec, bias: bool },
    BatchNorm(BnCache<T>),
    Relu,
    Sigmoid,
    Concat,
    AddBroadcast,
    MaxPool2 { argmax: Vec<u32> },
    SoftmaxChannels,
    Sum,
    WeightedSum(Vec<T>),
    BalancedCe { target: Vec<u8>, betas: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    inputs: Vec<NodeId>,
    requires_grad: bool,
}

/// Append-only record of tensor operations.
///
/// Nodes are stored in creation order, which is a topological order, so
/// [`Graph::backward`] walks the vector once from the end.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, vec![], false)
    }

    /// Trainable leaf; its gradient is filled in by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, vec![], true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn dims(&self, id: NodeId) -> Dims {
        self.nodes[id.0].value.dims()
    }

    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.nodes[id.0].value.grad()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: Vec<NodeId>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            inputs,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor<T>, op: Op<T>, inputs: Vec<NodeId>) -> NodeId {
        let rg = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        self.push(value, op, inputs, rg)
    }

    fn check(&self, ids: &[NodeId]) -> Result<()> {
        match ids.iter().find(|i| i.0 >= self.nodes.len()) {
            Some(bad) => Err(Error::Arity(format!("node {} is not on this graph", bad.0))),
            None => Ok(()),
        }
    }

    pub fn conv2d(&mut self, x: NodeId, weight: NodeId, bias: Option<NodeId>, spec: &ConvSpec) -> Result<NodeId> {
        self.check(&[x, weight])?;
        if let Some(b) = bias {
            self.check(&[b])?;
        }
        let xd = self.dims(x);
        let yd = spec.check_input(xd, self.dims(weight), bias.map(|b| self.dims(b)))?;
        let y = conv_forward(
            spec,
            self.value(x).data(),
            xd,
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            yd,
        );
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.record(
            Tensor::new(yd, y)?,
            Op::Conv {
                spec: *spec,
                bias: bias.is_some(),
            },
            inputs,
        ))
    }

    /// Batch normalization over `(n, h, w)` per channel. In training mode the
    /// batch statistics are returned so the caller can update running values.
    pub fn batchnorm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mode: BnMode<'_, T>,
    ) -> Result<(NodeId, Option<BatchStats<T>>)> {
        self.check(&[x, gamma, beta])?;
        let d = self.dims(x);
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            if self.dims(id).len() != d.c {
                return Err(Error::shape(
                    "channel",
                    format!("{name} length {} for {} channels", self.dims(id).len(), d.c),
                ));
            }
        }
        match mode {
            BnMode::Train if d.n * d.hw() < 2 => {
                return Err(Error::shape(
                    "n*h*w",
                    "training-mode batchnorm needs at least 2 values per channel",
                ));
            }
            BnMode::Infer { mean, var } if mean.len() != d.c || var.len() != d.c => {
                return Err(Error::shape("channel", "running statistics length mismatch"));
            }
            _ => {}
        }
        let (y, cache, stats) = bn_forward(
            self.value(x).data(),
            d,
            self.value(gamma).data(),
            self.value(beta).data(),
            mode,
        );
        let id = self.record(Tensor::new(d, y)?, Op::BatchNorm(cache), vec![x, gamma, beta]);
        Ok((id, stats))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(&[x])?;
        let y = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        Ok(self.record(y, Op::Relu, vec![x]))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(&[x])?;
        let y = self.value(x).map(sigmoid);
        Ok(self.record(y, Op::Sigmoid, vec![x]))
    }

    /// Concatenation along the channel axis, in argument order.
    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        self.check(xs)?;
        let first = *xs
            .first()
            .ok_or_else(|| Error::Arity("concat of zero tensors".into()))?;
        let d0 = self.dims(first);
        let mut channels = 0;
        for &x in xs {
            let d = self.dims(x);
            if (d.n, d.h, d.w) != (d0.n, d0.h, d0.w) {
                return Err(Error::shape("n/h/w", format!("cannot concat {d} with {d0}")));
            }
            channels += d.c;
        }
        let od = d0.with_channels(channels);
        let mut out = Vec::with_capacity(od.len());
        for n in 0..d0.n {
            for &x in xs {
                out.extend_from_slice(self.value(x).sample(n));
            }
        }
        Ok(self.record(Tensor::new(od, out)?, Op::Concat, xs.to_vec()))
    }

    /// `a + b`, where `b` either matches `a` or has one channel broadcast
    /// across all of `a`'s channels.
    pub fn add_broadcast(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(&[a, b])?;
        let (da, db) = (self.dims(a), self.dims(b));
        if (da.n, da.h, da.w) != (db.n, db.h, db.w) || (db.c != da.c && db.c != 1) {
            return Err(Error::shape("channel", format!("cannot broadcast {db} onto {da}")));
        }
        let hw = da.hw();
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = av.to_vec();
        for n in 0..da.n {
            for c in 0..da.c {
                let bc = if db.c == 1 { 0 } else { c };
                let dst = &mut out[da.offset(n, c, 0, 0)..][..hw];
                let src = &bv[db.offset(n, bc, 0, 0)..][..hw];
                for (o, &s) in dst.iter_mut().zip(src) {
                    *o += s;
                }
            }
        }
        Ok(self.record(Tensor::new(da, out)?, Op::AddBroadcast, vec![a, b]))
    }

    /// 2x2 max pooling with stride 2; gradient routes to the first maximum.
    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(&[x])?;
        let d = self.dims(x);
        if !d.h.is_multiple_of(2) || !d.w.is_multiple_of(2) {
            return Err(Error::shape("h/w", format!("maxpool2 needs even extents, got {d}")));
        }
        let (y, argmax, od) = maxpool2_forward(self.value(x).data(), d);
        Ok(self.record(Tensor::new(od, y)?, Op::MaxPool2 { argmax }, vec![x]))
    }

    pub fn softmax_channels(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(&[x])?;
        let d = self.dims(x);
        if d.c != 2 {
            return Err(Error::shape(
                "channel",
                format!("softmax_channels needs 2 channels, got {}", d.c),
            ));
        }
        let y = softmax_channels_forward(self.value(x).data(), d);
        Ok(self.record(Tensor::new(d, y)?, Op::SoftmaxChannels, vec![x]))
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(&[x])?;
        let s: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        Ok(self.record(Tensor::scalar(T::from_f64(s)), Op::Sum, vec![x]))
    }

    /// `sum_i weights[i] * xs[i]` over scalar nodes.
    pub fn weighted_sum(&mut self, xs: &[NodeId], weights: &[T]) -> Result<NodeId> {
        self.check(xs)?;
        if xs.len() != weights.len() || xs.is_empty() {
            return Err(Error::Arity(format!(
                "{} terms with {} weights",
                xs.len(),
                weights.len()
            )));
        }
        let mut total = T::zero();
        for (&x, &w) in xs.iter().zip(weights) {
            let v = self.value(x);
            if v.len() != 1 {
                return Err(Error::shape(
                    "scalar",
                    format!("weighted_sum term has dims {}", v.dims()),
                ));
            }
            total += w * v.item();
        }
        Ok(self.record(Tensor::scalar(total), Op::WeightedSum(weights.to_vec()), xs.to_vec()))
    }

    /// Class-balanced cross-entropy of 2-channel logits against a binary
    /// target laid out `(n, h, w)`. Foreground pixels weigh `betas[n]`,
    /// background pixels `1 - betas[n]`. Returns the unnormalized sum.
    pub fn balanced_ce(&mut self, logits: NodeId, target: &[u8], betas: &[T]) -> Result<NodeId> {
        self.check(&[logits])?;
        let d = self.dims(logits);
        if d.c != 2 {
            return Err(Error::shape("channel", format!("logits need 2 channels, got {}", d.c)));
        }
        if target.len() != d.n * d.hw() {
            return Err(Error::shape(
                "h/w",
                format!("target has {} pixels, logits {}", target.len(), d.n * d.hw()),
            ));
        }
        if betas.len() != d.n {
            return Err(Error::shape("n", format!("{} betas for batch of {}", betas.len(), d.n)));
        }
        let loss = balanced_ce_forward(self.value(logits).data(), d, target, betas);
        Ok(self.record(
            Tensor::scalar(loss),
            Op::BalancedCe {
                target: target.to_vec(),
                betas: betas.to_vec(),
            },
            vec![logits],
        ))
    }

    /// Reverse pass from `output`, seeded with ones. Every node that requires
    /// a gradient and is reachable from `output` gets its gradient slot set;
    /// all other slots are cleared.
    pub fn backward(&mut self, output: NodeId) -> Result<()> {
        self.check(&[output])?;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![T::one(); self.nodes[output.0].value.len()]);
        for i in (0..=output.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let contributions = self.local_grads(node, &gy);
            for (input, g) in node.inputs.iter().zip(contributions) {
                let Some(g) = g else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
            grads[i] = Some(gy);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            let g = if node.requires_grad { g } else { None };
            node.value.set_grad(g)?;
        }
        Ok(())
    }

    /// Gradient contributions of one node to each of its inputs.
    fn local_grads(&self, node: &Node<T>, gy: &[T]) -> Vec<Option<Vec<T>>> {
        let wants = |k: usize| self.nodes[node.inputs[k].0].requires_grad;
        let input = |k: usize| &self.nodes[node.inputs[k].0].value;
        match &node.op {
            Op::Leaf => vec![],
            Op::Conv { spec, bias } => {
                let x = input(0);
                let w = input(1);
                let g = conv_backward(
                    spec,
                    x.data(),
                    x.dims(),
                    w.data(),
                    node.value.dims(),
                    gy,
                    (wants(0), wants(1), *bias && wants(2)),
                );
                let mut out = vec![g.x, g.weight];
                if *bias {
                    out.push(g.bias);
                }
                out
            }
            Op::BatchNorm(cache) => {
                let g = bn_backward(cache, input(0).dims(), input(1).data(), gy);
                vec![Some(g.x), Some(g.gamma), Some(g.beta)]
            }
            Op::Relu => {
                let y = node.value.data();
                vec![Some(
                    y.iter()
                        .zip(gy)
                        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                        .collect(),
                )]
            }
            Op::Sigmoid => {
                let y = node.value.data();
                vec![Some(y.iter().zip(gy).map(|(&v, &g)| g * v * (T::one() - v)).collect())]
            }
            Op::Concat => {
                let od = node.value.dims();
                let mut out: Vec<Vec<T>> = node
                    .inputs
                    .iter()
                    .map(|i| Vec::with_capacity(self.nodes[i.0].value.len()))
                    .collect();
                let per = od.c * od.hw();
                for n in 0..od.n {
                    let mut off = n * per;
                    for (k, i) in node.inputs.iter().enumerate() {
                        let len = self.nodes[i.0].value.dims().c * od.hw();
                        out[k].extend_from_slice(&gy[off..off + len]);
                        off += len;
                    }
                }
                out.into_iter().map(Some).collect()
            }
            Op::AddBroadcast => {
                let (da, db) = (input(0).dims(), input(1).dims());
                let gb = if db.c == da.c {
                    gy.to_vec()
                } else {
                    let hw = da.hw();
                    let mut gb = vec![T::zero(); db.len()];
                    for n in 0..da.n {
                        let dst = &mut gb[n * hw..(n + 1) * hw];
                        for c in 0..da.c {
                            let src = &gy[da.offset(n, c, 0, 0)..][..hw];
                            dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                        }
                    }
                    gb
                };
                vec![Some(gy.to_vec()), Some(gb)]
            }
            Op::MaxPool2 { argmax } => {
                let mut gx = vec![T::zero(); input(0).len()];
                for (&a, &g) in argmax.iter().zip(gy) {
                    gx[a as usize] += g;
                }
                vec![Some(gx)]
            }
            Op::SoftmaxChannels => vec![Some(softmax_channels_backward(
                node.value.data(),
                node.value.dims(),
                gy,
            ))],
            Op::Sum => vec![Some(vec![gy[0]; input(0).len()])],
            Op::WeightedSum(weights) => weights.iter().map(|&w| Some(vec![w * gy[0]])).collect(),
            Op::BalancedCe { target, betas } => {
                let x = input(0);
                vec![Some(balanced_ce_backward(x.data(), x.dims(), target, betas, gy[0]))]
            }
        }
    }
}
