use std::collections::BTreeMap;

use super::config::{AttentionDirection, NetworkConfig};
use super::params::{backbone_spec, level_specs, ParameterStore};
use crate::error::{Error, Result};
use crate::tensor::{BatchStats, BnMode, Dims, Graph, NodeId, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batchnorm; the trace carries them for running updates.
    Train,
    /// Running statistics in batchnorm.
    Infer,
}

/// Node ids of the per-level values, indexed by `l - 1`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LevelNodes {
    pub features: Vec<NodeId>,
    pub aggregated: Vec<NodeId>,
    /// Empty when attention is disabled.
    pub attention: Vec<NodeId>,
    pub logits: Vec<NodeId>,
}

/// Records the network on an existing graph. Parameters are looked up by
/// name in `params`; batchnorm running statistics come from `store`.
pub struct NetBuilder<'a, T: Real> {
    graph: &'a mut Graph<T>,
    params: &'a BTreeMap<String, NodeId>,
    store: &'a ParameterStore<T>,
    config: &'a NetworkConfig,
    mode: Mode,
    stats: Vec<(String, BatchStats<T>)>,
}

impl<'a, T: Real> NetBuilder<'a, T> {
    pub fn new(
        graph: &'a mut Graph<T>,
        params: &'a BTreeMap<String, NodeId>,
        store: &'a ParameterStore<T>,
        config: &'a NetworkConfig,
        mode: Mode,
    ) -> Self {
        NetBuilder {
            graph,
            params,
            store,
            config,
            mode,
            stats: Vec::new(),
        }
    }

    /// Batch statistics gathered so far, keyed by batchnorm layer name.
    pub fn into_stats(self) -> Vec<(String, BatchStats<T>)> {
        self.stats
    }

    fn p(&self, name: &str) -> Result<NodeId> {
        self.params
            .get(name)
            .copied()
            .ok_or_else(|| Error::Arity(format!("parameter {name} is not on the graph")))
    }

    fn bn_relu(&mut self, x: NodeId, layer: &str) -> Result<NodeId> {
        let gamma = self.p(&format!("{layer}.gamma"))?;
        let beta = self.p(&format!("{layer}.beta"))?;
        let (y, stats) = match self.mode {
            Mode::Train => self.graph.batchnorm(x, gamma, beta, BnMode::Train)?,
            Mode::Infer => {
                let mean = self.store.buffer(&format!("{layer}.mean"))?.data();
                let var = self.store.buffer(&format!("{layer}.var"))?.data();
                self.graph.batchnorm(x, gamma, beta, BnMode::Infer { mean, var })?
            }
        };
        if let Some(s) = stats {
            self.stats.push((layer.to_string(), s));
        }
        self.graph.relu(y)
    }

    /// Side features `f^1..f^L`; `f^l` has `backbone_channels[l-1]` channels at `(H, W) / 2^(l-1)`.
    pub fn backbone(&mut self, x: NodeId) -> Result<Vec<NodeId>> {
        let d = self.graph.dims(x);
        let [h, w] = self.config.input_hw;
        if d.c != 3 {
            return Err(Error::shape(
                "channel",
                format!("network input needs 3 channels, got {}", d.c),
            ));
        }
        if (d.h, d.w) != (h, w) {
            return Err(Error::shape(
                "h/w",
                format!("input is {}x{}, network expects {h}x{w}", d.h, d.w),
            ));
        }
        let mut cur = x;
        let mut taps = Vec::with_capacity(self.config.levels);
        for l in 1..=self.config.levels {
            if l > 1 {
                cur = self.graph.maxpool2(cur)?;
            }
            for k in 1..=self.config.stage_depth {
                let spec = backbone_spec(self.config, l, k);
                let wt = self.p(&format!("bb.{l}.{k}.w"))?;
                cur = self.graph.conv2d(cur, wt, None, &spec)?;
                cur = self.bn_relu(cur, &format!("bb.{l}.{k}"))?;
            }
            taps.push(cur);
        }
        Ok(taps)
    }

    /// `g^l`: reduce `f^l` to `d` channels, upsample to full resolution, and
    /// below the top level fuse it with `g^{l+1}` (and `a^{l+1}` when attention
    /// runs top-down) through a 3x3 conv, then batchnorm and ReLU.
    pub fn aggregate_level(
        &mut self,
        l: usize,
        f_l: NodeId,
        g_above: Option<NodeId>,
        a_above: Option<NodeId>,
    ) -> Result<NodeId> {
        let cfg = self.config;
        let wants_g = cfg.aggregation && l < cfg.levels;
        let wants_a = wants_g && cfg.aggregation_uses_attention();
        if g_above.is_some() != wants_g || a_above.is_some() != wants_a {
            return Err(Error::Arity(format!(
                "aggregation at level {l} expects g_above: {wants_g}, a_above: {wants_a}"
            )));
        }
        let specs = level_specs(cfg, l);
        let wr = self.p(&format!("w_r.{l}"))?;
        let mut u = self.graph.conv2d(f_l, wr, None, &specs.reduce)?;
        if let Some(up) = &specs.upsample {
            let wu = self.p(&format!("w_u.{l}"))?;
            u = self.graph.conv2d(u, wu, None, up)?;
        }
        let pre = match (&specs.fuse, g_above) {
            (Some(fuse), Some(g)) => {
                let mut parts = vec![u, g];
                parts.extend(a_above);
                let cat = self.graph.concat(&parts)?;
                let wf = self.p(&format!("w_f.{l}"))?;
                self.graph.conv2d(cat, wf, None, fuse)?
            }
            _ => u,
        };
        self.bn_relu(pre, &format!("agg.{l}"))
    }

    /// `a^l = sigmoid(w_a * [g^l, stack...] + b_a)`, one channel.
    pub fn attention_level(&mut self, l: usize, g_l: NodeId, stack: &[NodeId]) -> Result<NodeId> {
        let want = self.config.attention_stack_len(l);
        if !self.config.attention_enabled || stack.len() != want {
            return Err(Error::Arity(format!(
                "attention at level {l} expects {want} stacked maps, got {}",
                stack.len()
            )));
        }
        let spec = level_specs(self.config, l).attention.expect("attention enabled");
        let mut parts = vec![g_l];
        parts.extend_from_slice(stack);
        let input = if parts.len() == 1 {
            g_l
        } else {
            self.graph.concat(&parts)?
        };
        let wa = self.p(&format!("w_a.{l}"))?;
        let ba = self.p(&format!("b_a.{l}"))?;
        let z = self.graph.conv2d(input, wa, Some(ba), &spec)?;
        self.graph.sigmoid(z)
    }

    /// `s^l = w_s * (s^{l+1} + a^l + a^{l+1}) + b_s`, with the one-channel
    /// attention maps broadcast over both logit channels. At the top level
    /// the input is `a^L` alone.
    pub fn predict_level(
        &mut self,
        l: usize,
        a_l: NodeId,
        a_above: Option<NodeId>,
        s_above: Option<NodeId>,
    ) -> Result<NodeId> {
        let inner = l < self.config.levels;
        if a_above.is_some() != inner || s_above.is_some() != inner {
            return Err(Error::Arity(format!(
                "prediction at level {l} expects the level above: {inner}"
            )));
        }
        let spec = level_specs(self.config, l).predict;
        let input = match (a_above, s_above) {
            (Some(a1), Some(s1)) => {
                let t = self.graph.add_broadcast(s1, a_l)?;
                self.graph.add_broadcast(t, a1)?
            }
            _ => a_l,
        };
        let ws = self.p(&format!("w_s.{l}"))?;
        let bs = self.p(&format!("b_s.{l}"))?;
        self.graph.conv2d(input, ws, Some(bs), &spec)
    }

    /// Stand-alone per-level classifier used when attention is disabled.
    pub fn classify_level(&mut self, l: usize, h: NodeId) -> Result<NodeId> {
        let spec = level_specs(self.config, l).predict;
        let ws = self.p(&format!("w_s.{l}"))?;
        let bs = self.p(&format!("b_s.{l}"))?;
        self.graph.conv2d(h, ws, Some(bs), &spec)
    }

    pub fn run(&mut self, x: NodeId) -> Result<LevelNodes> {
        let cfg = self.config;
        let big_l = cfg.levels;
        let features = self.backbone(x)?;
        let mut aggregated = vec![None; big_l];
        let mut attention: Vec<Option<NodeId>> = vec![None; big_l];
        let top_down_attention = cfg.aggregation_uses_attention();

        for l in (1..=big_l).rev() {
            let (g_above, a_above) = if cfg.aggregation && l < big_l {
                (aggregated[l], if top_down_attention { attention[l] } else { None })
            } else {
                (None, None)
            };
            let g = self.aggregate_level(l, features[l - 1], g_above, a_above)?;
            aggregated[l - 1] = Some(g);
            if top_down_attention {
                let stack: Vec<NodeId> = attention[l..l + cfg.attention_stack_len(l)]
                    .iter()
                    .map(|a| a.unwrap())
                    .collect();
                attention[l - 1] = Some(self.attention_level(l, g, &stack)?);
            }
        }
        if cfg.attention_enabled && cfg.attention_direction == AttentionDirection::BottomUp {
            for l in 1..=big_l {
                let n = cfg.attention_stack_len(l);
                let stack: Vec<NodeId> = attention[l - 1 - n..l - 1].iter().rev().map(|a| a.unwrap()).collect();
                attention[l - 1] = Some(self.attention_level(l, aggregated[l - 1].unwrap(), &stack)?);
            }
        }

        let aggregated: Vec<NodeId> = aggregated.into_iter().map(Option::unwrap).collect();
        let mut logits = vec![None; big_l];
        if cfg.attention_enabled {
            for l in (1..=big_l).rev() {
                let (a_above, s_above) = if l < big_l {
                    (attention[l], logits[l])
                } else {
                    (None, None)
                };
                logits[l - 1] = Some(self.predict_level(l, attention[l - 1].unwrap(), a_above, s_above)?);
            }
        } else {
            for l in (1..=big_l).rev() {
                logits[l - 1] = Some(self.classify_level(l, aggregated[l - 1])?);
            }
        }
        Ok(LevelNodes {
            features,
            aggregated,
            attention: attention.into_iter().flatten().collect(),
            logits: logits.into_iter().map(Option::unwrap).collect(),
        })
    }
}

/// Everything recorded by one forward pass.
#[derive(Debug)]
pub struct ForwardTrace<T: Real = f32> {
    pub graph: Graph<T>,
    /// Graph node of each named parameter.
    pub params: BTreeMap<String, NodeId>,
    pub input: NodeId,
    pub levels: LevelNodes,
    /// Training-mode batch statistics per batchnorm layer.
    pub bn_stats: Vec<(String, BatchStats<T>)>,
    /// Foreground probability of the finest prediction, `(n, 1, H, W)`.
    pub saliency: Tensor<T>,
}

impl<T: Real> ForwardTrace<T> {
    /// `f^l`, 1-based.
    pub fn feature(&self, l: usize) -> &Tensor<T> {
        self.graph.value(self.levels.features[l - 1])
    }

    pub fn aggregated(&self, l: usize) -> &Tensor<T> {
        self.graph.value(self.levels.aggregated[l - 1])
    }

    pub fn attention(&self, l: usize) -> Option<&Tensor<T>> {
        self.levels.attention.get(l - 1).map(|&id| self.graph.value(id))
    }

    pub fn logits(&self, l: usize) -> &Tensor<T> {
        self.graph.value(self.levels.logits[l - 1])
    }

    pub fn param_grad(&self, name: &str) -> Option<&[T]> {
        self.params.get(name).and_then(|&id| self.graph.grad(id))
    }
}

/// Records the whole network for input `x` (`(n, 3, H, W)`).
pub fn forward<T: Real>(
    x: &Tensor<T>,
    store: &ParameterStore<T>,
    config: &NetworkConfig,
    mode: Mode,
) -> Result<ForwardTrace<T>> {
    config.validate()?;
    let mut graph = Graph::new();
    let params: BTreeMap<String, NodeId> = store
        .iter()
        .map(|(name, p)| {
            let id = match mode {
                Mode::Train => graph.param(p.value.clone()),
                Mode::Infer => graph.constant(p.value.clone()),
            };
            (name.to_string(), id)
        })
        .collect();
    let input = graph.constant(x.clone());
    let mut b = NetBuilder::new(&mut graph, &params, store, config, mode);
    let levels = b.run(input)?;
    let bn_stats = b.into_stats();
    let probs = graph.softmax_channels(levels.logits[0])?;
    let d = graph.dims(probs);
    let pv = graph.value(probs);
    let saliency = Tensor::from_fn(Dims::new(d.n, 1, d.h, d.w), |n, _, y, x| pv.at(n, 1, y, x));
    Ok(ForwardTrace {
        graph,
        params,
        input,
        levels,
        bn_stats,
        saliency,
    })
}

/// Saliency maps `(n, 1, H, W)` in inference mode.
pub fn predict(x: &Tensor<f32>, store: &ParameterStore<f32>, config: &NetworkConfig) -> Result<Tensor<f32>> {
    Ok(forward(x, store, config, Mode::Infer)?.saliency)
}

impl<T: Real> ParameterStore<T> {
    /// Folds training-mode batch statistics into the running buffers.
    pub fn apply_bn_stats(&mut self, stats: &[(String, BatchStats<T>)], momentum: T) -> Result<()> {
        for (layer, s) in stats {
            let mut mean = self.buffer(&format!("{layer}.mean"))?.clone();
            let mut var = self.buffer(&format!("{layer}.var"))?.clone();
            s.update_running(mean.data_mut(), var.data_mut(), momentum);
            *self.buffer_mut(&format!("{layer}.mean"))? = mean;
            *self.buffer_mut(&format!("{layer}.var"))? = var;
        }
        Ok(())
    }
}
