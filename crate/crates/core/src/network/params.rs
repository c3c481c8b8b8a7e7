use std::collections::BTreeMap;

use super::config::NetworkConfig;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{ConvSpec, Dims, Real, Tensor};

/// How a parameter is initialized and regularized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Xavier-uniform convolution weight.
    Weight { fan_in: usize, fan_out: usize },
    /// Zero-initialized, exempt from weight decay.
    Bias,
    /// Batchnorm scale, initialized to one.
    BnScale,
    /// Batchnorm shift, initialized to zero and exempt from weight decay.
    BnShift,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight { .. } | ParamKind::BnScale)
    }

    fn weight(spec: &ConvSpec) -> Self {
        let (fan_in, fan_out) = spec.fans();
        ParamKind::Weight { fan_in, fan_out }
    }
}

/// Xavier-uniform bound `sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSlot {
    pub name: String,
    pub dims: Dims,
    pub kind: ParamKind,
}

/// Per-level convolution geometry shared by layout and forward pass.
pub(crate) struct LevelSpecs {
    pub reduce: ConvSpec,
    pub upsample: Option<ConvSpec>,
    pub fuse: Option<ConvSpec>,
    pub attention: Option<ConvSpec>,
    pub predict: ConvSpec,
}

pub(crate) fn backbone_spec(config: &NetworkConfig, l: usize, k: usize) -> ConvSpec {
    let out = config.backbone_channels[l - 1];
    let inp = match (l, k) {
        (1, 1) => 3,
        (_, 1) => config.backbone_channels[l - 2],
        _ => out,
    };
    ConvSpec::same(inp, out, 3)
}

pub(crate) fn level_specs(config: &NetworkConfig, l: usize) -> LevelSpecs {
    let d = config.agg_width;
    let s = config.stride(l);
    let top = l == config.levels;
    let fuse = (config.aggregation && !top).then(|| {
        let extra = usize::from(config.aggregation_uses_attention());
        ConvSpec::same(2 * d + extra, d, 3)
    });
    let attention = config
        .attention_enabled
        .then(|| ConvSpec::same(d + config.attention_stack_len(l), 1, config.attention_kernel));
    let predict_in = match (config.attention_enabled, top) {
        (false, _) => d,
        (true, true) => 1,
        (true, false) => 2,
    };
    LevelSpecs {
        reduce: ConvSpec::same(config.backbone_channels[l - 1], d, 3),
        upsample: (s > 1).then(|| ConvSpec::upsample(d, d, s)),
        fuse,
        attention,
        predict: ConvSpec::same(predict_in, 2, config.prediction_kernel),
    }
}

fn vector(len: usize) -> Dims {
    Dims::new(1, len, 1, 1)
}

/// Every trainable parameter of `config`, in initialization order.
pub fn layout(config: &NetworkConfig) -> Vec<ParamSlot> {
    let mut out = Vec::new();
    let mut push = |name: String, dims: Dims, kind: ParamKind| out.push(ParamSlot { name, dims, kind });
    for l in 1..=config.levels {
        for k in 1..=config.stage_depth {
            let spec = backbone_spec(config, l, k);
            push(format!("bb.{l}.{k}.w"), spec.weight_dims(), ParamKind::weight(&spec));
            push(
                format!("bb.{l}.{k}.gamma"),
                vector(spec.out_channels),
                ParamKind::BnScale,
            );
            push(
                format!("bb.{l}.{k}.beta"),
                vector(spec.out_channels),
                ParamKind::BnShift,
            );
        }
    }
    let d = config.agg_width;
    for l in (1..=config.levels).rev() {
        let specs = level_specs(config, l);
        push(
            format!("w_r.{l}"),
            specs.reduce.weight_dims(),
            ParamKind::weight(&specs.reduce),
        );
        if let Some(u) = &specs.upsample {
            push(format!("w_u.{l}"), u.weight_dims(), ParamKind::weight(u));
        }
        if let Some(f) = &specs.fuse {
            push(format!("w_f.{l}"), f.weight_dims(), ParamKind::weight(f));
        }
        push(format!("agg.{l}.gamma"), vector(d), ParamKind::BnScale);
        push(format!("agg.{l}.beta"), vector(d), ParamKind::BnShift);
        if let Some(a) = &specs.attention {
            push(format!("w_a.{l}"), a.weight_dims(), ParamKind::weight(a));
            push(format!("b_a.{l}"), vector(1), ParamKind::Bias);
        }
        push(
            format!("w_s.{l}"),
            specs.predict.weight_dims(),
            ParamKind::weight(&specs.predict),
        );
        push(format!("b_s.{l}"), vector(2), ParamKind::Bias);
    }
    out
}

/// Names of the batchnorm layers; each owns `<name>.mean` and `<name>.var` buffers.
pub fn bn_layers(config: &NetworkConfig) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    for l in 1..=config.levels {
        for k in 1..=config.stage_depth {
            out.push((format!("bb.{l}.{k}"), config.backbone_channels[l - 1]));
        }
    }
    for l in (1..=config.levels).rev() {
        out.push((format!("agg.{l}"), config.agg_width));
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T = f32> {
    pub value: Tensor<T>,
    /// SGD velocity, same dims as `value`.
    pub momentum: Tensor<T>,
    pub kind: ParamKind,
}

/// Named trainable tensors with their optimizer state, plus non-trainable
/// buffers (batchnorm running statistics).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore<T = f32> {
    params: BTreeMap<String, Param<T>>,
    buffers: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParameterStore<T> {
    pub fn new() -> Self {
        ParameterStore {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) || self.buffers.contains_key(&name) {
            return Err(Error::Config(format!("parameter {name} defined twice")));
        }
        let momentum = Tensor::zeros(value.dims());
        self.params.insert(name, Param { value, momentum, kind });
        Ok(())
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) || self.buffers.contains_key(&name) {
            return Err(Error::Config(format!("buffer {name} defined twice")));
        }
        self.buffers.insert(name, value);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Arity(format!("missing parameter {name}")))
    }

    /// Parameters in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<T>> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::Arity(format!("missing buffer {name}")))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.buffers
            .get_mut(name)
            .ok_or_else(|| Error::Arity(format!("missing buffer {name}")))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn cast<U: Real>(&self) -> ParameterStore<U> {
        ParameterStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    let q = Param {
                        value: p.value.cast(),
                        momentum: p.momentum.cast(),
                        kind: p.kind,
                    };
                    (k.clone(), q)
                })
                .collect(),
            buffers: self.buffers.iter().map(|(k, b)| (k.clone(), b.cast())).collect(),
        }
    }

    /// Checks names and dims against the layout of `config`.
    pub fn check_matches(&self, config: &NetworkConfig) -> Result<()> {
        let slots = layout(config);
        let mut problems = Vec::new();
        for s in &slots {
            match self.params.get(&s.name) {
                None => problems.push(format!("missing {}", s.name)),
                Some(p) if p.value.dims() != s.dims => problems.push(format!(
                    "{} has dims {}, config needs {}",
                    s.name,
                    p.value.dims(),
                    s.dims
                )),
                Some(_) => {}
            }
        }
        for name in self.params.keys() {
            if !slots.iter().any(|s| &s.name == name) {
                problems.push(format!("unexpected {name}"));
            }
        }
        for (name, c) in bn_layers(config) {
            for stat in ["mean", "var"] {
                let key = format!("{name}.{stat}");
                match self.buffers.get(&key) {
                    Some(b) if b.len() == c => {}
                    _ => problems.push(format!("buffer {key} missing or mis-sized")),
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!(
                "parameters do not fit the network config: {}",
                problems.join("; ")
            )))
        }
    }
}

/// Xavier-uniform weights, zero biases, unit BN scales, zero running means
/// and unit running variances. Deterministic given `seed`.
pub fn init_params(config: &NetworkConfig, seed: u64) -> Result<ParameterStore<f32>> {
    config.validate()?;
    let mut rng = Rng::stream(seed, &[0x7061_7261_6d73]);
    let mut store = ParameterStore::new();
    for slot in layout(config) {
        let value = match slot.kind {
            ParamKind::Weight { fan_in, fan_out } => {
                let b = xavier_bound(fan_in, fan_out);
                Tensor::from_fn(slot.dims, |_, _, _, _| rng.range(-b, b) as f32)
            }
            ParamKind::Bias | ParamKind::BnShift => Tensor::zeros(slot.dims),
            ParamKind::BnScale => Tensor::full(slot.dims, 1.0),
        };
        store.insert(slot.name, value, slot.kind)?;
    }
    for (name, c) in bn_layers(config) {
        store.insert_buffer(format!("{name}.mean"), Tensor::zeros(vector(c)))?;
        store.insert_buffer(format!("{name}.var"), Tensor::full(vector(c), 1.0))?;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_matches_store() {
        let c = NetworkConfig::default();
        let s = init_params(&c, 1).unwrap();
        s.check_matches(&c).unwrap();
        assert_eq!(s.len(), layout(&c).len());
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = ParameterStore::<f32>::new();
        s.insert("x", Tensor::scalar(1.0), ParamKind::Bias).unwrap();
        assert!(s.insert("x", Tensor::scalar(1.0), ParamKind::Bias).is_err());
    }

    #[test]
    fn decay_exemptions() {
        assert!(!ParamKind::Bias.decays());
        assert!(!ParamKind::BnShift.decays());
        assert!(ParamKind::BnScale.decays());
    }
}
