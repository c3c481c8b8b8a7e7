//! The multi-level saliency network: a small VGG-style backbone with side
//! outputs, top-down feature aggregation, contextual attention maps and
//! recursive per-level prediction.

mod checkpoint;
mod config;
mod model;
mod params;

pub use checkpoint::{decode_tensors, encode_tensors, Checkpoint, MAGIC, VERSION};
pub use config::{AttentionDirection, NetworkConfig, Variant};
pub use model::{forward, predict, ForwardTrace, LevelNodes, Mode, NetBuilder};
pub use params::{bn_layers, init_params, layout, xavier_bound, Param, ParamKind, ParamSlot, ParameterStore};
