use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionDirection {
    /// Levels `L` down to `1`; each map sees the maps of coarser levels.
    #[default]
    TopDown,
    /// Levels `1` up to `L`; each map sees the maps of finer levels.
    BottomUp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Number of side-output levels `L`.
    pub levels: usize,
    /// `[height, width]` of network inputs.
    pub input_hw: [usize; 2],
    pub backbone_channels: Vec<usize>,
    /// `conv -> BN -> ReLU` blocks per backbone stage.
    pub stage_depth: usize,
    /// Aggregated channel count `d`.
    pub agg_width: usize,
    pub attention_kernel: usize,
    pub prediction_kernel: usize,
    /// Attention at level `l` sees every previously computed map, not just the nearest one.
    pub pyramid: bool,
    pub attention_enabled: bool,
    /// When false each level classifies its own upsampled side feature.
    pub aggregation: bool,
    pub attention_direction: AttentionDirection,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            levels: 5,
            input_hw: [64, 64],
            backbone_channels: vec![16, 32, 64, 64, 64],
            stage_depth: 2,
            agg_width: 16,
            attention_kernel: 3,
            prediction_kernel: 1,
            pyramid: true,
            attention_enabled: true,
            aggregation: true,
            attention_direction: AttentionDirection::TopDown,
        }
    }
}

impl NetworkConfig {
    /// Reduced configuration used for end-to-end gradient checks.
    pub fn tiny() -> Self {
        NetworkConfig {
            levels: 2,
            input_hw: [8, 8],
            backbone_channels: vec![3, 4],
            stage_depth: 2,
            agg_width: 4,
            ..NetworkConfig::default()
        }
    }

    /// Downsampling factor of level `l` (1-based): `2^(l-1)`.
    pub fn stride(&self, l: usize) -> usize {
        1 << (l - 1)
    }

    pub fn strides(&self) -> Vec<usize> {
        (1..=self.levels).map(|l| self.stride(l)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("network: {m}")));
        if self.levels < 2 {
            return bad(format!("levels must be at least 2, got {}", self.levels));
        }
        if self.levels > 16 {
            return bad(format!("levels must be at most 16, got {}", self.levels));
        }
        if self.backbone_channels.len() != self.levels {
            return bad(format!(
                "backbone_channels has {} entries for {} levels",
                self.backbone_channels.len(),
                self.levels
            ));
        }
        if self.backbone_channels.contains(&0) || self.agg_width == 0 || self.stage_depth == 0 {
            return bad("channel counts and stage_depth must be positive".into());
        }
        for (name, k) in [
            ("attention_kernel", self.attention_kernel),
            ("prediction_kernel", self.prediction_kernel),
        ] {
            if k % 2 == 0 {
                return bad(format!("{name} must be odd, got {k}"));
            }
        }
        let top = self.stride(self.levels);
        let [h, w] = self.input_hw;
        if h == 0 || w == 0 || h % top != 0 || w % top != 0 {
            return bad(format!(
                "input_hw {h}x{w} must be positive multiples of the coarsest stride {top}"
            ));
        }
        if self.attention_enabled && !self.aggregation {
            return bad("attention requires aggregation".into());
        }
        Ok(())
    }

    /// Number of attention maps stacked into level `l`'s attention input.
    pub fn attention_stack_len(&self, l: usize) -> usize {
        let before = match self.attention_direction {
            AttentionDirection::TopDown => self.levels - l,
            AttentionDirection::BottomUp => l - 1,
        };
        if self.pyramid {
            before
        } else {
            before.min(1)
        }
    }

    /// Whether aggregation at level `l < L` concatenates the attention map from level `l + 1`.
    pub fn aggregation_uses_attention(&self) -> bool {
        self.attention_enabled && self.attention_direction == AttentionDirection::TopDown
    }
}

/// Ablation model labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Per-level classifiers on side features only.
    A,
    /// Classifiers on aggregated features.
    B,
    /// `B` plus bottom-up single attention.
    C,
    /// `B` plus top-down single attention.
    D,
    /// `B` plus top-down attention pyramid.
    E,
    /// `E` with a doubled backbone stage depth.
    F,
}

impl Variant {
    pub const ALL: [Variant; 6] = [Variant::A, Variant::B, Variant::C, Variant::D, Variant::E, Variant::F];

    pub fn label(self) -> &'static str {
        match self {
            Variant::A => "a",
            Variant::B => "b",
            Variant::C => "c",
            Variant::D => "d",
            Variant::E => "e",
            Variant::F => "f",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.label() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}; expected one of a,b,c,d,e,f")))
    }

    /// `base` with the variant's structural switches applied.
    pub fn configure(self, base: &NetworkConfig) -> NetworkConfig {
        let mut c = base.clone();
        c.aggregation = self != Variant::A;
        c.attention_enabled = !matches!(self, Variant::A | Variant::B);
        c.pyramid = matches!(self, Variant::E | Variant::F);
        c.attention_direction = match self {
            Variant::C => AttentionDirection::BottomUp,
            _ => AttentionDirection::TopDown,
        };
        if self == Variant::F {
            c.stage_depth = base.stage_depth * 2;
        }
        c
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}
