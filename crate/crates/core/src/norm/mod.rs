//! The ten normalizers, the WN/SWS output corrections, and the analytic
//! BatchNorm/GroupNorm backward in projection form.

mod amplification;
mod layers;
mod projector;
mod weights;

pub use amplification::{
    amplification_stats, AmplificationStats, ChannelAmplification, GroupAmplification,
};
pub use layers::{apply_activation_norm, init_norm_params, normalize_activations, NormParams};
pub use projector::{bn_backward_analytic, gn_backward_analytic, project, Projector};
pub use weights::{
    apply_weight_norm, corrected_forward, correction_scale, normalize_weights, wn_shift,
};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Default `ε`, added under every square root.
pub const DEFAULT_EPS: f64 = 1e-6;

/// Group count used by GroupNorm and EvoNormS0 in the named architectures.
pub const DEFAULT_GROUPS: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    #[serde(rename = "bn")]
    BatchNorm,
    #[serde(rename = "ln")]
    LayerNorm,
    #[serde(rename = "in")]
    InstanceNorm,
    #[serde(rename = "gn")]
    GroupNorm,
    #[serde(rename = "frn")]
    FilterResponseNorm,
    #[serde(rename = "vn")]
    VarianceNorm,
    #[serde(rename = "evob0")]
    EvoNormB0,
    #[serde(rename = "evos0")]
    EvoNormS0,
    #[serde(rename = "wn")]
    WeightNorm,
    #[serde(rename = "sws")]
    ScaledWeightStandardization,
    #[serde(rename = "none")]
    None,
}

impl NormKind {
    pub const ALL: [NormKind; 10] = [
        NormKind::BatchNorm,
        NormKind::LayerNorm,
        NormKind::InstanceNorm,
        NormKind::GroupNorm,
        NormKind::FilterResponseNorm,
        NormKind::VarianceNorm,
        NormKind::EvoNormB0,
        NormKind::EvoNormS0,
        NormKind::WeightNorm,
        NormKind::ScaledWeightStandardization,
    ];

    pub const ACTIVATION_BASED: [NormKind; 8] = [
        NormKind::BatchNorm,
        NormKind::LayerNorm,
        NormKind::InstanceNorm,
        NormKind::GroupNorm,
        NormKind::FilterResponseNorm,
        NormKind::VarianceNorm,
        NormKind::EvoNormB0,
        NormKind::EvoNormS0,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NormKind::BatchNorm => "bn",
            NormKind::LayerNorm => "ln",
            NormKind::InstanceNorm => "in",
            NormKind::GroupNorm => "gn",
            NormKind::FilterResponseNorm => "frn",
            NormKind::VarianceNorm => "vn",
            NormKind::EvoNormB0 => "evob0",
            NormKind::EvoNormS0 => "evos0",
            NormKind::WeightNorm => "wn",
            NormKind::ScaledWeightStandardization => "sws",
            NormKind::None => "none",
        }
    }

    /// WN and SWS rescale weights; everything else rescales activations.
    pub fn is_parametric(self) -> bool {
        matches!(
            self,
            NormKind::WeightNorm | NormKind::ScaledWeightStandardization
        )
    }

    pub fn is_activation_based(self) -> bool {
        !self.is_parametric() && self != NormKind::None
    }

    pub fn is_grouped(self) -> bool {
        matches!(self, NormKind::GroupNorm | NormKind::EvoNormS0)
    }

    /// EvoNorms carry their own non-linearity and replace the norm + ReLU pair.
    pub fn is_evonorm(self) -> bool {
        matches!(self, NormKind::EvoNormB0 | NormKind::EvoNormS0)
    }

    /// Uses statistics pooled across the batch.
    pub fn uses_batch_stats(self) -> bool {
        matches!(
            self,
            NormKind::BatchNorm | NormKind::VarianceNorm | NormKind::EvoNormB0
        )
    }
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let k = match s.to_ascii_lowercase().as_str() {
            "bn" | "batchnorm" => NormKind::BatchNorm,
            "ln" | "layernorm" => NormKind::LayerNorm,
            "in" | "instancenorm" => NormKind::InstanceNorm,
            "gn" | "groupnorm" => NormKind::GroupNorm,
            "frn" => NormKind::FilterResponseNorm,
            "vn" => NormKind::VarianceNorm,
            "evob0" | "evonormb0" => NormKind::EvoNormB0,
            "evos0" | "evonorms0" => NormKind::EvoNormS0,
            "wn" | "weightnorm" => NormKind::WeightNorm,
            "sws" => NormKind::ScaledWeightStandardization,
            "none" => NormKind::None,
            other => return invalid(format!("unknown normalizer {other:?}")),
        };
        Ok(k)
    }
}

/// How channels are split for grouped normalizers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// A fixed number of channels per group, capped at the channel count.
    Size(usize),
    /// A fixed number of groups, capped at the channel count.
    Count(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizerSpec {
    pub kind: NormKind,
    pub grouping: Grouping,
    pub eps: f64,
}

impl NormalizerSpec {
    pub fn new(kind: NormKind) -> Self {
        Self {
            kind,
            grouping: Grouping::Count(DEFAULT_GROUPS),
            eps: DEFAULT_EPS,
        }
    }

    pub fn group_norm_size(g: usize) -> Self {
        Self::new(NormKind::GroupNorm).with_group_size(g)
    }

    pub fn with_group_size(mut self, g: usize) -> Self {
        self.grouping = Grouping::Size(g);
        self
    }

    pub fn with_groups(mut self, count: usize) -> Self {
        self.grouping = Grouping::Count(count);
        self
    }

    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps >= 0.0) || !self.eps.is_finite() {
            return invalid(format!(
                "epsilon must be finite and non-negative, got {}",
                self.eps
            ));
        }
        match self.grouping {
            Grouping::Size(0) | Grouping::Count(0) => {
                invalid("group size and count must be positive")
            }
            _ => Ok(()),
        }
    }

    /// Channels per group at a layer with `channels` channels.
    pub fn group_size_for(&self, channels: usize) -> Result<usize> {
        let g = match self.grouping {
            Grouping::Size(g) => g.min(channels),
            Grouping::Count(n) => {
                let n = n.min(channels);
                if n == 0 || !channels.is_multiple_of(n) {
                    return invalid(format!("{n} groups do not divide {channels} channels"));
                }
                channels / n
            }
        };
        if g == 0 || !channels.is_multiple_of(g) {
            return invalid(format!(
                "group size {g} does not divide {channels} channels"
            ));
        }
        Ok(g)
    }

    /// Compact hyperparameter string for reports, e.g. `eps=1e-6;groups=32`.
    pub fn params_label(&self) -> String {
        let mut s = format!("eps={:e}", self.eps);
        if self.kind.is_grouped() {
            match self.grouping {
                Grouping::Size(g) => s.push_str(&format!(";group_size={g}")),
                Grouping::Count(n) => s.push_str(&format!(";groups={n}")),
            }
        }
        s
    }
}
