use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::norm::NormalizerSpec;

/// Residual wiring of a block `y → out` with branch `f`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    /// `φ(y + N(f(y)))`.
    Standard,
    /// `φ(y + α·N(f(y)))` with `α = 0` at init.
    #[serde(rename = "skipinit")]
    SkipInit,
    /// `y + φ(N(f(y)))`: no non-linearity after the add.
    ReluOnResidual,
    /// `y + conv(φ(N(conv(φ(N(y))))))`.
    Preactivation,
    /// No residual connections.
    None,
}

impl Topology {
    pub const RESIDUAL: [Topology; 4] = [
        Topology::Standard,
        Topology::SkipInit,
        Topology::ReluOnResidual,
        Topology::Preactivation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Topology::Standard => "standard",
            Topology::SkipInit => "skipinit",
            Topology::ReluOnResidual => "relu_on_residual",
            Topology::Preactivation => "preactivation",
            Topology::None => "none",
        }
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Topology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "standard" => Topology::Standard,
            "skipinit" => Topology::SkipInit,
            "relu_on_residual" => Topology::ReluOnResidual,
            "preactivation" => Topology::Preactivation,
            "none" => Topology::None,
            other => return invalid(format!("unknown topology {other:?}")),
        })
    }
}

/// One entry of an architecture's layer list.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerDef {
    /// A convolution followed by the normalizer and non-linearity.
    Conv { filters: usize, stride: usize },
    /// `blocks` residual BasicBlocks; the first one downsamples by `stride`.
    Stage {
        filters: usize,
        blocks: usize,
        stride: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub arch: String,
    pub layers: Vec<LayerDef>,
    pub topology: Topology,
    /// Multiply every residual branch by a learned `α`, initialized to 0.
    /// Always on for [`Topology::SkipInit`].
    pub skip_init: bool,
    pub normalizer: NormalizerSpec,
    pub width_scale: f64,
    pub num_classes: usize,
    /// Input `C × H × W`.
    pub input: [usize; 3],
    pub kernel: usize,
}

impl NetworkSpec {
    fn conv_list(arch: &str, list: &[(usize, usize)], normalizer: NormalizerSpec) -> Self {
        Self {
            arch: arch.to_string(),
            layers: list
                .iter()
                .map(|&(filters, stride)| LayerDef::Conv { filters, stride })
                .collect(),
            topology: Topology::None,
            skip_init: false,
            normalizer,
            width_scale: 1.0,
            num_classes: 100,
            input: [3, 32, 32],
            kernel: 3,
        }
    }

    /// `[64, (64, 2), 128, (128, 2), 256, (256, 2), 512, (512, 2), 512, 512]`.
    pub fn cnn10(normalizer: NormalizerSpec) -> Self {
        let l = [
            (64, 1),
            (64, 2),
            (128, 1),
            (128, 2),
            (256, 1),
            (256, 2),
            (512, 1),
            (512, 2),
            (512, 1),
            (512, 1),
        ];
        Self::conv_list("cnn10", &l, normalizer)
    }

    /// `[64, 64, 64, (64, 2), 128, 128, 128, (128, 2), 256, 256, 256,
    /// (256, 2), 256, 256, 256, (256, 2), 512, 512, 512, 512]`.
    pub fn cnn20(normalizer: NormalizerSpec) -> Self {
        let l = [
            (64, 1),
            (64, 1),
            (64, 1),
            (64, 2),
            (128, 1),
            (128, 1),
            (128, 1),
            (128, 2),
            (256, 1),
            (256, 1),
            (256, 1),
            (256, 2),
            (256, 1),
            (256, 1),
            (256, 1),
            (256, 2),
            (512, 1),
            (512, 1),
            (512, 1),
            (512, 1),
        ];
        Self::conv_list("cnn20", &l, normalizer)
    }

    /// `depth` stride-1 layers of constant `width`.
    pub fn plain(depth: usize, width: usize, normalizer: NormalizerSpec) -> Self {
        let l = vec![(width, 1); depth];
        let mut s = Self::conv_list(&format!("plain{depth}x{width}"), &l, normalizer);
        s.arch = format!("plain{depth}x{width}");
        s
    }

    /// `[32, block(32, n), block(64, n), block(128, n)]`; `n = 9` is ResNet-56.
    pub fn resnet(normalizer: NormalizerSpec, topology: Topology, blocks_per_stage: usize) -> Self {
        Self {
            arch: if blocks_per_stage == 9 {
                "resnet56".into()
            } else {
                format!("resnet{}", 6 * blocks_per_stage + 2)
            },
            layers: vec![
                LayerDef::Conv {
                    filters: 32,
                    stride: 1,
                },
                LayerDef::Stage {
                    filters: 32,
                    blocks: blocks_per_stage,
                    stride: 1,
                },
                LayerDef::Stage {
                    filters: 64,
                    blocks: blocks_per_stage,
                    stride: 2,
                },
                LayerDef::Stage {
                    filters: 128,
                    blocks: blocks_per_stage,
                    stride: 2,
                },
            ],
            topology,
            skip_init: topology == Topology::SkipInit,
            normalizer,
            width_scale: 1.0,
            num_classes: 100,
            input: [3, 32, 32],
            kernel: 3,
        }
    }

    pub fn resnet56(normalizer: NormalizerSpec, topology: Topology) -> Self {
        Self::resnet(normalizer, topology, 9)
    }

    /// Looks up `cnn10`, `cnn20`, `resnet56`, `resnet<6n+2>` or `plain<D>x<W>`.
    pub fn named(arch: &str, normalizer: NormalizerSpec, topology: Topology) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("unknown architecture {arch:?}"));
        match arch {
            "cnn10" => Ok(Self::cnn10(normalizer)),
            "cnn20" => Ok(Self::cnn20(normalizer)),
            a if a.starts_with("resnet") => {
                let depth: usize = a["resnet".len()..].parse().map_err(|_| bad())?;
                if depth < 8 || !(depth - 2).is_multiple_of(6) {
                    return Err(bad());
                }
                Ok(Self::resnet(normalizer, topology, (depth - 2) / 6))
            }
            a if a.starts_with("plain") => {
                let (d, w) = a["plain".len()..].split_once('x').ok_or_else(bad)?;
                Ok(Self::plain(
                    d.parse().map_err(|_| bad())?,
                    w.parse().map_err(|_| bad())?,
                    normalizer,
                ))
            }
            _ => Err(bad()),
        }
    }

    pub fn with_width_scale(mut self, s: f64) -> Self {
        self.width_scale = s;
        self
    }

    pub fn with_input(mut self, channels: usize, h: usize, w: usize) -> Self {
        self.input = [channels, h, w];
        self
    }

    pub fn with_classes(mut self, k: usize) -> Self {
        self.num_classes = k;
        self
    }

    pub fn with_kernel(mut self, k: usize) -> Self {
        self.kernel = k;
        self
    }

    pub fn with_skip_init(mut self, on: bool) -> Self {
        self.skip_init = on;
        self
    }

    pub fn is_residual(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l, LayerDef::Stage { .. }))
    }

    pub fn scaled(&self, filters: usize) -> Result<usize> {
        let w = (filters as f64 * self.width_scale + 1e-9).floor() as usize;
        if w == 0 {
            return invalid(format!(
                "width scale {} leaves a {filters}-filter layer empty",
                self.width_scale
            ));
        }
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        self.normalizer.validate()?;
        if !(self.width_scale > 0.0) || !self.width_scale.is_finite() {
            return invalid(format!(
                "width scale must be positive, got {}",
                self.width_scale
            ));
        }
        if self.layers.is_empty()
            || self.num_classes == 0
            || self.input.contains(&0)
            || self.kernel.is_multiple_of(2)
        {
            return invalid("network needs layers, classes, a non-empty input and an odd kernel");
        }
        if self.is_residual() == (self.topology == Topology::None) {
            return invalid(format!(
                "topology {} does not fit architecture {}",
                self.topology, self.arch
            ));
        }
        if self.topology == Topology::SkipInit && !self.skip_init {
            return invalid("the skipinit topology needs its alpha scalars");
        }
        if self.skip_init && !self.is_residual() {
            return invalid("alpha scalars only exist in residual networks");
        }
        for l in &self.layers {
            match *l {
                LayerDef::Conv { filters, stride }
                | LayerDef::Stage {
                    filters, stride, ..
                } => {
                    if stride == 0 || filters == 0 {
                        return invalid("filters and strides must be positive");
                    }
                }
            }
        }
        Ok(())
    }

    /// Number of tapped layers: conv layers, plus one per residual block.
    pub fn depth(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match *l {
                LayerDef::Conv { .. } => 1,
                LayerDef::Stage { blocks, .. } => blocks,
            })
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::norm::{NormKind, NormalizerSpec};

    fn bn() -> NormalizerSpec {
        NormalizerSpec::new(NormKind::BatchNorm)
    }

    #[test]
    fn named_lookup() {
        assert_eq!(
            NetworkSpec::named("resnet56", bn(), Topology::Standard)
                .unwrap()
                .depth(),
            28
        );
        assert_eq!(
            NetworkSpec::named("resnet20", bn(), Topology::Standard)
                .unwrap()
                .depth(),
            10
        );
        assert_eq!(
            NetworkSpec::named("cnn20", bn(), Topology::None)
                .unwrap()
                .depth(),
            20
        );
        assert_eq!(
            NetworkSpec::named("plain30x64", bn(), Topology::None)
                .unwrap()
                .depth(),
            30
        );
        assert!(NetworkSpec::named("resnet57", bn(), Topology::Standard).is_err());
        assert!(NetworkSpec::named("vgg", bn(), Topology::None).is_err());
    }

    #[test]
    fn topology_must_match() {
        assert!(NetworkSpec::cnn10(bn()).validate().is_ok());
        let mut s = NetworkSpec::cnn10(bn());
        s.topology = Topology::Standard;
        assert!(s.validate().is_err());
        let mut r = NetworkSpec::resnet56(bn(), Topology::SkipInit);
        assert!(r.validate().is_ok());
        r.skip_init = false;
        assert!(r.validate().is_err());
    }

    #[test]
    fn width_scaling() {
        let s = NetworkSpec::cnn10(bn()).with_width_scale(0.5);
        assert_eq!(s.scaled(64).unwrap(), 32);
        assert!(NetworkSpec::cnn10(bn())
            .with_width_scale(0.001)
            .scaled(64)
            .is_err());
    }
}
