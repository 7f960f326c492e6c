use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::LossKind;
use crate::error::{Error, Result};
use crate::net::{NetworkSpec, Topology};
use crate::norm::{NormKind, NormalizerSpec, DEFAULT_EPS, DEFAULT_GROUPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    VarianceProfile,
    RankSweep,
    CossimSweep,
    GradProfile,
    Tradeoff,
    TrainCorrelate,
    GradCheck,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 7] = [
        ExperimentKind::VarianceProfile,
        ExperimentKind::RankSweep,
        ExperimentKind::CossimSweep,
        ExperimentKind::GradProfile,
        ExperimentKind::Tradeoff,
        ExperimentKind::TrainCorrelate,
        ExperimentKind::GradCheck,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::VarianceProfile => "variance-profile",
            ExperimentKind::RankSweep => "rank-sweep",
            ExperimentKind::CossimSweep => "cossim-sweep",
            ExperimentKind::GradProfile => "grad-profile",
            ExperimentKind::Tradeoff => "tradeoff",
            ExperimentKind::TrainCorrelate => "train-correlate",
            ExperimentKind::GradCheck => "grad-check",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Gaussian,
    Blobs,
    Cifar100,
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub arch: String,
    pub width_scale: f64,
    pub normalizers: Vec<NormKind>,
    pub topologies: Vec<Topology>,
    /// Adds learned `α = 0` branch scalars to every topology.
    pub skip_init: bool,
    pub group_sizes: Vec<usize>,
    /// Group count for GroupNorm and EvoNormS0 outside group-size sweeps.
    pub groups: usize,
    pub eps: f64,
    pub batch: usize,
    /// Batch sizes compared by grad-profile; all split the same sample pool.
    pub batch_sizes: Vec<usize>,
    pub stat_batches: usize,
    pub seeds: Vec<u64>,
    pub data: DataSource,
    pub data_path: Option<PathBuf>,
    pub input_size: usize,
    pub input_channels: usize,
    pub kernel: usize,
    pub blocks_per_stage: usize,
    /// Depth and width of the plain network in rank-sweep.
    pub depth: usize,
    pub width: usize,
    pub loss: LossKind,
    /// Second moment above which a trace counts as exploded.
    pub variance_threshold: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub train_samples: usize,
    pub classes: usize,
    pub blob_spread: f64,
    /// Layer whose gradient is correlated with the spread product above it.
    pub probe_layer: usize,
    /// Random instances per identity check in grad-check.
    pub instances: usize,
    pub monte_carlo_draws: usize,
    pub workers: usize,
}

impl ExperimentConfig {
    /// Desk-scale defaults for each experiment.
    pub fn defaults(kind: ExperimentKind) -> Self {
        let mut c = Self {
            experiment: kind,
            arch: "resnet56".into(),
            width_scale: 0.25,
            normalizers: NormKind::ACTIVATION_BASED.to_vec(),
            topologies: vec![Topology::Preactivation],
            skip_init: false,
            group_sizes: vec![1, 2, 4, 8, 16, 32, 64],
            groups: DEFAULT_GROUPS,
            eps: DEFAULT_EPS,
            batch: 64,
            batch_sizes: vec![32, 8],
            stat_batches: 4,
            seeds: vec![0, 1, 2],
            data: DataSource::Gaussian,
            data_path: None,
            input_size: 16,
            input_channels: 3,
            kernel: 3,
            blocks_per_stage: 9,
            depth: 30,
            width: 64,
            loss: LossKind::HalfSquaredNorm,
            variance_threshold: 1e6,
            learning_rate: 0.01,
            epochs: 5,
            momentum: 0.9,
            weight_decay: 1e-4,
            train_samples: 256,
            classes: 10,
            blob_spread: 1.0,
            probe_layer: 4,
            instances: 100,
            monte_carlo_draws: 100_000,
            workers: 0,
        };
        match kind {
            ExperimentKind::VarianceProfile => {
                // Zero padding shrinks the branch variance at the borders; at
                // 16×16 the last stage is 4×4 and loses a third of it.
                c.input_size = 32;
                c.batch = 32;
                c.seeds = (0..5).collect();
            }
            ExperimentKind::RankSweep => {
                c.arch = "plain".into();
                c.normalizers = vec![NormKind::GroupNorm];
                c.kernel = 1;
                c.input_size = 6;
                c.seeds = (0..8).collect();
                c.stat_batches = 1;
            }
            ExperimentKind::CossimSweep | ExperimentKind::Tradeoff => {
                c.arch = "cnn20".into();
                c.normalizers = vec![NormKind::GroupNorm];
                c.group_sizes = vec![1, 2, 4, 8, 16, 32, 64, 128, 512];
                c.input_size = 32;
                c.batch = 32;
                c.seeds = (0..5).collect();
                c.stat_batches = 1;
            }
            ExperimentKind::GradProfile => {
                c.arch = "cnn20".into();
                c.normalizers = vec![
                    NormKind::InstanceNorm,
                    NormKind::BatchNorm,
                    NormKind::GroupNorm,
                    NormKind::LayerNorm,
                ];
                c.input_size = 32;
                c.batch = 32;
                c.stat_batches = 2;
                c.seeds = (0..5).collect();
            }
            ExperimentKind::TrainCorrelate => {
                c.arch = "cnn10".into();
                c.width_scale = 0.125;
                c.normalizers = NormKind::ALL.to_vec();
                c.data = DataSource::Blobs;
                c.input_size = 32;
                c.batch = 16;
                c.seeds = vec![0, 1, 2];
            }
            ExperimentKind::GradCheck => {
                c.seeds = vec![0];
                c.normalizers = vec![NormKind::BatchNorm, NormKind::GroupNorm];
            }
        }
        c
    }

    /// Reads a flat `key = value` file over the defaults of `kind`. Unknown
    /// keys are rejected. An `experiment` key, if present, must match.
    pub fn from_file(kind: ExperimentKind, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_str_with(kind, &text)
    }

    pub fn from_str_with(kind: ExperimentKind, text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if let Some((k, _)) = table.iter().find(|(_, v)| v.is_table()) {
            return Err(Error::Config(format!(
                "config is flat key-value; {k:?} is a section"
            )));
        }
        let mut merged = toml::Table::try_from(Self::defaults(kind))
            .map_err(|e| Error::Config(e.to_string()))?;
        for (k, v) in table {
            if !merged.contains_key(&k) && k != "data_path" {
                return Err(Error::Config(format!("unknown key {k:?}")));
            }
            merged.insert(k, v);
        }
        let cfg: Self = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if cfg.experiment != kind {
            return Err(Error::Config(format!(
                "config is for {} but {kind} was requested",
                cfg.experiment
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn normalizer_spec(&self, kind: NormKind) -> NormalizerSpec {
        NormalizerSpec::new(kind)
            .with_groups(self.groups)
            .with_eps(self.eps)
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.input_channels, self.input_size, self.input_size]
    }

    /// The network for one cell of the grid.
    pub fn network(&self, normalizer: NormalizerSpec, topology: Topology) -> Result<NetworkSpec> {
        let spec = if self.arch == "plain" {
            NetworkSpec::plain(self.depth, self.width, normalizer)
        } else if self.arch == "resnet" || self.arch == "resnet56" {
            NetworkSpec::resnet(normalizer, topology, self.blocks_per_stage)
        } else {
            NetworkSpec::named(&self.arch, normalizer, topology)?
        };
        let skip = (self.skip_init || topology == Topology::SkipInit) && spec.is_residual();
        let spec = spec
            .with_width_scale(if self.arch == "plain" {
                1.0
            } else {
                self.width_scale
            })
            .with_input(self.input_channels, self.input_size, self.input_size)
            .with_kernel(self.kernel)
            .with_classes(self.classes.max(1))
            .with_skip_init(skip);
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.normalizers.is_empty() && self.experiment != ExperimentKind::RankSweep {
            return bad("normalizers must not be empty".into());
        }
        if self.batch == 0 || self.stat_batches == 0 || self.batch_sizes.contains(&0) {
            return bad("batch sizes and stat_batches must be positive".into());
        }
        let batch_stats = self.normalizers.iter().any(|k| k.uses_batch_stats());
        if batch_stats && (self.batch < 2 || self.batch_sizes.iter().any(|&b| b < 2)) {
            return bad("batch-statistic normalizers need batches of at least 2".into());
        }
        if !(self.width_scale > 0.0) || !(self.eps >= 0.0) || !(self.variance_threshold > 0.0) {
            return bad(
                "width_scale and variance_threshold must be positive, eps non-negative".into(),
            );
        }
        if self.data == DataSource::Cifar100 && self.data_path.is_none() {
            return bad("the cifar100 data source needs data_path".into());
        }
        if self.group_sizes.contains(&0) {
            return bad("group sizes must be positive".into());
        }
        if self.instances == 0 || self.monte_carlo_draws == 0 || self.epochs == 0 {
            return bad("instances, draws and epochs must be positive".into());
        }
        // Resolve every architecture of the grid up front.
        if self.experiment != ExperimentKind::GradCheck {
            for &k in &self.normalizers {
                for t in self.grid_topologies() {
                    self.network(self.normalizer_spec(k), t)?;
                }
            }
        }
        Ok(())
    }

    /// Topologies to run: the configured residual ones for ResNets, `none`
    /// otherwise. Only variance-profile sweeps more than the first.
    pub fn grid_topologies(&self) -> Vec<Topology> {
        if !self.arch.starts_with("resnet") {
            return vec![Topology::None];
        }
        let mut t: Vec<Topology> = self
            .topologies
            .iter()
            .copied()
            .filter(|t| *t != Topology::None)
            .collect();
        if t.is_empty() {
            t.push(Topology::Standard);
        }
        if self.experiment != ExperimentKind::VarianceProfile {
            t.truncate(1);
        }
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        for k in ExperimentKind::ALL {
            ExperimentConfig::defaults(k)
                .validate()
                .unwrap_or_else(|e| panic!("{k}: {e}"));
        }
    }

    #[test]
    fn overrides_and_unknown_keys() {
        let c = ExperimentConfig::from_str_with(
            ExperimentKind::GradProfile,
            "batch = 8\nseeds = [3]\nnormalizers = [\"bn\"]",
        )
        .unwrap();
        assert_eq!((c.batch, c.seeds.clone()), (8, vec![3]));
        assert!(ExperimentConfig::from_str_with(ExperimentKind::GradProfile, "bogus = 1").is_err());
        assert!(ExperimentConfig::from_str_with(
            ExperimentKind::GradProfile,
            "experiment = \"tradeoff\""
        )
        .is_err());
        assert!(ExperimentConfig::from_str_with(
            ExperimentKind::GradProfile,
            "[section]\nbatch = 1"
        )
        .is_err());
    }

    #[test]
    fn toml_round_trip() {
        let c = ExperimentConfig::defaults(ExperimentKind::TrainCorrelate);
        assert_eq!(
            ExperimentConfig::from_str_with(c.experiment, &c.to_toml().unwrap()).unwrap(),
            c
        );
    }
}
