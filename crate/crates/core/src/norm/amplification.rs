use serde::{Deserialize, Serialize};

use super::NormalizerSpec;
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Gradient amplification factors `1/σ²` for one channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelAmplification {
    pub channel: usize,
    /// Mean over samples of `1/σ²_x` (per-instance statistics, as in IN).
    pub instance: f64,
    /// `N / Σᵢ σ²_x`, the harmonic-mean side of the inequality.
    pub harmonic: f64,
    /// `1/σ²_{b,x}`, the pooled batch statistic (as in BN).
    pub batch: f64,
    /// Mean over samples of `1/σ²` of the channel's group (as in GN).
    pub group: f64,
}

/// Amplification for one `(sample, group)` pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupAmplification {
    pub sample: usize,
    pub group: usize,
    /// Mean over the group's channels of `1/σ²_x`.
    pub instance: f64,
    /// `1/σ²` over the whole group.
    pub pooled: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AmplificationStats {
    pub group_size: usize,
    pub channels: Vec<ChannelAmplification>,
    pub groups: Vec<GroupAmplification>,
    /// Units skipped because a statistic was zero.
    pub excluded: usize,
}

impl AmplificationStats {
    /// Counts failures of `instance ≥ harmonic ≥ batch` per channel and
    /// `instance ≥ pooled` per group, allowing `slack` relative error.
    pub fn violations(&self, slack: f64) -> usize {
        let ge = |a: f64, b: f64| a >= b - slack * b.abs().max(a.abs());
        let ch = self
            .channels
            .iter()
            .filter(|c| !(ge(c.instance, c.harmonic) && ge(c.harmonic, c.batch)))
            .count();
        let gr = self
            .groups
            .iter()
            .filter(|g| !ge(g.instance, g.pooled))
            .count();
        ch + gr
    }

    pub fn checked(&self) -> usize {
        self.channels.len() * 2 + self.groups.len()
    }
}

/// Population variance over `values`.
fn variance(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let (n, s) = values
        .clone()
        .fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    let m = s / n as f64;
    values.map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64
}

/// Per-channel and per-group amplification factors of the pre-normalization
/// activations `x` (`N × C × H × W`). Groups follow `spec`'s grouping.
pub fn amplification_stats(x: &Tensor, spec: &NormalizerSpec) -> Result<AmplificationStats> {
    if x.rank() != 4 {
        return shape_err(format!("expected N x C x H x W, got {:?}", x.shape()));
    }
    let (n, c, hw) = (x.dim(0), x.dim(1), x.dim(2) * x.dim(3));
    let gsize = spec.group_size_for(c)?;
    let d = x.data();
    let plane = |i: usize, ch: usize| &d[(i * c + ch) * hw..(i * c + ch + 1) * hw];
    let inst_var: Vec<f64> = (0..n * c)
        .map(|k| variance(plane(k / c, k % c).iter().copied()))
        .collect();
    let group_var: Vec<f64> = (0..n * (c / gsize))
        .map(|k| {
            let (i, grp) = (k / (c / gsize), k % (c / gsize));
            let start = (i * c + grp * gsize) * hw;
            variance(d[start..start + gsize * hw].iter().copied())
        })
        .collect();
    let mut out = AmplificationStats {
        group_size: gsize,
        ..Default::default()
    };
    for ch in 0..c {
        let vars: Vec<f64> = (0..n).map(|i| inst_var[i * c + ch]).collect();
        let gvars: Vec<f64> = (0..n)
            .map(|i| group_var[i * (c / gsize) + ch / gsize])
            .collect();
        let batch_var = variance((0..n).flat_map(|i| plane(i, ch).iter().copied()));
        if vars.iter().chain(&gvars).any(|&v| !(v > 0.0)) || !(batch_var > 0.0) {
            out.excluded += 1;
            continue;
        }
        out.channels.push(ChannelAmplification {
            channel: ch,
            instance: vars.iter().map(|v| 1.0 / v).sum::<f64>() / n as f64,
            harmonic: n as f64 / vars.iter().sum::<f64>(),
            batch: 1.0 / batch_var,
            group: gvars.iter().map(|v| 1.0 / v).sum::<f64>() / n as f64,
        });
    }
    for i in 0..n {
        for grp in 0..c / gsize {
            let vars: Vec<f64> = (0..gsize)
                .map(|k| inst_var[i * c + grp * gsize + k])
                .collect();
            let pooled = group_var[i * (c / gsize) + grp];
            if vars.iter().any(|&v| !(v > 0.0)) || !(pooled > 0.0) {
                out.excluded += 1;
                continue;
            }
            out.groups.push(GroupAmplification {
                sample: i,
                group: grp,
                instance: vars.iter().map(|v| 1.0 / v).sum::<f64>() / gsize as f64,
                pooled: 1.0 / pooled,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::norm::NormKind;

    #[test]
    fn equal_spreads_give_equality() {
        // Two samples, one channel, identical spatial spread and mean.
        let x = Tensor::new(vec![2, 1, 1, 2], vec![0.0, 2.0, 0.0, 2.0]).unwrap();
        let s = amplification_stats(&x, &NormalizerSpec::new(NormKind::GroupNorm)).unwrap();
        let ch = &s.channels[0];
        assert!((ch.instance - ch.harmonic).abs() < 1e-15);
        assert!((ch.harmonic - ch.batch).abs() < 1e-15);
    }

    #[test]
    fn hand_case_one_and_two() {
        // Spatial stds 1 and 2.
        let x = Tensor::new(vec![2, 1, 1, 2], vec![-1.0, 1.0, -2.0, 2.0]).unwrap();
        let s = amplification_stats(&x, &NormalizerSpec::new(NormKind::GroupNorm)).unwrap();
        let ch = &s.channels[0];
        assert!((ch.instance - 0.625).abs() < 1e-15);
        assert!((ch.harmonic - 0.4).abs() < 1e-15);
        assert_eq!(s.violations(1e-12), 0);
    }

    #[test]
    fn zero_statistic_excluded() {
        let x = Tensor::new(vec![2, 1, 1, 2], vec![1.0, 1.0, -2.0, 2.0]).unwrap();
        let s = amplification_stats(&x, &NormalizerSpec::new(NormKind::GroupNorm)).unwrap();
        assert!(s.channels.is_empty());
        assert!(s.excluded >= 1);
    }
}
