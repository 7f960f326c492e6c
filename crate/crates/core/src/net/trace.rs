use serde::{Deserialize, Serialize};

use super::build::{Network, Tap};
use crate::autodiff::Eager;
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Forward statistics of one tapped layer output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub layer: usize,
    pub stage: Option<usize>,
    pub mean: f64,
    /// Variance across the batch at every (channel, position), averaged.
    pub variance: f64,
    /// `mean(y²)` over everything; equals `variance` for centered signals.
    pub second_moment: f64,
    pub rms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PropagationTrace {
    pub layers: Vec<LayerStats>,
    /// First layer whose output was non-finite or crossed the threshold.
    pub diverged_at: Option<usize>,
    /// Number of batches averaged into the statistics.
    pub batches: usize,
    #[serde(skip)]
    pub activations: Vec<Tensor>,
}

impl PropagationTrace {
    pub fn second_moments(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.second_moment).collect()
    }

    pub fn variances(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.variance).collect()
    }

    /// Averages per-layer statistics over traces of separate batches. Layers
    /// are kept up to the shortest trace; the earliest divergence wins.
    pub fn average(traces: &[PropagationTrace]) -> Result<PropagationTrace> {
        let Some(first) = traces.first() else {
            return invalid("no traces to average");
        };
        let depth = traces.iter().map(|t| t.layers.len()).min().unwrap_or(0);
        let total: usize = traces.iter().map(|t| t.batches.max(1)).sum();
        let layers = (0..depth)
            .map(|i| {
                let w = |t: &PropagationTrace| t.batches.max(1) as f64 / total as f64;
                let avg = |f: fn(&LayerStats) -> f64| {
                    traces.iter().map(|t| w(t) * f(&t.layers[i])).sum::<f64>()
                };
                let second_moment = avg(|l| l.second_moment);
                LayerStats {
                    layer: first.layers[i].layer,
                    stage: first.layers[i].stage,
                    mean: avg(|l| l.mean),
                    variance: avg(|l| l.variance),
                    second_moment,
                    rms: second_moment.sqrt(),
                }
            })
            .collect();
        Ok(PropagationTrace {
            layers,
            diverged_at: traces.iter().filter_map(|t| t.diverged_at).min(),
            batches: total,
            activations: Vec::new(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceOptions {
    /// Report divergence in the trace instead of returning an error.
    pub probe: bool,
    pub keep_activations: bool,
    /// Stop once `mean(y²)` exceeds this.
    pub max_second_moment: Option<f64>,
}

impl Default for TraceOptions {
    fn default() -> Self {
        Self {
            probe: true,
            keep_activations: false,
            max_second_moment: None,
        }
    }
}

fn layer_stats(net: &Network, layer: usize, y: &Tensor) -> LayerStats {
    let n = y.dim(0);
    let per = y.len() / n;
    let d = y.data();
    let mut variance = 0.0;
    for j in 0..per {
        let m = (0..n).map(|i| d[i * per + j]).sum::<f64>() / n as f64;
        variance += (0..n).map(|i| (d[i * per + j] - m).powi(2)).sum::<f64>() / n as f64;
    }
    let second_moment = y.sum_sq() / y.len() as f64;
    LayerStats {
        layer,
        stage: net.stage_of(layer),
        mean: y.mean(),
        variance: variance / per as f64,
        second_moment,
        rms: second_moment.sqrt(),
    }
}

/// Runs one batch and records statistics at every layer output.
///
/// Logits are `None` when the pass stopped at a divergence.
pub fn forward_with_trace(
    net: &Network,
    batch: &Tensor,
    opts: TraceOptions,
) -> Result<(Option<Tensor>, PropagationTrace)> {
    net.check_input(batch)?;
    let mut trace = PropagationTrace {
        batches: 1,
        ..Default::default()
    };
    let out = {
        let mut tap = |_: &mut Eager, t: Tap, y: &Tensor| -> Result<()> {
            let Tap::Output { layer } = t else {
                return Ok(());
            };
            if !y.all_finite() {
                return Err(Error::Diverged { layer });
            }
            let s = layer_stats(net, layer, y);
            let over = opts.max_second_moment.is_some_and(|m| s.second_moment > m);
            trace.layers.push(s);
            if opts.keep_activations {
                trace.activations.push(y.clone());
            }
            if over {
                return Err(Error::Diverged { layer });
            }
            Ok(())
        };
        net.forward(&mut Eager, net.params(), batch, &mut tap)
    };
    match out {
        Ok(f) => Ok((Some(f.logits), trace)),
        Err(Error::Diverged { layer }) if opts.probe => {
            trace.diverged_at = Some(layer);
            Ok((None, trace))
        }
        Err(e) => Err(e),
    }
}

/// Globally pooled pre-classifier features as a `width × N` matrix.
pub fn penultimate_activations(net: &Network, batch: &Tensor) -> Result<Tensor> {
    net.check_input(batch)?;
    let f = net.forward_eager(batch)?.features;
    let pooled = f.mean_axes(&[2, 3])?;
    pooled.samples_as_columns()
}

/// The final feature map flattened per sample, `(C·H·W) × N`.
pub fn final_features(net: &Network, batch: &Tensor) -> Result<Tensor> {
    net.check_input(batch)?;
    net.forward_eager(batch)?.features.samples_as_columns()
}
