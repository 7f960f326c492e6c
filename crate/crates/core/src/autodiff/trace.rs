use serde::{Deserialize, Serialize};

use super::{Graph, Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::net::{Network, Tap};
use crate::tensor::Tensor;

/// Scalar objective for gradient probes at initialization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `½‖logits‖²`; needs no labels.
    #[default]
    HalfSquaredNorm,
    /// Mean cross-entropy against the given labels.
    CrossEntropy,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::HalfSquaredNorm => "half_squared_norm",
            LossKind::CrossEntropy => "cross_entropy",
        }
    }
}

/// Per-layer gradient norms and pre-activation spreads from one backward pass.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradientTrace {
    pub loss: f64,
    /// `‖∇_{Y_l} J‖` for every tapped layer output, input side first.
    pub grad_norms: Vec<f64>,
    /// Spread of the conv output feeding each layer's first normalizer: the
    /// per-channel standard deviation over batch and space, averaged over
    /// channels.
    pub sigmas: Vec<f64>,
}

/// How [`GradientTrace::aggregate`] combines norms of several batches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregation {
    Mean,
    /// Root mean square, which keeps the sum-over-samples scaling comparable
    /// when batches are split.
    Rms,
}

impl GradientTrace {
    pub fn aggregate(traces: &[GradientTrace], how: Aggregation) -> Result<GradientTrace> {
        let Some(first) = traces.first() else {
            return invalid("no gradient traces to aggregate");
        };
        let d = first.grad_norms.len();
        if traces
            .iter()
            .any(|t| t.grad_norms.len() != d || t.sigmas.len() != first.sigmas.len())
        {
            return invalid("gradient traces of different depth");
        }
        let n = traces.len() as f64;
        let col = |f: &dyn Fn(&GradientTrace) -> &Vec<f64>, i: usize| -> f64 {
            match how {
                Aggregation::Mean => traces.iter().map(|t| f(t)[i]).sum::<f64>() / n,
                Aggregation::Rms => {
                    (traces.iter().map(|t| f(t)[i].powi(2)).sum::<f64>() / n).sqrt()
                }
            }
        };
        Ok(GradientTrace {
            loss: traces.iter().map(|t| t.loss).sum::<f64>() / n,
            grad_norms: (0..d).map(|i| col(&|t| &t.grad_norms, i)).collect(),
            sigmas: (0..first.sigmas.len())
                .map(|i| col(&|t| &t.sigmas, i))
                .collect(),
        })
    }
}

fn channel_sigma(z: &Tensor) -> f64 {
    let (n, c) = (z.dim(0), z.dim(1));
    let hw = z.len() / (n * c);
    let d = z.data();
    let mut total = 0.0;
    for ch in 0..c {
        let vals = (0..n).flat_map(|i| d[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter());
        let m = vals.clone().sum::<f64>() / (n * hw) as f64;
        let v = vals.map(|x| (x - m) * (x - m)).sum::<f64>() / (n * hw) as f64;
        total += v.sqrt();
    }
    total / c as f64
}

/// One forward/backward pass recording the gradient norm at every layer
/// output. `labels` are required for cross-entropy and ignored otherwise.
pub fn layerwise_grad_norms(
    net: &Network,
    batch: &Tensor,
    loss: LossKind,
    labels: Option<&[usize]>,
) -> Result<GradientTrace> {
    Ok(backward_with_trace(net, batch, loss, labels)?.trace)
}

/// Everything one training step needs from a backward pass.
#[derive(Clone, Debug)]
pub struct BackwardPass {
    pub trace: GradientTrace,
    pub logits: Tensor,
    /// Gradient of every parameter, in store order.
    pub param_grads: Vec<Tensor>,
}

pub fn backward_with_trace(
    net: &Network,
    batch: &Tensor,
    loss: LossKind,
    labels: Option<&[usize]>,
) -> Result<BackwardPass> {
    net.check_input(batch)?;
    let mut tape = Tape::new();
    let params: Vec<Var> = net.params().iter().map(|p| tape.param(p.clone())).collect();
    let x = tape.constant(batch.clone());
    let mut outputs = Vec::with_capacity(net.depth());
    let mut sigmas = vec![f64::NAN; net.depth()];
    let fwd = {
        let mut tap = |t: &mut Tape, at: Tap, v: &Var| -> Result<()> {
            match at {
                Tap::Output { layer } => {
                    if !t.value(v).all_finite() {
                        return Err(Error::Diverged { layer });
                    }
                    t.retain(*v);
                    outputs.push(*v);
                }
                Tap::PreNorm { layer, slot: 0 } => sigmas[layer] = channel_sigma(t.value(v)),
                Tap::PreNorm { .. } => {}
            }
            Ok(())
        };
        net.forward(&mut tape, &params, &x, &mut tap)?
    };
    let j = match loss {
        LossKind::HalfSquaredNorm => {
            let sq = tape.square(&fwd.logits);
            let s = tape.sum_all(&sq);
            tape.scale(&s, 0.5)
        }
        LossKind::CrossEntropy => {
            let labels = labels
                .ok_or_else(|| Error::InvalidArgument("cross-entropy probe needs labels".into()))?;
            tape.cross_entropy(&fwd.logits, labels)?
        }
    };
    let value = tape.value(&j).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite {
            context: "probe loss".into(),
        });
    }
    let logits = tape.value(&fwd.logits).clone();
    let mut grads = tape.backward(j)?;
    let grad_norms = outputs
        .iter()
        .map(|v| grads.get(*v).map_or(0.0, Tensor::norm))
        .collect();
    let param_grads = params
        .iter()
        .zip(net.params())
        .map(|(v, p)| {
            grads
                .take(*v)
                .unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()))
        })
        .collect();
    Ok(BackwardPass {
        trace: GradientTrace {
            loss: value,
            grad_norms,
            sigmas,
        },
        logits,
        param_grads,
    })
}
