use serde::{Deserialize, Serialize};

use super::data::Dataset;
use crate::autodiff::{backward_with_trace, GradientTrace, LossKind};
use crate::error::{invalid, Error, Result};
use crate::net::Network;
use crate::tensor::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Keep every step's gradient trace.
    #[serde(default)]
    pub record_gradients: bool,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            epochs: 5,
            batch: 16,
            momentum: 0.9,
            weight_decay: 1e-4,
            record_gradients: false,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.learning_rate, self.momentum, self.weight_decay]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0);
        if !finite || self.epochs == 0 || self.batch == 0 {
            return invalid("learning rate, momentum and weight decay must be finite and non-negative; epochs and batch positive");
        }
        Ok(())
    }

    /// The learning rate drops tenfold from this epoch on.
    pub fn decay_epoch(&self) -> usize {
        (0.8 * self.epochs as f64).ceil() as usize
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.decay_epoch() {
            self.learning_rate * 0.1
        } else {
            self.learning_rate
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    /// Training accuracy of each epoch, measured on the fly.
    pub accuracy: Vec<f64>,
    /// Iteration at which the loss became non-finite.
    pub diverged_at: Option<usize>,
    pub gradients: Vec<GradientTrace>,
}

fn correct(logits: &crate::Tensor, labels: &[usize]) -> usize {
    let k = logits.dim(1);
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &y)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (i, v)| if *v > row[b] { i } else { b });
            best == y
        })
        .count()
}

/// Mini-batch SGD with momentum and weight decay on cross-entropy:
/// `v ← μv + (∇ + λθ)`, `θ ← θ − ηv`. A final batch of one sample is dropped
/// since batch statistics are undefined on it.
pub fn train_sgd(
    net: &mut Network,
    data: &Dataset,
    hyper: &TrainHyper,
    rng: &Rng,
) -> Result<TrainOutcome> {
    hyper.validate()?;
    if data.is_empty() {
        return invalid("empty training set");
    }
    if data.classes > net.spec().num_classes {
        return invalid(format!(
            "{} classes but the network has {} outputs",
            data.classes,
            net.spec().num_classes
        ));
    }
    let mut velocity: Vec<_> = net.params().iter().map(|p| p.map(|_| 0.0)).collect();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffler = rng.fork_named("train-order");
    let mut out = TrainOutcome::default();
    let mut step = 0;
    for epoch in 0..hyper.epochs {
        let lr = hyper.lr_at(epoch);
        shuffler.shuffle(&mut order);
        let (mut right, mut seen) = (0, 0);
        for idx in order
            .chunks(hyper.batch)
            .filter(|c| c.len() > 1 || data.len() == 1)
        {
            let (x, y) = data.gather(idx)?;
            let pass = match backward_with_trace(net, &x, LossKind::CrossEntropy, Some(&y)) {
                Ok(p) => p,
                Err(Error::NonFinite { .. } | Error::Diverged { .. }) => {
                    out.diverged_at = Some(step);
                    return Ok(out);
                }
                Err(e) => return Err(e),
            };
            right += correct(&pass.logits, &y);
            seen += y.len();
            for ((p, v), g) in net
                .params_mut()
                .iter_mut()
                .zip(&mut velocity)
                .zip(&pass.param_grads)
            {
                let mut d = g.clone();
                d.axpy(hyper.weight_decay, p)?;
                *v = v.scale(hyper.momentum);
                v.axpy(1.0, &d)?;
                p.axpy(-lr, v)?;
            }
            if hyper.record_gradients {
                out.gradients.push(pass.trace);
            }
            step += 1;
        }
        out.accuracy.push(right as f64 / seen.max(1) as f64);
    }
    Ok(out)
}
