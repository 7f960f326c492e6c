use serde::{Deserialize, Serialize};

use super::spectral::mean_pairwise_cosine;
use super::stats::{linear_fit, pearson, LinearFit};
use crate::autodiff::{layerwise_grad_norms, LossKind};
use crate::error::{invalid, Error, Result};
use crate::net::{build, final_features, NetworkSpec};
use crate::norm::NormalizerSpec;
use crate::tensor::{Rng, Tensor};

/// Least squares of stable rank against `√(width / g)`.
pub fn rank_vs_group_fit(width: usize, group_sizes: &[usize], ranks: &[f64]) -> Result<LinearFit> {
    if group_sizes.len() < 3 {
        return invalid(format!(
            "need at least 3 group sizes, got {}",
            group_sizes.len()
        ));
    }
    if group_sizes.len() != ranks.len() {
        return invalid("one rank per group size");
    }
    if group_sizes.iter().any(|&g| g == 0 || g > width) {
        return invalid(format!("group sizes must lie in 1..={width}"));
    }
    let x: Vec<f64> = group_sizes
        .iter()
        .map(|&g| (width as f64 / g as f64).sqrt())
        .collect();
    linear_fit(&x, ranks)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplosionFit {
    /// Growth of `ln ‖∇‖` per layer toward the input.
    pub rate: f64,
    pub intercept: f64,
    pub r2: f64,
    /// Layers left out because their norm was exactly zero.
    pub excluded: Vec<usize>,
}

/// Fits `ln ‖∇_l‖ ≈ rate·(D − 1 − l) + b` over layers `l` (input first).
pub fn explosion_fit(grad_norms: &[f64]) -> Result<ExplosionFit> {
    let d = grad_norms.len();
    let mut x = Vec::with_capacity(d);
    let mut y = Vec::with_capacity(d);
    let mut excluded = Vec::new();
    for (l, &g) in grad_norms.iter().enumerate() {
        if g == 0.0 {
            excluded.push(l);
        } else if g > 0.0 && g.is_finite() {
            x.push((d - 1 - l) as f64);
            y.push(g.ln());
        } else {
            return invalid(format!("gradient norm at layer {l} is {g}"));
        }
    }
    if x.len() < 3 {
        return invalid(format!(
            "need 3 layers with positive norms, got {}",
            x.len()
        ));
    }
    let f = linear_fit(&x, &y)?;
    Ok(ExplosionFit {
        rate: f.slope,
        intercept: f.intercept,
        r2: f.r2(),
        excluded,
    })
}

/// Pearson correlation over iterations between `‖∇_{Y_L} J‖` and
/// `Π_{l>L} 1/σ(X_l)`. `sigma_history[t]` holds every layer's σ at step `t`.
pub fn grad_std_correlation(
    grad_norm_history: &[f64],
    sigma_history: &[Vec<f64>],
    layer: usize,
) -> Result<f64> {
    if grad_norm_history.len() != sigma_history.len() {
        return invalid("gradient and sigma histories are not aligned");
    }
    let inv: Vec<f64> = sigma_history
        .iter()
        .map(|s| {
            if layer >= s.len() {
                return invalid(format!("layer {layer} outside a {}-layer history", s.len()));
            }
            // Sum of logs, then exp, to avoid overflow of long products.
            let l: f64 = s[layer + 1..].iter().map(|v| -v.ln()).sum();
            Ok(l.exp())
        })
        .collect::<Result<_>>()?;
    pearson(grad_norm_history, &inv)
}

pub fn mean_training_accuracy(curve: &[f64]) -> Result<f64> {
    if curve.is_empty() {
        return invalid("empty accuracy curve");
    }
    Ok(curve.iter().sum::<f64>() / curve.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub group_size: usize,
    pub cosine: f64,
    pub explosion_rate: f64,
}

/// Final-layer cosine similarity and gradient explosion rate of a GroupNorm
/// network for each group size. Every point uses weights from the same `rng`.
pub fn tradeoff_curve(
    arch: &NetworkSpec,
    group_sizes: &[usize],
    batch: &Tensor,
    rng: &Rng,
) -> Result<Vec<TradeoffPoint>> {
    if group_sizes.is_empty() {
        return invalid("empty group-size sweep");
    }
    group_sizes
        .iter()
        .map(|&g| {
            let mut spec = arch.clone();
            spec.normalizer = NormalizerSpec::group_norm_size(g).with_eps(arch.normalizer.eps);
            let net = build(&spec, rng)?;
            let cos = mean_pairwise_cosine(&final_features(&net, batch)?)?;
            let trace = layerwise_grad_norms(&net, batch, LossKind::HalfSquaredNorm, None)?;
            let fit = explosion_fit(&trace.grad_norms)?;
            if !fit.rate.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("explosion rate at g={g}"),
                });
            }
            Ok(TradeoffPoint {
                group_size: g,
                cosine: cos.mean,
                explosion_rate: fit.rate,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_rank_line() {
        let gs = [1, 4, 16, 64];
        let ranks: Vec<f64> = gs.iter().map(|&g| 2.0 * (64.0 / g as f64).sqrt()).collect();
        let f = rank_vs_group_fit(64, &gs, &ranks).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12 && (f.r - 1.0).abs() < 1e-12);
        assert!(rank_vs_group_fit(64, &[1, 2], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn powers_of_two() {
        // Norm 2^k at depth-from-output k.
        let norms: Vec<f64> = (0..6).rev().map(|k| 2f64.powi(k)).collect();
        let f = explosion_fit(&norms).unwrap();
        assert!((f.rate - 2f64.ln()).abs() < 1e-12 && (f.r2 - 1.0).abs() < 1e-12);
        let flat = explosion_fit(&[3.0; 5]).unwrap();
        assert!(flat.rate.abs() < 1e-15);
        assert!(explosion_fit(&[1.0, -1.0, 2.0, 3.0]).is_err());
        assert_eq!(
            explosion_fit(&[1.0, 0.0, 2.0, 3.0]).unwrap().excluded,
            vec![1]
        );
    }

    #[test]
    fn accuracy_mean() {
        assert!((mean_training_accuracy(&[0.2, 0.4, 0.6]).unwrap() - 0.4).abs() < 1e-15);
        assert!(mean_training_accuracy(&[]).is_err());
    }

    #[test]
    fn correlated_histories() {
        let sig: Vec<Vec<f64>> = (1..6).map(|t| vec![1.0, 1.0 / t as f64, 2.0]).collect();
        let g: Vec<f64> = (1..6).map(|t| 3.0 * t as f64).collect();
        assert!((grad_std_correlation(&g, &sig, 0).unwrap() - 1.0).abs() < 1e-12);
    }
}
