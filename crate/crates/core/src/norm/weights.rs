use std::f64::consts::PI;

use super::{NormKind, NormalizerSpec};
use crate::autodiff::{Eager, Graph};
use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::{conv2d, Tensor};

/// `sqrt(2π / (π - 1))`, the output scale that restores unit variance after
/// a ReLU of a unit Gaussian.
pub fn correction_scale() -> f64 {
    (2.0 * PI / (PI - 1.0)).sqrt()
}

/// `sqrt(1 / 2π)`, the mean of a ReLU of a unit Gaussian.
pub fn wn_shift() -> f64 {
    (1.0 / (2.0 * PI)).sqrt()
}

fn filter_axes(rank: usize) -> Result<Vec<usize>> {
    match rank {
        2 | 4 => Ok((1..rank).collect()),
        _ => shape_err(format!("weights must be rank 2 or 4, got rank {rank}")),
    }
}

/// Normalizes each output filter of `w` (rows of a matrix, or the
/// `Cin × kH × kW` block of a conv kernel).
///
/// WN divides by the filter norm. SWS subtracts the filter mean and divides
/// by the filter's population standard deviation; with `unit_norm` it also
/// divides by `sqrt(fan_in)`, which makes every filter unit-norm.
pub fn apply_weight_norm<G: Graph>(
    g: &mut G,
    kind: NormKind,
    w: &G::V,
    gain: &G::V,
    unit_norm: bool,
) -> Result<G::V> {
    let shape = g.shape(w);
    let axes = filter_axes(shape.len())?;
    let fan_in: usize = shape[1..].iter().product();
    let out = match kind {
        NormKind::WeightNorm => {
            let sq = g.square(w);
            let ms = g.mean(&sq, &axes)?;
            let ss = g.scale(&ms, fan_in as f64);
            let norm = g.sqrt(&ss);
            g.div(w, &norm)?
        }
        NormKind::ScaledWeightStandardization => {
            let mu = g.mean(w, &axes)?;
            let d = g.sub(w, &mu)?;
            let sq = g.square(&d);
            let var = g.mean(&sq, &axes)?;
            let var = if unit_norm {
                g.scale(&var, fan_in as f64)
            } else {
                var
            };
            let sd = g.sqrt(&var);
            g.div(&d, &sd)?
        }
        k => return invalid(format!("{k} does not normalize weights")),
    };
    g.mul(&out, gain)
}

fn check_filters(kind: NormKind, w: &Tensor) -> Result<()> {
    let per = w.len() / w.dim(0);
    for (i, f) in w.data().chunks(per).enumerate() {
        let degenerate = match kind {
            NormKind::WeightNorm => f.iter().all(|&v| v == 0.0),
            _ => f.iter().all(|&v| v == f[0]),
        };
        if degenerate {
            return Err(Error::Degenerate(format!(
                "filter {i} has zero {}",
                if kind == NormKind::WeightNorm {
                    "norm"
                } else {
                    "spread"
                }
            )));
        }
    }
    if !w.all_finite() {
        return Err(Error::NonFinite {
            context: "weights".into(),
        });
    }
    Ok(())
}

/// `g·W/‖W‖` (WN) or `g·(W − μ)/σ` (SWS) per output filter, with `g = 1`.
pub fn normalize_weights(spec: &NormalizerSpec, w: &Tensor) -> Result<Tensor> {
    if !spec.kind.is_parametric() {
        return invalid(format!("{} does not normalize weights", spec.kind));
    }
    filter_axes(w.rank())?;
    check_filters(spec.kind, w)?;
    let mut gshape = vec![1; w.rank()];
    gshape[0] = w.dim(0);
    apply_weight_norm(&mut Eager, spec.kind, w, &Tensor::ones(gshape), false)
}

/// `c·(φ(z) − b)`, the WN post-activation.
pub(crate) fn wn_activation<G: Graph>(g: &mut G, z: &G::V) -> G::V {
    let r = g.relu(z);
    let r = g.add_scalar(&r, -wn_shift());
    g.scale(&r, correction_scale())
}

/// `φ(c·z)`, the SWS post-activation.
pub(crate) fn sws_activation<G: Graph>(g: &mut G, z: &G::V) -> G::V {
    let s = g.scale(z, correction_scale());
    g.relu(&s)
}

/// One corrected convolution layer with unit-norm filters, stride 1 and
/// same padding:
/// WN gives `c·(φ(W_norm ∗ x) − b)`, SWS gives `φ(c·W_norm ∗ x)`.
pub fn corrected_forward(kind: NormKind, w: &Tensor, x: &Tensor) -> Result<Tensor> {
    if !kind.is_parametric() {
        return invalid(format!("{kind} has no output correction"));
    }
    if w.rank() != 4 {
        return shape_err(format!("expected a conv kernel, got {:?}", w.shape()));
    }
    check_filters(kind, w)?;
    let gain = Tensor::ones(vec![w.dim(0), 1, 1, 1]);
    let g = &mut Eager;
    let wn = apply_weight_norm(g, kind, w, &gain, true)?;
    let z = conv2d(x, &wn, 1, w.dim(2) / 2)?;
    Ok(match kind {
        NormKind::WeightNorm => wn_activation(g, &z),
        _ => sws_activation(g, &z),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn spec(kind: NormKind) -> NormalizerSpec {
        NormalizerSpec::new(kind)
    }

    #[test]
    fn constants() {
        assert!((correction_scale() - 1.71295).abs() < 1e-4);
        assert!((wn_shift() - 0.39894).abs() < 1e-5);
    }

    #[test]
    fn hand_cases() {
        let w = Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap();
        let n = normalize_weights(&spec(NormKind::WeightNorm), &w).unwrap();
        assert!((n.data()[0] - 0.6).abs() < 1e-15 && (n.data()[1] - 0.8).abs() < 1e-15);
        let w = Tensor::matrix(1, 2, vec![1.0, 3.0]).unwrap();
        let s = normalize_weights(&spec(NormKind::ScaledWeightStandardization), &w).unwrap();
        assert_eq!(s.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn wn_scale_invariant() {
        let mut w = Tensor::zeros(vec![4, 3, 3, 3]);
        Rng::new(1).fill_normal(w.data_mut(), 1.0);
        let a = normalize_weights(&spec(NormKind::WeightNorm), &w).unwrap();
        let b = normalize_weights(&spec(NormKind::WeightNorm), &w.scale(7.3)).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-12);
    }

    #[test]
    fn degenerate_filters_rejected() {
        let w = Tensor::zeros(vec![2, 3]);
        assert!(normalize_weights(&spec(NormKind::WeightNorm), &w).is_err());
        assert!(normalize_weights(
            &spec(NormKind::ScaledWeightStandardization),
            &Tensor::ones(vec![2, 3])
        )
        .is_err());
        assert!(normalize_weights(&spec(NormKind::BatchNorm), &Tensor::ones(vec![2, 3])).is_err());
    }
}
