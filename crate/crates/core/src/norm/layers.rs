use super::{NormKind, NormalizerSpec};
use crate::autodiff::{Eager, Graph};
use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::Tensor;

/// Learnable parameters of an activation normalizer, each `1 × C × 1 × 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    /// EvoNorm's `v`.
    pub v: Option<Tensor>,
}

/// `γ = 1`, `β = 0`, and `v = 1` for EvoNorms.
pub fn init_norm_params(kind: NormKind, channels: usize) -> NormParams {
    let shape = vec![1, channels, 1, 1];
    NormParams {
        gamma: Tensor::ones(shape.clone()),
        beta: Tensor::zeros(shape.clone()),
        v: kind.is_evonorm().then(|| Tensor::ones(shape)),
    }
}

/// `x - μ` and `sqrt(σ² + ε)` over `axes`, keepdim.
fn centered<G: Graph>(g: &mut G, x: &G::V, axes: &[usize], eps: f64) -> Result<(G::V, G::V)> {
    let mu = g.mean(x, axes)?;
    let d = g.sub(x, &mu)?;
    let sq = g.square(&d);
    let var = g.mean(&sq, axes)?;
    let var = g.add_scalar(&var, eps);
    let s = g.sqrt(&var);
    Ok((d, s))
}

fn standardize<G: Graph>(g: &mut G, x: &G::V, axes: &[usize], eps: f64) -> Result<G::V> {
    let (d, s) = centered(g, x, axes, eps)?;
    g.div(&d, &s)
}

fn std_over<G: Graph>(g: &mut G, x: &G::V, axes: &[usize], eps: f64) -> Result<G::V> {
    Ok(centered(g, x, axes, eps)?.1)
}

fn group_view(shape: &[usize], size: usize) -> Vec<usize> {
    vec![shape[0], shape[1] / size, size, shape[2] * shape[3]]
}

/// Applies an activation normalizer and its affine transform.
///
/// `x` is `N × C × H × W`; the parameters broadcast per channel.
pub fn apply_activation_norm<G: Graph>(
    g: &mut G,
    spec: &NormalizerSpec,
    x: &G::V,
    gamma: &G::V,
    beta: &G::V,
    v: Option<&G::V>,
) -> Result<G::V> {
    let shape = g.shape(x);
    if shape.len() != 4 {
        return shape_err(format!(
            "normalizers act on N x C x H x W tensors, got {shape:?}"
        ));
    }
    let eps = spec.eps;
    let need_v =
        || v.ok_or_else(|| Error::InvalidArgument("EvoNorm requires its v parameter".into()));
    let y = match spec.kind {
        NormKind::BatchNorm => standardize(g, x, &[0, 2, 3], eps)?,
        NormKind::LayerNorm => standardize(g, x, &[1, 2, 3], eps)?,
        NormKind::InstanceNorm => standardize(g, x, &[2, 3], eps)?,
        NormKind::GroupNorm => {
            let size = spec.group_size_for(shape[1])?;
            let xv = g.reshape(x, &group_view(&shape, size))?;
            let yv = standardize(g, &xv, &[2, 3], eps)?;
            g.reshape(&yv, &shape)?
        }
        NormKind::FilterResponseNorm => {
            let sq = g.square(x);
            let ms = g.mean(&sq, &[2, 3])?;
            let ms = g.add_scalar(&ms, eps);
            let r = g.sqrt(&ms);
            g.div(x, &r)?
        }
        NormKind::VarianceNorm => {
            let s = std_over(g, x, &[0, 2, 3], eps)?;
            g.div(x, &s)?
        }
        NormKind::EvoNormB0 => {
            let v = need_v()?;
            let sb = std_over(g, x, &[0, 2, 3], eps)?;
            let sx = std_over(g, x, &[2, 3], eps)?;
            let vx = g.mul(v, x)?;
            let alt = g.add(&vx, &sx)?;
            let den = g.maximum(&sb, &alt)?;
            g.div(x, &den)?
        }
        NormKind::EvoNormS0 => {
            let v = need_v()?;
            let size = spec.group_size_for(shape[1])?;
            let view = group_view(&shape, size);
            let vx = g.mul(v, x)?;
            let gate = g.sigmoid(&vx);
            let num = g.mul(x, &gate)?;
            let xv = g.reshape(x, &view)?;
            let s = std_over(g, &xv, &[2, 3], eps)?;
            let numv = g.reshape(&num, &view)?;
            let yv = g.div(&numv, &s)?;
            g.reshape(&yv, &shape)?
        }
        k => return invalid(format!("{k} does not normalize activations")),
    };
    let y = g.mul(&y, gamma)?;
    g.add(&y, beta)
}

/// Normalizes `x` with freshly initialized affine parameters (identity
/// affine, `v = 1`).
pub fn normalize_activations(spec: &NormalizerSpec, x: &Tensor) -> Result<Tensor> {
    spec.validate()?;
    if !spec.kind.is_activation_based() {
        return invalid(format!(
            "{} is not an activations-based normalizer",
            spec.kind
        ));
    }
    if x.rank() != 4 {
        return shape_err(format!("expected N x C x H x W, got {:?}", x.shape()));
    }
    if !x.all_finite() {
        return Err(Error::NonFinite {
            context: format!("{} input", spec.kind),
        });
    }
    let p = init_norm_params(spec.kind, x.dim(1));
    apply_activation_norm(&mut Eager, spec, x, &p.gamma, &p.beta, p.v.as_ref())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{moments, rms, DimSet, Rng};

    fn spec(kind: NormKind) -> NormalizerSpec {
        NormalizerSpec::new(kind).with_eps(0.0)
    }

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let mut t = Tensor::zeros(shape.to_vec());
        Rng::new(seed).fill_normal(t.data_mut(), 1.0);
        t.map(|v| 1.5 * v + 0.3)
    }

    #[test]
    fn bn_two_values() {
        let x = Tensor::new(vec![2, 1, 1, 1], vec![1.0, 3.0]).unwrap();
        let y = normalize_activations(&spec(NormKind::BatchNorm), &x).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn frn_hand_case() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![3.0, 4.0, 0.0, 0.0]).unwrap();
        let y = normalize_activations(&spec(NormKind::FilterResponseNorm), &x).unwrap();
        for (a, b) in y.data().iter().zip([1.2, 1.6, 0.0, 0.0]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn evos0_with_v_zero_halves() {
        let x = randn(&[2, 4, 3, 3], 1);
        let s = spec(NormKind::EvoNormS0).with_group_size(2);
        let p = init_norm_params(NormKind::EvoNormS0, 4);
        let v0 = Tensor::zeros(vec![1, 4, 1, 1]);
        let y = apply_activation_norm(&mut Eager, &s, &x, &p.gamma, &p.beta, Some(&v0)).unwrap();
        let (_, var) = moments(&x, &DimSet::grouped(2)).unwrap();
        let expect = x.scale(0.5).div(&var.map(f64::sqrt)).unwrap();
        assert!(y.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn gn_limits() {
        let x = randn(&[3, 8, 4, 4], 2);
        let gn1 = normalize_activations(&NormalizerSpec::group_norm_size(1), &x).unwrap();
        let inn = normalize_activations(&NormalizerSpec::new(NormKind::InstanceNorm), &x).unwrap();
        assert!(gn1.max_abs_diff(&inn) <= 1e-12);
        let gnc = normalize_activations(&NormalizerSpec::group_norm_size(8), &x).unwrap();
        let ln = normalize_activations(&NormalizerSpec::new(NormKind::LayerNorm), &x).unwrap();
        assert!(gnc.max_abs_diff(&ln) <= 1e-12);
    }

    #[test]
    fn post_normalization_moments() {
        let x = randn(&[4, 8, 5, 5], 3);
        let cases = [
            (NormKind::BatchNorm, DimSet::batch_spatial(), true),
            (NormKind::LayerNorm, DimSet::channel_spatial(), true),
            (NormKind::InstanceNorm, DimSet::spatial(), true),
            (NormKind::VarianceNorm, DimSet::batch_spatial(), false),
        ];
        for (kind, dims, centered) in cases {
            let y = normalize_activations(&spec(kind), &x).unwrap();
            let (m, v) = moments(&y, &dims).unwrap();
            assert!(v.data().iter().all(|v| (v - 1.0).abs() < 1e-6), "{kind}");
            if centered {
                assert!(m.max_abs() < 1e-6, "{kind}");
            }
        }
        let y = normalize_activations(&spec(NormKind::GroupNorm).with_group_size(4), &x).unwrap();
        let (m, v) = moments(&y, &DimSet::grouped(4)).unwrap();
        assert!(m.max_abs() < 1e-6 && v.data().iter().all(|v| (v - 1.0).abs() < 1e-6));
        let y = normalize_activations(&spec(NormKind::FilterResponseNorm), &x).unwrap();
        assert!(rms(&y, &DimSet::spatial())
            .unwrap()
            .data()
            .iter()
            .all(|r| (r - 1.0).abs() < 1e-6));
    }

    #[test]
    fn rejects_bad_inputs() {
        let x = randn(&[2, 6, 2, 2], 4);
        assert!(normalize_activations(&NormalizerSpec::group_norm_size(4), &x).is_err());
        assert!(normalize_activations(&NormalizerSpec::new(NormKind::WeightNorm), &x).is_err());
        let mut bad = x.clone();
        bad.data_mut()[0] = f64::NAN;
        assert!(normalize_activations(&NormalizerSpec::new(NormKind::BatchNorm), &bad).is_err());
    }
}
