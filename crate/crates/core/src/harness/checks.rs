//! Numerical identities: analytic normalizer backward passes against
//! autodiff and finite differences, projector properties, the amplification
//! chain, GroupNorm limits, moment invariants and the output corrections.

use serde::{Deserialize, Serialize};

use crate::autodiff::{finite_diff_grad, grad_of, Eager, Graph};
use crate::error::Result;
use crate::norm::{
    amplification_stats, apply_activation_norm, bn_backward_analytic, corrected_forward,
    correction_scale, gn_backward_analytic, init_norm_params, normalize_activations, project,
    NormKind, NormalizerSpec, Projector,
};
use crate::tensor::{moments, rms, DimSet, Rng, Tensor};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IdentityReport {
    pub instances: usize,
    /// Worst relative error of the analytic gradient against autodiff.
    pub bn_vs_autodiff: f64,
    pub gn_vs_autodiff: f64,
    /// Worst relative error of the analytic gradient against central differences.
    pub bn_vs_finite_diff: f64,
    pub gn_vs_finite_diff: f64,
    pub projector_idempotence: f64,
    pub projector_orthogonality: f64,
    pub amhm_violations: usize,
    pub amhm_checked: usize,
    pub gn1_vs_in: f64,
    pub gnc_vs_ln: f64,
    /// Worst deviation of a normalized statistic from its target at ε = 0.
    pub moment_invariants: f64,
    pub wn_variance: f64,
    pub sws_variance: f64,
    pub correction_scale: f64,
}

fn randn(shape: &[usize], rng: &mut Rng, scale: f64) -> Tensor {
    let mut t = Tensor::zeros(shape.to_vec());
    rng.fill_normal(t.data_mut(), scale);
    t
}

/// `D × N` matrix to the `N × D × 1 × 1` activation layout and back.
fn as_activations(m: &Tensor) -> Result<Tensor> {
    m.t()?.into_reshape(vec![m.dim(1), m.dim(0), 1, 1])
}

fn as_matrix(a: &Tensor) -> Result<Tensor> {
    a.reshape(vec![a.dim(0), a.dim(1)])?.t()
}

/// `Σ U ⊙ N(X)` as a function of the `N × D × 1 × 1` input.
fn objective<G: Graph>(
    g: &mut G,
    spec: &NormalizerSpec,
    x: &G::V,
    upstream: &Tensor,
) -> Result<G::V> {
    let c = upstream.dim(1);
    let p = init_norm_params(spec.kind, c);
    let (gamma, beta) = (g.constant(p.gamma), g.constant(p.beta));
    let y = apply_activation_norm(g, spec, x, &gamma, &beta, None)?;
    let u = g.constant(upstream.clone());
    let prod = g.mul(&y, &u)?;
    Ok(g.sum_all(&prod))
}

struct GradErrors {
    autodiff: f64,
    finite_diff: f64,
}

fn compare(
    spec: &NormalizerSpec,
    x: &Tensor,
    upstream: &Tensor,
    analytic: &Tensor,
) -> Result<GradErrors> {
    let xa = as_activations(x)?;
    let ua = as_activations(upstream)?;
    let (_, ad) = grad_of(|t, v| objective(t, spec, v, &ua), &xa)?;
    let fd = finite_diff_grad(
        |p| objective(&mut Eager, spec, p, &ua).map_or(f64::NAN, |t| t.data()[0]),
        &xa,
        1e-5,
    )?;
    Ok(GradErrors {
        autodiff: as_matrix(&ad)?.rel_diff(analytic),
        finite_diff: as_matrix(&fd)?.rel_diff(analytic),
    })
}

fn projector_errors(rng: &mut Rng, report: &mut IdentityReport) -> Result<()> {
    let (d, n) = (2 + rng.below(6), 3 + rng.below(8));
    let z = randn(&[d, n], rng, 1.0);
    let x = randn(&[d, n], rng, 1.0);
    let standardized_rows = |m: &Tensor| -> Result<Tensor> {
        let a = as_activations(m)?;
        as_matrix(&normalize_activations(
            &NormalizerSpec::new(NormKind::BatchNorm).with_eps(0.0),
            &a,
        )?)
    };
    let xhat_rows = standardized_rows(&x)?;
    let xhat_cols = standardized_rows(&x.t()?)?.t()?;
    for p in [
        Projector::MeanCenterRows,
        Projector::MeanCenterCols,
        Projector::Oblique { xhat: xhat_rows },
        Projector::Sphere { xhat: xhat_cols },
    ] {
        let pz = project(&p, &z)?;
        let ppz = project(&p, &pz)?;
        report.projector_idempotence = report.projector_idempotence.max(ppz.max_abs_diff(&pz));
        // The range and the null space are orthogonal: ⟨Pz, z − Pz⟩ = 0.
        let resid = z.sub(&pz)?;
        let cross = pz.dot(&resid).abs() / z.sum_sq().max(f64::MIN_POSITIVE);
        report.projector_orthogonality = report.projector_orthogonality.max(cross);
    }
    Ok(())
}

fn moment_errors(x: &Tensor) -> Result<f64> {
    let spec = |k| NormalizerSpec::new(k).with_eps(0.0);
    let mut worst: f64 = 0.0;
    let mut check = |y: &Tensor, dims: &DimSet, centered: bool| -> Result<()> {
        let (m, v) = moments(y, dims)?;
        worst = worst.max(v.data().iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max));
        if centered {
            worst = worst.max(m.max_abs());
        }
        Ok(())
    };
    check(
        &normalize_activations(&spec(NormKind::BatchNorm), x)?,
        &DimSet::batch_spatial(),
        true,
    )?;
    check(
        &normalize_activations(&spec(NormKind::LayerNorm), x)?,
        &DimSet::channel_spatial(),
        true,
    )?;
    check(
        &normalize_activations(&spec(NormKind::InstanceNorm), x)?,
        &DimSet::spatial(),
        true,
    )?;
    check(
        &normalize_activations(&spec(NormKind::VarianceNorm), x)?,
        &DimSet::batch_spatial(),
        false,
    )?;
    let g = x.dim(1) / 2;
    check(
        &normalize_activations(&spec(NormKind::GroupNorm).with_group_size(g), x)?,
        &DimSet::grouped(g),
        true,
    )?;
    let frn = normalize_activations(&spec(NormKind::FilterResponseNorm), x)?;
    let r = rms(&frn, &DimSet::spatial())?;
    worst = worst.max(r.data().iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max));
    Ok(worst)
}

/// Variance of the corrected layer output on unit Gaussian inputs.
fn corrected_variance(kind: NormKind, draws: usize, rng: &mut Rng) -> Result<f64> {
    let fan_in = 16;
    let w = randn(&[4, fan_in, 1, 1], rng, 1.0);
    let x = randn(&[draws, fan_in, 1, 1], rng, 1.0);
    let y = corrected_forward(kind, &w, &x)?;
    let m = y.mean();
    Ok(y.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / y.len() as f64)
}

pub fn identity_checks(instances: usize, draws: usize, rng: &Rng) -> Result<IdentityReport> {
    let mut report = IdentityReport {
        instances,
        correction_scale: correction_scale(),
        ..Default::default()
    };
    let mut r = rng.fork_named("gradients");
    for _ in 0..instances {
        // Groups of two standardize to ±1 and have a zero gradient, so start at three.
        let gs = 3 + r.below(3);
        let (d, n) = (gs * (1 + r.below(3)), 3 + r.below(6));
        let std = 1.0 + r.uniform();
        let x = randn(&[d, n], &mut r, std);
        let u = randn(&[d, n], &mut r, 1.0);
        let bn = compare(
            &NormalizerSpec::new(NormKind::BatchNorm).with_eps(0.0),
            &x,
            &u,
            &bn_backward_analytic(&x, &u)?,
        )?;
        report.bn_vs_autodiff = report.bn_vs_autodiff.max(bn.autodiff);
        report.bn_vs_finite_diff = report.bn_vs_finite_diff.max(bn.finite_diff);
        let gn_spec = NormalizerSpec::group_norm_size(gs).with_eps(0.0);
        let gn = compare(&gn_spec, &x, &u, &gn_backward_analytic(&x, gs, &u)?)?;
        report.gn_vs_autodiff = report.gn_vs_autodiff.max(gn.autodiff);
        report.gn_vs_finite_diff = report.gn_vs_finite_diff.max(gn.finite_diff);
    }
    let mut r = rng.fork_named("projectors");
    for _ in 0..instances {
        projector_errors(&mut r, &mut report)?;
    }
    let mut r = rng.fork_named("amplification");
    for _ in 0..instances {
        // Per-sample scales make the per-instance spreads differ.
        let (n, c) = (2 + r.below(7), 2 * (1 + r.below(4)));
        let mut x = randn(&[n, c, 3, 3], &mut r, 1.0);
        let scales: Vec<f64> = (0..n * c).map(|_| 0.2 + 3.0 * r.uniform()).collect();
        for (chunk, s) in x.data_mut().chunks_mut(9).zip(&scales) {
            chunk.iter_mut().for_each(|v| *v *= s);
        }
        let stats = amplification_stats(&x, &NormalizerSpec::group_norm_size(2))?;
        report.amhm_violations += stats.violations(1e-12);
        report.amhm_checked += stats.checked();
    }
    let mut r = rng.fork_named("limits");
    for _ in 0..instances.min(20) {
        let x = randn(&[3, 8, 4, 4], &mut r, 2.0).map(|v| v + 0.7);
        let diff = |a: NormalizerSpec, b: NormalizerSpec| -> Result<f64> {
            Ok(normalize_activations(&a, &x)?.max_abs_diff(&normalize_activations(&b, &x)?))
        };
        report.gn1_vs_in = report.gn1_vs_in.max(diff(
            NormalizerSpec::group_norm_size(1),
            NormalizerSpec::new(NormKind::InstanceNorm),
        )?);
        report.gnc_vs_ln = report.gnc_vs_ln.max(diff(
            NormalizerSpec::group_norm_size(8),
            NormalizerSpec::new(NormKind::LayerNorm),
        )?);
        report.moment_invariants = report.moment_invariants.max(moment_errors(&x)?);
    }
    let mut r = rng.fork_named("corrections");
    report.wn_variance = corrected_variance(NormKind::WeightNorm, draws, &mut r)?;
    report.sws_variance = corrected_variance(NormKind::ScaledWeightStandardization, draws, &mut r)?;
    Ok(report)
}
