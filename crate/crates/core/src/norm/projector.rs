use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Projections that appear in the BatchNorm and GroupNorm backward passes.
///
/// Matrices are `D × N` (features × samples). BatchNorm statistics run along
/// rows; GroupNorm statistics run down the `G` entries of a group column.
#[derive(Clone, Debug, PartialEq)]
pub enum Projector {
    /// `Z(I − 11ᵀ/N)`: removes each row's mean.
    MeanCenterRows,
    /// `(I − 11ᵀ/G)Z`: removes each column's mean.
    MeanCenterCols,
    /// `Z − (1/N)·diag(Z X̂ᵀ)·X̂`: removes, from each row, its component
    /// along the same row of `X̂`.
    Oblique { xhat: Tensor },
    /// `(I − X̂X̂ᵀ/G)Z`, applied column by column: removes from each column
    /// its component along the same column of `X̂`.
    Sphere { xhat: Tensor },
}

pub fn project(p: &Projector, z: &Tensor) -> Result<Tensor> {
    if z.rank() != 2 {
        return shape_err(format!("projectors act on matrices, got {:?}", z.shape()));
    }
    let (d, n) = (z.dim(0), z.dim(1));
    let mut out = z.clone();
    match p {
        Projector::MeanCenterRows => {
            for row in out.data_mut().chunks_mut(n) {
                let m = row.iter().sum::<f64>() / n as f64;
                row.iter_mut().for_each(|v| *v -= m);
            }
        }
        Projector::MeanCenterCols => {
            for j in 0..n {
                let m = (0..d).map(|i| z.data()[i * n + j]).sum::<f64>() / d as f64;
                for i in 0..d {
                    out.data_mut()[i * n + j] -= m;
                }
            }
        }
        Projector::Oblique { xhat } => {
            check_ref(xhat, z)?;
            for (row, xr) in out.data_mut().chunks_mut(n).zip(xhat.data().chunks(n)) {
                let c = row.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                row.iter_mut().zip(xr).for_each(|(v, x)| *v -= c * x);
            }
        }
        Projector::Sphere { xhat } => {
            check_ref(xhat, z)?;
            let xd = xhat.data();
            for j in 0..n {
                let c = (0..d)
                    .map(|i| z.data()[i * n + j] * xd[i * n + j])
                    .sum::<f64>()
                    / d as f64;
                for i in 0..d {
                    out.data_mut()[i * n + j] -= c * xd[i * n + j];
                }
            }
        }
    }
    Ok(out)
}

fn check_ref(xhat: &Tensor, z: &Tensor) -> Result<()> {
    if xhat.shape() != z.shape() {
        return shape_err(format!(
            "projector reference {:?} vs input {:?}",
            xhat.shape(),
            z.shape()
        ));
    }
    Ok(())
}

/// Per-row mean-centered `X̂` and the row standard deviations (ε = 0).
fn row_standardize(x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let n = x.dim(1);
    let mut xhat = x.clone();
    let mut sigmas = Vec::with_capacity(x.dim(0));
    for (i, row) in xhat.data_mut().chunks_mut(n).enumerate() {
        let m = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
        let s = var.sqrt();
        if !(s > 0.0) {
            return Err(Error::Degenerate(format!(
                "row {i} has zero standard deviation"
            )));
        }
        row.iter_mut().for_each(|v| *v = (*v - m) / s);
        sigmas.push(s);
    }
    Ok((xhat, sigmas))
}

fn check_pair(x: &Tensor, upstream: &Tensor) -> Result<()> {
    if x.rank() != 2 || x.shape() != upstream.shape() {
        return shape_err(format!(
            "expected matching D x N matrices, got {:?} and {:?}",
            x.shape(),
            upstream.shape()
        ));
    }
    Ok(())
}

/// `∇_X J = σ(X)⁻¹ · P₁[P_Ob[∇_X̂ J]]` for BatchNorm over the batch (columns)
/// of a `D × N` pre-activation matrix.
pub fn bn_backward_analytic(x: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    check_pair(x, upstream)?;
    let (xhat, sigmas) = row_standardize(x)?;
    let ob = project(&Projector::Oblique { xhat }, upstream)?;
    let mut p = project(&Projector::MeanCenterRows, &ob)?;
    let n = x.dim(1);
    for (row, s) in p.data_mut().chunks_mut(n).zip(&sigmas) {
        row.iter_mut().for_each(|v| *v /= s);
    }
    Ok(p)
}

/// GroupNorm counterpart: each sample (column) is split into groups of
/// `group_size` consecutive features, and each group gets
/// `σ_g⁻¹ · P₁[P_S[∇_X̂ J]]`.
pub fn gn_backward_analytic(x: &Tensor, group_size: usize, upstream: &Tensor) -> Result<Tensor> {
    check_pair(x, upstream)?;
    let (d, n) = (x.dim(0), x.dim(1));
    if group_size == 0 || d % group_size != 0 {
        return Err(Error::InvalidArgument(format!(
            "group size {group_size} does not divide {d} features"
        )));
    }
    let groups = d / group_size;
    let mut out = Tensor::zeros(vec![d, n]);
    for grp in 0..groups {
        // Transpose the group block so each sample is a row, reuse the
        // row-wise standardization, then go back.
        let block = |t: &Tensor| -> Tensor {
            let mut b = Vec::with_capacity(group_size * n);
            for j in 0..n {
                for i in 0..group_size {
                    b.push(t.data()[(grp * group_size + i) * n + j]);
                }
            }
            Tensor::from_parts(vec![n, group_size], b)
        };
        let (xhat_t, sigmas) = row_standardize(&block(x))?;
        let xhat = xhat_t.t()?;
        let up = block(upstream).t()?;
        let sph = project(&Projector::Sphere { xhat }, &up)?;
        let p = project(&Projector::MeanCenterCols, &sph)?;
        for i in 0..group_size {
            for (j, s) in sigmas.iter().enumerate() {
                out.data_mut()[(grp * group_size + i) * n + j] = p.data()[i * n + j] / s;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn randn(r: usize, c: usize, seed: u64) -> Tensor {
        let mut t = Tensor::zeros(vec![r, c]);
        Rng::new(seed).fill_normal(t.data_mut(), 1.0);
        t
    }

    #[test]
    fn constant_row_vanishes() {
        let z = Tensor::matrix(1, 4, vec![2.5; 4]).unwrap();
        assert!(project(&Projector::MeanCenterRows, &z).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn fixed_point_when_orthogonal() {
        // Rows of xhat are (1,-1,1,-1)-type and z rows are orthogonal to them and to 1.
        let xhat = Tensor::matrix(2, 4, vec![1., -1., 1., -1., 1., -1., 1., -1.]).unwrap();
        let z = Tensor::matrix(2, 4, vec![1., 1., -1., -1., 2., 2., -2., -2.]).unwrap();
        let a = project(&Projector::Oblique { xhat }, &z).unwrap();
        let b = project(&Projector::MeanCenterRows, &a).unwrap();
        assert!(b.max_abs_diff(&z) <= 1e-12);
    }

    #[test]
    fn idempotent() {
        let x = randn(4, 6, 1);
        let (xhat, _) = row_standardize(&x).unwrap();
        let z = randn(4, 6, 2);
        for p in [
            Projector::MeanCenterRows,
            Projector::MeanCenterCols,
            Projector::Oblique { xhat: xhat.clone() },
        ] {
            let once = project(&p, &z).unwrap();
            let twice = project(&p, &once).unwrap();
            assert!(once.max_abs_diff(&twice) <= 1e-10);
        }
        let (xt, _) = row_standardize(&x.t().unwrap()).unwrap();
        let sp = Projector::Sphere {
            xhat: xt.t().unwrap(),
        };
        let once = project(&sp, &z).unwrap();
        assert!(once.max_abs_diff(&project(&sp, &once).unwrap()) <= 1e-10);
    }

    #[test]
    fn upstream_equal_to_xhat_leaves_only_centering() {
        let x = randn(3, 8, 3);
        let (xhat, _) = row_standardize(&x).unwrap();
        let g = bn_backward_analytic(&x, &xhat).unwrap();
        assert!(g.max_abs() < 1e-12);
    }

    #[test]
    fn zero_sigma_rejected() {
        let x = Tensor::matrix(2, 3, vec![1., 1., 1., 0., 1., 2.]).unwrap();
        assert!(bn_backward_analytic(&x, &x).is_err());
        assert!(gn_backward_analytic(&randn(6, 2, 4), 4, &randn(6, 2, 5)).is_err());
    }
}
