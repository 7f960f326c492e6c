use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{gemm, Tensor};

const POWER_TOL: f64 = 1e-9;
const POWER_MAX_ITERS: usize = 1000;

fn check_matrix(y: &Tensor) -> Result<(usize, usize)> {
    if y.rank() != 2 {
        return shape_err(format!("expected a width x N matrix, got {:?}", y.shape()));
    }
    if !y.all_finite() {
        return Err(Error::NonFinite {
            context: "feature matrix".into(),
        });
    }
    Ok((y.dim(0), y.dim(1)))
}

/// Gram matrix on the smaller side of `y`.
fn gram(y: &Tensor) -> (Vec<f64>, usize) {
    let (r, c) = (y.dim(0), y.dim(1));
    if c <= r {
        let mut g = vec![0.0; c * c];
        gemm(
            1.0,
            y.data(),
            r,
            c,
            true,
            y.data(),
            r,
            c,
            false,
            0.0,
            &mut g,
        );
        (g, c)
    } else {
        let mut g = vec![0.0; r * r];
        gemm(
            1.0,
            y.data(),
            r,
            c,
            false,
            y.data(),
            r,
            c,
            true,
            0.0,
            &mut g,
        );
        (g, r)
    }
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration, stopping
/// when the residual `‖Gv − λv‖ / λ` drops below the tolerance.
fn top_eigenvalue(g: &[f64], n: usize) -> f64 {
    // Fixed, non-symmetric start so it is never orthogonal to a structured
    // top eigenvector by accident.
    let mut v: Vec<f64> = (0..n)
        .map(|i| 1.0 + 0.5 * ((i as f64 + 1.0) * 0.618_033_988_75).fract())
        .collect();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let n0 = norm(&v);
    v.iter_mut().for_each(|x| *x /= n0);
    let mut w = vec![0.0; n];
    let mut lambda = 0.0;
    for _ in 0..POWER_MAX_ITERS {
        gemm(1.0, g, n, n, false, &v, n, 1, false, 0.0, &mut w);
        lambda = v.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        if !(lambda > 0.0) {
            return 0.0;
        }
        let resid = v
            .iter()
            .zip(&w)
            .map(|(a, b)| (b - lambda * a).powi(2))
            .sum::<f64>()
            .sqrt();
        let nw = norm(&w);
        v.iter_mut().zip(&w).for_each(|(a, b)| *a = b / nw);
        if resid <= POWER_TOL * lambda {
            break;
        }
    }
    lambda
}

/// `‖Y‖_F² / ‖Y‖₂²`.
pub fn stable_rank(y: &Tensor) -> Result<f64> {
    check_matrix(y)?;
    let fro = y.sum_sq();
    if !(fro > 0.0) {
        return Err(Error::Degenerate("stable rank of a zero matrix".into()));
    }
    let (g, n) = gram(y);
    let top = top_eigenvalue(&g, n);
    Ok(fro / top)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSimilarity {
    pub mean: f64,
    /// Columns used.
    pub columns: usize,
    /// Zero columns left out.
    pub excluded: usize,
}

/// Mean cosine similarity over all unordered pairs of non-zero columns.
pub fn mean_pairwise_cosine(y: &Tensor) -> Result<CosineSimilarity> {
    let (r, c) = check_matrix(y)?;
    let d = y.data();
    let mut sum = vec![0.0; r];
    let (mut used, mut excluded) = (0, 0);
    for j in 0..c {
        let norm = (0..r).map(|i| d[i * c + j].powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 {
            excluded += 1;
            continue;
        }
        used += 1;
        for (i, s) in sum.iter_mut().enumerate() {
            *s += d[i * c + j] / norm;
        }
    }
    if used < 2 {
        return Err(Error::Degenerate(format!(
            "{used} non-zero columns; need two"
        )));
    }
    // Σ_{i≠j} ⟨uᵢ, uⱼ⟩ = ‖Σ uᵢ‖² − n.
    let total = sum.iter().map(|s| s * s).sum::<f64>() - used as f64;
    let pairs = (used * (used - 1)) as f64;
    Ok(CosineSimilarity {
        mean: (total / pairs).clamp(-1.0, 1.0),
        columns: used,
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn singular_values_two_one_one() {
        let y = Tensor::matrix(3, 3, vec![2.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((stable_rank(&y).unwrap() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn rank_one() {
        let y = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 2.0, 4.0, 6.0]).unwrap();
        assert!((stable_rank(&y).unwrap() - 1.0).abs() < 1e-9);
        assert!(stable_rank(&Tensor::zeros(vec![2, 2])).is_err());
    }

    #[test]
    fn cosine_cases() {
        let same = Tensor::matrix(2, 2, vec![1.0, 3.0, 2.0, 6.0]).unwrap();
        assert!((mean_pairwise_cosine(&same).unwrap().mean - 1.0).abs() < 1e-15);
        let orth = Tensor::matrix(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let c = mean_pairwise_cosine(&orth).unwrap();
        assert_eq!((c.mean, c.columns, c.excluded), (0.0, 2, 1));
    }
}
