use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Ordinary least squares `y ≈ slope·x + intercept`, with Pearson `r`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r: f64,
}

impl LinearFit {
    pub fn r2(&self) -> f64 {
        self.r * self.r
    }
}

fn check_pair(x: &[f64], y: &[f64], min: usize) -> Result<()> {
    if x.len() != y.len() {
        return invalid(format!("series of length {} and {}", x.len(), y.len()));
    }
    if x.len() < min {
        return invalid(format!("need at least {min} points, got {}", x.len()));
    }
    if !x.iter().chain(y).all(|v| v.is_finite()) {
        return Err(Error::NonFinite {
            context: "fit input".into(),
        });
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    check_pair(x, y, 2)?;
    let (mx, my) = (mean(x), mean(y));
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    if !(sxx > 0.0) {
        return Err(Error::Degenerate("all x values are equal".into()));
    }
    let slope = sxy / sxx;
    // A perfectly flat y is fit exactly; call that r = 0 rather than NaN.
    let r = if syy > 0.0 {
        (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
    } else {
        0.0
    };
    Ok(LinearFit {
        slope,
        intercept: my - slope * mx,
        r,
    })
}

/// Pearson correlation; a constant series is an error.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, 2)?;
    let (mx, my) = (mean(x), mean(y));
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    if !(sxx > 0.0 && syy > 0.0) {
        return Err(Error::Degenerate(
            "correlation of a constant series is undefined".into(),
        ));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation (Pearson on tie-averaged ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, 2)?;
    pearson(&ranks(x), &ranks(y))
}

/// Slope shared by several segments, each with its own intercept: the
/// least-squares fit of `y` on position within segment.
pub fn pooled_slope(segments: &[&[f64]]) -> Result<f64> {
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for seg in segments.iter().filter(|s| s.len() >= 2) {
        if !seg.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: "pooled slope".into(),
            });
        }
        let mx = (seg.len() - 1) as f64 / 2.0;
        let my = mean(seg);
        for (i, y) in seg.iter().enumerate() {
            sxy += (i as f64 - mx) * (y - my);
            sxx += (i as f64 - mx).powi(2);
        }
    }
    if !(sxx > 0.0) {
        return invalid("no segment has two points");
    }
    Ok(sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line() {
        let f = linear_fit(&[0.0, 1.0, 2.0], &[1.0, 3.0, 5.0]).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-15 && (f.intercept - 1.0).abs() < 1e-15);
        assert!((f.r - 1.0).abs() < 1e-15);
        assert!(linear_fit(&[1.0, 1.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn tied_ranks() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 100.0, 1000.0]).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn constant_series_flagged() {
        assert!(pearson(&[1.0, 2.0, 3.0], &[4.0, 4.0, 4.0]).is_err());
    }

    #[test]
    fn pooled_ignores_offsets() {
        let a = [0.0, 1.0, 2.0];
        let b = [10.0, 11.0, 12.0, 13.0];
        assert!((pooled_slope(&[&a, &b]).unwrap() - 1.0).abs() < 1e-15);
    }
}
