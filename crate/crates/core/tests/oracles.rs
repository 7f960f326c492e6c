use nalgebra::DMatrix;
use normprop::diagnostics::{linear_fit, mean_pairwise_cosine, stable_rank};
use normprop::{Rng, Tensor};

fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut t = Tensor::zeros(vec![rows, cols]);
    Rng::new(seed).fill_normal(t.data_mut(), 1.0);
    t
}

fn svd_stable_rank(t: &Tensor) -> f64 {
    let m = DMatrix::from_row_slice(t.dim(0), t.dim(1), t.data());
    let s = m.singular_values();
    let top = s.max();
    s.iter().map(|v| v * v).sum::<f64>() / (top * top)
}

#[test]
fn stable_rank_matches_svd() {
    for (i, &(r, c)) in [(3, 3), (5, 12), (12, 5), (40, 64), (64, 8)]
        .iter()
        .enumerate()
    {
        let t = random(r, c, i as u64);
        let ours = stable_rank(&t).unwrap();
        let oracle = svd_stable_rank(&t);
        approx::assert_relative_eq!(ours, oracle, max_relative = 1e-7);
    }
}

#[test]
fn stable_rank_of_low_rank_product() {
    let a = DMatrix::from_row_slice(30, 2, random(30, 2, 1).data());
    let b = DMatrix::from_row_slice(2, 20, random(2, 20, 2).data());
    let p = a * b;
    let t = Tensor::matrix(30, 20, p.transpose().as_slice().to_vec()).unwrap();
    let ours = stable_rank(&t).unwrap();
    assert!(ours <= 2.0 + 1e-9);
    approx::assert_relative_eq!(ours, svd_stable_rank(&t), max_relative = 1e-7);
}

#[test]
fn cosine_matches_direct_pairs() {
    let t = random(6, 9, 4);
    let cols: Vec<Vec<f64>> = (0..9).map(|j| t.column(j)).collect();
    let mut sum = 0.0;
    let mut pairs = 0;
    for i in 0..9 {
        for j in i + 1..9 {
            let dot: f64 = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
            let n = |v: &Vec<f64>| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            sum += dot / (n(&cols[i]) * n(&cols[j]));
            pairs += 1;
        }
    }
    approx::assert_relative_eq!(
        mean_pairwise_cosine(&t).unwrap().mean,
        sum / pairs as f64,
        epsilon = 1e-12
    );
}

#[test]
fn least_squares_matches_normal_equations() {
    let x: Vec<f64> = (0..15).map(|i| i as f64 * 0.7).collect();
    let mut noise = vec![0.0; 15];
    Rng::new(5).fill_normal(&mut noise, 0.3);
    let y: Vec<f64> = x
        .iter()
        .zip(&noise)
        .map(|(a, e)| 2.5 * a - 1.0 + e)
        .collect();
    let design = DMatrix::from_fn(15, 2, |i, j| if j == 0 { x[i] } else { 1.0 });
    let beta = (design.transpose() * &design).try_inverse().unwrap()
        * design.transpose()
        * DMatrix::from_column_slice(15, 1, &y);
    let fit = linear_fit(&x, &y).unwrap();
    approx::assert_relative_eq!(fit.slope, beta[0], epsilon = 1e-10);
    approx::assert_relative_eq!(fit.intercept, beta[1], epsilon = 1e-10);
}
