use normprop::diagnostics::{explosion_fit, mean_pairwise_cosine, spearman, stable_rank};
use normprop::harness::{parse_cifar100, serialize_cifar100, CifarRecord};
use normprop::norm::{normalize_activations, NormKind, NormalizerSpec};
use normprop::Tensor;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, rows * cols)
        .prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

fn activations() -> impl Strategy<Value = Tensor> {
    (2usize..5, 1usize..4, 2usize..4).prop_flat_map(|(n, c2, hw)| {
        let c = 2 * c2;
        prop::collection::vec(-2.0f64..2.0, n * c * hw * hw)
            .prop_map(move |d| Tensor::new(vec![n, c, hw, hw], d).unwrap())
    })
}

fn permute_columns(m: &Tensor, perm: &[usize]) -> Tensor {
    let (r, c) = (m.dim(0), m.dim(1));
    let d: Vec<f64> = (0..r)
        .flat_map(|i| perm.iter().map(move |&j| (i, j)))
        .map(|(i, j)| m.data()[i * c + j])
        .collect();
    Tensor::matrix(r, c, d).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stable_rank_ignores_column_order_and_scale(m in matrix(5, 7), s in 0.1f64..10.0, seed in any::<u64>()) {
        prop_assume!(m.sum_sq() > 1e-6);
        let mut perm: Vec<usize> = (0..7).collect();
        normprop::Rng::new(seed).shuffle(&mut perm);
        let base = stable_rank(&m).unwrap();
        prop_assert!((stable_rank(&permute_columns(&m, &perm)).unwrap() - base).abs() < 1e-6 * base);
        prop_assert!((stable_rank(&m.scale(s)).unwrap() - base).abs() < 1e-6 * base);
        prop_assert!((1.0 - 1e-9..=5.0 + 1e-9).contains(&base));
    }

    #[test]
    fn cosine_ignores_positive_column_scaling(m in matrix(4, 6), scales in prop::collection::vec(0.1f64..10.0, 6)) {
        prop_assume!((0..6).all(|j| m.column(j).iter().map(|v| v * v).sum::<f64>() > 1e-3));
        let scaled = m.zip_with(&Tensor::matrix(1, 6, scales).unwrap(), |a, b| a * b).unwrap();
        let a = mean_pairwise_cosine(&m).unwrap().mean;
        let b = mean_pairwise_cosine(&scaled).unwrap().mean;
        prop_assert!((a - b).abs() < 1e-9);
        prop_assert!((-1.0..=1.0).contains(&a));
    }

    #[test]
    fn explosion_rate_ignores_global_scale(norms in prop::collection::vec(0.01f64..100.0, 3..12), s in 1e-3f64..1e3) {
        let scaled: Vec<f64> = norms.iter().map(|v| v * s).collect();
        let a = explosion_fit(&norms).unwrap();
        let b = explosion_fit(&scaled).unwrap();
        prop_assert!((a.rate - b.rate).abs() < 1e-9);
    }

    #[test]
    fn spearman_ignores_monotone_maps(x in prop::collection::vec(-5.0f64..5.0, 4..10)) {
        let y: Vec<f64> = x.iter().map(|v| v.powi(3) + 2.0 * v).collect();
        if let Ok(r) = spearman(&x, &y) {
            prop_assert!((r - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn per_sample_norms_ignore_per_sample_scale(x in activations(), s in 0.1f64..10.0) {
        for kind in [NormKind::LayerNorm, NormKind::InstanceNorm, NormKind::GroupNorm] {
            let spec = NormalizerSpec::new(kind).with_eps(0.0);
            let a = normalize_activations(&spec, &x);
            prop_assume!(a.is_ok());
            let b = normalize_activations(&spec, &x.scale(s)).unwrap();
            prop_assert!(a.unwrap().max_abs_diff(&b) < 1e-7);
        }
    }

    #[test]
    fn batch_norm_ignores_affine_shift(x in activations(), s in 0.1f64..10.0, shift in -5.0f64..5.0) {
        let spec = NormalizerSpec::new(NormKind::BatchNorm).with_eps(0.0);
        let a = normalize_activations(&spec, &x).unwrap();
        let b = normalize_activations(&spec, &x.scale(s).add_scalar(shift)).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-7);
    }

    #[test]
    fn transpose_is_an_involution(m in matrix(3, 5)) {
        prop_assert_eq!(m.t().unwrap().t().unwrap(), m);
    }

    #[test]
    fn cifar_round_trip(labels in prop::collection::vec((0u8..20, 0u8..100, any::<u8>()), 0..4)) {
        let records: Vec<CifarRecord> = labels
            .iter()
            .map(|&(coarse, fine, fill)| CifarRecord { coarse, fine, pixels: Box::new([fill; 3072]) })
            .collect();
        let bytes = serialize_cifar100(&records);
        prop_assert_eq!(bytes.len(), records.len() * 3074);
        let back = parse_cifar100(&bytes).unwrap();
        prop_assert_eq!(serialize_cifar100(&back), bytes);
    }
}
