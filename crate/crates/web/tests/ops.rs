use normprop_web::{gradient_curve, group_sweep, variance_curve};

#[test]
fn variance_curve_has_one_entry_per_layer() {
    let c = variance_curve("bn", "preactivation", 3, 0).unwrap();
    assert_eq!(c.second_moments.len(), 1 + 3 * 3);
    assert!(c.diverged_at.is_none());
    assert!(c.second_moments.last().unwrap() > c.second_moments.first().unwrap());
}

#[test]
fn weight_norm_blows_up_on_the_standard_topology() {
    let c = variance_curve("wn", "standard", 9, 0).unwrap();
    let m = &c.second_moments;
    assert!(c.diverged_at.is_some() || m.last().unwrap() / m[0] > 1e3);
}

#[test]
fn group_sweep_spans_instance_to_layer() {
    let pts = group_sweep(1).unwrap();
    assert_eq!(pts.first().unwrap().group_size, 1);
    assert_eq!(pts.last().unwrap().group_size, 32);
    assert!(pts
        .iter()
        .all(|p| p.cosine.is_finite() && p.stable_rank >= 1.0));
    assert!(pts.last().unwrap().cosine > pts.first().unwrap().cosine);
}

#[test]
fn gradient_curve_rejects_unknown_normalizer() {
    assert!(gradient_curve("nope", 0).is_err());
    let c = gradient_curve("in", 0).unwrap();
    assert_eq!(c.grad_norms.len(), 12);
    assert!(c.explosion_rate.is_finite());
}
