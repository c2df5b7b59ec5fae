use mobifl_web::{attention, bound_curve, expected_sizes, marginal_path, BoundKind};

#[test]
fn marginal_rows_sum_to_one_and_settle() {
    let path = marginal_path(3, 0.5, 0, 60).unwrap();
    assert_eq!(path.len(), 61 * 3);
    assert_eq!(&path[..3], &[1.0, 0.0, 0.0]);
    assert_eq!(&path[3..6], &[0.5, 0.5, 0.0]);
    for row in path.chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let last = &path[60 * 3..];
    assert!((last[0] - 0.25).abs() < 1e-9 && (last[1] - 0.5).abs() < 1e-9);
}

#[test]
fn sizes_scale_with_users() {
    let s = expected_sizes(40, 3, 0.5, 1, 1).unwrap();
    assert_eq!(s, vec![10.0, 20.0, 10.0]);
    assert!(marginal_path(3, 0.5, 3, 1).is_err());
    assert!(marginal_path(3, 1.5, 0, 1).is_err());
}

#[test]
fn attention_matches_hand_values() {
    // anchor (1,0); candidates at cos 1 and cos 0
    let w = attention(&[2.0, 0.0, 0.0, 1.0], &[1.0, 0.0], 1.0, false).unwrap();
    let e = (-1.0f64).exp();
    assert!((w[0] - e / (e + 1.0)).abs() < 1e-15);
    assert!((w[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
    let flat = attention(&[2.0, 0.0, 0.0, 1.0], &[1.0, 0.0], 0.0, true).unwrap();
    assert_eq!(flat, vec![0.5, 0.5]);
    assert!(attention(&[1.0, 2.0, 3.0], &[1.0, 0.0], 1.0, false).is_err());
}

#[test]
fn curves_grow_with_kappa1_and_stop_at_the_cap() {
    let hfl = bound_curve(BoundKind::Hfl, 50, 5, 0.5, 0.001, 1, 300);
    let finite: Vec<f64> = hfl.iter().copied().take_while(|v| v.is_finite()).collect();
    assert!(finite.len() > 200 && finite.len() < 300);
    assert!(finite.windows(2).all(|w| w[1] >= w[0]));
    assert!(hfl[finite.len()..].iter().all(|v| v.is_nan()));

    let stuck = bound_curve(BoundKind::Hfl, 50, 5, 0.0, 0.001, 1, 5);
    assert!(stuck.iter().all(|v| v.is_nan()));
    let macfl = bound_curve(BoundKind::Macfl, 50, 5, 0.0, 0.001, 1, 5);
    assert!(macfl.iter().all(|v| v.is_finite()));
}
