use dgst_core::metrics::{dsc, mean_std, nsd, Mask, MetricsReport};
use proptest::prelude::*;

mod support;
use support::masks::{from_bits, nsd_brute, square};

#[test]
fn dsc_reference_values() {
    let a = square(8, 8, 1, 1, 3);
    assert_eq!(dsc(&a, &a).unwrap(), 1.0);
    assert_eq!(dsc(&a, &square(8, 8, 5, 5, 2)).unwrap(), 0.0);
    // |A| = |B| = 4 with two shared pixels
    let mut p = Mask::empty(4, 4);
    let mut g = Mask::empty(4, 4);
    for x in 0..4 {
        p.set(0, x, true);
    }
    for x in 2..6 {
        g.set(x / 4, x % 4, true);
    }
    assert_eq!(dsc(&p, &g).unwrap(), 0.5);
}

#[test]
fn nsd_reference_values() {
    let a = square(32, 32, 5, 5, 10);
    assert_eq!(nsd(&a, &a, 1.0).unwrap(), 1.0);
    let shifted = square(32, 32, 5, 7, 10);
    assert_eq!(nsd(&a, &shifted, 2.0).unwrap(), 1.0);
    assert!(nsd(&a, &shifted, 1.0).unwrap() < 1.0);
    let far_a = square(32, 32, 2, 2, 3);
    let far_b = square(32, 32, 2, 25, 3);
    assert_eq!(nsd(&far_a, &far_b, 1.0).unwrap(), 0.0);
}

#[test]
fn mismatched_extents_are_rejected() {
    let a = Mask::empty(4, 4);
    let b = Mask::empty(4, 5);
    assert!(dsc(&a, &b).is_err());
    assert!(nsd(&a, &b, 1.0).is_err());
    assert!(nsd(&a, &a, -1.0).is_err());
}

#[test]
fn pooled_report_uses_sample_std() {
    let r1 = MetricsReport::from_cases(vec![0.2, 0.4], vec![0.1, 0.1]);
    let r2 = MetricsReport::from_cases(vec![0.6], vec![0.1]);
    let p = MetricsReport::pooled([&r1, &r2]);
    assert!((p.dsc_mean - 0.4).abs() < 1e-12);
    assert!((p.dsc_std - 0.2).abs() < 1e-12);
    assert!(p.nsd_std.abs() < 1e-15);
    let (m, s) = mean_std(&[]);
    assert!(m.is_nan() && s.is_nan());
}

fn mask_pair() -> impl Strategy<Value = (usize, usize, Vec<bool>, Vec<bool>)> {
    (1usize..12, 1usize..12).prop_flat_map(|(h, w)| {
        (
            Just(h),
            Just(w),
            proptest::collection::vec(any::<bool>(), h * w),
            proptest::collection::vec(any::<bool>(), h * w),
        )
    })
}

proptest! {
    #[test]
    fn dsc_symmetric_and_bounded((h, w, a, b) in mask_pair()) {
        let (a, b) = (from_bits(h, w, &a), from_bits(h, w, &b));
        let d = dsc(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(d, dsc(&b, &a).unwrap());
    }

    #[test]
    fn nsd_matches_brute_force((h, w, a, b) in mask_pair(), tol in 0.0f64..4.0) {
        let (a, b) = (from_bits(h, w, &a), from_bits(h, w, &b));
        let fast = nsd(&a, &b, tol).unwrap();
        let slow = nsd_brute(&a, &b, tol);
        prop_assert!((fast - slow).abs() < 1e-12, "fast {} brute {}", fast, slow);
        prop_assert!((0.0..=1.0).contains(&fast));
        prop_assert_eq!(fast, nsd(&b, &a, tol).unwrap());
    }

    #[test]
    fn nsd_nondecreasing_in_tolerance((h, w, a, b) in mask_pair(), t1 in 0.0f64..3.0, dt in 0.0f64..3.0) {
        let (a, b) = (from_bits(h, w, &a), from_bits(h, w, &b));
        prop_assert!(nsd(&a, &b, t1).unwrap() <= nsd(&a, &b, t1 + dt).unwrap());
    }

    #[test]
    fn identical_masks_score_one((h, w, a, _b) in mask_pair(), tol in 0.0f64..3.0) {
        let a = from_bits(h, w, &a);
        prop_assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        prop_assert_eq!(nsd(&a, &a, tol).unwrap(), 1.0);
    }
}
