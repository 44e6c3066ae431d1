mod common;

use proptest::prelude::*;

use common::kl_quadrature;
use hxfer::nsr::GaussPred;
use hxfer::similarity::{beta_from_weight, kl_gauss, weight, BetaDirection, SimilarityConfig};

fn gauss() -> impl Strategy<Value = GaussPred> {
    (-5.0..5.0f64, 0.05..20.0f64).prop_map(|(mu, var)| GaussPred { mu, var })
}

proptest! {
    #[test]
    fn kl_is_nonnegative_and_zero_on_identity(p in gauss(), q in gauss()) {
        prop_assert!(kl_gauss(p, q).unwrap() >= 0.0);
        prop_assert_eq!(kl_gauss(p, p).unwrap(), 0.0);
    }

    #[test]
    fn clamped_weight_stays_in_unit_interval(p in gauss(), q in gauss()) {
        let w = weight(p, q, &SimilarityConfig::default()).unwrap();
        prop_assert!((0.0..=1.0).contains(&w));
    }

    #[test]
    fn beta_is_monotone_in_weight(a in 0.0..1.0f64, b in 0.0..1.0f64, k in 1usize..6) {
        let n = 1 << k;
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let narrow = SimilarityConfig { beta_max: n, ..SimilarityConfig::default() };
        let wide = SimilarityConfig { beta_direction: BetaDirection::Widening, ..narrow.clone() };
        prop_assert!(beta_from_weight(lo, n, &narrow) >= beta_from_weight(hi, n, &narrow));
        prop_assert!(beta_from_weight(lo, n, &wide) <= beta_from_weight(hi, n, &wide));
        for cfg in [&narrow, &wide] {
            let beta = beta_from_weight(lo, n, cfg);
            prop_assert!((1..=n).contains(&beta));
        }
    }
}

#[test]
fn closed_form_matches_quadrature() {
    for (mp, vp, mq, vq) in [(0.0, 1.0, 0.0, 2.0), (1.0, 0.3, -2.0, 4.0), (-0.5, 7.0, 0.5, 0.2)] {
        let kl = kl_gauss(GaussPred { mu: mp, var: vp }, GaussPred { mu: mq, var: vq }).unwrap();
        assert!((kl - kl_quadrature(mp, vp, mq, vq)).abs() < 1e-8, "{kl}");
    }
}
