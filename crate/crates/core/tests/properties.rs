use proptest::prelude::*;
use qple::quadrature::{gauss_rule, Univariate};
use qple::Family;

proptest! {
    #[test]
    fn normal_rule_matches_low_moments(mean in -5.0f64..5.0, sd in 0.01f64..3.0, m in 2usize..12) {
        let rule = gauss_rule(&Univariate::Normal { mean, sd }, m).unwrap();
        let total = rule.integrate(|_| 1.0);
        let first = rule.integrate(|x| x[0]);
        let second = rule.integrate(|x| (x[0] - mean).powi(2));
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!((first - mean).abs() < 1e-11 * (1.0 + mean.abs()));
        prop_assert!((second - sd * sd).abs() < 1e-11 * (1.0 + sd * sd));
    }

    #[test]
    fn uniform_rule_matches_low_moments(lo in -3.0f64..3.0, w in 0.01f64..4.0, m in 2usize..12) {
        let hi = lo + w;
        let rule = gauss_rule(&Univariate::Uniform { lo, hi }, m).unwrap();
        let first = rule.integrate(|x| x[0]);
        let second = rule.integrate(|x| (x[0] - (lo + hi) / 2.0).powi(2));
        prop_assert!((rule.integrate(|_| 1.0) - 1.0).abs() < 1e-12);
        prop_assert!((first - (lo + hi) / 2.0).abs() < 1e-11 * (1.0 + first.abs()));
        prop_assert!((second - w * w / 12.0).abs() < 1e-11 * (1.0 + w * w));
        prop_assert!(rule.nodes.iter().all(|x| x[0] >= lo && x[0] <= hi));
    }

    #[test]
    fn mean_and_variance_are_derivatives_of_b(t in -8.0f64..8.0, trials in 1u32..5) {
        for family in [Family::Poisson, Family::Binomial { trials }] {
            let h = 1e-5;
            let db = (family.b(t + h).unwrap() - family.b(t - h).unwrap()) / (2.0 * h);
            let dm = (family.mean(t + h).unwrap() - family.mean(t - h).unwrap()) / (2.0 * h);
            let mu = family.mean(t).unwrap();
            prop_assert!((db - mu).abs() < 1e-6 * (1.0 + mu.abs()));
            prop_assert!((dm - family.variance(t).unwrap()).abs() < 1e-6 * (1.0 + mu.abs()));
        }
    }

    #[test]
    fn link_inverts_mean(t in -6.0f64..6.0) {
        for family in [Family::Poisson, Family::Binomial { trials: 3 }] {
            let back = family.link(family.mean(t).unwrap()).unwrap();
            prop_assert!((back - t).abs() < 1e-9);
        }
    }
}
