use proptest::prelude::*;
use rwre_core::env_model::{calibrate_boundary, Family};
use rwre_core::env_tree::EnvTree;
use rwre_core::quenched_exact::{az, hitting_oracle};
use rwre_core::stats::{ks_two_sample, quantile, Welford};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn calibration_lands_on_boundary(mu in -2.0f64..2.0, s2 in 0.2f64..4.0, theta in 0.1f64..0.9) {
        let law = calibrate_boundary(Family::GaussianBinary { mu, s2 }, theta).unwrap();
        prop_assert!(law.psi(1.0).unwrap().abs() < 1e-10);
        prop_assert!(law.psi_prime(1.0).unwrap().abs() < 1e-10);
        prop_assert!(law.sigma2 > 0.0);
    }

    #[test]
    fn chain_hitting_matches_oracle(v in proptest::collection::vec(-3.0f64..3.0, 1..12)) {
        let mut tree = EnvTree::chain(&v);
        for z in 1..tree.len() as u32 {
            let a = az(&mut tree, z).unwrap();
            let o = hitting_oracle(&mut tree, &[z]).unwrap().from_root;
            prop_assert!((a - o).abs() < 1e-12, "z={z} a={a} oracle={o}");
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn hitting_decreases_along_a_ray(v in proptest::collection::vec(-3.0f64..3.0, 2..12)) {
        let mut tree = EnvTree::chain(&v);
        let a: Vec<f64> = (1..tree.len() as u32).map(|z| az(&mut tree, z).unwrap()).collect();
        prop_assert!(a.windows(2).all(|w| w[1] <= w[0] + 1e-15));
    }

    #[test]
    fn welford_merge_is_concatenation(
        xs in proptest::collection::vec(-1e3f64..1e3, 2..50),
        ys in proptest::collection::vec(-1e3f64..1e3, 2..50),
    ) {
        let mut a: Welford = xs.iter().copied().collect();
        let b: Welford = ys.iter().copied().collect();
        let all: Welford = xs.iter().chain(&ys).copied().collect();
        a.merge(&b);
        prop_assert!((a.mean - all.mean).abs() < 1e-9);
        prop_assert!((a.variance() - all.variance()).abs() < 1e-6 * (1.0 + all.variance()));
    }

    #[test]
    fn ks_of_identical_samples_is_one(xs in proptest::collection::vec(-10.0f64..10.0, 5..80)) {
        prop_assert!(ks_two_sample(&xs, &xs).p_value > 0.99);
    }

    #[test]
    fn quantiles_are_ordered(xs in proptest::collection::vec(-10.0f64..10.0, 1..80)) {
        let qs = [0.0, 0.25, 0.5, 0.75, 1.0].map(|q| quantile(&xs, q));
        prop_assert!(qs.windows(2).all(|w| w[0] <= w[1]));
    }
}
