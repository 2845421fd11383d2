use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use alps::chain::quanta_transform;
use alps::harness::running_prob_estimate;
use alps::hat::{HatTarget, TargetDensity, TemperedTarget, TruncatedHatTarget};
use alps::mode_registry::{ModeInfo, ModeRegistry};
use alps::targets::{GaussianMixtureTarget, IidProductTarget, Shape1d};

/// Two well separated 2-d Gaussians and a registry holding their centres.
fn two_bumps(sep: f64, w0: f64) -> (Arc<dyn TargetDensity>, Arc<ModeRegistry>) {
    let mus = vec![DVector::from_vec(vec![-sep, 0.0]), DVector::from_vec(vec![sep, 0.5])];
    let sigmas = vec![
        DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.8]),
        DMatrix::from_row_slice(2, 2, &[2.0, -0.4, -0.4, 1.5]),
    ];
    let base: Arc<dyn TargetDensity> =
        Arc::new(GaussianMixtureTarget::new(vec![w0, 1.0 - w0], mus.clone(), sigmas.clone()).unwrap());
    let mut reg = ModeRegistry::with_default_tolerance(2);
    for (m, s) in mus.into_iter().zip(sigmas) {
        let lp = base.log_density(m.as_slice());
        reg.try_insert(ModeInfo::new(m, s, lp).unwrap()).unwrap();
    }
    assert_eq!(reg.len(), 2);
    (base, Arc::new(reg))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn hat_at_unit_beta_is_the_base(x in -30.0..30.0f64, y in -30.0..30.0f64, w0 in 0.05..0.95f64) {
        let (base, reg) = two_bumps(12.0, w0);
        let hat = HatTarget::new(base.clone(), reg, 1.0).unwrap();
        prop_assert_eq!(hat.log_density(&[x, y]), base.log_density(&[x, y]));
    }

    #[test]
    fn hat_keeps_mode_heights(beta in 1e-4..1e4f64, w0 in 0.05..0.95f64) {
        let (base, reg) = two_bumps(12.0, w0);
        let hat = HatTarget::new(base.clone(), reg.clone(), beta).unwrap();
        for m in reg.modes() {
            prop_assert_eq!(hat.log_density(m.mu().as_slice()), m.log_pi_at_mode());
        }
    }

    #[test]
    fn truncation_only_removes_mass(x in -30.0..30.0f64, y in -30.0..30.0f64, beta in 1e-3..10.0f64) {
        let (base, reg) = two_bumps(12.0, 0.4);
        let hat = HatTarget::new(base, reg, beta).unwrap();
        let full = hat.log_density(&[x, y]);
        let trunc = TruncatedHatTarget::at_quantile(hat, 0.9999).unwrap();
        let t = trunc.log_density(&[x, y]);
        prop_assert!(t == full || t == f64::NEG_INFINITY);
    }

    #[test]
    fn running_estimate_is_a_proportion(
        trace in prop::collection::vec(-5.0..5.0f64, 2..300),
        threshold in -5.0..5.0f64,
        frac in 0.0..0.9f64,
    ) {
        let burnin = (frac * trace.len() as f64) as usize;
        let est = running_prob_estimate(&trace, threshold, burnin).unwrap();
        prop_assert_eq!(est.len(), trace.len() - burnin);
        prop_assert!(est.iter().all(|p| (0.0..=1.0).contains(p)));
        let last = trace[burnin..].iter().filter(|v| **v < threshold).count() as f64 / est.len() as f64;
        prop_assert!((est[est.len() - 1] - last).abs() < 1e-12);
    }

    #[test]
    fn quanta_transform_round_trips(
        x in prop::collection::vec(-50.0..50.0f64, 1..8),
        b0 in 1e-4..1e4f64,
        b1 in 1e-4..1e4f64,
    ) {
        let mu: Vec<f64> = x.iter().map(|v| 0.3 * v - 1.0).collect();
        let there = quanta_transform(&x, b0, b1, &mu);
        let back = quanta_transform(&there, b1, b0, &mu);
        for (a, b) in x.iter().zip(&back) {
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        }
        // the mode itself is a fixed point
        prop_assert_eq!(quanta_transform(&mu, b0, b1, &mu), mu);
    }

    #[test]
    fn iid_product_factorises(
        x in prop::collection::vec(-4.0..4.0f64, 1..12),
        alpha in -6.0..6.0f64,
        beta in 0.1..50.0f64,
    ) {
        let t = IidProductTarget::new(Shape1d::SkewNormal { alpha }, x.len(), beta);
        let one = IidProductTarget::new(Shape1d::SkewNormal { alpha }, 1, 1.0);
        let sum: f64 = x.iter().map(|v| one.log_density(&[*v])).sum();
        prop_assert!((t.log_density(&x) - beta * sum).abs() <= 1e-10 * sum.abs().max(1.0) * beta);
    }
}
