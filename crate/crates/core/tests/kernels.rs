//! Statistical checks of the individual kernels against closed forms and
//! quadrature.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use alps::chain::{rwm_step, standard_swap, ChainPoint, Preconditioner, RwmConfig};
use alps::exploration::{gradient, local_optimize, OptimizerConfig};
use alps::hat::{PowerTarget, TargetDensity, TemperedTarget};
use alps::numeric::std_normal_log_pdf;
use alps::targets::{GaussianMixtureTarget, SkewNormalMixtureTarget};

fn std_gauss(d: usize) -> Arc<dyn TargetDensity> {
    Arc::new(GaussianMixtureTarget::gaussian(DVector::zeros(d), DMatrix::identity(d, d)).unwrap())
}

#[test]
fn rwm_acceptance_on_standard_normal() {
    // For N(0,1) and an N(0,σ²) increment the stationary acceptance rate is (2/π) atan(2/σ).
    let sigma: f64 = 2.38;
    let want = 2.0 / std::f64::consts::PI * (2.0 / sigma).atan();
    let target = PowerTarget::new(std_gauss(1), 1.0).unwrap();
    let cfg = RwmConfig {
        step_scale: sigma,
        preconditioner: Preconditioner::None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut p = ChainPoint::new(vec![0.0], &target);
    let n = 400_000;
    let mut acc = 0;
    for _ in 0..n {
        acc += rwm_step(&mut p, &target, &cfg, &mut rng).accepted as usize;
    }
    let rate = acc as f64 / n as f64;
    assert!((rate - want).abs() < 0.005, "{rate} vs {want}");
}

#[test]
fn standard_swap_acceptance_matches_quadrature() {
    let (b0, b1): (f64, f64) = (1.0, 2.0);
    let base = std_gauss(1);
    let targets: Vec<Arc<dyn TemperedTarget>> = vec![
        Arc::new(PowerTarget::new(base.clone(), b0).unwrap()),
        Arc::new(PowerTarget::new(base, b1).unwrap()),
    ];
    // E[min(1, exp((β0-β1)(x0² - x1²)/2))], x0 ~ N(0,1/β0), x1 ~ N(0,1/β1)
    let dens = |x: f64, b: f64| (std_normal_log_pdf(x * b.sqrt()) + 0.5 * b.ln()).exp();
    let inner = |x0: f64| {
        quadrature::integrate(
            |x1: f64| dens(x1, b1) * (0.5 * (b0 - b1) * (x0 * x0 - x1 * x1)).min(0.0).exp(),
            -40.0,
            40.0,
            1e-12,
        )
        .integral
    };
    let want = quadrature::integrate(|x0: f64| dens(x0, b0) * inner(x0), -12.0, 12.0, 1e-10).integral;

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 200_000;
    let mut acc = 0;
    for _ in 0..n {
        let x0: f64 = rng.sample::<f64, _>(StandardNormal) / b0.sqrt();
        let x1: f64 = rng.sample::<f64, _>(StandardNormal) / b1.sqrt();
        let mut levels = vec![
            ChainPoint::new(vec![x0], targets[0].as_ref()),
            ChainPoint::new(vec![x1], targets[1].as_ref()),
        ];
        acc += standard_swap(&mut levels, 0, &targets, &mut rng).decision.accepted as usize;
    }
    let rate = acc as f64 / n as f64;
    let se = (want * (1.0 - want) / n as f64).sqrt();
    assert!((rate - want).abs() < 0.01, "{rate} vs {want} (se {se})");
}

#[test]
fn skew_mixture_gradient_matches_differences() {
    let t = SkewNormalMixtureTarget::benchmark(20, 10.0);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let k = rng.random_range(0..4);
        let x: Vec<f64> = t.mus[k]
            .iter()
            .map(|m| m + t.omegas[k] * (0.5 + rng.random::<f64>()))
            .collect();
        let g = t.gradient(&x).unwrap();
        // central differences with a fixed absolute step
        let h = 1e-6;
        for i in 0..x.len() {
            let mut a = x.clone();
            let mut b = x.clone();
            a[i] += h;
            b[i] -= h;
            let fd = (t.log_density(&a) - t.log_density(&b)) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-5 * g[i].abs().max(1.0), "coord {i}: {fd} vs {}", g[i]);
        }
    }
}

struct Rosenbrock;

impl TargetDensity for Rosenbrock {
    fn dim(&self) -> usize {
        2
    }
    fn log_density(&self, x: &[f64]) -> f64 {
        -((1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2))
    }
}

#[test]
fn bfgs_finds_rosenbrock_minimum_from_a_grid() {
    let cfg = OptimizerConfig {
        max_iterations: 2000,
        ..OptimizerConfig::default()
    };
    for i in -2..=2 {
        for j in -2..=2 {
            let x0 = [i as f64, j as f64];
            let o = local_optimize(&x0, &Rosenbrock, &cfg).unwrap();
            assert!(o.converged, "start {x0:?}");
            assert!((o.mu[0] - 1.0).abs() < 1e-4 && (o.mu[1] - 1.0).abs() < 1e-4, "start {x0:?}: {}", o.mu);
        }
    }
    // finite-difference gradient vanishes at the optimum
    let g = gradient(&Rosenbrock, &[1.0, 1.0], f64::EPSILON.cbrt());
    assert!(g.amax() < 1e-6);
}

#[test]
fn quanta_and_standard_swaps_agree_at_equal_beta() {
    use alps::chain::quanta_swap;
    use alps::hat::HatTarget;
    use alps::mode_registry::{ModeInfo, ModeRegistry};

    let t = SkewNormalMixtureTarget::benchmark(4, 3.0);
    let base: Arc<dyn TargetDensity> = Arc::new(SkewNormalMixtureTarget::benchmark(4, 3.0));
    let mut reg = ModeRegistry::with_default_tolerance(4);
    for k in 0..4 {
        let start: Vec<f64> = t.mus[k].iter().map(|v| v + 0.3 * t.omegas[k]).collect();
        let o = local_optimize(&start, &t, &OptimizerConfig::default()).unwrap();
        let h = alps::exploration::hessian_at(&t, o.mu.as_slice(), None).unwrap();
        reg.try_insert(ModeInfo::from_hessian(o.mu, &h, o.log_pi).unwrap()).unwrap();
    }
    let reg = Arc::new(reg);
    let hat: Arc<dyn TemperedTarget> = Arc::new(HatTarget::new(base, reg, 16.0).unwrap());
    let targets = vec![hat.clone(), hat.clone()];
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..200 {
        let mut pick = || {
            let k = rng.random_range(0..4);
            let x: Vec<f64> = t.mus[k].iter().map(|m| m + rng.random_range(-1.0..3.0)).collect();
            ChainPoint::new(x, hat.as_ref())
        };
        let levels = vec![pick(), pick()];
        let mut a = levels.clone();
        let mut b = levels;
        let s = standard_swap(&mut a, 0, &targets, &mut ChaCha8Rng::seed_from_u64(1));
        let q = quanta_swap(&mut b, 0, &targets, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(!q.allocation_changed);
        assert!((s.log_ratio - q.log_ratio).abs() < 1e-12);
        assert_eq!(s.decision, q.decision);
    }
}
