//! Target densities and the Hessian-adjusted tempered (HAT) family.
//!
//! HAT targets are stored un-normalised; every consumer works with ratios.

mod ctrmd;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::mode_registry::ModeRegistry;
use crate::numeric::chi_squared_quantile;

pub use ctrmd::{crmd_log_density, ctrmd_log_density, BaseShape, CtrmdComponent, CtrmdSpec, TemperingMode};

/// A d-dimensional log-density known up to a constant.
///
/// `log_density` may return `-inf`. Implementations must be pure functions so
/// they can be evaluated from several workers at once.
pub trait TargetDensity: Send + Sync {
    fn dim(&self) -> usize;

    fn log_density(&self, x: &[f64]) -> f64;

    fn gradient(&self, _x: &[f64]) -> Option<DVector<f64>> {
        None
    }

    fn hessian(&self, _x: &[f64]) -> Option<DMatrix<f64>> {
        None
    }
}

impl<T: TargetDensity + ?Sized> TargetDensity for Arc<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn log_density(&self, x: &[f64]) -> f64 {
        (**self).log_density(x)
    }
    fn gradient(&self, x: &[f64]) -> Option<DVector<f64>> {
        (**self).gradient(x)
    }
    fn hessian(&self, x: &[f64]) -> Option<DMatrix<f64>> {
        (**self).hessian(x)
    }
}

/// The density a single temperature level of a chain targets.
pub trait TemperedTarget: Send + Sync {
    fn beta(&self) -> f64;

    fn dim(&self) -> usize;

    fn log_density(&self, x: &[f64]) -> f64;

    /// Registry the target was built on, if any.
    fn registry(&self) -> Option<&ModeRegistry> {
        None
    }

    /// `A_{(x,β)}` for targets that carry a registry.
    fn allocation(&self, x: &[f64]) -> Option<usize> {
        self.registry()
            .map(|r| allocate_with(r, &mahalanobis_all(r, x), self.beta()))
    }

    /// Log-density together with the allocation, sharing the work where the
    /// target computes both anyway.
    fn log_density_and_allocation(&self, x: &[f64]) -> (f64, Option<usize>) {
        (self.log_density(x), self.allocation(x))
    }
}

/// Plain power tempering `β log π(x)`.
#[derive(Clone)]
pub struct PowerTarget {
    base: Arc<dyn TargetDensity>,
    beta: f64,
}

impl PowerTarget {
    pub fn new(base: Arc<dyn TargetDensity>, beta: f64) -> Result<Self> {
        if !(beta > 0.0) {
            return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
        }
        Ok(Self { base, beta })
    }
}

impl TemperedTarget for PowerTarget {
    fn beta(&self) -> f64 {
        self.beta
    }
    fn dim(&self) -> usize {
        self.base.dim()
    }
    fn log_density(&self, x: &[f64]) -> f64 {
        let lp = self.base.log_density(x);
        if self.beta == 1.0 {
            lp
        } else {
            self.beta * lp
        }
    }
}

/// Squared Mahalanobis distance of `x` to every registered mode, using the
/// untempered covariances.
pub fn mahalanobis_all(registry: &ModeRegistry, x: &[f64]) -> Vec<f64> {
    registry.modes().iter().map(|m| m.mahalanobis_sq(x)).collect()
}

/// Argmax over `log ŵ_j + log φ(x | μ_j, Σ_j/β)` given precomputed
/// Mahalanobis distances; ties go to the lowest index.
fn allocate_with(registry: &ModeRegistry, quad: &[f64], beta: f64) -> usize {
    // The (d/2)(log β - log 2π) term is shared by every component.
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (j, (m, q)) in registry.modes().iter().zip(quad).enumerate() {
        let score = registry.log_weights()[j] - 0.5 * m.log_det_sigma() - 0.5 * beta * q;
        if score > best_score {
            best_score = score;
            best = j;
        }
    }
    best
}

/// `A_{(x,β)}`: the mode whose tempered Gaussian approximation, weighted by
/// `ŵ_j`, is largest at `x`.
pub fn allocate_mode(x: &[f64], beta: f64, registry: &ModeRegistry) -> Result<usize> {
    if registry.is_empty() {
        return Err(Error::NoModes);
    }
    if x.len() != registry.dim() {
        return Err(Error::DimensionMismatch {
            expected: registry.dim(),
            got: x.len(),
        });
    }
    Ok(allocate_with(registry, &mahalanobis_all(registry, x), beta))
}

/// Result of a full HAT evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HatEval {
    pub log_density: f64,
    /// `A_{(x,β)}`.
    pub allocation: usize,
    /// `(x - μ_A)ᵀ Σ_A⁻¹ (x - μ_A)` for that allocation.
    pub mahalanobis_sq: f64,
}

/// The HAT target at inverse temperature `beta`, built on a registry snapshot.
#[derive(Clone)]
pub struct HatTarget {
    base: Arc<dyn TargetDensity>,
    registry: Arc<ModeRegistry>,
    beta: f64,
}

impl HatTarget {
    pub fn new(base: Arc<dyn TargetDensity>, registry: Arc<ModeRegistry>, beta: f64) -> Result<Self> {
        if !(beta > 0.0) {
            return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
        }
        if registry.is_empty() {
            return Err(Error::NoModes);
        }
        if registry.dim() != base.dim() {
            return Err(Error::DimensionMismatch {
                expected: base.dim(),
                got: registry.dim(),
            });
        }
        Ok(Self {
            base,
            registry,
            beta,
        })
    }

    pub fn registry_version(&self) -> u64 {
        self.registry.version()
    }

    pub fn registry_arc(&self) -> &Arc<ModeRegistry> {
        &self.registry
    }

    pub fn base(&self) -> &Arc<dyn TargetDensity> {
        &self.base
    }

    pub fn evaluate(&self, x: &[f64]) -> HatEval {
        let quad = mahalanobis_all(&self.registry, x);
        let hot = allocate_with(&self.registry, &quad, self.beta);
        let q = quad[hot];
        let mode = self.registry.mode(hot);
        let lp_mode = mode.log_pi_at_mode();
        let log_density = if self.beta == 1.0 {
            self.base.log_density(x)
        } else if hot == allocate_with(&self.registry, &quad, 1.0) {
            // β log π(x) + (1-β) log π(μ), arranged so x = μ returns log π(μ) exactly.
            let lp = self.base.log_density(x);
            if lp == f64::NEG_INFINITY {
                lp
            } else {
                lp_mode + self.beta * (lp - lp_mode)
            }
        } else {
            // log G(x,β): the Gaussian normalisers cancel, leaving log π(μ) - βQ/2.
            lp_mode - 0.5 * self.beta * q
        };
        HatEval {
            log_density,
            allocation: hot,
            mahalanobis_sq: q,
        }
    }
}

impl TemperedTarget for HatTarget {
    fn beta(&self) -> f64 {
        self.beta
    }
    fn dim(&self) -> usize {
        self.base.dim()
    }
    fn log_density(&self, x: &[f64]) -> f64 {
        self.evaluate(x).log_density
    }
    fn log_density_and_allocation(&self, x: &[f64]) -> (f64, Option<usize>) {
        let e = self.evaluate(x);
        (e.log_density, Some(e.allocation))
    }
    fn registry(&self) -> Option<&ModeRegistry> {
        Some(&self.registry)
    }
}

/// Evaluates the HAT log-density; `Err(NoModes)` for an empty registry.
pub fn hat_log_density(
    base: Arc<dyn TargetDensity>,
    registry: Arc<ModeRegistry>,
    beta: f64,
    x: &[f64],
) -> Result<f64> {
    Ok(HatTarget::new(base, registry, beta)?.log_density(x))
}

/// HAT target set to zero outside `(x-μ_A)ᵀ Σ_A⁻¹ (x-μ_A) < q`.
#[derive(Clone)]
pub struct TruncatedHatTarget {
    inner: HatTarget,
    q: f64,
}

impl TruncatedHatTarget {
    pub fn new(inner: HatTarget, q: f64) -> Result<Self> {
        if !(q > 0.0) {
            return Err(Error::InvalidArgument(format!("truncation radius must be positive, got {q}")));
        }
        Ok(Self { inner, q })
    }

    /// Truncation at the chi-squared(d) quantile of level `p`.
    pub fn at_quantile(inner: HatTarget, p: f64) -> Result<Self> {
        let q = default_truncation(inner.dim(), p);
        Self::new(inner, q)
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn inner(&self) -> &HatTarget {
        &self.inner
    }

    pub fn evaluate(&self, x: &[f64]) -> HatEval {
        let mut eval = self.inner.evaluate(x);
        if !(eval.mahalanobis_sq < self.q) {
            eval.log_density = f64::NEG_INFINITY;
        }
        eval
    }
}

impl TemperedTarget for TruncatedHatTarget {
    fn beta(&self) -> f64 {
        self.inner.beta
    }
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn log_density(&self, x: &[f64]) -> f64 {
        self.evaluate(x).log_density
    }
    fn log_density_and_allocation(&self, x: &[f64]) -> (f64, Option<usize>) {
        let e = self.evaluate(x);
        (e.log_density, Some(e.allocation))
    }
    fn registry(&self) -> Option<&ModeRegistry> {
        Some(&self.inner.registry)
    }
}

/// Default truncation level of the chi-squared(d) distribution.
pub const DEFAULT_TRUNCATION_LEVEL: f64 = 0.9999;

/// Chi-squared(d) quantile used as the truncation radius.
pub fn default_truncation(dim: usize, level: f64) -> f64 {
    chi_squared_quantile(level, dim as f64)
}
