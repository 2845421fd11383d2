//! Component-wise (tempered) rescaled mixtures with an elliptical base shape.
//!
//! These are reference constructions: they are used to check how power
//! tempering and weight-preserving tempering move mass between components.

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::numeric::{chol_log_det, chol_quad_form, cholesky_lower, logsumexp, LN_2PI};

/// Standardised base density `g`, with its global maximum at 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BaseShape {
    Gaussian,
    StudentT { nu: f64 },
}

impl BaseShape {
    /// `log g(z)` as a function of `|z|²` in dimension `d`.
    pub fn log_g(&self, r2: f64, d: usize) -> f64 {
        let d = d as f64;
        match *self {
            BaseShape::Gaussian => -0.5 * d * LN_2PI - 0.5 * r2,
            BaseShape::StudentT { nu } => {
                ln_gamma(0.5 * (nu + d)) - ln_gamma(0.5 * nu) - 0.5 * d * (nu * std::f64::consts::PI).ln()
                    - 0.5 * (nu + d) * (r2 / nu).ln_1p()
            }
        }
    }

    /// `log ∫ g(z)^β dz` over `R^d`.
    pub fn log_tempered_mass(&self, beta: f64, d: usize) -> Result<f64> {
        let df = d as f64;
        match *self {
            BaseShape::Gaussian => Ok(-0.5 * df * beta * LN_2PI + 0.5 * df * (LN_2PI - beta.ln())),
            BaseShape::StudentT { nu } => {
                let p = 0.5 * beta * (nu + df);
                if !(p > 0.5 * df) {
                    return Err(Error::UnsupportedShape(format!(
                        "Student-t with nu = {nu} raised to beta = {beta} is not integrable in dimension {d}"
                    )));
                }
                let log_c = self.log_g(0.0, d);
                Ok(beta * log_c + 0.5 * df * (nu * std::f64::consts::PI).ln() + ln_gamma(p - 0.5 * df)
                    - ln_gamma(p))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemperingMode {
    /// `b_j = a_j^β`.
    Power,
    /// `b_j = a_j^β a_j(μ_j)^{1-β}`.
    WeightPreserving,
}

#[derive(Debug, Clone)]
pub struct CtrmdComponent {
    pub weight: f64,
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    chol: DMatrix<f64>,
    log_det: f64,
}

impl CtrmdComponent {
    pub fn new(weight: f64, mu: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        if !(weight > 0.0) {
            return Err(Error::InvalidArgument(format!("component weight must be positive, got {weight}")));
        }
        if sigma.nrows() != mu.len() || sigma.ncols() != mu.len() {
            return Err(Error::DimensionMismatch {
                expected: mu.len(),
                got: sigma.nrows(),
            });
        }
        let chol = cholesky_lower(&sigma).map_err(|pivot| Error::NotPositiveDefinite { pivot })?;
        let log_det = chol_log_det(&chol);
        Ok(Self {
            weight,
            mu,
            sigma,
            chol,
            log_det,
        })
    }

    /// `|s_j(x)|²`.
    pub fn scaled_radius_sq(&self, x: &[f64]) -> f64 {
        let diff: Vec<f64> = x.iter().zip(self.mu.iter()).map(|(a, b)| a - b).collect();
        chol_quad_form(&self.chol, &diff)
    }

    pub fn log_det_sigma(&self) -> f64 {
        self.log_det
    }
}

#[derive(Debug, Clone)]
pub struct CtrmdSpec {
    components: Vec<CtrmdComponent>,
    shape: BaseShape,
    dim: usize,
}

impl CtrmdSpec {
    pub fn new(components: Vec<CtrmdComponent>, shape: BaseShape) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::InvalidArgument("a mixture needs at least one component".into()))?;
        let dim = first.mu.len();
        for c in &components {
            if c.mu.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: c.mu.len(),
                });
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("weights must sum to 1, got {total}")));
        }
        Ok(Self {
            components,
            shape,
            dim,
        })
    }

    pub fn components(&self) -> &[CtrmdComponent] {
        &self.components
    }

    pub fn shape(&self) -> BaseShape {
        self.shape
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Normalised `W_{(j,β)}` in log-space.
    pub fn log_tempered_weights(&self, beta: f64, mode: TemperingMode) -> Vec<f64> {
        let raw: Vec<f64> = self
            .components
            .iter()
            .map(|c| match mode {
                TemperingMode::Power => beta * c.weight.ln() + 0.5 * (1.0 - beta) * c.log_det,
                TemperingMode::WeightPreserving => c.weight.ln(),
            })
            .collect();
        let z = logsumexp(&raw);
        raw.into_iter().map(|r| r - z).collect()
    }

    /// `log b_j(x,β)` for each component, with `W` normalised so the
    /// components integrate to the tempered weights.
    pub fn component_log_terms(&self, x: &[f64], beta: f64, mode: TemperingMode) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        let log_mass = self.shape.log_tempered_mass(beta, self.dim)?;
        let weights = self.log_tempered_weights(beta, mode);
        Ok(self
            .components
            .iter()
            .zip(weights)
            .map(|(c, lw)| {
                let r2 = c.scaled_radius_sq(x);
                lw + beta * self.shape.log_g(r2, self.dim) - log_mass - 0.5 * c.log_det
            })
            .collect())
    }
}

/// `log γ(x)` of the untempered mixture, normalised.
pub fn crmd_log_density(spec: &CtrmdSpec, x: &[f64]) -> Result<f64> {
    let terms: Vec<f64> = spec
        .components
        .iter()
        .map(|c| c.weight.ln() - 0.5 * c.log_det + spec.shape.log_g(c.scaled_radius_sq(x), spec.dim))
        .collect();
    Ok(logsumexp(&terms))
}

/// `log γ_β(x)`, normalised to integrate to one.
pub fn ctrmd_log_density(spec: &CtrmdSpec, x: &[f64], beta: f64, mode: TemperingMode) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
    }
    Ok(logsumexp(&spec.component_log_terms(x, beta, mode)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn comp1(w: f64, mu: f64, var: f64) -> CtrmdComponent {
        CtrmdComponent::new(w, DVector::from_element(1, mu), DMatrix::from_element(1, 1, var)).unwrap()
    }

    #[test]
    fn beta_one_matches_crmd() {
        for shape in [BaseShape::Gaussian, BaseShape::StudentT { nu: 3.0 }] {
            let spec = CtrmdSpec::new(vec![comp1(0.3, -2.0, 0.5), comp1(0.7, 3.0, 4.0)], shape).unwrap();
            for x in [-4.0, -2.0, 0.0, 1.3, 7.0] {
                let crmd = crmd_log_density(&spec, &[x]).unwrap();
                for mode in [TemperingMode::Power, TemperingMode::WeightPreserving] {
                    assert_relative_eq!(ctrmd_log_density(&spec, &[x], 1.0, mode).unwrap(), crmd, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn power_weights_distort_with_scale() {
        // Σ = (σ² I, I), w = (½, ½): at β = 2 the power weights are ∝ (σ²)^{-d/2}, 1.
        let d = 5;
        let s2: f64 = 4.0;
        let spec = CtrmdSpec::new(
            vec![
                CtrmdComponent::new(0.5, DVector::zeros(d), DMatrix::identity(d, d) * s2).unwrap(),
                CtrmdComponent::new(0.5, DVector::from_element(d, 50.0), DMatrix::identity(d, d)).unwrap(),
            ],
            BaseShape::Gaussian,
        )
        .unwrap();
        let wp = spec.log_tempered_weights(2.0, TemperingMode::Power);
        assert_relative_eq!(wp[0] - wp[1], -(d as f64) / 2.0 * s2.ln(), epsilon = 1e-12);
        let ww = spec.log_tempered_weights(2.0, TemperingMode::WeightPreserving);
        assert_relative_eq!(ww[0].exp(), 0.5, epsilon = 1e-14);
        assert_relative_eq!(ww[1].exp(), 0.5, epsilon = 1e-14);
    }

    #[test]
    fn gaussian_tempered_mass() {
        // ∫ φ(z)^β dz = (2π)^{(1-β)/2} β^{-1/2} in 1-d
        let beta: f64 = 3.0;
        let want = 0.5 * (1.0 - beta) * LN_2PI - 0.5 * beta.ln();
        assert_relative_eq!(BaseShape::Gaussian.log_tempered_mass(beta, 1).unwrap(), want, epsilon = 1e-14);
    }

    #[test]
    fn student_t_requires_integrable_power() {
        let t = BaseShape::StudentT { nu: 1.0 };
        assert!(matches!(t.log_tempered_mass(0.5, 1), Err(Error::UnsupportedShape(_))));
        assert!(t.log_tempered_mass(1.0, 1).is_ok());
        // β = 1 gives the normalised density
        assert_relative_eq!(t.log_tempered_mass(1.0, 3).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn rejects_bad_weights() {
        assert!(CtrmdSpec::new(vec![comp1(0.3, 0.0, 1.0)], BaseShape::Gaussian).is_err());
        assert!(CtrmdComponent::new(-0.1, DVector::zeros(1), DMatrix::identity(1, 1)).is_err());
        assert!(CtrmdComponent::new(1.0, DVector::zeros(1), DMatrix::from_element(1, 1, -1.0)).is_err());
    }
}
