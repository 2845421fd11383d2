//! Discovered modes and their Laplace-approximation weights.
//!
//! A [`ModeRegistry`] is append-only: chain targets refer to modes by index,
//! so an index, once handed out, always denotes the same mode. Weights are
//! kept in log-space and renormalised on every insertion.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{chol_log_det, chol_quad_form, cholesky_lower, logsumexp};

/// A mode point with its Laplace covariance `Σ = -H⁻¹`.
#[derive(Debug, Clone)]
pub struct ModeInfo {
    mu: DVector<f64>,
    sigma: DMatrix<f64>,
    sigma_chol: DMatrix<f64>,
    log_pi_at_mode: f64,
    log_det_sigma: f64,
}

impl ModeInfo {
    /// Builds a mode from an explicit covariance.
    pub fn new(mu: DVector<f64>, sigma: DMatrix<f64>, log_pi_at_mode: f64) -> Result<Self> {
        let d = mu.len();
        if sigma.nrows() != d || sigma.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: sigma.nrows(),
            });
        }
        for i in 0..d {
            for j in 0..i {
                let (a, b) = (sigma[(i, j)], sigma[(j, i)]);
                let scale = a.abs().max(b.abs()).max(f64::MIN_POSITIVE);
                if (a - b).abs() > 1e-8 * scale {
                    return Err(Error::InvalidArgument(format!(
                        "covariance not symmetric at ({i},{j}): {a} vs {b}"
                    )));
                }
            }
        }
        let sigma_chol =
            cholesky_lower(&sigma).map_err(|pivot| Error::NotPositiveDefinite { pivot })?;
        Ok(Self::from_parts(mu, sigma, sigma_chol, log_pi_at_mode))
    }

    /// Builds a mode from the Hessian of `log π` at `mu`.
    pub fn from_hessian(mu: DVector<f64>, hess: &DMatrix<f64>, log_pi_at_mode: f64) -> Result<Self> {
        if hess.nrows() != mu.len() {
            return Err(Error::DimensionMismatch {
                expected: mu.len(),
                got: hess.nrows(),
            });
        }
        let cov = covariance_from_hessian(hess)?;
        Ok(Self::from_parts(mu, cov.sigma, cov.sigma_chol, log_pi_at_mode))
    }

    fn from_parts(
        mu: DVector<f64>,
        sigma: DMatrix<f64>,
        sigma_chol: DMatrix<f64>,
        log_pi_at_mode: f64,
    ) -> Self {
        let log_det_sigma = chol_log_det(&sigma_chol);
        Self {
            mu,
            sigma,
            sigma_chol,
            log_pi_at_mode,
            log_det_sigma,
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn sigma_chol(&self) -> &DMatrix<f64> {
        &self.sigma_chol
    }

    pub fn log_pi_at_mode(&self) -> f64 {
        self.log_pi_at_mode
    }

    pub fn log_det_sigma(&self) -> f64 {
        self.log_det_sigma
    }

    /// `(x - μ)ᵀ Σ⁻¹ (x - μ)`.
    pub fn mahalanobis_sq(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        let mut buf = [0.0f64; 32];
        if d <= buf.len() {
            for i in 0..d {
                buf[i] = x[i] - self.mu[i];
            }
            chol_quad_form(&self.sigma_chol, &buf[..d])
        } else {
            let diff: Vec<f64> = x.iter().zip(self.mu.iter()).map(|(a, b)| a - b).collect();
            chol_quad_form(&self.sigma_chol, &diff)
        }
    }
}

/// `Σ = -H⁻¹` together with its Cholesky factor and log-determinant.
#[derive(Debug, Clone)]
pub struct Covariance {
    pub sigma: DMatrix<f64>,
    pub sigma_chol: DMatrix<f64>,
    pub log_det_sigma: f64,
}

/// Inverts the negated Hessian through its Cholesky factor.
///
/// If `-H` is not positive definite a single jitter of
/// `1e-10 · max|diag|` is added before giving up.
pub fn covariance_from_hessian(hess: &DMatrix<f64>) -> Result<Covariance> {
    let d = hess.nrows();
    if hess.ncols() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: hess.ncols(),
        });
    }
    let neg = -hess;
    let precision_chol = match cholesky_lower(&neg) {
        Ok(l) => l,
        Err(first_pivot) => {
            let max_diag = (0..d).map(|i| neg[(i, i)].abs()).fold(0.0, f64::max);
            let eps = 1e-10 * max_diag;
            if eps == 0.0 {
                return Err(Error::IndefiniteHessian { pivot: first_pivot });
            }
            let jittered = &neg + DMatrix::<f64>::identity(d, d) * eps;
            cholesky_lower(&jittered).map_err(|pivot| Error::IndefiniteHessian { pivot })?
        }
    };
    // Σ = (L Lᵀ)⁻¹, one column at a time.
    let mut sigma = DMatrix::<f64>::zeros(d, d);
    let mut e = vec![0.0; d];
    for j in 0..d {
        e.iter_mut().for_each(|v| *v = 0.0);
        e[j] = 1.0;
        let col = crate::numeric::chol_solve(&precision_chol, &e);
        sigma.set_column(j, &col);
    }
    let sigma = (&sigma + sigma.transpose()) * 0.5;
    let sigma_chol =
        cholesky_lower(&sigma).map_err(|pivot| Error::IndefiniteHessian { pivot })?;
    let log_det_sigma = chol_log_det(&sigma_chol);
    Ok(Covariance {
        sigma,
        sigma_chol,
        log_det_sigma,
    })
}

/// Log of the normalised Laplace weights `ŵ_j ∝ π(μ_j) |Σ_j|^{1/2}`.
pub fn approximate_log_weights(modes: &[ModeInfo]) -> Result<Vec<f64>> {
    if modes.is_empty() {
        return Err(Error::NoModes);
    }
    let raw: Vec<f64> = modes
        .iter()
        .map(|m| m.log_pi_at_mode + 0.5 * m.log_det_sigma)
        .collect();
    let norm = logsumexp(&raw);
    Ok(raw.into_iter().map(|r| r - norm).collect())
}

/// Normalised Laplace weights.
pub fn approximate_weights(modes: &[ModeInfo]) -> Result<Vec<f64>> {
    Ok(approximate_log_weights(modes)?
        .into_iter()
        .map(f64::exp)
        .collect())
}

/// `d⁻¹ max{Δᵀ Σ_a⁻¹ Δ, Δᵀ Σ_b⁻¹ Δ}` with `Δ = μ_a - μ_b`.
pub fn pseudo_distance(a: &ModeInfo, b: &ModeInfo) -> Result<f64> {
    let d = a.dim();
    if b.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: b.dim(),
        });
    }
    let diff: Vec<f64> = a.mu.iter().zip(b.mu.iter()).map(|(x, y)| x - y).collect();
    let qa = chol_quad_form(&a.sigma_chol, &diff);
    let qb = chol_quad_form(&b.sigma_chol, &diff);
    Ok(qa.max(qb) / d as f64)
}

/// Suggested dedup tolerance `1 + (2/d)^{1/2}`.
pub fn default_tolerance(dim: usize) -> f64 {
    1.0 + (2.0 / dim as f64).sqrt()
}

/// Outcome of [`ModeRegistry::try_insert`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Insertion {
    pub inserted: bool,
    /// Smallest pseudo-distance to an existing mode (`+inf` when empty).
    pub min_distance: f64,
}

/// Append-only collection of modes with normalised log-weights.
#[derive(Debug, Clone)]
pub struct ModeRegistry {
    dim: usize,
    tol: f64,
    modes: Vec<ModeInfo>,
    log_weights: Vec<f64>,
    version: u64,
}

impl ModeRegistry {
    pub fn new(dim: usize, tol: f64) -> Self {
        assert!(dim > 0, "dimension must be positive");
        Self {
            dim,
            tol,
            modes: Vec::new(),
            log_weights: Vec::new(),
            version: 0,
        }
    }

    pub fn with_default_tolerance(dim: usize) -> Self {
        Self::new(dim, default_tolerance(dim))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tol(&self) -> f64 {
        self.tol
    }

    /// Incremented once per successful insertion.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn modes(&self) -> &[ModeInfo] {
        &self.modes
    }

    pub fn mode(&self, idx: usize) -> &ModeInfo {
        &self.modes[idx]
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|w| w.exp()).collect()
    }

    /// Smallest pseudo-distance from `candidate` to a registered mode.
    pub fn min_distance(&self, candidate: &ModeInfo) -> Result<f64> {
        let mut best = f64::INFINITY;
        for m in &self.modes {
            best = best.min(pseudo_distance(m, candidate)?);
        }
        Ok(best)
    }

    /// Appends `candidate` if it is farther than `tol` from every known mode.
    pub fn try_insert(&mut self, candidate: ModeInfo) -> Result<Insertion> {
        if candidate.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: candidate.dim(),
            });
        }
        let min_distance = self.min_distance(&candidate)?;
        if min_distance > self.tol {
            self.modes.push(candidate);
            self.log_weights = approximate_log_weights(&self.modes)?;
            self.version += 1;
            Ok(Insertion {
                inserted: true,
                min_distance,
            })
        } else {
            Ok(Insertion {
                inserted: false,
                min_distance,
            })
        }
    }

    pub fn to_json_value(&self) -> RegistryFile {
        RegistryFile {
            version: self.version,
            dim: self.dim,
            tol: self.tol,
            modes: self
                .modes
                .iter()
                .map(|m| ModeRecord {
                    mu: m.mu.iter().copied().collect(),
                    sigma: (0..self.dim)
                        .map(|i| m.sigma.row(i).iter().copied().collect())
                        .collect(),
                    log_pi_at_mode: m.log_pi_at_mode,
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_json_value())?)
    }

    /// Parses the JSON layout written by [`ModeRegistry::to_json`];
    /// weights are recomputed from the stored modes.
    pub fn from_json(text: &str) -> Result<Self> {
        let file: RegistryFile = serde_json::from_str(text)?;
        Self::from_file(file)
    }

    pub fn from_file(file: RegistryFile) -> Result<Self> {
        let mut modes = Vec::with_capacity(file.modes.len());
        for rec in file.modes {
            if rec.mu.len() != file.dim || rec.sigma.len() != file.dim {
                return Err(Error::DimensionMismatch {
                    expected: file.dim,
                    got: rec.mu.len(),
                });
            }
            let mut sigma = DMatrix::<f64>::zeros(file.dim, file.dim);
            for (i, row) in rec.sigma.iter().enumerate() {
                if row.len() != file.dim {
                    return Err(Error::DimensionMismatch {
                        expected: file.dim,
                        got: row.len(),
                    });
                }
                for (j, v) in row.iter().enumerate() {
                    sigma[(i, j)] = *v;
                }
            }
            modes.push(ModeInfo::new(
                DVector::from_vec(rec.mu),
                sigma,
                rec.log_pi_at_mode,
            )?);
        }
        let log_weights = if modes.is_empty() {
            Vec::new()
        } else {
            approximate_log_weights(&modes)?
        };
        Ok(Self {
            dim: file.dim,
            tol: file.tol,
            modes,
            log_weights,
            version: file.version,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistryFile {
    pub version: u64,
    pub dim: usize,
    pub tol: f64,
    pub modes: Vec<ModeRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeRecord {
    pub mu: Vec<f64>,
    pub sigma: Vec<Vec<f64>>,
    pub log_pi_at_mode: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn mode1(mu: f64, var: f64, log_pi: f64) -> ModeInfo {
        ModeInfo::new(
            DVector::from_element(1, mu),
            DMatrix::from_element(1, 1, var),
            log_pi,
        )
        .unwrap()
    }

    #[test]
    fn weights_equal_modes() {
        let w = approximate_weights(&[mode1(0.0, 1.0, -3.0), mode1(5.0, 1.0, -3.0)]).unwrap();
        assert_relative_eq!(w[0], 0.5, epsilon = 1e-15);
        assert_relative_eq!(w[1], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn weights_height_ratio() {
        let w = approximate_weights(&[mode1(0.0, 1.0, 2f64.ln()), mode1(5.0, 1.0, 0.0)]).unwrap();
        assert_relative_eq!(w[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(w[1], 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn weights_volume_ratio() {
        let w = approximate_weights(&[mode1(0.0, 4.0, 0.0), mode1(5.0, 1.0, 0.0)]).unwrap();
        assert_relative_eq!(w[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(w[1], 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn weights_need_modes() {
        assert!(matches!(approximate_weights(&[]), Err(Error::NoModes)));
    }

    #[test]
    fn weights_survive_extreme_heights() {
        let w = approximate_weights(&[mode1(0.0, 1.0, -5000.0), mode1(5.0, 1.0, -5000.0 + 3f64.ln())])
            .unwrap();
        assert_relative_eq!(w[0], 0.25, epsilon = 1e-11);
    }

    #[test]
    fn covariance_of_negative_identity() {
        let c = covariance_from_hessian(&(-DMatrix::<f64>::identity(4, 4))).unwrap();
        assert_relative_eq!(c.sigma, DMatrix::identity(4, 4), epsilon = 1e-15);
        assert_relative_eq!(c.log_det_sigma, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn covariance_of_diagonal() {
        let h = DMatrix::from_diagonal(&DVector::from_vec(vec![-2.0, -0.5]));
        let c = covariance_from_hessian(&h).unwrap();
        assert_relative_eq!(c.sigma[(0, 0)], 0.5, epsilon = 1e-15);
        assert_relative_eq!(c.sigma[(1, 1)], 2.0, epsilon = 1e-15);
        assert_relative_eq!(c.sigma[(0, 1)], 0.0, epsilon = 1e-15);
        assert_relative_eq!(c.log_det_sigma, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn covariance_rejects_minimum() {
        let err = covariance_from_hessian(&DMatrix::identity(2, 2)).unwrap_err();
        assert!(matches!(err, Error::IndefiniteHessian { pivot: 0 }));
        assert!(err.to_string().contains("not a local maximum"));
    }

    #[test]
    fn covariance_jitter_rescues_semidefinite() {
        // -H = diag(1, 0): singular, jitter 1e-10 makes it PD
        let h = DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, 0.0]));
        let c = covariance_from_hessian(&h).unwrap();
        assert_relative_eq!(c.sigma[(1, 1)], 1e10, max_relative = 1e-9);
    }

    #[test]
    fn mode_invariants_hold() {
        let sigma = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 1.0, -0.2, 0.1, -0.2, 0.5]);
        let m = ModeInfo::new(DVector::zeros(3), sigma.clone(), 0.0).unwrap();
        let rec = m.sigma_chol() * m.sigma_chol().transpose();
        assert!((rec - &sigma).norm() / sigma.norm() < 1e-8);
        let diag_sum: f64 = (0..3).map(|i| m.sigma_chol()[(i, i)].ln()).sum();
        assert_eq!(m.log_det_sigma(), 2.0 * diag_sum);
    }

    #[test]
    fn asymmetric_covariance_rejected() {
        let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.3, 1.0]);
        assert!(ModeInfo::new(DVector::zeros(2), sigma, 0.0).is_err());
    }

    #[test]
    fn pseudo_distance_examples() {
        let a = mode1(0.0, 1.0, 0.0);
        assert_eq!(pseudo_distance(&a, &a).unwrap(), 0.0);
        assert_relative_eq!(pseudo_distance(&a, &mode1(1.0, 1.0, 0.0)).unwrap(), 1.0);
        assert_relative_eq!(
            pseudo_distance(&mode1(0.0, 4.0, 0.0), &mode1(2.0, 1.0, 0.0)).unwrap(),
            4.0
        );
        let b = ModeInfo::new(DVector::zeros(2), DMatrix::identity(2, 2), 0.0).unwrap();
        assert!(matches!(
            pseudo_distance(&a, &b),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn try_insert_examples() {
        let mut reg = ModeRegistry::new(1, 1.0 + 2f64.sqrt());
        assert!(reg.try_insert(mode1(0.0, 1.0, 0.0)).unwrap().inserted);
        assert_eq!(reg.version(), 1);
        let dup = reg.try_insert(mode1(0.0, 1.0, 0.0)).unwrap();
        assert!(!dup.inserted);
        assert_eq!(dup.min_distance, 0.0);
        assert_eq!(reg.version(), 1);
        let far = reg.try_insert(mode1(2.0, 1.0, 0.0)).unwrap();
        assert!(far.inserted);
        assert_relative_eq!(far.min_distance, 4.0);
        assert_eq!(reg.len(), 2);
        assert_relative_eq!(logsumexp(reg.log_weights()), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn default_tolerance_matches_rule() {
        assert_relative_eq!(default_tolerance(1), 1.0 + 2f64.sqrt());
        assert_relative_eq!(default_tolerance(20), 1.0 + 0.1f64.sqrt());
    }

    #[test]
    fn json_round_trip_recomputes_weights() {
        let mut reg = ModeRegistry::new(1, 0.5);
        reg.try_insert(mode1(0.0, 4.0, 0.0)).unwrap();
        reg.try_insert(mode1(10.0, 1.0, 0.0)).unwrap();
        let text = reg.to_json().unwrap();
        let back = ModeRegistry::from_json(&text).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.version(), 2);
        assert_relative_eq!(back.weights()[0], 2.0 / 3.0, epsilon = 1e-14);
        assert!(ModeRegistry::from_json(r#"{"version":0,"dim":1,"tol":1,"modes":[],"x":1}"#).is_err());
    }

    fn arb_mode(d: usize) -> impl Strategy<Value = ModeInfo> {
        (
            prop::collection::vec(-10.0..10.0f64, d),
            prop::collection::vec(0.2..3.0f64, d),
            -20.0..20.0f64,
        )
            .prop_map(|(mu, var, lp)| {
                ModeInfo::new(
                    DVector::from_vec(mu),
                    DMatrix::from_diagonal(&DVector::from_vec(var)),
                    lp,
                )
                .unwrap()
            })
    }

    proptest! {
        #[test]
        fn pseudo_distance_is_symmetric(a in arb_mode(3), b in arb_mode(3)) {
            let ab = pseudo_distance(&a, &b).unwrap();
            let ba = pseudo_distance(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-12 * ab.max(1.0));
        }

        #[test]
        fn weights_permutation_equivariant_and_scale_free(
            modes in prop::collection::vec(arb_mode(2), 1..6),
            shift in -50.0..50.0f64,
        ) {
            let w = approximate_weights(&modes).unwrap();
            let mut rev = modes.clone();
            rev.reverse();
            let wr = approximate_weights(&rev).unwrap();
            for (i, wi) in w.iter().enumerate() {
                prop_assert!((wi - wr[modes.len() - 1 - i]).abs() < 1e-12);
            }
            let shifted: Vec<ModeInfo> = modes
                .iter()
                .map(|m| ModeInfo::new(m.mu().clone(), m.sigma().clone(), m.log_pi_at_mode() + shift).unwrap())
                .collect();
            let ws = approximate_weights(&shifted).unwrap();
            for (a, b) in w.iter().zip(ws.iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn registry_keeps_modes_apart(cands in prop::collection::vec(arb_mode(2), 1..12)) {
            let mut reg = ModeRegistry::with_default_tolerance(2);
            for c in cands {
                reg.try_insert(c).unwrap();
            }
            for i in 0..reg.len() {
                for j in 0..reg.len() {
                    if i != j {
                        prop_assert!(pseudo_distance(reg.mode(i), reg.mode(j)).unwrap() > reg.tol());
                    }
                }
            }
            prop_assert!((logsumexp(reg.log_weights()) - 0.0).abs() < 1e-12);
        }
    }
}
