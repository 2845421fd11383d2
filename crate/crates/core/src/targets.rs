//! Benchmark targets: the skew-normal mixture, exact Gaussian mixtures, iid
//! product shapes for the scaling experiment, and the SUR profile likelihood.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::hat::TargetDensity;
use crate::numeric::{chol_log_det, chol_quad_form, chol_solve, cholesky_lower, log_ndtr, logsumexp, std_normal_log_pdf, LN_2PI};

const LN_2: f64 = std::f64::consts::LN_2;

/// `φ(u)/Φ(u)`, stable in both tails.
pub fn inverse_mills(u: f64) -> f64 {
    (std_normal_log_pdf(u) - log_ndtr(u)).exp()
}

/// Equally weighted mixture of products of skew-normals with common skew:
/// `Σ_k ¼ Π_j (2/ω_k) φ(z) Φ(α z)`, `z = (x_j - μ_kj)/ω_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct SkewNormalMixtureTarget {
    pub alpha: f64,
    pub mus: Vec<DVector<f64>>,
    pub omegas: Vec<f64>,
}

impl SkewNormalMixtureTarget {
    pub fn new(alpha: f64, mus: Vec<DVector<f64>>, omegas: Vec<f64>) -> Result<Self> {
        if mus.is_empty() || mus.len() != omegas.len() {
            return Err(Error::InvalidArgument("need one scale per component".into()));
        }
        let d = mus[0].len();
        if mus.iter().any(|m| m.len() != d) {
            return Err(Error::InvalidArgument("component locations differ in length".into()));
        }
        if omegas.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::InvalidArgument("scales must be positive".into()));
        }
        Ok(Self { alpha, mus, omegas })
    }

    /// The four-component benchmark: `μ_1 = (20,…) = -μ_2`,
    /// `μ_3 = (-10,…,-10, 10,…,10) = -μ_4`, `ω = (1,1,2,2)`.
    pub fn benchmark(dim: usize, alpha: f64) -> Self {
        let mu1 = DVector::from_element(dim, 20.0);
        let half = dim / 2;
        let mu3 = DVector::from_fn(dim, |i, _| if i < half { -10.0 } else { 10.0 });
        Self::new(alpha, vec![mu1.clone(), -mu1, mu3.clone(), -mu3], vec![1.0, 1.0, 2.0, 2.0])
            .expect("benchmark parameters are valid")
    }

    fn component_terms(&self, x: &[f64]) -> Vec<f64> {
        let lw = -(self.mus.len() as f64).ln();
        self.mus
            .iter()
            .zip(&self.omegas)
            .map(|(mu, &w)| {
                let c = LN_2 - w.ln();
                lw + x
                    .iter()
                    .zip(mu.iter())
                    .map(|(xi, mi)| {
                        let z = (xi - mi) / w;
                        c + std_normal_log_pdf(z) + log_ndtr(self.alpha * z)
                    })
                    .sum::<f64>()
            })
            .collect()
    }

    /// Index of the component with the largest density at `x`.
    pub fn dominant_component(&self, x: &[f64]) -> usize {
        let t = self.component_terms(x);
        let mut best = 0;
        for (k, v) in t.iter().enumerate() {
            if *v > t[best] {
                best = k;
            }
        }
        best
    }
}

impl TargetDensity for SkewNormalMixtureTarget {
    fn dim(&self) -> usize {
        self.mus[0].len()
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        logsumexp(&self.component_terms(x))
    }

    fn gradient(&self, x: &[f64]) -> Option<DVector<f64>> {
        let terms = self.component_terms(x);
        let total = logsumexp(&terms);
        let mut g = DVector::zeros(x.len());
        for ((mu, &w), t) in self.mus.iter().zip(&self.omegas).zip(&terms) {
            let r = (t - total).exp();
            if r == 0.0 {
                continue;
            }
            for (i, (xi, mi)) in x.iter().zip(mu.iter()).enumerate() {
                let z = (xi - mi) / w;
                g[i] += r * (-z + self.alpha * inverse_mills(self.alpha * z)) / w;
            }
        }
        Some(g)
    }
}

/// `P(Z < location)` for a skew-normal with shape `alpha`.
pub fn skew_normal_mass_below_location(alpha: f64) -> f64 {
    0.5 - alpha.atan() / std::f64::consts::PI
}

/// A finite Gaussian mixture with analytic gradient and Hessian.
#[derive(Debug, Clone)]
pub struct GaussianMixtureTarget {
    log_weights: Vec<f64>,
    mus: Vec<DVector<f64>>,
    chols: Vec<DMatrix<f64>>,
    precisions: Vec<DMatrix<f64>>,
    log_norms: Vec<f64>,
}

impl GaussianMixtureTarget {
    pub fn new(weights: Vec<f64>, mus: Vec<DVector<f64>>, sigmas: Vec<DMatrix<f64>>) -> Result<Self> {
        if weights.is_empty() || weights.len() != mus.len() || mus.len() != sigmas.len() {
            return Err(Error::InvalidArgument("mixture parts must have equal, non-zero length".into()));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::InvalidArgument("weights must be positive".into()));
        }
        let d = mus[0].len();
        let mut chols = Vec::new();
        let mut precisions = Vec::new();
        let mut log_norms = Vec::new();
        for (mu, s) in mus.iter().zip(&sigmas) {
            if mu.len() != d || s.nrows() != d || s.ncols() != d {
                return Err(Error::DimensionMismatch { expected: d, got: mu.len() });
            }
            let l = cholesky_lower(s).map_err(|pivot| Error::NotPositiveDefinite { pivot })?;
            let mut p = DMatrix::zeros(d, d);
            for j in 0..d {
                let mut e = vec![0.0; d];
                e[j] = 1.0;
                p.set_column(j, &chol_solve(&l, &e));
            }
            log_norms.push(-0.5 * (d as f64) * LN_2PI - 0.5 * chol_log_det(&l));
            chols.push(l);
            precisions.push(p);
        }
        Ok(Self {
            log_weights: weights.iter().map(|w| (w / total).ln()).collect(),
            mus,
            chols,
            precisions,
            log_norms,
        })
    }

    /// A single `N(μ, Σ)`.
    pub fn gaussian(mu: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        Self::new(vec![1.0], vec![mu], vec![sigma])
    }

    fn terms(&self, x: &[f64]) -> Vec<f64> {
        (0..self.mus.len())
            .map(|k| {
                let diff: Vec<f64> = x.iter().zip(self.mus[k].iter()).map(|(a, b)| a - b).collect();
                self.log_weights[k] + self.log_norms[k] - 0.5 * chol_quad_form(&self.chols[k], &diff)
            })
            .collect()
    }

    fn resp_and_scores(&self, x: &[f64]) -> (Vec<f64>, Vec<DVector<f64>>) {
        let t = self.terms(x);
        let z = logsumexp(&t);
        let xv = DVector::from_row_slice(x);
        let scores = (0..self.mus.len())
            .map(|k| -(&self.precisions[k] * (&xv - &self.mus[k])))
            .collect();
        (t.iter().map(|v| (v - z).exp()).collect(), scores)
    }

    pub fn mus(&self) -> &[DVector<f64>] {
        &self.mus
    }

    /// Component with the largest weighted density at `x`; ties go to the lower index.
    pub fn dominant_component(&self, x: &[f64]) -> usize {
        let t = self.terms(x);
        let mut best = 0;
        for (k, v) in t.iter().enumerate() {
            if *v > t[best] {
                best = k;
            }
        }
        best
    }
}

impl TargetDensity for GaussianMixtureTarget {
    fn dim(&self) -> usize {
        self.mus[0].len()
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        logsumexp(&self.terms(x))
    }

    fn gradient(&self, x: &[f64]) -> Option<DVector<f64>> {
        let (r, s) = self.resp_and_scores(x);
        let mut g = DVector::zeros(x.len());
        for (rk, sk) in r.iter().zip(&s) {
            g += sk * *rk;
        }
        Some(g)
    }

    fn hessian(&self, x: &[f64]) -> Option<DMatrix<f64>> {
        let (r, s) = self.resp_and_scores(x);
        let d = x.len();
        let mut g = DVector::zeros(d);
        let mut h = DMatrix::zeros(d, d);
        for k in 0..r.len() {
            g += &s[k] * r[k];
            h += (&s[k] * s[k].transpose() - &self.precisions[k]) * r[k];
        }
        Some(h - &g * g.transpose())
    }
}

/// One-dimensional log-shape `h` with its maximum at 0 and `h(0) = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape1d {
    /// `h(x) = -x²/2`.
    Gaussian,
    /// Skew-normal log-density recentred so its mode sits at 0.
    SkewNormal { alpha: f64 },
}

impl Shape1d {
    /// Mode of the un-shifted skew-normal log-density.
    fn skew_mode(alpha: f64) -> f64 {
        // h'(t) = -t + α m(αt) is strictly decreasing; bisect its root.
        let dh = |t: f64| -t + alpha * inverse_mills(alpha * t);
        let (mut lo, mut hi) = (-1.0f64, 1.0f64);
        while dh(lo) < 0.0 {
            lo *= 2.0;
        }
        while dh(hi) > 0.0 {
            hi *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if dh(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    fn raw(alpha: f64, t: f64) -> f64 {
        -0.5 * t * t + log_ndtr(alpha * t)
    }

    /// Returns a closure for `h`.
    pub fn h(&self) -> Box<dyn Fn(f64) -> f64 + Send + Sync> {
        match *self {
            Shape1d::Gaussian => Box::new(|x| -0.5 * x * x),
            Shape1d::SkewNormal { alpha } => {
                let delta = Self::skew_mode(alpha);
                let c = Self::raw(alpha, delta);
                Box::new(move |x| Self::raw(alpha, x + delta) - c)
            }
        }
    }

    /// `(h''(0), h'''(0))` by Richardson-extrapolated central differences.
    pub fn derivatives_at_zero(&self) -> (f64, f64) {
        let h = self.h();
        let d2 = |t: f64| (h(t) - 2.0 * h(0.0) + h(-t)) / (t * t);
        let d3 = |t: f64| (h(2.0 * t) - 2.0 * h(t) + 2.0 * h(-t) - h(-2.0 * t)) / (2.0 * t * t * t);
        (richardson(d2, 0.05, 5), richardson(d3, 0.05, 5))
    }

    /// Checks that `h` has a unique global maximum at 0 on a grid.
    pub fn check_unique_max(&self, half_width: f64, points: usize) -> Result<()> {
        let h = self.h();
        for i in 0..=points {
            let x = -half_width + 2.0 * half_width * i as f64 / points as f64;
            if x != 0.0 && !(h(x) < 0.0) {
                return Err(Error::InvalidArgument(format!("shape is not uniquely maximised at 0 (h({x}) = {})", h(x))));
            }
        }
        Ok(())
    }
}

/// Richardson extrapolation of an even-order-error difference quotient.
fn richardson<F: Fn(f64) -> f64>(f: F, t0: f64, levels: usize) -> f64 {
    let mut table: Vec<Vec<f64>> = Vec::with_capacity(levels);
    for i in 0..levels {
        let mut row = vec![f(t0 / 2f64.powi(i as i32))];
        for j in 1..=i {
            let p = 4f64.powi(j as i32);
            let v = (p * row[j - 1] - table[i - 1][j - 1]) / (p - 1.0);
            row.push(v);
        }
        table.push(row);
    }
    table[levels - 1][levels - 1]
}

/// `β Σ_i h(x_i)`.
pub struct IidProductTarget {
    pub shape: Shape1d,
    pub dim: usize,
    pub beta: f64,
    h: Box<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl IidProductTarget {
    pub fn new(shape: Shape1d, dim: usize, beta: f64) -> Self {
        Self {
            shape,
            dim,
            beta,
            h: shape.h(),
        }
    }

    pub fn h(&self, x: f64) -> f64 {
        (self.h)(x)
    }
}

impl TargetDensity for IidProductTarget {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        self.beta * x.iter().map(|v| (self.h)(*v)).sum::<f64>()
    }
}

/// SHA-256 of the bundled Grunfeld file.
pub const GRUNFELD_SHA256: &str = "487b2cd71d5f87e65c59acd5b2199e974b6f70209418cbec5b0e1aef7e6f8b17";

const GRUNFELD_CSV: &[u8] = include_bytes!("../data/grunfeld_greene.csv");

/// A seemingly-unrelated regression system with equal design width per equation.
#[derive(Debug, Clone, PartialEq)]
pub struct SurData {
    pub firms: Vec<String>,
    pub years: Vec<i64>,
    pub y: Vec<DVector<f64>>,
    pub x: Vec<DMatrix<f64>>,
}

impl SurData {
    pub fn new(firms: Vec<String>, years: Vec<i64>, y: Vec<DVector<f64>>, x: Vec<DMatrix<f64>>) -> Result<Self> {
        if y.is_empty() || y.len() != x.len() || firms.len() != y.len() {
            return Err(Error::Data("need one response and one design per equation".into()));
        }
        let n = y[0].len();
        let j = x[0].ncols();
        for (ym, xm) in y.iter().zip(&x) {
            if ym.len() != n || xm.nrows() != n || xm.ncols() != j {
                return Err(Error::Data("ragged equations".into()));
            }
        }
        Ok(Self { firms, years, y, x })
    }

    /// Number of equations.
    pub fn m(&self) -> usize {
        self.y.len()
    }

    /// Observations per equation.
    pub fn n(&self) -> usize {
        self.y[0].len()
    }

    /// Covariates per equation.
    pub fn j(&self) -> usize {
        self.x[0].ncols()
    }

    pub fn dim(&self) -> usize {
        self.m() * self.j()
    }

    pub fn residuals(&self, theta: &[f64]) -> Vec<DVector<f64>> {
        let j = self.j();
        (0..self.m())
            .map(|m| &self.y[m] - &self.x[m] * DVector::from_row_slice(&theta[m * j..(m + 1) * j]))
            .collect()
    }

    /// Reorders equations; `perm[i]` is the old index of new equation `i`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            firms: perm.iter().map(|&i| self.firms[i].clone()).collect(),
            years: self.years.clone(),
            y: perm.iter().map(|&i| self.y[i].clone()).collect(),
            x: perm.iter().map(|&i| self.x[i].clone()).collect(),
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Reads a Grunfeld-layout panel (`firm, year, invest, value, capital`) and
/// builds one equation per firm with design columns `(1, value, capital)`.
///
/// Firms keep their order of first appearance; `years` restricts to an
/// inclusive range.
pub fn parse_sur_csv<R: Read>(reader: R, years: Option<(i64, i64)>) -> Result<SurData> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("missing column '{name}'")))
    };
    let (c_firm, c_year, c_inv, c_val, c_cap) = (col("firm")?, col("year")?, col("invest")?, col("value")?, col("capital")?);

    let mut order: Vec<String> = Vec::new();
    let mut panels: HashMap<String, Vec<(i64, [f64; 3])>> = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec?;
        let field = |c: usize| rec.get(c).ok_or_else(|| Error::Data(format!("row {row}: too few fields")));
        let num = |c: usize, name: &str| -> Result<f64> {
            let s = field(c)?;
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Data(format!("row {row}: column '{name}' is not numeric: '{s}'")))
        };
        let firm = field(c_firm)?.to_string();
        let ys = field(c_year)?;
        let year: i64 = ys
            .parse()
            .map_err(|_| Error::Data(format!("row {row}: column 'year' is not an integer: '{ys}'")))?;
        let vals = [num(c_inv, "invest")?, num(c_val, "value")?, num(c_cap, "capital")?];
        if let Some((lo, hi)) = years {
            if year < lo || year > hi {
                continue;
            }
        }
        let panel = panels.entry(firm.clone()).or_insert_with(|| {
            order.push(firm.clone());
            Vec::new()
        });
        if panel.iter().any(|(y, _)| *y == year) {
            return Err(Error::Data(format!("row {row}: duplicate row for firm '{firm}', year {year}")));
        }
        panel.push((year, vals));
    }
    if order.is_empty() {
        return Err(Error::Data("no observations".into()));
    }
    for p in panels.values_mut() {
        p.sort_by_key(|(y, _)| *y);
    }
    let ref_years: Vec<i64> = panels[&order[0]].iter().map(|(y, _)| *y).collect();
    let mut ys = Vec::new();
    let mut xs = Vec::new();
    for f in &order {
        let p = &panels[f];
        let yrs: Vec<i64> = p.iter().map(|(y, _)| *y).collect();
        if yrs != ref_years {
            return Err(Error::Data(format!(
                "ragged panel: firm '{f}' has years {yrs:?}, expected {ref_years:?}"
            )));
        }
        ys.push(DVector::from_iterator(p.len(), p.iter().map(|(_, v)| v[0])));
        xs.push(DMatrix::from_fn(p.len(), 3, |r, c| if c == 0 { 1.0 } else { p[r].1[c] }));
    }
    SurData::new(order, ref_years, ys, xs)
}

/// Loads a SUR panel from disk, optionally checking its SHA-256.
pub fn load_sur_csv(path: &Path, years: Option<(i64, i64)>, sha256: Option<&str>) -> Result<SurData> {
    let bytes = std::fs::read(path)?;
    if let Some(want) = sha256 {
        let got = sha256_hex(&bytes);
        if got != want {
            return Err(Error::Data(format!("checksum mismatch for {}: {got}", path.display())));
        }
    }
    parse_sur_csv(bytes.as_slice(), years)
}

/// The bundled Grunfeld panel, five firms, restricted to `years`.
pub fn grunfeld(years: (i64, i64)) -> Result<SurData> {
    let got = sha256_hex(GRUNFELD_CSV);
    if got != GRUNFELD_SHA256 {
        return Err(Error::Data(format!("bundled Grunfeld data checksum mismatch: {got}")));
    }
    parse_sur_csv(GRUNFELD_CSV, Some(years))
}

/// The 1935–1949 subset (`M = 5, N = 15, J = 3`).
pub fn grunfeld_default() -> Result<SurData> {
    grunfeld((1935, 1949))
}

/// `Σ̂_{lm} = r_lᵀ r_m / N`.
pub fn sur_sigma_hat(theta: &[f64], data: &SurData) -> DMatrix<f64> {
    let r = data.residuals(theta);
    let n = data.n() as f64;
    DMatrix::from_fn(data.m(), data.m(), |l, m| r[l].dot(&r[m]) / n)
}

fn spd_inverse(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let l = cholesky_lower(sigma).map_err(|pivot| Error::NotPositiveDefinite { pivot })?;
    let m = sigma.nrows();
    let mut inv = DMatrix::zeros(m, m);
    for j in 0..m {
        let mut e = vec![0.0; m];
        e[j] = 1.0;
        inv.set_column(j, &chol_solve(&l, &e));
    }
    Ok(inv)
}

/// GLS estimate for a given residual covariance, assembled blockwise.
pub fn sur_gls_theta(sigma: &DMatrix<f64>, data: &SurData) -> Result<DVector<f64>> {
    let (m, j) = (data.m(), data.j());
    let s = spd_inverse(sigma)?;
    let mut a = DMatrix::<f64>::zeros(m * j, m * j);
    let mut b = DVector::<f64>::zeros(m * j);
    for l in 0..m {
        let xlt = data.x[l].transpose();
        for k in 0..m {
            let slk = s[(l, k)];
            a.view_mut((l * j, k * j), (j, j)).copy_from(&(&xlt * &data.x[k] * slk));
            let mut bl = b.rows_mut(l * j, j);
            bl += &xlt * &data.y[k] * slk;
        }
    }
    let lc = cholesky_lower(&a).map_err(|_| Error::Unidentifiable)?;
    Ok(chol_solve(&lc, b.as_slice()))
}

/// Equation-by-equation least squares.
pub fn sur_ols_theta(data: &SurData) -> Result<DVector<f64>> {
    sur_gls_theta(&DMatrix::identity(data.m(), data.m()), data)
}

/// `-N log 2π - (N/2) log|Σ̂(θ)| - N`; `-inf` when `Σ̂` is not positive definite.
pub fn sur_profile_loglik(theta: &[f64], data: &SurData) -> f64 {
    let n = data.n() as f64;
    match cholesky_lower(&sur_sigma_hat(theta, data)) {
        Ok(l) => -n * LN_2PI - 0.5 * n * chol_log_det(&l) - n,
        Err(_) => f64::NEG_INFINITY,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convergence {
    /// `max_i |Δθ_i| < tol`.
    MaxAbs,
    /// `‖Δθ‖ / ‖θ‖ < tol`.
    RelativeL2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZellnerFit {
    pub theta: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Profile log-likelihood after each iteration; entry 0 is the OLS start.
    pub trajectory: Vec<f64>,
}

/// Alternates `Σ̂(θ)` and the GLS update from the OLS start.
pub fn zellner_iterate(data: &SurData, tol: f64, max_iter: usize, rule: Convergence) -> Result<ZellnerFit> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument("tolerance must be positive".into()));
    }
    let mut theta = sur_ols_theta(data)?;
    let mut trajectory = vec![sur_profile_loglik(theta.as_slice(), data)];
    let scale = data.y.iter().map(|y| y.norm_squared()).sum::<f64>() / (data.m() * data.n()) as f64;
    for it in 1..=max_iter {
        let sigma = sur_sigma_hat(theta.as_slice(), data);
        if sigma.amax() <= 1e-28 * scale {
            // exact fit: θ already solves every equation
            return Ok(ZellnerFit {
                sigma,
                theta,
                iterations: it,
                converged: true,
                trajectory,
            });
        }
        let next = sur_gls_theta(&sigma, data)?;
        let diff = &next - &theta;
        let change = match rule {
            Convergence::MaxAbs => diff.amax(),
            Convergence::RelativeL2 => diff.norm() / theta.norm(),
        };
        theta = next;
        let ll = sur_profile_loglik(theta.as_slice(), data);
        if let Some(prev) = trajectory.last() {
            if ll < prev - 1e-9 * prev.abs() {
                log::info!("Zellner iteration {it}: profile log-likelihood decreased from {prev} to {ll}");
            }
        }
        trajectory.push(ll);
        if change < tol {
            return Ok(ZellnerFit {
                sigma: sur_sigma_hat(theta.as_slice(), data),
                theta,
                iterations: it,
                converged: true,
                trajectory,
            });
        }
    }
    Ok(ZellnerFit {
        sigma: sur_sigma_hat(theta.as_slice(), data),
        theta,
        iterations: max_iter,
        converged: false,
        trajectory,
    })
}

/// The SUR profile log-likelihood as a target over `θ` (flat prior).
#[derive(Debug, Clone)]
pub struct SurProfileTarget {
    pub data: SurData,
}

impl SurProfileTarget {
    pub fn new(data: SurData) -> Self {
        Self { data }
    }
}

impl TargetDensity for SurProfileTarget {
    fn dim(&self) -> usize {
        self.data.dim()
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        sur_profile_loglik(x, &self.data)
    }

    fn gradient(&self, x: &[f64]) -> Option<DVector<f64>> {
        let r = self.data.residuals(x);
        let n = self.data.n() as f64;
        let m = self.data.m();
        let sigma = DMatrix::from_fn(m, m, |l, k| r[l].dot(&r[k]) / n);
        let s = spd_inverse(&sigma).ok()?;
        let j = self.data.j();
        let mut g = DVector::zeros(m * j);
        for l in 0..m {
            let mut w = DVector::zeros(self.data.n());
            for k in 0..m {
                w += &r[k] * s[(l, k)];
            }
            g.rows_mut(l * j, j).copy_from(&(self.data.x[l].transpose() * w));
        }
        Some(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn benchmark_reflects_with_skew_sign() {
        // x -> -x swaps the ± component pairs and flips the skew
        let t = SkewNormalMixtureTarget::benchmark(20, 10.0);
        let r = SkewNormalMixtureTarget::benchmark(20, -10.0);
        let x: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin() * 15.0).collect();
        let nx: Vec<f64> = x.iter().map(|v| -v).collect();
        assert_relative_eq!(t.log_density(&x), r.log_density(&nx), max_relative = 1e-13);
        let s = SkewNormalMixtureTarget::benchmark(20, 0.0);
        assert_relative_eq!(s.log_density(&x), s.log_density(&nx), max_relative = 1e-13);
    }

    #[test]
    fn zero_skew_is_gaussian() {
        let mu = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let t = SkewNormalMixtureTarget::new(0.0, vec![mu.clone()], vec![2.0]).unwrap();
        let x = [0.3, -1.0, 2.0];
        let want: f64 = x
            .iter()
            .zip(mu.iter())
            .map(|(xi, mi)| -0.5 * LN_2PI - 2f64.ln() - 0.5 * ((xi - mi) / 2.0).powi(2))
            .sum();
        assert_relative_eq!(t.log_density(&x), want, epsilon = 1e-12);
    }

    #[test]
    fn benchmark_finite_far_out() {
        let t = SkewNormalMixtureTarget::benchmark(20, 10.0);
        assert!(t.log_density(&[-4000.0; 20]).is_finite());
        assert!(t.log_density(&[1e5; 20]).is_finite());
    }

    #[test]
    fn gaussian_mixture_hessian_at_mode() {
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let g = GaussianMixtureTarget::gaussian(DVector::from_vec(vec![1.0, 2.0]), s.clone()).unwrap();
        let h = g.hessian(&[1.0, 2.0]).unwrap();
        assert_relative_eq!(-h, s.try_inverse().unwrap(), epsilon = 1e-12);
        assert_relative_eq!(g.gradient(&[1.0, 2.0]).unwrap().norm(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn shapes() {
        assert!(Shape1d::Gaussian.derivatives_at_zero().1.abs() < 1e-8);
        let s = Shape1d::SkewNormal { alpha: 3.0 };
        let h = s.h();
        assert!(h(0.0).abs() < 1e-14);
        s.check_unique_max(10.0, 2001).unwrap();
        let (h2, _) = s.derivatives_at_zero();
        assert!(h2 < 0.0);
    }

    #[test]
    fn product_factorises() {
        let t = IidProductTarget::new(Shape1d::SkewNormal { alpha: 2.0 }, 3, 7.0);
        let x = [0.1, -0.4, 0.9];
        let sum: f64 = x.iter().map(|v| t.h(*v)).sum();
        assert_eq!(t.log_density(&x), 7.0 * sum);
    }

    fn fixture() -> &'static str {
        "firm,year,invest,value,capital\nA,2000,1,10,100\nA,2001,2,11,101\nA,2002,3,12,102\nB,2000,4,20,200\nB,2001,5,21,201\nB,2002,6,22,202\n"
    }

    #[test]
    fn minimal_fixture() {
        let d = parse_sur_csv(fixture().as_bytes(), None).unwrap();
        assert_eq!((d.m(), d.n(), d.j()), (2, 3, 3));
        assert_eq!(d.firms, vec!["A", "B"]);
        assert_eq!(d.x[1][(2, 2)], 202.0);
        assert_eq!(d.y[1][0], 4.0);
    }

    #[test]
    fn parse_errors() {
        let dup = format!("{}A,2001,2,11,101\n", fixture());
        let e = parse_sur_csv(dup.as_bytes(), None).unwrap_err().to_string();
        assert!(e.contains("duplicate") && e.contains("row 8"), "{e}");
        let e = parse_sur_csv("firm,year,invest,value\nA,1,1,1\n".as_bytes(), None).unwrap_err().to_string();
        assert!(e.contains("capital"), "{e}");
        let bad = fixture().replace("B,2001,5,", "B,2001,x,");
        let e = parse_sur_csv(bad.as_bytes(), None).unwrap_err().to_string();
        assert!(e.contains("row 6") && e.contains("invest"), "{e}");
        let ragged = fixture().replace("B,2002,6,22,202\n", "");
        let e = parse_sur_csv(ragged.as_bytes(), None).unwrap_err().to_string();
        assert!(e.contains("ragged"), "{e}");
    }

    #[test]
    fn grunfeld_shape() {
        let d = grunfeld_default().unwrap();
        assert_eq!((d.m(), d.n(), d.j(), d.dim()), (5, 15, 3, 15));
        assert_eq!(d.years.first(), Some(&1935));
        assert_eq!(d.years.last(), Some(&1949));
    }

    fn noiseless() -> (SurData, Vec<f64>) {
        let theta = vec![1.0, 0.5, -0.25, -2.0, 0.1, 0.3];
        let n = 6;
        let x: Vec<DMatrix<f64>> = (0..2)
            .map(|m| DMatrix::from_fn(n, 3, |r, c| if c == 0 { 1.0 } else { ((r * 7 + c * 3 + m * 5) % 11) as f64 }))
            .collect();
        let y: Vec<DVector<f64>> = (0..2)
            .map(|m| &x[m] * DVector::from_row_slice(&theta[m * 3..m * 3 + 3]))
            .collect();
        (SurData::new(vec!["a".into(), "b".into()], (0..n as i64).collect(), y, x).unwrap(), theta)
    }

    #[test]
    fn noiseless_system() {
        let (d, theta) = noiseless();
        assert_relative_eq!(sur_sigma_hat(&theta, &d).amax(), 0.0, epsilon = 1e-20);
        let ols = sur_ols_theta(&d).unwrap();
        for (a, b) in ols.iter().zip(&theta) {
            assert_relative_eq!(*a, *b, epsilon = 1e-10);
        }
    }

    #[test]
    fn single_equation_is_ols() {
        let d = grunfeld_default().unwrap().permuted(&[2]);
        let ols = sur_ols_theta(&d).unwrap();
        let g = sur_gls_theta(&DMatrix::from_element(1, 1, 17.0), &d).unwrap();
        assert_relative_eq!(ols, g, max_relative = 1e-10);
        let fit = zellner_iterate(&d, 1e-6, 50, Convergence::MaxAbs).unwrap();
        assert_eq!(fit.iterations, 1);
        let s = sur_sigma_hat(ols.as_slice(), &d);
        assert_relative_eq!(s[(0, 0)], d.residuals(ols.as_slice())[0].norm_squared() / 15.0, max_relative = 1e-12);
    }

    #[test]
    fn loglik_residual_scaling() {
        // same design, responses scaled by c about the fitted values → residuals scale by c
        let d = grunfeld_default().unwrap();
        let theta = sur_ols_theta(&d).unwrap();
        let c: f64 = 1.7;
        let mut scaled = d.clone();
        for m in 0..d.m() {
            let fitted = &d.x[m] * theta.rows(m * 3, 3);
            scaled.y[m] = &fitted + (&d.y[m] - &fitted) * c;
        }
        let drop = sur_profile_loglik(theta.as_slice(), &d) - sur_profile_loglik(theta.as_slice(), &scaled);
        assert_relative_eq!(drop, 15.0 * 5.0 * c.ln(), max_relative = 1e-10);
    }

    #[test]
    fn sur_gradient_matches_differences() {
        let d = grunfeld_default().unwrap();
        let t = SurProfileTarget::new(d.clone());
        let theta = sur_ols_theta(&d).unwrap();
        let mut x: Vec<f64> = theta.iter().map(|v| v * 1.01 + 0.5).collect();
        let g = t.gradient(&x).unwrap();
        for i in 0..x.len() {
            let h = 1e-6 * x[i].abs().max(1.0);
            let x0 = x[i];
            x[i] = x0 + h;
            let fp = t.log_density(&x);
            x[i] = x0 - h;
            let fm = t.log_density(&x);
            x[i] = x0;
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-4 * g[i].abs().max(1e-2), "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn zellner_noiseless_converges_fast() {
        let (d, theta) = noiseless();
        let fit = zellner_iterate(&d, 1e-6, 50, Convergence::MaxAbs).unwrap();
        assert!(fit.converged && fit.iterations <= 2);
        for (a, b) in fit.theta.iter().zip(&theta) {
            assert_relative_eq!(*a, *b, epsilon = 1e-10);
        }
    }
}
