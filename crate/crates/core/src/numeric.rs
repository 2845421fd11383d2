//! Log-space arithmetic, normal CDF helpers and small dense linear algebra.

use nalgebra::{DMatrix, DVector};
use libm::erfc;
use statrs::function::erf::erf_inv;
use statrs::function::gamma::gamma_lr;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;
const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// `log(sum(exp(xs)))`, returning `-inf` for an empty slice or all `-inf`.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Log-density of the standard normal.
#[inline]
pub fn std_normal_log_pdf(z: f64) -> f64 {
    -0.5 * z * z - 0.5 * LN_2PI
}

/// Standard normal CDF.
pub fn ndtr(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// `log Φ(x)` without underflow in the far left tail.
///
/// Below -37 `erfc` leaves the normal range, so the Mills-ratio asymptotic
/// series takes over; the truncation error there is below 2e-13 relative.
pub fn log_ndtr(x: f64) -> f64 {
    if x > 5.0 {
        (-0.5 * erfc(x / SQRT_2)).ln_1p()
    } else if x > -37.0 {
        (0.5 * erfc(-x / SQRT_2)).ln()
    } else {
        let r = 1.0 / (x * x);
        let series = 1.0 - r * (1.0 - 3.0 * r * (1.0 - 5.0 * r * (1.0 - 7.0 * r)));
        std_normal_log_pdf(x) - (-x).ln() + series.ln()
    }
}

/// Inverse of the standard normal CDF.
pub fn ndtri(p: f64) -> f64 {
    SQRT_2 * erf_inv(2.0 * p - 1.0)
}

/// Lower Cholesky factor of a symmetric matrix. On failure returns the
/// zero-based pivot at which a non-positive diagonal appeared.
pub fn cholesky_lower(a: &DMatrix<f64>) -> std::result::Result<DMatrix<f64>, usize> {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut diag = a[(j, j)];
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return Err(j);
        }
        let ljj = diag.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

/// Solves `L z = b` for lower-triangular `L`.
pub fn forward_solve(l: &DMatrix<f64>, b: &[f64]) -> DVector<f64> {
    let n = l.nrows();
    let mut z = DVector::<f64>::zeros(n);
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[(i, k)] * z[k];
        }
        z[i] = s / l[(i, i)];
    }
    z
}

/// Solves `Lᵀ z = b` for lower-triangular `L`.
pub fn backward_solve_transpose(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = l.nrows();
    let mut z = DVector::<f64>::zeros(n);
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= l[(k, i)] * z[k];
        }
        z[i] = s / l[(i, i)];
    }
    z
}

/// `vᵀ (L Lᵀ)⁻¹ v` via one forward substitution.
pub fn chol_quad_form(l: &DMatrix<f64>, v: &[f64]) -> f64 {
    let n = l.nrows();
    let mut buf = [0.0f64; 32];
    let mut heap;
    let z: &mut [f64] = if n <= buf.len() {
        &mut buf[..n]
    } else {
        heap = vec![0.0; n];
        &mut heap
    };
    z.copy_from_slice(&v[..n]);
    // column-oriented substitution keeps the reads contiguous
    let data = l.as_slice();
    let mut acc = 0.0;
    for k in 0..n {
        let col = &data[k * n..(k + 1) * n];
        let zk = z[k] / col[k];
        z[k] = zk;
        acc += zk * zk;
        for (zi, lik) in z[k + 1..].iter_mut().zip(&col[k + 1..]) {
            *zi -= lik * zk;
        }
    }
    acc
}

/// `2 Σ log L_ii`.
pub fn chol_log_det(l: &DMatrix<f64>) -> f64 {
    2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
}

/// Solves `(L Lᵀ) x = b`.
pub fn chol_solve(l: &DMatrix<f64>, b: &[f64]) -> DVector<f64> {
    let z = forward_solve(l, b);
    backward_solve_transpose(l, &z)
}

/// Quantile of the chi-squared distribution: Wilson–Hilferty start, refined
/// by bisection on the regularised lower incomplete gamma function.
pub fn chi_squared_quantile(p: f64, dof: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "probability must be in (0,1)");
    assert!(dof > 0.0, "degrees of freedom must be positive");
    let z = ndtri(p);
    let c = 2.0 / (9.0 * dof);
    let wh = dof * (1.0 - c + z * c.sqrt()).powi(3);
    let start = if wh.is_finite() && wh > 0.0 { wh } else { dof };
    let cdf = |x: f64| gamma_lr(0.5 * dof, 0.5 * x);

    let (mut lo, mut hi) = (start * 0.5, start * 2.0);
    while cdf(lo) > p {
        lo *= 0.5;
        if lo < 1e-300 {
            break;
        }
    }
    while cdf(hi) < p {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-14 * hi {
            break;
        }
    }
    0.5 * (lo + hi)
}
