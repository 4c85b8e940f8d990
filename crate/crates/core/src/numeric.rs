//! Numeric primitives shared by the fitters: the logistic link, normal and
//! chi-square(1) quantiles, per-replication random streams and a few dense
//! kernels.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};

/// Value and slope of the logistic cdf at a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkEval {
    pub value: f64,
    pub derivative: f64,
}

const SATURATION: f64 = 35.0;

/// Logistic cdf `exp(t) / (1 + exp(t))` and its derivative, overflow-safe.
pub fn logistic_link(t: f64) -> Result<LinkEval> {
    if !t.is_finite() {
        return Err(Error::Domain(format!("logistic link at non-finite {t}")));
    }
    Ok(link_unchecked(t))
}

#[inline]
pub(crate) fn link_unchecked(t: f64) -> LinkEval {
    if t < -SATURATION {
        let e = t.exp();
        LinkEval {
            value: e,
            derivative: e * (1.0 - e),
        }
    } else if t > SATURATION {
        let e = (-t).exp();
        LinkEval {
            value: 1.0 - e,
            derivative: e * (1.0 - e),
        }
    } else {
        // e / (1 + e)^2 with e = exp(-|t|) keeps the tail derivative accurate
        let e = (-t.abs()).exp();
        let denom = 1.0 + e;
        let value = if t >= 0.0 { 1.0 / denom } else { e / denom };
        LinkEval {
            value,
            derivative: e / (denom * denom),
        }
    }
}

/// Logistic cdf without the domain check; used in inner loops.
#[inline]
pub fn sigmoid(t: f64) -> f64 {
    link_unchecked(t).value
}

/// `log(1 + exp(t))` without overflow.
#[inline]
pub fn log1p_exp(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// Standard normal cdf through `erfc`, accurate in both tails.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal upper tail `1 - Phi(x)`.
pub fn normal_sf(x: f64) -> f64 {
    0.5 * libm::erfc(x / std::f64::consts::SQRT_2)
}

// Acklam's rational approximation coefficients.
const A: [f64; 6] = [
    -3.969683028665376e+01,
    2.209460984245205e+02,
    -2.759285104469687e+02,
    1.383577518672690e+02,
    -3.066479806614716e+01,
    2.506628277459239e+00,
];
const B: [f64; 5] = [
    -5.447609879822406e+01,
    1.615858368580409e+02,
    -1.556989798598866e+02,
    6.680131188771972e+01,
    -1.328068155288572e+01,
];
const C: [f64; 6] = [
    -7.784894002430293e-03,
    -3.223964580411365e-01,
    -2.400758277161838e+00,
    -2.549671660129120e+00,
    4.374664141464968e+00,
    2.938163982698783e+00,
];
const D: [f64; 4] = [
    7.784695709041462e-03,
    3.224671290700398e-01,
    2.445134137142996e+00,
    3.754408661907416e+00,
];
const P_LOW: f64 = 0.02425;

fn acklam(p: f64) -> f64 {
    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

/// Inverse standard normal cdf.
///
/// Acklam's rational approximation followed by one Halley step against the
/// `erfc`-based cdf. The lower half is computed directly and the upper half
/// by symmetry, so `1 - p` never loses digits.
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("normal quantile needs p in (0,1), got {p}")));
    }
    if p == 0.5 {
        return Ok(0.0);
    }
    if p > 0.5 {
        return Ok(-lower_quantile(1.0 - p));
    }
    Ok(lower_quantile(p))
}

fn lower_quantile(p: f64) -> f64 {
    let x = acklam(p);
    let e = normal_cdf(x) - p;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * x * x).exp();
    x - u / (1.0 + 0.5 * x * u)
}

/// Quantile of the chi-square distribution with one degree of freedom.
///
/// `p = 0` maps to 0; the upper end stays open.
pub fn chi2_1_quantile(p: f64) -> Result<f64> {
    if p == 0.0 {
        return Ok(0.0);
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("chi-square quantile needs p in [0,1), got {p}")));
    }
    let z = normal_quantile(0.5 * (1.0 + p))?;
    Ok(z * z)
}

/// Chi-square(1) cdf.
pub fn chi2_1_cdf(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        libm::erf((0.5 * x).sqrt())
    }
}

/// Counter-based random stream: ChaCha20 keyed by `seed`, with the stream
/// selector set to `stream_id`. Streams are independent of thread schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    pub fn rng(&self) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn mean(a: &[f64]) -> f64 {
    a.iter().sum::<f64>() / a.len() as f64
}

/// Solves `a x = b` for symmetric positive definite `a`.
pub fn spd_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let chol = a.clone().cholesky()?;
    let mut x = chol.solve(b);
    // one step of iterative refinement
    let r = b - a * &x;
    x += chol.solve(&r);
    Some(x)
}

/// Inverse of a symmetric positive definite matrix.
pub fn spd_inverse(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    a.clone().cholesky().map(|c| c.inverse())
}

/// Greedy elimination on a Gram matrix, visiting columns in order.
///
/// Column `k` is kept when its squared residual norm, after projecting out the
/// columns already kept, exceeds `rel_tol * gram[k,k]`. Returns the kept
/// positions.
pub fn independent_columns(gram: &DMatrix<f64>, rel_tol: f64) -> Vec<usize> {
    let m = gram.nrows();
    let mut kept: Vec<usize> = Vec::with_capacity(m);
    // rows of the partial Cholesky factor for kept columns
    let mut factor: Vec<Vec<f64>> = Vec::with_capacity(m);
    for k in 0..m {
        let diag = gram[(k, k)];
        if diag <= 0.0 {
            continue;
        }
        let mut row = Vec::with_capacity(kept.len());
        for (a, &j) in kept.iter().enumerate() {
            let s: f64 = (0..a).map(|b| factor[a][b] * row[b]).sum();
            row.push((gram[(k, j)] - s) / factor[a][a]);
        }
        let resid = diag - row.iter().map(|v| v * v).sum::<f64>();
        if resid > rel_tol * diag {
            row.push(resid.sqrt());
            factor.push(row);
            kept.push(k);
        }
    }
    kept
}
