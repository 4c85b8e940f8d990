//! Weighted Lasso and Post-Lasso of `f d` on `f x` with estimated penalty
//! loadings.
//!
//! Objective convention: `E_n[f^2 (d - x'theta)^2] + (lambda / n) sum_j g_j |theta_j|`
//! with no factor one half, so the first-order conditions read
//! `|E_n[f^2 x_j (d - x'theta)]| <= lambda g_j / (2n)`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numeric::{independent_columns, spd_solve};
use crate::pen_logistic::{penalty_lambda1, Step1Weights};

/// Relative pivot tolerance for dropping collinear columns in the refit.
pub const COLLINEAR_TOL: f64 = 1e-10;
const MIN_LOADING: f64 = 1e-12;

/// Second-stage penalty, `1.1 * 2 sqrt(n) Phi^-1(1 - 0.05 / max(n, p ln n))`,
/// i.e. four times the first-stage caption rule.
pub fn penalty_lambda2(n: usize, p: usize) -> f64 {
    4.0 * penalty_lambda1(n, p, 0.05)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadingsStage {
    Initial,
    Refined,
}

#[derive(Debug, Clone, Serialize)]
pub struct LoadingsVector {
    pub gamma: Vec<f64>,
    pub stage: LoadingsStage,
}

/// What stands in for the residual when computing loadings.
#[derive(Debug, Clone, Copy)]
pub enum ResidualSource<'a> {
    /// `f d - mean(f d)`: the initial stage.
    CenteredResponse,
    /// Weighted residuals `v = f (d - x'theta)`: the refined stage.
    Residuals(&'a [f64]),
}

/// Penalty loadings `sqrt(E_n[f^2 x_j^2 r^2])` for the chosen residual `r`.
pub fn compute_loadings(f_hat: &[f64], data: &Dataset, source: ResidualSource<'_>) -> Result<LoadingsVector> {
    let n = data.n();
    if f_hat.len() != n {
        return Err(Error::Argument("weight vector length mismatch".into()));
    }
    if let Some(i) = f_hat.iter().position(|&f| !(f > 0.0 && f <= 1.0)) {
        return Err(Error::Argument(format!("weight {i} is {} (must lie in (0,1])", f_hat[i])));
    }
    let (resid, stage) = match source {
        ResidualSource::CenteredResponse => {
            let fd: Vec<f64> = f_hat.iter().zip(data.d()).map(|(f, d)| f * d).collect();
            let m = fd.iter().sum::<f64>() / n as f64;
            (fd.into_iter().map(|v| v - m).collect::<Vec<_>>(), LoadingsStage::Initial)
        }
        ResidualSource::Residuals(v) => {
            if v.len() != n {
                return Err(Error::Argument("residual vector length mismatch".into()));
            }
            (v.to_vec(), LoadingsStage::Refined)
        }
    };
    let fr2: Vec<f64> = f_hat.iter().zip(&resid).map(|(f, r)| f * f * r * r).collect();
    let unpenalized = data.unpenalized();
    let mut gamma = Vec::with_capacity(data.p());
    for j in 0..data.p() {
        let g = (data.col(j).iter().zip(&fr2).map(|(x, w)| x * x * w).sum::<f64>() / n as f64).sqrt();
        if !(g >= MIN_LOADING) && !unpenalized.contains(&j) {
            return Err(Error::DegenerateLoading { column: j, value: g });
        }
        gamma.push(g);
    }
    Ok(LoadingsVector { gamma, stage })
}

/// Result of the penalized stage alone.
#[derive(Debug, Clone, Serialize)]
pub struct LassoStage {
    pub theta: Vec<f64>,
    /// Nonzero coefficients plus unpenalized columns, sorted.
    pub support: Vec<usize>,
    pub lambda2: f64,
    pub kkt_violation: f64,
    pub cycles: usize,
}

#[derive(Debug, Clone)]
pub struct WeightedLassoConfig {
    pub max_cycles: usize,
    pub kkt_tol: f64,
}

impl Default for WeightedLassoConfig {
    fn default() -> Self {
        Self {
            max_cycles: 100_000,
            kkt_tol: 1e-9,
        }
    }
}

fn thresholds(data: &Dataset, lambda2: f64, loadings: &LoadingsVector) -> Vec<f64> {
    let n = data.n() as f64;
    let unpenalized = data.unpenalized();
    loadings
        .gamma
        .iter()
        .enumerate()
        .map(|(j, g)| if unpenalized.contains(&j) { 0.0 } else { lambda2 * g / (2.0 * n) })
        .collect()
}

/// Weighted scores `E_n[f^2 x_j (d - x'theta)]`.
pub fn weighted_scores(data: &Dataset, f_hat: &[f64], theta: &[f64]) -> Vec<f64> {
    let n = data.n() as f64;
    let xt = data.x_times(theta);
    let r: Vec<f64> = (0..data.n()).map(|i| f_hat[i] * f_hat[i] * (data.d()[i] - xt[i])).collect();
    (0..data.p())
        .map(|j| crate::numeric::dot(data.col(j), &r) / n)
        .collect()
}

/// Largest violation of the weighted Lasso first-order conditions.
pub fn weighted_kkt_violation(
    data: &Dataset,
    f_hat: &[f64],
    theta: &[f64],
    lambda2: f64,
    loadings: &LoadingsVector,
) -> f64 {
    let thr = thresholds(data, lambda2, loadings);
    weighted_scores(data, f_hat, theta)
        .iter()
        .zip(theta)
        .zip(&thr)
        .map(|((&s, &t), &h)| {
            if t != 0.0 {
                (s - h * t.signum()).abs()
            } else {
                (s.abs() - h).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

/// Weighted Lasso `argmin E_n[f^2 (d - x'theta)^2] + (lambda2/n) ||Gamma theta||_1`
/// by cyclic coordinate descent.
pub fn fit_weighted_lasso(
    data: &Dataset,
    f_hat: &[f64],
    lambda2: f64,
    loadings: &LoadingsVector,
    config: &WeightedLassoConfig,
) -> Result<LassoStage> {
    let n = data.n();
    let nf = n as f64;
    let p = data.p();
    if f_hat.len() != n || loadings.gamma.len() != p {
        return Err(Error::Argument("weights or loadings have the wrong length".into()));
    }
    if !(lambda2 >= 0.0) {
        return Err(Error::Argument(format!("penalty must be nonnegative, got {lambda2}")));
    }
    let thr = thresholds(data, lambda2, loadings);
    let f2: Vec<f64> = f_hat.iter().map(|f| f * f).collect();
    let curv: Vec<f64> = (0..p)
        .map(|j| data.col(j).iter().zip(&f2).map(|(x, w)| w * x * x).sum::<f64>() / nf)
        .collect();
    let scale = (data.d().iter().zip(&f2).map(|(d, w)| w * d * d).sum::<f64>() / nf).sqrt().max(1e-300);

    let mut theta = vec![0.0; p];
    // weighted residual f^2 (d - x'theta)
    let mut wr: Vec<f64> = data.d().iter().zip(&f2).map(|(d, w)| w * d).collect();
    let mut active = vec![false; p];
    let mut cycles = 0;
    let mut full = true;
    let mut tol = 1e-12 * scale;
    loop {
        if cycles >= config.max_cycles {
            let kkt = weighted_kkt_violation(data, f_hat, &theta, lambda2, loadings);
            return Err(Error::NotConverged {
                solver: "weighted lasso",
                cycles,
                kkt_violation: kkt,
                last_iterate: theta,
            });
        }
        cycles += 1;
        let mut max_change = 0.0_f64;
        for j in 0..p {
            if !full && !active[j] {
                continue;
            }
            let a = curv[j];
            if a <= 0.0 {
                continue;
            }
            let c = data.col(j);
            let old = theta[j];
            let rho = crate::numeric::dot(c, &wr) / nf + a * old;
            let new = if rho > thr[j] {
                (rho - thr[j]) / a
            } else if rho < -thr[j] {
                (rho + thr[j]) / a
            } else {
                0.0
            };
            if new != old {
                let delta = new - old;
                for i in 0..n {
                    wr[i] -= f2[i] * delta * c[i];
                }
                theta[j] = new;
                max_change = max_change.max(delta.abs() * a.sqrt());
            }
            active[j] = new != 0.0;
        }
        if max_change < tol {
            if full {
                let kkt = weighted_kkt_violation(data, f_hat, &theta, lambda2, loadings);
                if kkt <= config.kkt_tol {
                    let support = support_of(data, &theta);
                    return Ok(LassoStage {
                        theta,
                        support,
                        lambda2,
                        kkt_violation: kkt,
                        cycles,
                    });
                }
                tol *= 0.1;
            }
            full = true;
        } else {
            full = false;
        }
    }
}

fn support_of(data: &Dataset, theta: &[f64]) -> Vec<usize> {
    let unpenalized = data.unpenalized();
    (0..theta.len())
        .filter(|&j| theta[j] != 0.0 || unpenalized.contains(&j))
        .collect()
}

/// Weighted least squares of `d` on `x_support` with weights `f^2`.
///
/// Collinear columns are removed by greedy pivoted elimination on the weighted
/// Gram matrix; returns the full-length coefficients and the dropped columns.
pub fn weighted_post_lasso(data: &Dataset, f_hat: &[f64], support: &[usize]) -> Result<(Vec<f64>, Vec<usize>)> {
    let n = data.n();
    let nf = n as f64;
    let mut theta = vec![0.0; data.p()];
    if support.is_empty() {
        return Ok((theta, Vec::new()));
    }
    let f2: Vec<f64> = f_hat.iter().map(|f| f * f).collect();
    let k = support.len();
    let mut gram = DMatrix::zeros(k, k);
    for a in 0..k {
        let ca = data.col(support[a]);
        for b in 0..=a {
            let cb = data.col(support[b]);
            let v = (0..n).map(|i| f2[i] * ca[i] * cb[i]).sum::<f64>() / nf;
            gram[(a, b)] = v;
            gram[(b, a)] = v;
        }
    }
    let keep = independent_columns(&gram, COLLINEAR_TOL);
    let dropped: Vec<usize> = (0..k).filter(|a| !keep.contains(a)).map(|a| support[a]).collect();
    let m = keep.len();
    if m == 0 {
        return Ok((theta, dropped));
    }
    let g = DMatrix::from_fn(m, m, |a, b| gram[(keep[a], keep[b])]);
    let rhs = DVector::from_fn(m, |a, _| {
        let c = data.col(support[keep[a]]);
        (0..n).map(|i| f2[i] * c[i] * data.d()[i]).sum::<f64>() / nf
    });
    let sol = spd_solve(&g, &rhs).ok_or_else(|| Error::Rank("weighted Gram matrix is singular".into()))?;
    for (a, &pos) in keep.iter().enumerate() {
        theta[support[pos]] = sol[a];
    }
    Ok((theta, dropped))
}

/// How Step 2 finishes after the final Lasso.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Step2Mode {
    /// Refit least squares on the selected columns.
    PostLasso,
    /// Keep the Lasso coefficients; only the support is used downstream.
    LassoOnly,
}

#[derive(Debug, Clone, Serialize)]
pub struct WeightedLassoFit {
    pub theta_hat: Vec<f64>,
    pub theta_tilde: Vec<f64>,
    pub support: Vec<usize>,
    pub lambda2: f64,
    /// `f (d - x'theta_tilde)`.
    pub v_hat: Vec<f64>,
    /// Estimated instrument.
    pub z_hat: Vec<f64>,
    pub loadings: LoadingsVector,
    /// Columns removed from the refit as collinear.
    pub dropped: Vec<usize>,
    pub mode: Step2Mode,
    pub kkt_violation: f64,
}

/// Two-pass loadings algorithm followed by the final Lasso and, in
/// post-Lasso mode, the refit.
///
/// The instrument is `z = v / sigma_hat`. In null-testing mode the weights are
/// 1, `v` is the unweighted residual and `z = v`.
pub fn run_step2(data: &Dataset, weights: &Step1Weights, lambda2: f64, mode: Step2Mode) -> Result<WeightedLassoFit> {
    let config = WeightedLassoConfig::default();
    let f = &weights.f_hat;

    let initial = compute_loadings(f, data, ResidualSource::CenteredResponse)?;
    let first = fit_weighted_lasso(data, f, lambda2, &initial, &config)?;
    let (theta_first, _) = weighted_post_lasso(data, f, &first.support)?;
    let v_first = weighted_residuals(data, f, &theta_first);

    let refined = compute_loadings(f, data, ResidualSource::Residuals(&v_first))?;
    let last = fit_weighted_lasso(data, f, lambda2, &refined, &config)?;

    let (theta_tilde, dropped) = match mode {
        Step2Mode::PostLasso => weighted_post_lasso(data, f, &last.support)?,
        Step2Mode::LassoOnly => (last.theta.clone(), Vec::new()),
    };
    let v_hat = weighted_residuals(data, f, &theta_tilde);
    let z_hat = if weights.h0_mode {
        v_hat.clone()
    } else {
        v_hat.iter().zip(&weights.sigma_hat).map(|(v, s)| v / s).collect()
    };
    Ok(WeightedLassoFit {
        theta_hat: last.theta,
        theta_tilde,
        support: last.support,
        lambda2,
        v_hat,
        z_hat,
        loadings: refined,
        dropped,
        mode,
        kkt_violation: last.kkt_violation,
    })
}

/// `f_i (d_i - x_i'theta)`.
pub fn weighted_residuals(data: &Dataset, f_hat: &[f64], theta: &[f64]) -> Vec<f64> {
    let xt = data.x_times(theta);
    (0..data.n()).map(|i| f_hat[i] * (data.d()[i] - xt[i])).collect()
}
