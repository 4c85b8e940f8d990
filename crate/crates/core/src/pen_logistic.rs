//! l1-penalized logistic regression of `y` on `(d, x)` and the unpenalized
//! post-selection refit.
//!
//! The penalized fit minimizes
//!
//! ```text
//! Lambda(a, b) + (lambda / n) * ( w_d |a| + sum_j w_j |b_j| )
//! Lambda(a, b) = E_n[ log(1 + exp(d a + x'b)) - y (d a + x'b) ]
//! ```
//!
//! with penalty weights `w = 1`, except that the intercept (when declared) and
//! optionally the treatment are left unpenalized. The solver is a proximal
//! Newton scheme: cyclic coordinate descent on the IRLS quadratic model, then a
//! backtracking step on the true objective so that every accepted iterate
//! decreases it.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numeric::{link_unchecked, log1p_exp, normal_quantile, sigmoid, spd_inverse, spd_solve};

/// Smallest IRLS weight used in the quadratic model.
const MIN_IRLS_WEIGHT: f64 = 1e-5;
/// Coefficient magnitude (standardized scale) taken as evidence of separation.
pub const SEPARATION_BOUND: f64 = 30.0;

/// `Lambda(alpha, beta)`, the average negative log-likelihood.
pub fn neg_loglik(data: &Dataset, alpha: f64, beta: &[f64]) -> f64 {
    let xb = data.x_times(beta);
    loglik_from_index(data.y(), data.d(), alpha, &xb)
}

fn loglik_from_index(y: &[f64], d: &[f64], alpha: f64, offset: &[f64]) -> f64 {
    let n = y.len() as f64;
    y.iter()
        .zip(d)
        .zip(offset)
        .map(|((&yi, &di), &oi)| {
            let t = di * alpha + oi;
            log1p_exp(t) - yi * t
        })
        .sum::<f64>()
        / n
}

/// Gradient of `Lambda` with respect to `(alpha, beta)`, treatment first.
pub fn gradient(data: &Dataset, alpha: f64, beta: &[f64]) -> Vec<f64> {
    let n = data.n() as f64;
    let xb = data.x_times(beta);
    let resid: Vec<f64> = data
        .y()
        .iter()
        .zip(data.d())
        .zip(&xb)
        .map(|((&y, &d), &o)| sigmoid(d * alpha + o) - y)
        .collect();
    let mut g = Vec::with_capacity(data.p() + 1);
    g.push(crate::numeric::dot(&resid, data.d()) / n);
    for j in 0..data.p() {
        g.push(crate::numeric::dot(&resid, data.col(j)) / n);
    }
    g
}

/// Plug-in penalty `(1.1/2) sqrt(n) Phi^-1(1 - gamma / max(n, p ln n))`.
pub fn penalty_lambda1(n: usize, p: usize, gamma_scale: f64) -> f64 {
    let nf = n as f64;
    let denom = nf.max(p as f64 * nf.ln());
    0.55 * nf.sqrt() * normal_quantile(1.0 - gamma_scale / denom).expect("quantile argument in (0,1)")
}

/// Hoeffding-based penalty: `lambda / n = 1.1 sqrt(2 ln(2 (p+1) / gamma) / n)`.
pub fn penalty_hoeffding(n: usize, p: usize, gamma: f64) -> f64 {
    let nf = n as f64;
    let log_term = (2.0 * (p as f64 + 1.0) / gamma).ln();
    nf * 1.1 * (2.0 * log_term / nf).sqrt()
}

/// Which plug-in rule sets the Step-1 penalty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum PenaltyRule {
    Caption,
    Hoeffding { gamma: f64 },
}

impl Default for PenaltyRule {
    fn default() -> Self {
        PenaltyRule::Caption
    }
}

impl PenaltyRule {
    pub fn lambda1(&self, n: usize, p: usize) -> Result<f64> {
        match *self {
            PenaltyRule::Caption => Ok(penalty_lambda1(n, p, 0.05)),
            PenaltyRule::Hoeffding { gamma } => {
                if !(gamma > 0.0 && gamma < 1.0) {
                    return Err(Error::Domain(format!("hoeffding gamma must be in (0,1), got {gamma}")));
                }
                Ok(penalty_hoeffding(n, p, gamma))
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LassoLogisticConfig {
    pub penalize_treatment: bool,
    /// Cap on coordinate-descent sweeps, summed over all Newton steps.
    pub max_cycles: usize,
    /// Largest coordinate change accepted as converged.
    pub coord_tol: f64,
    pub kkt_tol: f64,
}

impl Default for LassoLogisticConfig {
    fn default() -> Self {
        Self {
            penalize_treatment: true,
            max_cycles: 10_000,
            coord_tol: 1e-12,
            kkt_tol: 1e-7,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PenalizedLogisticFit {
    pub alpha_hat: f64,
    pub beta_hat: Vec<f64>,
    pub support: Vec<usize>,
    pub lambda: f64,
    pub objective: f64,
    pub kkt_violation: f64,
    pub penalize_treatment: bool,
    pub cycles: usize,
}

fn penalty_weights(data: &Dataset, penalize_treatment: bool) -> Vec<f64> {
    let mut w = vec![1.0; data.p() + 1];
    w[0] = if penalize_treatment { 1.0 } else { 0.0 };
    for j in data.unpenalized() {
        w[j + 1] = 0.0;
    }
    w
}

/// Penalized objective at `(alpha, beta)`.
pub fn penalized_objective(data: &Dataset, alpha: f64, beta: &[f64], lambda: f64, penalize_treatment: bool) -> f64 {
    let pw = penalty_weights(data, penalize_treatment);
    let mut coef = Vec::with_capacity(beta.len() + 1);
    coef.push(alpha);
    coef.extend_from_slice(beta);
    neg_loglik(data, alpha, beta) + l1(&coef, &pw) * lambda / data.n() as f64
}

fn l1(coef: &[f64], pw: &[f64]) -> f64 {
    coef.iter().zip(pw).map(|(c, w)| w * c.abs()).sum()
}

/// Largest violation of the l1 first-order conditions at `(alpha, beta)`,
/// recomputed from scratch.
pub fn kkt_violation(data: &Dataset, alpha: f64, beta: &[f64], lambda: f64, penalize_treatment: bool) -> f64 {
    let pw = penalty_weights(data, penalize_treatment);
    let g = gradient(data, alpha, beta);
    let thr = lambda / data.n() as f64;
    let coef = std::iter::once(alpha).chain(beta.iter().copied());
    coef.zip(g.iter().zip(&pw))
        .map(|(c, (&gj, &w))| kkt_term(c, gj, thr * w))
        .fold(0.0, f64::max)
}

#[inline]
fn kkt_term(coef: f64, grad: f64, threshold: f64) -> f64 {
    if coef != 0.0 {
        (grad + threshold * coef.signum()).abs()
    } else {
        (grad.abs() - threshold).max(0.0)
    }
}

#[inline]
fn soft_threshold(z: f64, t: f64) -> f64 {
    // ties at |z| == t stay at zero
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

struct Design<'a> {
    data: &'a Dataset,
}

impl<'a> Design<'a> {
    #[inline]
    fn col(&self, k: usize) -> &'a [f64] {
        if k == 0 {
            self.data.d()
        } else {
            self.data.col(k - 1)
        }
    }

    fn ncols(&self) -> usize {
        self.data.p() + 1
    }

    fn index(&self, coef: &[f64]) -> Vec<f64> {
        let mut eta = vec![0.0; self.data.n()];
        for (k, &c) in coef.iter().enumerate() {
            if c != 0.0 {
                for (e, v) in eta.iter_mut().zip(self.col(k)) {
                    *e += c * v;
                }
            }
        }
        eta
    }
}

/// l1-penalized logistic regression of `y` on `(d, x)`.
pub fn fit_lasso_logistic(data: &Dataset, lambda: f64, config: &LassoLogisticConfig) -> Result<PenalizedLogisticFit> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Argument(format!("penalty must be finite and nonnegative, got {lambda}")));
    }
    let design = Design { data };
    let n = data.n();
    let nf = n as f64;
    let m = design.ncols();
    let y = data.y();
    let pw = penalty_weights(data, config.penalize_treatment);
    let thr: Vec<f64> = pw.iter().map(|w| w * lambda / nf).collect();

    let objective = |eta: &[f64], coef: &[f64]| -> f64 {
        let ll = y
            .iter()
            .zip(eta)
            .map(|(&yi, &t)| log1p_exp(t) - yi * t)
            .sum::<f64>()
            / nf;
        ll + l1(coef, &pw) * lambda / nf
    };

    let mut coef = vec![0.0; m];
    let mut eta = vec![0.0; n];
    let mut obj = objective(&eta, &coef);
    let mut cycles = 0usize;
    let mut w = vec![0.0; n];
    let mut resid = vec![0.0; n];
    let mut active = vec![false; m];

    loop {
        // quadratic model at the current point
        let mut grad = vec![0.0; m];
        for i in 0..n {
            let l = link_unchecked(eta[i]);
            w[i] = l.derivative.max(MIN_IRLS_WEIGHT);
            // working residual z - eta
            resid[i] = (y[i] - l.value) / w[i];
        }
        for (k, g) in grad.iter_mut().enumerate() {
            let c = design.col(k);
            *g = -(0..n).map(|i| w[i] * resid[i] * c[i]).sum::<f64>() / nf;
        }
        let curv: Vec<f64> = (0..m)
            .map(|k| design.col(k).iter().zip(&w).map(|(v, wi)| wi * v * v).sum::<f64>() / nf)
            .collect();

        let base = coef.clone();
        let mut trial = coef.clone();
        // cyclic coordinate descent on the quadratic model, active-set sweeps
        // between full sweeps
        let mut full = true;
        loop {
            if cycles >= config.max_cycles {
                let kkt = kkt_violation(data, coef[0], &coef[1..], lambda, config.penalize_treatment);
                return Err(Error::NotConverged {
                    solver: "lasso-logistic",
                    cycles,
                    kkt_violation: kkt,
                    last_iterate: coef,
                });
            }
            cycles += 1;
            let mut max_change = 0.0_f64;
            for k in 0..m {
                if !full && !active[k] {
                    continue;
                }
                let a = curv[k];
                if a <= 0.0 {
                    continue;
                }
                let c = design.col(k);
                let old = trial[k];
                let rho = (0..n).map(|i| w[i] * c[i] * resid[i]).sum::<f64>() / nf + a * old;
                let new = soft_threshold(rho, thr[k]) / a;
                if new != old {
                    let delta = new - old;
                    for i in 0..n {
                        resid[i] -= delta * c[i];
                    }
                    trial[k] = new;
                    max_change = max_change.max(delta.abs() * a.sqrt());
                }
                active[k] = new != 0.0;
            }
            if max_change < 1e-13 {
                if full {
                    break;
                }
                full = true;
            } else {
                full = false;
            }
        }

        // backtracking along the model step
        let dir: Vec<f64> = trial.iter().zip(&base).map(|(t, b)| t - b).collect();
        let pen0 = l1(&base, &pw) * lambda / nf;
        let decrease = crate::numeric::dot(&grad, &dir) + l1(&trial, &pw) * lambda / nf - pen0;
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let cand: Vec<f64> = base.iter().zip(&dir).map(|(b, d)| b + step * d).collect();
            let cand_eta = design.index(&cand);
            let cand_obj = objective(&cand_eta, &cand);
            // the slack admits steps whose effect on the objective is below
            // its rounding level
            if cand_obj <= obj + 1e-4 * step * decrease.min(0.0) + 1e-15 * (1.0 + obj.abs()) {
                accepted = Some((cand, cand_eta, cand_obj));
                break;
            }
            step *= 0.5;
        }
        let max_step = dir.iter().map(|d| (step * d).abs()).fold(0.0, f64::max);
        let stalled = accepted.is_none();
        match accepted {
            Some((cand, cand_eta, cand_obj)) => {
                coef = cand;
                eta = cand_eta;
                obj = cand_obj;
            }
            _ => {}
        }
        let kkt = kkt_violation(data, coef[0], &coef[1..], lambda, config.penalize_treatment);
        if max_step < config.coord_tol && kkt < config.kkt_tol {
            break;
        }
        if stalled && kkt < config.kkt_tol {
            break;
        }
    }

    let kkt = kkt_violation(data, coef[0], &coef[1..], lambda, config.penalize_treatment);
    let support = (0..data.p()).filter(|&j| coef[j + 1] != 0.0).collect();
    Ok(PenalizedLogisticFit {
        alpha_hat: coef[0],
        beta_hat: coef[1..].to_vec(),
        support,
        lambda,
        objective: obj,
        kkt_violation: kkt,
        penalize_treatment: config.penalize_treatment,
        cycles,
    })
}

/// Unpenalized logistic MLE of `y` on `d` and a subset of controls.
#[derive(Debug, Clone, Serialize)]
pub struct RefitLogisticFit {
    pub alpha_tilde: f64,
    /// Full-length coefficient vector, zero off the support.
    pub beta_tilde: Vec<f64>,
    /// Control columns used, sorted.
    pub support: Vec<usize>,
    pub gradient_norm: f64,
    pub converged: bool,
    pub iterations: usize,
    /// `E_n[w z z']` over `z = (d, x_support)`, in that order.
    #[serde(skip)]
    pub fisher_information: DMatrix<f64>,
}

impl RefitLogisticFit {
    /// `[E_n[w z z']^{-1}]_{11}`, the treatment entry of the inverse Fisher
    /// information.
    pub fn inverse_fisher_11(&self) -> Result<f64> {
        spd_inverse(&self.fisher_information)
            .map(|inv| inv[(0, 0)])
            .ok_or_else(|| Error::Rank("Fisher information is singular".into()))
    }

    /// `d alpha + x' beta` for every row.
    pub fn index(&self, data: &Dataset) -> Vec<f64> {
        let xb = data.x_times(&self.beta_tilde);
        xb.iter().zip(data.d()).map(|(o, d)| o + d * self.alpha_tilde).collect()
    }
}

const REFIT_MAX_ITER: usize = 100;
const REFIT_GRAD_TOL: f64 = 1e-8;
const MAX_HALVINGS: usize = 50;

/// Newton-Raphson logistic MLE on `(d, x_support)`.
pub fn fit_logistic_refit(data: &Dataset, support: &[usize]) -> Result<RefitLogisticFit> {
    let mut cols: Vec<usize> = support.to_vec();
    cols.sort_unstable();
    cols.dedup();
    if let Some(&j) = cols.iter().find(|&&j| j >= data.p()) {
        return Err(Error::Argument(format!("support index {j} out of range")));
    }
    let n = data.n();
    let nf = n as f64;
    let k = cols.len() + 1;
    if k >= n {
        return Err(Error::Argument(format!("refit needs |support| + 1 < n, got {k} >= {n}")));
    }
    let col = |a: usize| -> &[f64] {
        if a == 0 {
            data.d()
        } else {
            data.col(cols[a - 1])
        }
    };
    let y = data.y();

    let mut coef = DVector::<f64>::zeros(k);
    let index = |coef: &DVector<f64>| -> Vec<f64> {
        let mut eta = vec![0.0; n];
        for a in 0..k {
            let c = coef[a];
            if c != 0.0 {
                for (e, v) in eta.iter_mut().zip(col(a)) {
                    *e += c * v;
                }
            }
        }
        eta
    };
    let loss = |eta: &[f64]| -> f64 {
        y.iter().zip(eta).map(|(&yi, &t)| log1p_exp(t) - yi * t).sum::<f64>() / nf
    };
    let score_and_info = |eta: &[f64]| -> (DVector<f64>, DMatrix<f64>) {
        let mut w = vec![0.0; n];
        let mut r = vec![0.0; n];
        for i in 0..n {
            let l = link_unchecked(eta[i]);
            w[i] = l.derivative;
            r[i] = l.value - y[i];
        }
        let mut g = DVector::zeros(k);
        let mut h = DMatrix::zeros(k, k);
        for a in 0..k {
            let ca = col(a);
            g[a] = (0..n).map(|i| r[i] * ca[i]).sum::<f64>() / nf;
            for b in 0..=a {
                let cb = col(b);
                let v = (0..n).map(|i| w[i] * ca[i] * cb[i]).sum::<f64>() / nf;
                h[(a, b)] = v;
                h[(b, a)] = v;
            }
        }
        (g, h)
    };

    let mut eta = index(&coef);
    let mut f = loss(&eta);
    let mut iterations = 0;
    let mut converged = false;
    let (mut g, mut h) = score_and_info(&eta);
    while iterations < REFIT_MAX_ITER {
        if g.amax() <= REFIT_GRAD_TOL {
            converged = true;
            break;
        }
        iterations += 1;
        let step = spd_solve(&h, &(-&g)).ok_or_else(|| {
            Error::Rank(format!("singular Fisher information on {} columns", k))
        })?;
        let slope = g.dot(&step);
        let mut t = 1.0;
        let mut halvings = 0;
        loop {
            let cand = &coef + &step * t;
            let cand_eta = index(&cand);
            let cand_f = loss(&cand_eta);
            if cand_f <= f + 1e-4 * t * slope || (cand_f - f).abs() <= 1e-15 * f.abs().max(1.0) {
                coef = cand;
                eta = cand_eta;
                f = cand_f;
                break;
            }
            halvings += 1;
            if halvings >= MAX_HALVINGS {
                return Err(Error::Separation("step halving failed 50 times".into()));
            }
            t *= 0.5;
        }
        if coef.amax() > SEPARATION_BOUND {
            return Err(Error::Separation(format!(
                "coefficient magnitude {:.1} exceeds {SEPARATION_BOUND}",
                coef.amax()
            )));
        }
        (g, h) = score_and_info(&eta);
    }
    if !converged && g.amax() <= REFIT_GRAD_TOL {
        converged = true;
    }
    if !converged {
        return Err(Error::NotConverged {
            solver: "logistic refit",
            cycles: iterations,
            kkt_violation: g.amax(),
            last_iterate: coef.iter().copied().collect(),
        });
    }
    if h.clone().cholesky().is_none() {
        return Err(Error::Rank("Fisher information is singular at the optimum".into()));
    }
    let mut beta = vec![0.0; data.p()];
    for (a, &j) in cols.iter().enumerate() {
        beta[j] = coef[a + 1];
    }
    Ok(RefitLogisticFit {
        alpha_tilde: coef[0],
        beta_tilde: beta,
        support: cols,
        gradient_norm: g.amax(),
        converged,
        iterations,
        fisher_information: h,
    })
}

/// Per-observation Step-1 weights at the refit index.
///
/// `w_hat` is the link slope `G'(t)`, which for the logistic link equals the
/// conditional variance `G(t)(1 - G(t))`; `sigma_hat = sqrt(w_hat)` is the
/// conditional standard deviation and `f_hat = w_hat / sigma_hat`. In
/// null-testing mode `f_hat` is 1 for every observation.
#[derive(Debug, Clone)]
pub struct Step1Weights {
    pub index: Vec<f64>,
    pub w_hat: Vec<f64>,
    pub sigma_hat: Vec<f64>,
    pub f_hat: Vec<f64>,
    pub h0_mode: bool,
}

pub fn step1_weights(data: &Dataset, refit: &RefitLogisticFit, h0_mode: bool) -> Result<Step1Weights> {
    if !refit.converged {
        return Err(Error::Argument("step-1 weights need a converged refit".into()));
    }
    let index = refit.index(data);
    weights_from_index(index, h0_mode)
}

pub(crate) fn weights_from_index(index: Vec<f64>, h0_mode: bool) -> Result<Step1Weights> {
    let mut w_hat = Vec::with_capacity(index.len());
    let mut sigma_hat = Vec::with_capacity(index.len());
    let mut f_hat = Vec::with_capacity(index.len());
    for &t in &index {
        let l = link_unchecked(t);
        let w = l.derivative;
        if !(w > 0.0) {
            return Err(Error::Numeric(format!("vanishing link slope at index {t}")));
        }
        let s = w.sqrt();
        w_hat.push(w);
        sigma_hat.push(s);
        f_hat.push(if h0_mode { 1.0 } else { w / s });
    }
    Ok(Step1Weights {
        index,
        w_hat,
        sigma_hat,
        f_hat,
        h0_mode,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny(n: usize, p: usize, seed: u64, signal: f64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, p, |_, _| rng.gen_range(-1.5..1.5));
        let d: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let y = (0..n)
            .map(|i| {
                let t = signal * (0.8 * d[i] - 0.5 * x[(i, 0)]);
                if rng.gen::<f64>() < sigmoid(t) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        Dataset::new(y, d, x).unwrap()
    }

    #[test]
    fn neg_loglik_examples() {
        let data = tiny(10, 2, 1, 1.0);
        assert!((neg_loglik(&data, 0.0, &[0.0, 0.0]) - 2f64.ln()).abs() < 1e-15);

        let x = DMatrix::zeros(2, 1);
        let data = Dataset::new(vec![1.0, 0.0], vec![1.0, -1.0], x).unwrap();
        let expected = 0.5 * ((1.0 + 10f64.exp()).ln() - 10.0 + (1.0 + (-10f64).exp()).ln());
        assert!((neg_loglik(&data, 10.0, &[0.0]) - expected).abs() < 1e-15);
        assert!((expected - 4.54e-5).abs() < 1e-7);
    }

    #[test]
    fn gradient_at_origin() {
        let data = tiny(12, 3, 2, 1.0);
        let g = gradient(&data, 0.0, &[0.0; 3]);
        let n = 12.0;
        let gd: f64 = (0..12).map(|i| (0.5 - data.y()[i]) * data.d()[i]).sum::<f64>() / n;
        assert!((g[0] - gd).abs() < 1e-15);
        for j in 0..3 {
            let gj: f64 = (0..12).map(|i| (0.5 - data.y()[i]) * data.col(j)[i]).sum::<f64>() / n;
            assert!((g[j + 1] - gj).abs() < 1e-15);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let data = tiny(30, 3, 3, 1.0);
        let (a, b) = (0.3, vec![-0.2, 0.1, 0.4]);
        let g = gradient(&data, a, &b);
        let h = 1e-6;
        let fd = (neg_loglik(&data, a + h, &b) - neg_loglik(&data, a - h, &b)) / (2.0 * h);
        assert!((g[0] - fd).abs() < 1e-8);
        for j in 0..3 {
            let mut bp = b.clone();
            let mut bm = b.clone();
            bp[j] += h;
            bm[j] -= h;
            let fd = (neg_loglik(&data, a, &bp) - neg_loglik(&data, a, &bm)) / (2.0 * h);
            assert!((g[j + 1] - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn lambda1_examples() {
        // p ln n = 1324.66 > 200
        let l = penalty_lambda1(200, 250, 0.05);
        assert!((l - 30.8).abs() < 0.1, "{l}");
        let q = normal_quantile(1.0 - 0.05 / (250.0 * 200f64.ln())).unwrap();
        assert!((l - 0.55 * 200f64.sqrt() * q).abs() < 1e-12);
        // max branch picks n
        let q = normal_quantile(1.0 - 0.05 / 200.0).unwrap();
        assert!((penalty_lambda1(200, 1, 0.05) - 0.55 * 200f64.sqrt() * q).abs() < 1e-12);
        assert!(penalty_lambda1(200, 500, 0.05) > penalty_lambda1(200, 250, 0.05));
    }

    #[test]
    fn hoeffding_examples() {
        let gamma = 2.0 * 2.0 / std::f64::consts::E.powi(2);
        let l = penalty_hoeffding(100, 1, gamma);
        assert!((l / 100.0 - 0.22).abs() < 1e-12, "{l}");
        // p = 0, gamma -> 1: log term -> log 2
        let l = penalty_hoeffding(50, 0, 1.0 - 1e-12);
        assert!((l / 50.0 - 1.1 * (2.0 * 2f64.ln() / 50.0).sqrt()).abs() < 1e-9);
        // larger than the caption rule at the same (n, p)
        assert!(penalty_hoeffding(200, 250, 0.05) > penalty_lambda1(200, 250, 0.05));
        assert!(PenaltyRule::Hoeffding { gamma: 1.5 }.lambda1(10, 2).is_err());
    }

    #[test]
    fn large_penalty_gives_zero() {
        let data = tiny(40, 5, 4, 2.0);
        let g = gradient(&data, 0.0, &[0.0; 5]);
        let gmax = g.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let fit = fit_lasso_logistic(&data, 40.0 * gmax, &LassoLogisticConfig::default()).unwrap();
        assert_eq!(fit.alpha_hat, 0.0);
        assert!(fit.beta_hat.iter().all(|&b| b == 0.0));
        assert!(fit.support.is_empty());
        assert!((fit.objective - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn zero_penalty_matches_newton_mle() {
        let data = tiny(100, 2, 5, 1.0);
        let fit = fit_lasso_logistic(&data, 0.0, &LassoLogisticConfig::default()).unwrap();
        let mle = fit_logistic_refit(&data, &[0, 1]).unwrap();
        assert!((fit.alpha_hat - mle.alpha_tilde).abs() < 1e-5);
        for j in 0..2 {
            assert!((fit.beta_hat[j] - mle.beta_tilde[j]).abs() < 1e-5);
        }
    }

    #[test]
    fn kkt_report_matches_recomputation() {
        let data = tiny(60, 8, 6, 1.5);
        let lambda = 0.05 * 60.0;
        let fit = fit_lasso_logistic(&data, lambda, &LassoLogisticConfig::default()).unwrap();
        assert!(fit.kkt_violation < 1e-7);
        let again = kkt_violation(&data, fit.alpha_hat, &fit.beta_hat, lambda, true);
        assert!((again - fit.kkt_violation).abs() < 1e-10);
        let obj = penalized_objective(&data, fit.alpha_hat, &fit.beta_hat, lambda, true);
        assert!((obj - fit.objective).abs() < 1e-12);
    }

    #[test]
    fn unpenalized_treatment_is_kept() {
        let data = tiny(60, 8, 7, 0.3);
        let g = gradient(&data, 0.0, &[0.0; 8]);
        let gmax = g.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let cfg = LassoLogisticConfig {
            penalize_treatment: false,
            ..Default::default()
        };
        let fit = fit_lasso_logistic(&data, 60.0 * gmax * 2.0, &cfg).unwrap();
        assert!(fit.alpha_hat != 0.0);
        assert!(fit.support.is_empty());
        // first-order condition for the free coefficient
        let g = gradient(&data, fit.alpha_hat, &fit.beta_hat);
        assert!(g[0].abs() < 1e-7);
    }

    #[test]
    fn iteration_cap_reports_last_iterate() {
        let data = tiny(60, 8, 8, 1.5);
        let cfg = LassoLogisticConfig {
            max_cycles: 1,
            ..Default::default()
        };
        match fit_lasso_logistic(&data, 1.0, &cfg) {
            Err(Error::NotConverged { last_iterate, .. }) => assert_eq!(last_iterate.len(), 9),
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn refit_null_model() {
        // y independent of d, balanced y
        let n = 200;
        let d: Vec<f64> = (0..n).map(|i| if i % 4 < 2 { 1.0 } else { -1.0 }).collect();
        let y: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        let data = Dataset::new(y, d, DMatrix::from_element(n, 1, 1.0)).unwrap();
        let fit = fit_logistic_refit(&data, &[]).unwrap();
        assert!(fit.alpha_tilde.abs() < 1e-10);
        assert!(fit.converged && fit.gradient_norm <= 1e-8);
        assert!(fit.support.is_empty());
        assert_eq!(fit.fisher_information.nrows(), 1);
    }

    #[test]
    fn refit_detects_separation() {
        let d: Vec<f64> = (0..20).map(|i| i as f64 - 9.5).collect();
        let y: Vec<f64> = d.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
        let data = Dataset::new(y, d, DMatrix::from_element(20, 1, 1.0)).unwrap();
        assert!(matches!(fit_logistic_refit(&data, &[]), Err(Error::Separation(_))));
    }

    #[test]
    fn refit_rejects_oversized_support() {
        let data = tiny(4, 3, 9, 1.0);
        assert!(fit_logistic_refit(&data, &[0, 1, 2]).is_err());
    }

    #[test]
    fn refit_recovers_signal() {
        // y ~ Bernoulli(G(0.2 d)); the estimate sits within 3 standard errors
        let mut hits = 0;
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let n = 200;
            let d: Vec<f64> = (0..n).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
            let y = d
                .iter()
                .map(|&v| if rng.gen::<f64>() < sigmoid(0.2 * v) { 1.0 } else { 0.0 })
                .collect();
            let data = Dataset::new(y, d, DMatrix::from_element(n, 1, 1.0)).unwrap();
            let fit = fit_logistic_refit(&data, &[0]).unwrap();
            let se = (fit.inverse_fisher_11().unwrap() / n as f64).sqrt();
            if (fit.alpha_tilde - 0.2).abs() <= 3.0 * se {
                hits += 1;
            }
        }
        assert!(hits >= 19, "{hits}");
    }

    #[test]
    fn step1_weight_identities() {
        let w = weights_from_index(vec![0.0, 1.3, -4.0, 20.0], false).unwrap();
        assert_eq!(w.w_hat[0], 0.25);
        assert_eq!(w.f_hat[0], 0.5);
        for i in 0..4 {
            let rel = (w.f_hat[i] * w.f_hat[i] - w.w_hat[i]).abs() / w.w_hat[i];
            assert!(rel < 1e-15);
        }
        let h0 = weights_from_index(vec![0.0, 1.3], true).unwrap();
        assert!(h0.f_hat.iter().all(|&f| f == 1.0));
    }
}
