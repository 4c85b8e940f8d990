//! Third-stage estimators of the treatment coefficient.
//!
//! * optimal-instrument IV: minimize the self-normalized squared score
//!   `L_n(alpha)` over a window around the refit estimate;
//! * double selection: logistic MLE on the union of controls selected by the
//!   two penalized stages;
//! * naive post-selection: the Step-1 refit with its model-based variance;
//! * one-step correction from the penalized estimate (comparison only);
//! * IV with the simpler, non-optimal instrument `(d - E[d|x]) / w`.
//!
//! The free functions work on whatever scale the dataset is in. [`Analysis`]
//! standardizes first and reports on the original scale.

use std::sync::OnceLock;

use serde::Serialize;

use crate::data::{Dataset, Standardized};
use crate::error::{Error, Result};
use crate::numeric::sigmoid;
use crate::pen_logistic::{
    fit_lasso_logistic, fit_logistic_refit, step1_weights, LassoLogisticConfig, PenaltyRule, PenalizedLogisticFit,
    RefitLogisticFit, Step1Weights,
};
use crate::weighted_lasso::{penalty_lambda2, run_step2, Step2Mode, WeightedLassoFit};

/// `C` in the search window `|alpha - alpha_tilde| <= C / ln n`.
pub const DEFAULT_SEARCH_CONSTANT: f64 = 10.0;
/// Points in the coarse grid over the search window.
pub const GRID_POINTS: usize = 401;
const GOLDEN_TOL: f64 = 1e-10;
const WEAK_INSTRUMENT_TOL: f64 = 1e-10;
const DEGENERATE_DENOMINATOR: f64 = 1e-14;
const DEGENERATE_WEIGHT: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Naive,
    OptimalIv,
    DoubleSelection,
    OneStep,
    SuboptimalIv,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Naive => "naive",
            Method::OptimalIv => "optimal-iv",
            Method::DoubleSelection => "double-selection",
            Method::OneStep => "one-step",
            Method::SuboptimalIv => "suboptimal-iv",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(Method::Naive),
            "optimal-iv" => Ok(Method::OptimalIv),
            "double-selection" => Ok(Method::DoubleSelection),
            "one-step" => Ok(Method::OneStep),
            "suboptimal-iv" => Ok(Method::SuboptimalIv),
            other => Err(Error::Argument(format!("unknown method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum InstrumentKind {
    Optimal,
    SuboptimalRemark1,
    ImplicitDoubleSelection,
}

#[derive(Debug, Clone)]
pub struct InstrumentSet {
    pub z_hat: Vec<f64>,
    pub w_hat: Vec<f64>,
    pub kind: InstrumentKind,
}

impl InstrumentSet {
    pub fn optimal(step1: &Step1Output, step2: &WeightedLassoFit) -> Self {
        Self {
            z_hat: step2.z_hat.clone(),
            w_hat: step1.weights.w_hat.clone(),
            kind: InstrumentKind::Optimal,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Diagnostics {
    pub support_step1: Vec<usize>,
    pub support_step2: Vec<usize>,
    pub support_final: Vec<usize>,
    pub lambda1: f64,
    pub lambda2: Option<f64>,
    pub step1_kkt_violation: f64,
    pub boundary_hit: bool,
    /// Whether the grid minimizer and the score sign-change root agree to
    /// within one grid spacing; `None` when the score has no sign change.
    pub grid_root_agree: Option<bool>,
    pub dropped_collinear: Vec<usize>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct InferenceResult {
    pub method: Method,
    pub alpha_check: f64,
    pub sigma1_sq: f64,
    pub sigma2_sq: f64,
    /// `max(sigma1_sq, sigma2_sq)`.
    pub sigma_used: f64,
    pub n_used: usize,
    pub diagnostics: Diagnostics,
}

impl InferenceResult {
    fn new(method: Method, alpha_check: f64, sigma1_sq: f64, sigma2_sq: f64, n: usize, diagnostics: Diagnostics) -> Result<Self> {
        if !(sigma1_sq > 0.0 && sigma2_sq > 0.0) || !sigma1_sq.is_finite() || !sigma2_sq.is_finite() {
            return Err(Error::Numeric(format!(
                "non-positive variance estimate ({sigma1_sq:.3e}, {sigma2_sq:.3e})"
            )));
        }
        Ok(Self {
            method,
            alpha_check,
            sigma1_sq,
            sigma2_sq,
            sigma_used: sigma1_sq.max(sigma2_sq),
            n_used: n,
            diagnostics,
        })
    }

    /// Standard error of `alpha_check`, `sqrt(sigma_used / n)`.
    pub fn std_err(&self) -> f64 {
        (self.sigma_used / self.n_used as f64).sqrt()
    }

    /// Re-expresses the result for a treatment divided by `scale`.
    fn rescaled(mut self, scale: f64) -> Self {
        self.alpha_check /= scale;
        let s2 = scale * scale;
        self.sigma1_sq /= s2;
        self.sigma2_sq /= s2;
        self.sigma_used /= s2;
        self
    }
}

/// `L_n(alpha)` for a fixed control index and instrument.
#[derive(Debug, Clone)]
pub struct IvCriterion {
    y: Vec<f64>,
    d: Vec<f64>,
    offset: Vec<f64>,
    z: Vec<f64>,
    /// Multiplies the argument before evaluation; 1 on the working scale.
    alpha_scale: f64,
}

impl IvCriterion {
    pub fn new(data: &Dataset, offset: Vec<f64>, z: Vec<f64>) -> Result<Self> {
        if offset.len() != data.n() || z.len() != data.n() {
            return Err(Error::Argument("offset or instrument length mismatch".into()));
        }
        Ok(Self {
            y: data.y().to_vec(),
            d: data.d().to_vec(),
            offset,
            z,
            alpha_scale: 1.0,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// `(E_n[(y - G) z], E_n[(y - G)^2 z^2])` in one pass.
    pub fn moments(&self, alpha: f64) -> (f64, f64) {
        let a = alpha * self.alpha_scale;
        let (mut s, mut q) = (0.0, 0.0);
        for i in 0..self.y.len() {
            let r = (self.y[i] - sigmoid(self.d[i] * a + self.offset[i])) * self.z[i];
            s += r;
            q += r * r;
        }
        let n = self.y.len() as f64;
        (s / n, q / n)
    }

    pub fn score(&self, alpha: f64) -> f64 {
        self.moments(alpha).0
    }

    pub fn value(&self, alpha: f64) -> Result<f64> {
        let (s, q) = self.moments(alpha);
        if !(q > DEGENERATE_DENOMINATOR) {
            return Err(Error::DegenerateInstrument(format!(
                "E_n[(y - G)^2 z^2] = {q:.3e} at alpha = {alpha}"
            )));
        }
        Ok(s * s / q)
    }

    /// `n L_n(alpha)`.
    pub fn statistic(&self, alpha: f64) -> Result<f64> {
        Ok(self.n() as f64 * self.value(alpha)?)
    }
}

/// `L_n(alpha)` for the given control coefficients and instrument.
pub fn criterion_ln(data: &Dataset, beta_tilde: &[f64], z_hat: &[f64], alpha: f64) -> Result<f64> {
    IvCriterion::new(data, data.x_times(beta_tilde), z_hat.to_vec())?.value(alpha)
}

/// Grid of `L_n` over the search window and its minimizer.
#[derive(Debug, Clone)]
pub struct CriterionProfile {
    pub search_interval: (f64, f64),
    pub evaluations: Vec<(f64, f64)>,
    pub minimizer: f64,
    pub criterion: IvCriterion,
}

impl CriterionProfile {
    fn rescaled(mut self, scale: f64) -> Self {
        self.search_interval = (self.search_interval.0 / scale, self.search_interval.1 / scale);
        for e in &mut self.evaluations {
            e.0 /= scale;
        }
        self.minimizer /= scale;
        self.criterion.alpha_scale *= scale;
        self
    }

    pub fn grid_spacing(&self) -> f64 {
        (self.search_interval.1 - self.search_interval.0) / (self.evaluations.len() - 1) as f64
    }
}

/// Step-1 products: penalized fit, refit and weights.
#[derive(Debug, Clone)]
pub struct Step1Output {
    pub lambda1: f64,
    pub lasso: PenalizedLogisticFit,
    pub refit: RefitLogisticFit,
    pub weights: Step1Weights,
    /// Selected controls plus unpenalized columns.
    pub support: Vec<usize>,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct PipelineConfig {
    pub penalty_rule: PenaltyRule,
    pub penalize_treatment: bool,
    /// Half-width of the IV search window is `search_constant / ln n`.
    pub search_constant: f64,
    /// Use unit weights in Step 2 (testing `alpha = 0`).
    pub h0_mode: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            penalty_rule: PenaltyRule::Caption,
            penalize_treatment: true,
            search_constant: DEFAULT_SEARCH_CONSTANT,
            h0_mode: false,
        }
    }
}

pub fn run_step1(data: &Dataset, config: &PipelineConfig) -> Result<Step1Output> {
    let lambda1 = config.penalty_rule.lambda1(data.n(), data.p())?;
    let lasso_cfg = LassoLogisticConfig {
        penalize_treatment: config.penalize_treatment,
        ..Default::default()
    };
    let lasso = fit_lasso_logistic(data, lambda1, &lasso_cfg)?;
    let support = with_unpenalized(data, &lasso.support);
    let refit = fit_logistic_refit(data, &support)?;
    let weights = step1_weights(data, &refit, config.h0_mode)?;
    Ok(Step1Output {
        lambda1,
        lasso,
        refit,
        weights,
        support,
    })
}

fn with_unpenalized(data: &Dataset, support: &[usize]) -> Vec<usize> {
    let mut s: Vec<usize> = support.iter().copied().chain(data.unpenalized()).collect();
    s.sort_unstable();
    s.dedup();
    s
}

fn step1_diagnostics(step1: &Step1Output) -> Diagnostics {
    Diagnostics {
        support_step1: step1.support.clone(),
        lambda1: step1.lambda1,
        step1_kkt_violation: step1.lasso.kkt_violation,
        ..Default::default()
    }
}

/// Naive post-selection estimator: the Step-1 refit, with variance
/// `[E_n[w (d, x_S)'(d, x_S)]^{-1}]_{11}`.
pub fn fit_naive_post_selection(data: &Dataset, step1: &Step1Output) -> Result<InferenceResult> {
    let v = step1.refit.inverse_fisher_11()?;
    let mut diag = step1_diagnostics(step1);
    diag.support_final = step1.refit.support.clone();
    InferenceResult::new(Method::Naive, step1.refit.alpha_tilde, v, v, data.n(), diag)
}

/// `E_n[w d z]`, the derivative of the estimating equation in `alpha`.
fn jacobian(data: &Dataset, w: &[f64], z: &[f64]) -> f64 {
    (0..data.n()).map(|i| w[i] * data.d()[i] * z[i]).sum::<f64>() / data.n() as f64
}

fn golden_section<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

fn bisect_root<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let mut fa = f(a);
    while b - a > tol {
        let m = 0.5 * (a + b);
        let fm = f(m);
        if fm == 0.0 {
            return m;
        }
        if (fm < 0.0) == (fa < 0.0) {
            a = m;
            fa = fm;
        } else {
            b = m;
        }
    }
    0.5 * (a + b)
}

/// Instrumental logistic regression with a given instrument.
///
/// Minimizes `L_n` over `|alpha - alpha_tilde| <= C / ln n` by a 401-point
/// grid followed by golden-section refinement, and cross-checks against the
/// sign change of the score.
pub fn fit_iv(
    data: &Dataset,
    step1: &Step1Output,
    instrument: &InstrumentSet,
    search_constant: f64,
) -> Result<(InferenceResult, CriterionProfile)> {
    if !(search_constant > 0.0) {
        return Err(Error::Argument(format!("search constant must be positive, got {search_constant}")));
    }
    let n = data.n();
    let offset = data.x_times(&step1.refit.beta_tilde);
    let crit = IvCriterion::new(data, offset, instrument.z_hat.clone())?;
    let jac = jacobian(data, &instrument.w_hat, &instrument.z_hat);
    if !(jac.abs() >= WEAK_INSTRUMENT_TOL) {
        return Err(Error::WeakInstrument(jac.abs()));
    }

    let center = step1.refit.alpha_tilde;
    let half = search_constant / (n as f64).ln();
    let (lo, hi) = (center - half, center + half);
    let h = (hi - lo) / (GRID_POINTS - 1) as f64;
    let mut evaluations = Vec::with_capacity(GRID_POINTS);
    for k in 0..GRID_POINTS {
        let a = lo + h * k as f64;
        evaluations.push((a, crit.value(a)?));
    }
    let (kmin, _) = evaluations
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |best, (k, &(_, v))| if v < best.1 { (k, v) } else { best });
    let a = evaluations[kmin.saturating_sub(1)].0;
    let b = evaluations[(kmin + 1).min(GRID_POINTS - 1)].0;
    let objective = |t: f64| crit.value(t).unwrap_or(f64::INFINITY);
    let mut minimizer = golden_section(objective, a, b, GOLDEN_TOL);
    if objective(evaluations[kmin].0) < objective(minimizer) {
        minimizer = evaluations[kmin].0;
    }

    let mut diag = step1_diagnostics(step1);
    diag.support_final = step1.refit.support.clone();
    let edge = 1e-8 * (1.0 + half);
    if (minimizer - lo).abs() <= edge || (hi - minimizer).abs() <= edge {
        diag.boundary_hit = true;
        diag.warnings.push("IV minimizer sits on the edge of the search window".into());
    }

    // sign-change cross-check
    let scores: Vec<f64> = evaluations.iter().map(|&(t, _)| crit.score(t)).collect();
    let mut best_root: Option<f64> = None;
    for k in 0..GRID_POINTS - 1 {
        let (s0, s1) = (scores[k], scores[k + 1]);
        if s0 == 0.0 || (s0 < 0.0) != (s1 < 0.0) {
            let root = if s0 == 0.0 {
                evaluations[k].0
            } else {
                bisect_root(|t| crit.score(t), evaluations[k].0, evaluations[k + 1].0, 1e-12)
            };
            if best_root.map_or(true, |r| (root - minimizer).abs() < (r - minimizer).abs()) {
                best_root = Some(root);
            }
        }
    }
    diag.grid_root_agree = best_root.map(|r| (r - minimizer).abs() <= h * (1.0 + 1e-9));

    let (_, q) = crit.moments(minimizer);
    let sigma1 = q / (jac * jac);
    let sigma2 = match instrument.kind {
        InstrumentKind::Optimal => {
            let e = (0..n)
                .map(|i| instrument.w_hat[i] * instrument.z_hat[i] * instrument.z_hat[i])
                .sum::<f64>()
                / n as f64;
            1.0 / e
        }
        _ => sigma1,
    };
    let method = match instrument.kind {
        InstrumentKind::SuboptimalRemark1 => Method::SuboptimalIv,
        _ => Method::OptimalIv,
    };
    let result = InferenceResult::new(method, minimizer, sigma1, sigma2, n, diag)?;
    let profile = CriterionProfile {
        search_interval: (lo, hi),
        evaluations,
        minimizer,
        criterion: crit,
    };
    Ok((result, profile))
}

/// Optimal-instrument estimator with the Step-2 instrument.
pub fn fit_optimal_iv(
    data: &Dataset,
    step1: &Step1Output,
    step2: &WeightedLassoFit,
    search_constant: f64,
) -> Result<(InferenceResult, CriterionProfile)> {
    let inst = InstrumentSet::optimal(step1, step2);
    let (mut res, profile) = fit_iv(data, step1, &inst, search_constant)?;
    res.diagnostics.support_step2 = step2.support.clone();
    res.diagnostics.lambda2 = Some(step2.lambda2);
    res.diagnostics.dropped_collinear = step2.dropped.clone();
    Ok((res, profile))
}

/// Double-selection estimator: logistic MLE of `y` on `d` and the union of
/// the two selected supports.
pub fn fit_double_selection(data: &Dataset, step1: &Step1Output, step2: &WeightedLassoFit) -> Result<InferenceResult> {
    let n = data.n();
    let union = with_unpenalized(
        data,
        &step1.support.iter().chain(&step2.support).copied().collect::<Vec<_>>(),
    );
    let refit = fit_logistic_refit(data, &union)?;
    let index = refit.index(data);
    let mut degenerate = 0;
    let w: Vec<f64> = index
        .iter()
        .map(|&t| {
            let g = sigmoid(t);
            let w = g * (1.0 - g);
            if w < DEGENERATE_WEIGHT {
                degenerate += 1;
                0.0
            } else {
                w
            }
        })
        .collect();
    let mut diag = step1_diagnostics(step1);
    diag.support_step2 = step2.support.clone();
    diag.support_final = refit.support.clone();
    diag.lambda2 = Some(step2.lambda2);
    diag.dropped_collinear = step2.dropped.clone();
    if degenerate * 10 > n {
        diag.warnings.push(format!("{degenerate} of {n} observations have degenerate weights"));
    }

    let z = &step2.z_hat;
    let sigma2 = refit.inverse_fisher_11()?;
    let jac = jacobian(data, &w, z);
    let sigma1 = if jac.abs() >= WEAK_INSTRUMENT_TOL {
        let q = (0..n)
            .map(|i| {
                let r = (data.y()[i] - sigmoid(index[i])) * z[i];
                r * r
            })
            .sum::<f64>()
            / n as f64;
        q / (jac * jac)
    } else {
        diag.warnings.push("implicit instrument is weak; sandwich variance replaced by the model variance".into());
        sigma2
    };
    InferenceResult::new(Method::DoubleSelection, refit.alpha_tilde, sigma1, sigma2, n, diag)
}

/// Refit used by [`fit_double_selection`], exposed for checking the
/// first-order conditions.
pub fn double_selection_refit(data: &Dataset, step1: &Step1Output, step2: &WeightedLassoFit) -> Result<RefitLogisticFit> {
    let union = with_unpenalized(
        data,
        &step1.support.iter().chain(&step2.support).copied().collect::<Vec<_>>(),
    );
    fit_logistic_refit(data, &union)
}

/// One Newton-type correction from the penalized estimate:
/// `alpha_hat + E_n[(y - G(d alpha_hat + x'beta_hat)) z] / E_n[w d z]`.
pub fn one_step_estimator(data: &Dataset, step1: &Step1Output, instrument: &InstrumentSet) -> Result<f64> {
    let jac = jacobian(data, &instrument.w_hat, &instrument.z_hat);
    if !(jac.abs() >= WEAK_INSTRUMENT_TOL) {
        return Err(Error::WeakInstrument(jac.abs()));
    }
    let offset = data.x_times(&step1.lasso.beta_hat);
    let crit = IvCriterion::new(data, offset, instrument.z_hat.clone())?;
    Ok(step1.lasso.alpha_hat + crit.score(step1.lasso.alpha_hat) / jac)
}

fn fit_one_step(data: &Dataset, step1: &Step1Output, step2: &WeightedLassoFit) -> Result<InferenceResult> {
    let inst = InstrumentSet::optimal(step1, step2);
    let alpha = one_step_estimator(data, step1, &inst)?;
    let n = data.n();
    let jac = jacobian(data, &inst.w_hat, &inst.z_hat);
    let crit = IvCriterion::new(data, data.x_times(&step1.lasso.beta_hat), inst.z_hat.clone())?;
    let (_, q) = crit.moments(alpha);
    let e = (0..n).map(|i| inst.w_hat[i] * inst.z_hat[i] * inst.z_hat[i]).sum::<f64>() / n as f64;
    let mut diag = step1_diagnostics(step1);
    diag.support_step2 = step2.support.clone();
    diag.lambda2 = Some(step2.lambda2);
    InferenceResult::new(Method::OneStep, alpha, q / (jac * jac), 1.0 / e, n, diag)
}

/// Instrument `(d - x'theta_d) / w` with `theta_d` from an unweighted
/// post-Lasso of `d` on `x` using the same loadings algorithm.
pub fn suboptimal_instrument(data: &Dataset, step1: &Step1Output, lambda2: f64) -> Result<InstrumentSet> {
    let n = data.n();
    let unit = Step1Weights {
        index: step1.weights.index.clone(),
        w_hat: step1.weights.w_hat.clone(),
        sigma_hat: vec![1.0; n],
        f_hat: vec![1.0; n],
        h0_mode: true,
    };
    let fit = run_step2(data, &unit, lambda2, Step2Mode::PostLasso)?;
    let z_hat = fit
        .v_hat
        .iter()
        .zip(&step1.weights.w_hat)
        .map(|(u, w)| u / w)
        .collect();
    Ok(InstrumentSet {
        z_hat,
        w_hat: step1.weights.w_hat.clone(),
        kind: InstrumentKind::SuboptimalRemark1,
    })
}

/// Standardizes a dataset, runs Step 1 eagerly and Step 2 on first use, and
/// reports every estimator on the original scale.
#[derive(Debug)]
pub struct Analysis {
    pub standardized: Standardized,
    pub config: PipelineConfig,
    pub step1: Step1Output,
    pub lambda2: f64,
    step2: OnceLock<Result<WeightedLassoFit>>,
}

impl Analysis {
    pub fn new(data: &Dataset, config: PipelineConfig) -> Result<Self> {
        let standardized = data.standardize()?;
        let step1 = run_step1(&standardized.data, &config)?;
        let work = &standardized.data;
        let lambda2 = penalty_lambda2(work.n(), work.p());
        Ok(Self {
            standardized,
            config,
            step1,
            lambda2,
            step2: OnceLock::new(),
        })
    }

    /// Dataset on the working (unit second moment) scale.
    pub fn working(&self) -> &Dataset {
        &self.standardized.data
    }

    pub fn step2(&self) -> Result<&WeightedLassoFit> {
        self.step2
            .get_or_init(|| run_step2(self.working(), &self.step1.weights, self.lambda2, Step2Mode::PostLasso))
            .as_ref()
            .map_err(Clone::clone)
    }

    fn finish(&self, mut r: InferenceResult) -> InferenceResult {
        r.diagnostics.warnings.extend(self.standardized.warnings.iter().cloned());
        r.rescaled(self.standardized.d_scale)
    }

    pub fn naive(&self) -> Result<InferenceResult> {
        fit_naive_post_selection(self.working(), &self.step1).map(|r| self.finish(r))
    }

    pub fn optimal_iv(&self) -> Result<(InferenceResult, CriterionProfile)> {
        let (r, p) = fit_optimal_iv(self.working(), &self.step1, self.step2()?, self.config.search_constant)?;
        Ok((self.finish(r), p.rescaled(self.standardized.d_scale)))
    }

    pub fn double_selection(&self) -> Result<InferenceResult> {
        fit_double_selection(self.working(), &self.step1, self.step2()?).map(|r| self.finish(r))
    }

    pub fn one_step(&self) -> Result<InferenceResult> {
        fit_one_step(self.working(), &self.step1, self.step2()?).map(|r| self.finish(r))
    }

    pub fn suboptimal_iv(&self) -> Result<(InferenceResult, CriterionProfile)> {
        let inst = suboptimal_instrument(self.working(), &self.step1, self.lambda2)?;
        let (r, p) = fit_iv(self.working(), &self.step1, &inst, self.config.search_constant)?;
        Ok((self.finish(r), p.rescaled(self.standardized.d_scale)))
    }

    /// Result and, for IV methods, the criterion profile.
    pub fn fit(&self, method: Method) -> Result<(InferenceResult, Option<CriterionProfile>)> {
        match method {
            Method::Naive => self.naive().map(|r| (r, None)),
            Method::OptimalIv => self.optimal_iv().map(|(r, p)| (r, Some(p))),
            Method::DoubleSelection => self.double_selection().map(|r| (r, None)),
            Method::OneStep => self.one_step().map(|r| (r, None)),
            Method::SuboptimalIv => self.suboptimal_iv().map(|(r, p)| (r, Some(p))),
        }
    }

    /// Supports mapped back to original column indices.
    pub fn original_support(&self, support: &[usize]) -> Vec<usize> {
        self.standardized.original_support(support)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn hand_dataset() -> Dataset {
        let x = DMatrix::from_element(4, 1, 0.0);
        Dataset::new(vec![1.0, 0.0, 1.0, 0.0], vec![1.0, -1.0, 1.0, -1.0], x).unwrap()
    }

    #[test]
    fn ln_hand_example() {
        let data = hand_dataset();
        let v = criterion_ln(&data, &[0.0], data.d(), 0.0).unwrap();
        // numerator |E_n[(y - 1/2) d]|^2 = 0.25, denominator E_n[(y - 1/2)^2 d^2] = 0.25
        let num: f64 = (0..4).map(|i| (data.y()[i] - 0.5) * data.d()[i]).sum::<f64>() / 4.0;
        let den: f64 = (0..4).map(|i| ((data.y()[i] - 0.5) * data.d()[i]).powi(2)).sum::<f64>() / 4.0;
        assert!((num * num - 0.25).abs() < 1e-15 && (den - 0.25).abs() < 1e-15);
        assert!((v - 1.0).abs() < 1e-15, "{v}");
    }

    #[test]
    fn ln_degenerate_and_zero_numerator() {
        let data = hand_dataset();
        assert!(matches!(
            criterion_ln(&data, &[0.0], &[0.0; 4], 0.0),
            Err(Error::DegenerateInstrument(_))
        ));
        // instrument orthogonal to the residual
        let z = [1.0, 1.0, -1.0, -1.0];
        assert_eq!(criterion_ln(&data, &[0.0], &z, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn golden_and_bisection() {
        let m = golden_section(|t| (t - 0.3).powi(2), -1.0, 2.0, 1e-10);
        assert!((m - 0.3).abs() < 1e-9);
        let r = bisect_root(|t| t * t * t - 2.0, 0.0, 2.0, 1e-13);
        assert!((r - 2f64.cbrt()).abs() < 1e-12);
    }

    fn simulated(n: usize, p: usize, alpha0: f64, seed: u64) -> Dataset {
        let spec = crate::simulate::DgpSpec {
            n,
            p,
            alpha0,
            ..crate::simulate::DgpSpec::baseline()
        };
        crate::simulate::DgpSampler::new(spec)
            .unwrap()
            .draw(crate::numeric::RngStream::new(seed, 0))
            .unwrap()
            .data
    }

    #[test]
    fn ln_is_invariant_to_instrument_scale() {
        let data = simulated(80, 12, 0.3, 5);
        let beta: Vec<f64> = (0..12).map(|j| 0.1 * j as f64 - 0.4).collect();
        let z: Vec<f64> = data.d().iter().map(|v| v - 0.2).collect();
        for c in [-3.0, 1e-3, 7.5] {
            let zc: Vec<f64> = z.iter().map(|v| c * v).collect();
            for a in [-1.0, 0.0, 0.4, 2.0] {
                let l0 = criterion_ln(&data, &beta, &z, a).unwrap();
                let l1 = criterion_ln(&data, &beta, &zc, a).unwrap();
                assert!((l0 - l1).abs() <= 1e-14 * l0.max(1e-300), "{l0} {l1}");
            }
        }
    }

    #[test]
    fn optimal_iv_profile_and_variances() {
        let data = simulated(150, 30, 0.5, 2);
        let a = Analysis::new(&data, PipelineConfig::default()).unwrap();
        let (r, prof) = a.optimal_iv().unwrap();
        let (lo, hi) = prof.search_interval;
        let center = a.step1.refit.alpha_tilde / a.standardized.d_scale;
        let half = DEFAULT_SEARCH_CONSTANT / (150f64).ln() / a.standardized.d_scale;
        assert!((0.5 * (lo + hi) - center).abs() < 1e-12 && (0.5 * (hi - lo) - half).abs() < 1e-12);
        assert!(lo <= r.alpha_check && r.alpha_check <= hi);
        assert_eq!(prof.evaluations.len(), GRID_POINTS);
        assert_eq!(r.diagnostics.grid_root_agree, Some(true));
        assert!(r.sigma1_sq > 0.0 && r.sigma2_sq > 0.0);
        assert_eq!(r.sigma_used, r.sigma1_sq.max(r.sigma2_sq));
        // grid values on the original scale reproduce the stored profile
        let m = prof.criterion.value(r.alpha_check).unwrap();
        assert!(prof.evaluations.iter().all(|&(_, v)| m <= v + 1e-15));
    }

    #[test]
    fn iv_estimate_ignores_instrument_scale() {
        let data = simulated(150, 30, 0.5, 3);
        let a = Analysis::new(&data, PipelineConfig::default()).unwrap();
        let work = a.working();
        let st2 = a.step2().unwrap();
        let inst = InstrumentSet::optimal(&a.step1, st2);
        let mut scaled = inst.clone();
        scaled.z_hat.iter_mut().for_each(|z| *z *= -4.0);
        let (r0, _) = fit_iv(work, &a.step1, &inst, 10.0).unwrap();
        let (r1, _) = fit_iv(work, &a.step1, &scaled, 10.0).unwrap();
        assert!((r0.alpha_check - r1.alpha_check).abs() < 1e-9);
        assert!((r0.sigma1_sq - r1.sigma1_sq).abs() < 1e-8 * r0.sigma1_sq);
    }

    #[test]
    fn weak_instrument_is_reported() {
        let data = simulated(60, 8, 0.0, 4);
        let a = Analysis::new(&data, PipelineConfig::default()).unwrap();
        let work = a.working();
        let w = &a.step1.weights.w_hat;
        // remove the component of z along w d so that E_n[w d z] = 0
        let mut z: Vec<f64> = (0..60).map(|i| ((i * 7 % 11) as f64) - 5.0).collect();
        let wd: Vec<f64> = (0..60).map(|i| w[i] * work.d()[i]).collect();
        let k = crate::numeric::dot(&wd, &z) / crate::numeric::dot(&wd, &wd);
        z.iter_mut().zip(&wd).for_each(|(zi, v)| *zi -= k * v);
        let inst = InstrumentSet {
            z_hat: z,
            w_hat: w.clone(),
            kind: InstrumentKind::Optimal,
        };
        assert!(matches!(fit_iv(work, &a.step1, &inst, 10.0), Err(Error::WeakInstrument(_))));
        assert!(matches!(one_step_estimator(work, &a.step1, &inst), Err(Error::WeakInstrument(_))));
    }

    #[test]
    fn double_selection_first_order_conditions() {
        for seed in 0..4 {
            let data = simulated(200, 60, 0.2, seed);
            let a = Analysis::new(&data, PipelineConfig::default()).unwrap();
            let work = a.working();
            let st2 = a.step2().unwrap();
            let refit = double_selection_refit(work, &a.step1, st2).unwrap();
            let idx = refit.index(work);
            let n = work.n() as f64;
            let resid: Vec<f64> = (0..work.n()).map(|i| work.y()[i] - sigmoid(idx[i])).collect();
            assert!((crate::numeric::dot(&resid, work.d()) / n).abs() < 1e-8);
            for &j in &refit.support {
                assert!((crate::numeric::dot(&resid, work.col(j)) / n).abs() < 1e-8);
            }
            let union: Vec<usize> = {
                let mut u: Vec<usize> = a.step1.support.iter().chain(&st2.support).copied().collect();
                u.sort_unstable();
                u.dedup();
                u
            };
            assert_eq!(refit.support, union);
            let r = a.double_selection().unwrap();
            assert!((r.alpha_check - refit.alpha_tilde / a.standardized.d_scale).abs() < 1e-15);
        }
    }

    #[test]
    fn intercept_only_controls_reduce_to_simple_logistic() {
        // x is a single intercept column, so every selection is empty and
        // naive and double selection both equal the MLE of y on (d, 1)
        let full = simulated(150, 10, 0.7, 9);
        let x = DMatrix::from_element(150, 1, 1.0);
        let data = Dataset::new(full.y().to_vec(), full.d().to_vec(), x).unwrap().with_intercept(0).unwrap();
        let a = Analysis::new(&data, PipelineConfig::default()).unwrap();
        let naive = a.naive().unwrap();
        let ds = a.double_selection().unwrap();
        assert!((naive.alpha_check - ds.alpha_check).abs() < 1e-12);
        assert_eq!(ds.diagnostics.support_final, vec![0]);
    }

    #[test]
    fn one_step_fixed_point() {
        let data = simulated(120, 20, 0.4, 6);
        let a = Analysis::new(&data, PipelineConfig::default()).unwrap();
        let work = a.working();
        let lasso = &a.step1.lasso;
        let off = work.x_times(&lasso.beta_hat);
        let r: Vec<f64> = (0..120)
            .map(|i| work.y()[i] - sigmoid(work.d()[i] * lasso.alpha_hat + off[i]))
            .collect();
        // instrument orthogonal to the residual at the penalized estimate
        let mut z = work.d().to_vec();
        let k = crate::numeric::dot(&r, &z) / crate::numeric::dot(&r, &r);
        z.iter_mut().zip(&r).for_each(|(zi, ri)| *zi -= k * ri);
        let inst = InstrumentSet {
            z_hat: z,
            w_hat: a.step1.weights.w_hat.clone(),
            kind: InstrumentKind::Optimal,
        };
        let got = one_step_estimator(work, &a.step1, &inst).unwrap();
        assert!((got - lasso.alpha_hat).abs() < 1e-14);
    }

    #[test]
    fn suboptimal_instrument_is_scaled_plain_residual() {
        let data = simulated(150, 25, 0.3, 8);
        let a = Analysis::new(&data, PipelineConfig::default()).unwrap();
        let work = a.working();
        let inst = suboptimal_instrument(work, &a.step1, a.lambda2).unwrap();
        assert_eq!(inst.kind, InstrumentKind::SuboptimalRemark1);
        let u: Vec<f64> = inst.z_hat.iter().zip(&inst.w_hat).map(|(z, w)| z * w).collect();
        let plain = run_step2(
            work,
            &Step1Weights {
                index: vec![0.0; 150],
                w_hat: vec![0.25; 150],
                sigma_hat: vec![1.0; 150],
                f_hat: vec![1.0; 150],
                h0_mode: true,
            },
            a.lambda2,
            Step2Mode::PostLasso,
        )
        .unwrap();
        for &j in &plain.support {
            assert!((crate::numeric::dot(&u, work.col(j)) / 150.0).abs() < 1e-10);
        }
        for i in 0..150 {
            assert!((u[i] - plain.v_hat[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn permutation_invariance() {
        let data = simulated(120, 20, 0.4, 12);
        let perm: Vec<usize> = (0..120).map(|i| (i * 37 + 11) % 120).collect();
        let shuffled = data.permute_rows(&perm).unwrap();
        let a = Analysis::new(&data, PipelineConfig::default()).unwrap();
        let b = Analysis::new(&shuffled, PipelineConfig::default()).unwrap();
        for m in [Method::Naive, Method::OptimalIv, Method::DoubleSelection, Method::OneStep, Method::SuboptimalIv] {
            let (ra, _) = a.fit(m).unwrap();
            let (rb, _) = b.fit(m).unwrap();
            assert!((ra.alpha_check - rb.alpha_check).abs() <= 1e-12, "{m:?} {} {}", ra.alpha_check, rb.alpha_check);
            assert!((ra.sigma1_sq - rb.sigma1_sq).abs() <= 1e-12 * ra.sigma1_sq.max(1.0), "{m:?}");
            assert!((ra.sigma2_sq - rb.sigma2_sq).abs() <= 1e-12 * ra.sigma2_sq.max(1.0), "{m:?}");
            assert_eq!(ra.diagnostics.support_final, rb.diagnostics.support_final);
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in [Method::Naive, Method::OptimalIv, Method::DoubleSelection, Method::OneStep, Method::SuboptimalIv] {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("bogus".parse::<Method>().is_err());
    }
}
