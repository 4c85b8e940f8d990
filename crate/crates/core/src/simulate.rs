//! Simulation designs and the Monte Carlo runner.
//!
//! Controls are `x = (1, z')'` with `z ~ N(0, Theta)`, `Theta_ij = rho^|i-j|`.
//! By default the coefficient patterns are laid over `z` and the intercept
//! has a zero coefficient; [`Layout::Controls`] lays them over `x`, so their
//! first entry shifts the intercept.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimators::{Analysis, Method, PipelineConfig};
use crate::inference::{test_alpha, RegionKind};
use crate::numeric::{sigmoid, RngStream};

/// Share of failed replications above which a summary is flagged invalid.
pub const MAX_FAILURE_RATE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Design {
    SparseDecline,
    ApproxQuadratic,
}

impl Design {
    pub fn name(&self) -> &'static str {
        match self {
            Design::SparseDecline => "sparse",
            Design::ApproxQuadratic => "approx",
        }
    }

    /// Coefficients on the covariates `z` (length `k`).
    pub fn nu(&self, equation: Equation, k: usize) -> Vec<f64> {
        match self {
            Design::SparseDecline => {
                let pattern: Vec<f64> = match equation {
                    Equation::Y => (0..15)
                        .map(|j| match j {
                            0..=4 => 1.0 / (j + 1) as f64,
                            10..=14 => 1.0 / (j - 9) as f64,
                            _ => 0.0,
                        })
                        .collect(),
                    Equation::D => (1..=10).map(|j| 1.0 / j as f64).collect(),
                };
                (0..k).map(|j| pattern.get(j).copied().unwrap_or(0.0)).collect()
            }
            Design::ApproxQuadratic => (1..=k).map(|j| 1.0 / (j * j) as f64).collect(),
        }
    }
}

impl std::str::FromStr for Design {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sparse" | "sparse_decline" => Ok(Design::SparseDecline),
            "approx" | "approx_quadratic" => Ok(Design::ApproxQuadratic),
            other => Err(Error::Argument(format!("unknown design '{other}'"))),
        }
    }
}

/// Where the coefficient pattern starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// `nu` indexes `x = (1, z')'`; the first entry is an intercept shift.
    Controls,
    /// `nu` indexes `z`; the intercept coefficient is zero.
    Covariates,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Equation {
    D,
    Y,
}

/// `nu' Theta nu` for `Theta_ij = rho^|i-j|`.
pub fn toeplitz_quadratic_form(nu: &[f64], rho: f64) -> f64 {
    let nz: Vec<usize> = (0..nu.len()).filter(|&j| nu[j] != 0.0).collect();
    let mut q = 0.0;
    for &i in &nz {
        for &j in &nz {
            q += nu[i] * nu[j] * rho.powi((i as i32 - j as i32).abs());
        }
    }
    q
}

/// Signal constant `c = sqrt(r2 / ((1 - r2) q))` with `q = nu' Theta nu` over
/// the first `p - 1` pattern entries.
///
/// Under [`Layout::Covariates`] this gives `Var(c z'nu) / (Var(c z'nu) + 1) = r2`
/// exactly.
pub fn calibrate_signal(design: Design, rho: f64, p: usize, r2: f64, equation: Equation) -> Result<f64> {
    if !(0.0..1.0).contains(&r2) {
        return Err(Error::Domain(format!("target R^2 must lie in [0, 1), got {r2}")));
    }
    if p < 2 {
        return Err(Error::Argument("need at least one covariate besides the intercept".into()));
    }
    if r2 == 0.0 {
        return Ok(0.0);
    }
    let q = toeplitz_quadratic_form(&design.nu(equation, p - 1), rho);
    Ok((r2 / ((1.0 - r2) * q)).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DgpSpec {
    pub design: Design,
    pub n: usize,
    pub p: usize,
    pub alpha0: f64,
    pub rho: f64,
    pub r2_d: f64,
    pub r2_y: f64,
    pub layout: Layout,
}

impl DgpSpec {
    /// Design of the headline experiment: n = 200, p = 250, alpha0 = 0.2,
    /// both R^2 at 0.75.
    pub fn baseline() -> Self {
        Self {
            design: Design::SparseDecline,
            n: 200,
            p: 250,
            alpha0: 0.2,
            rho: 0.5,
            r2_d: 0.75,
            r2_y: 0.75,
            layout: Layout::Covariates,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.p < 2 {
            return Err(Error::Argument(format!("need n >= 2 and p >= 2, got n = {}, p = {}", self.n, self.p)));
        }
        if !(self.rho > -1.0 && self.rho < 1.0) {
            return Err(Error::Domain(format!("rho must lie in (-1, 1), got {}", self.rho)));
        }
        if !self.alpha0.is_finite() {
            return Err(Error::Argument("alpha0 must be finite".into()));
        }
        Ok(())
    }

    pub fn c_d(&self) -> Result<f64> {
        calibrate_signal(self.design, self.rho, self.p, self.r2_d, Equation::D)
    }

    pub fn c_y(&self) -> Result<f64> {
        calibrate_signal(self.design, self.rho, self.p, self.r2_y, Equation::Y)
    }
}

/// One simulated dataset and its latent quantities.
#[derive(Debug, Clone)]
pub struct Draw {
    pub data: Dataset,
    /// `d_i alpha0 + c_y x_i'nu_y`.
    pub index: Vec<f64>,
    /// `c_d x_i'nu_d`.
    pub d_signal: Vec<f64>,
}

/// Draws datasets for a fixed spec; the Cholesky factor of `Theta` is
/// computed once.
#[derive(Debug, Clone)]
pub struct DgpSampler {
    pub spec: DgpSpec,
    pub c_d: f64,
    pub c_y: f64,
    /// Coefficients on the `p` columns of `x`.
    pub nu_d: Vec<f64>,
    pub nu_y: Vec<f64>,
    chol: DMatrix<f64>,
}

impl DgpSampler {
    pub fn new(spec: DgpSpec) -> Result<Self> {
        spec.validate()?;
        let k = spec.p - 1;
        let lay = |nu: Vec<f64>| match spec.layout {
            Layout::Controls => nu,
            Layout::Covariates => std::iter::once(0.0).chain(nu.into_iter().take(k)).collect(),
        };
        let theta = DMatrix::from_fn(k, k, |i, j| spec.rho.powi((i as i32 - j as i32).abs()));
        let chol = theta
            .cholesky()
            .ok_or_else(|| Error::Numeric(format!("Cholesky of the covariate covariance failed (rho = {})", spec.rho)))?
            .l();
        Ok(Self {
            spec,
            c_d: spec.c_d()?,
            c_y: spec.c_y()?,
            nu_d: lay(spec.design.nu(Equation::D, spec.p)),
            nu_y: lay(spec.design.nu(Equation::Y, spec.p)),
            chol,
        })
    }

    pub fn draw(&self, stream: RngStream) -> Result<Draw> {
        let (n, p) = (self.spec.n, self.spec.p);
        let k = p - 1;
        let mut rng = stream.rng();
        let mut x = DMatrix::zeros(n, p);
        let mut d = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        let mut index = Vec::with_capacity(n);
        let mut d_signal = Vec::with_capacity(n);
        let mut e = DVector::zeros(k);
        for i in 0..n {
            for v in e.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let z = &self.chol * &e;
            x[(i, 0)] = 1.0;
            let (mut sd, mut sy) = (self.nu_d[0], self.nu_y[0]);
            for j in 0..k {
                x[(i, j + 1)] = z[j];
                sd += self.nu_d[j + 1] * z[j];
                sy += self.nu_y[j + 1] * z[j];
            }
            sd *= self.c_d;
            sy *= self.c_y;
            let v: f64 = rng.sample(StandardNormal);
            let di = sd + v;
            let t = di * self.spec.alpha0 + sy;
            let u: f64 = rng.gen();
            y.push(if u < sigmoid(t) { 1.0 } else { 0.0 });
            d.push(di);
            index.push(t);
            d_signal.push(sd);
        }
        let data = Dataset::new(y, d, x)?.with_intercept(0)?;
        Ok(Draw { data, index, d_signal })
    }
}

/// Region used for the rejection frequency of each method.
pub fn wald_region(method: Method) -> RegionKind {
    match method {
        Method::Naive => RegionKind::Naive,
        Method::DoubleSelection => RegionKind::DoubleSelection,
        Method::OptimalIv | Method::OneStep | Method::SuboptimalIv => RegionKind::Direct,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct McConfig {
    pub methods: Vec<Method>,
    pub reps: usize,
    pub xi: f64,
    pub seed: u64,
    /// Worker threads; 0 uses the rayon default.
    pub threads: usize,
    pub pipeline: PipelineConfig,
}

impl McConfig {
    pub fn new(reps: usize, seed: u64) -> Self {
        Self {
            methods: vec![Method::Naive, Method::OptimalIv, Method::DoubleSelection],
            reps,
            xi: 0.05,
            seed,
            threads: 0,
            pipeline: PipelineConfig::default(),
        }
    }
}

/// Outcome of one method on one replication.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RepOutcome {
    pub alpha_check: f64,
    pub std_err: f64,
    pub reject: bool,
    /// `n L_n(alpha0)` and the matching test decision, IV methods only.
    pub ln_statistic: Option<f64>,
    pub reject_indirect: Option<bool>,
}

/// One replication: per-method outcomes in `McConfig::methods` order.
pub type RepRecord = Vec<std::result::Result<RepOutcome, String>>;

fn one_replication(sampler: &DgpSampler, cfg: &McConfig, rep: usize) -> RepRecord {
    let fail_all = |e: Error| cfg.methods.iter().map(|_| Err(e.to_string())).collect();
    let draw = match sampler.draw(RngStream::new(cfg.seed, rep as u64)) {
        Ok(d) => d,
        Err(e) => return fail_all(e),
    };
    let analysis = match Analysis::new(&draw.data, cfg.pipeline) {
        Ok(a) => a,
        Err(e) => return fail_all(e),
    };
    let alpha0 = sampler.spec.alpha0;
    cfg.methods
        .iter()
        .map(|&m| {
            let (res, profile) = analysis.fit(m).map_err(|e| e.to_string())?;
            let wald = test_alpha(&res, None, wald_region(m), alpha0, cfg.xi).map_err(|e| e.to_string())?;
            let (ln_statistic, reject_indirect) = match &profile {
                Some(p) => {
                    let t = test_alpha(&res, Some(p), RegionKind::Indirect, alpha0, cfg.xi).map_err(|e| e.to_string())?;
                    (Some(t.statistic), Some(t.reject))
                }
                None => (None, None),
            };
            Ok(RepOutcome {
                alpha_check: res.alpha_check,
                std_err: res.std_err(),
                reject: wald.reject,
                ln_statistic,
                reject_indirect,
            })
        })
        .collect()
}

/// Runs every replication; the result is in replication order and does not
/// depend on the number of threads.
pub fn run_replications(spec: &DgpSpec, cfg: &McConfig) -> Result<Vec<RepRecord>> {
    if cfg.reps == 0 {
        return Err(Error::Argument("reps must be at least 1".into()));
    }
    if cfg.methods.is_empty() {
        return Err(Error::Argument("no methods requested".into()));
    }
    if !(cfg.xi > 0.0 && cfg.xi <= 0.5) {
        return Err(Error::Argument(format!("xi must lie in (0, 0.5], got {}", cfg.xi)));
    }
    let sampler = DgpSampler::new(*spec)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Argument(format!("cannot build thread pool: {e}")))?;
    Ok(pool.install(|| {
        (0..cfg.reps)
            .into_par_iter()
            .map(|rep| one_replication(&sampler, cfg, rep))
            .collect()
    }))
}

#[derive(Debug, Clone, Serialize)]
pub struct MethodSummary {
    pub method: Method,
    pub successes: usize,
    pub failure_rate: f64,
    pub bias: f64,
    pub variance: f64,
    pub rmse: f64,
    pub rp: f64,
    /// Rejection frequency of the criterion-based region (IV methods).
    pub rp_indirect: Option<f64>,
    /// Monte Carlo standard errors; `None` with fewer than two successes.
    pub se_bias: Option<f64>,
    pub se_variance: Option<f64>,
    pub se_rmse: Option<f64>,
    pub se_rp: Option<f64>,
    pub invalid: bool,
    /// Distinct failure messages with counts.
    pub failures: Vec<(String, usize)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct McSummary {
    pub spec: DgpSpec,
    pub reps: usize,
    pub seed: u64,
    pub xi: f64,
    pub methods: Vec<MethodSummary>,
}

/// Aggregates per-replication outcomes of one method.
pub fn summarize_method(method: Method, alpha0: f64, outcomes: &[&std::result::Result<RepOutcome, String>]) -> MethodSummary {
    let reps = outcomes.len();
    let ok: Vec<&RepOutcome> = outcomes.iter().filter_map(|o| o.as_ref().ok()).collect();
    let mut failures: Vec<(String, usize)> = Vec::new();
    for e in outcomes.iter().filter_map(|o| o.as_ref().err()) {
        match failures.iter_mut().find(|(m, _)| m == e) {
            Some(f) => f.1 += 1,
            None => failures.push((e.clone(), 1)),
        }
    }
    let m = ok.len();
    let failure_rate = (reps - m) as f64 / reps as f64;
    let invalid = failure_rate > MAX_FAILURE_RATE;
    if m == 0 {
        return MethodSummary {
            method,
            successes: 0,
            failure_rate,
            bias: f64::NAN,
            variance: f64::NAN,
            rmse: f64::NAN,
            rp: f64::NAN,
            rp_indirect: None,
            se_bias: None,
            se_variance: None,
            se_rmse: None,
            se_rp: None,
            invalid: true,
            failures,
        };
    }
    let mf = m as f64;
    let mean = ok.iter().map(|o| o.alpha_check).sum::<f64>() / mf;
    let variance = ok.iter().map(|o| (o.alpha_check - mean).powi(2)).sum::<f64>() / mf;
    let bias = mean - alpha0;
    let mse = bias * bias + variance;
    let rmse = mse.sqrt();
    let rp = ok.iter().filter(|o| o.reject).count() as f64 / mf;
    let rp_indirect = if ok.iter().all(|o| o.reject_indirect.is_some()) {
        Some(ok.iter().filter(|o| o.reject_indirect == Some(true)).count() as f64 / mf)
    } else {
        None
    };
    let (se_bias, se_variance, se_rmse, se_rp) = if m >= 2 {
        let m4 = ok.iter().map(|o| (o.alpha_check - mean).powi(4)).sum::<f64>() / mf;
        let sq: Vec<f64> = ok.iter().map(|o| (o.alpha_check - alpha0).powi(2)).collect();
        let sq_mean = sq.iter().sum::<f64>() / mf;
        let sq_var = sq.iter().map(|s| (s - sq_mean).powi(2)).sum::<f64>() / mf;
        let se_mse = (sq_var / mf).sqrt();
        (
            Some((variance / mf).sqrt()),
            Some(((m4 - variance * variance).max(0.0) / mf).sqrt()),
            Some(if rmse > 0.0 { se_mse / (2.0 * rmse) } else { 0.0 }),
            Some((rp * (1.0 - rp) / mf).sqrt()),
        )
    } else {
        (None, None, None, None)
    };
    MethodSummary {
        method,
        successes: m,
        failure_rate,
        bias,
        variance,
        rmse,
        rp,
        rp_indirect,
        se_bias,
        se_variance,
        se_rmse,
        se_rp,
        invalid,
        failures,
    }
}

pub fn summarize(spec: &DgpSpec, cfg: &McConfig, records: &[RepRecord]) -> McSummary {
    let methods = cfg
        .methods
        .iter()
        .enumerate()
        .map(|(k, &m)| {
            let col: Vec<_> = records.iter().map(|r| &r[k]).collect();
            summarize_method(m, spec.alpha0, &col)
        })
        .collect();
    McSummary {
        spec: *spec,
        reps: records.len(),
        seed: cfg.seed,
        xi: cfg.xi,
        methods,
    }
}

pub fn run_monte_carlo(spec: &DgpSpec, cfg: &McConfig) -> Result<McSummary> {
    let records = run_replications(spec, cfg)?;
    Ok(summarize(spec, cfg, &records))
}

/// Cartesian product `alpha0 x r2_d x r2_y` over a base spec, in that
/// nesting order.
pub fn grid_cells(base: &DgpSpec, alpha0_list: &[f64], r2_grid: &[f64]) -> Result<Vec<DgpSpec>> {
    if alpha0_list.is_empty() || r2_grid.is_empty() {
        return Err(Error::Argument("grids must be nonempty".into()));
    }
    let mut cells = Vec::with_capacity(alpha0_list.len() * r2_grid.len() * r2_grid.len());
    for &alpha0 in alpha0_list {
        for &r2_d in r2_grid {
            for &r2_y in r2_grid {
                let cell = DgpSpec {
                    alpha0,
                    r2_d,
                    r2_y,
                    ..*base
                };
                cell.c_d()?;
                cell.c_y()?;
                cells.push(cell);
            }
        }
    }
    Ok(cells)
}

/// Runs every cell with the same seed.
pub fn run_grid(base: &DgpSpec, alpha0_list: &[f64], r2_grid: &[f64], cfg: &McConfig) -> Result<Vec<McSummary>> {
    grid_cells(base, alpha0_list, r2_grid)?
        .iter()
        .map(|cell| run_monte_carlo(cell, cfg))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coefficient_patterns() {
        let ny = Design::SparseDecline.nu(Equation::Y, 249);
        assert_eq!(&ny[..5], &[1.0, 0.5, 1.0 / 3.0, 0.25, 0.2]);
        assert!(ny[5..10].iter().all(|&v| v == 0.0));
        assert_eq!(ny[10], 1.0);
        assert_eq!(ny[14], 0.2);
        assert!(ny[15..].iter().all(|&v| v == 0.0));
        let nd = Design::SparseDecline.nu(Equation::D, 249);
        assert_eq!(nd[9], 0.1);
        assert!(nd[10..].iter().all(|&v| v == 0.0));
        let q = Design::ApproxQuadratic.nu(Equation::Y, 4);
        assert_eq!(q, vec![1.0, 0.25, 1.0 / 9.0, 1.0 / 16.0]);
    }

    #[test]
    fn calibration_examples() {
        assert_eq!(calibrate_signal(Design::SparseDecline, 0.5, 250, 0.0, Equation::D).unwrap(), 0.0);
        assert!(matches!(
            calibrate_signal(Design::SparseDecline, 0.5, 250, 1.0, Equation::D),
            Err(Error::Domain(_))
        ));
        // quadratic form by direct double summation over the dense matrix
        let nu = Design::SparseDecline.nu(Equation::D, 249);
        let mut q = 0.0;
        for i in 0..249 {
            for j in 0..249 {
                q += nu[i] * nu[j] * 0.5f64.powi((i as i32 - j as i32).abs());
            }
        }
        assert!((q - toeplitz_quadratic_form(&nu, 0.5)).abs() < 1e-12);
        let c = calibrate_signal(Design::SparseDecline, 0.5, 250, 0.75, Equation::D).unwrap();
        assert!((c * c * q - 3.0).abs() < 1e-12);
        assert!((c - 1.0).abs() <= 0.15, "c_d = {c}");
    }

    fn spec(n: usize, p: usize, rho: f64, r2_d: f64, r2_y: f64, alpha0: f64) -> DgpSpec {
        DgpSpec {
            n,
            p,
            rho,
            r2_d,
            r2_y,
            alpha0,
            ..DgpSpec::baseline()
        }
    }

    #[test]
    fn uncorrelated_covariates_when_rho_is_zero() {
        let n = 2000;
        let s = DgpSampler::new(spec(n, 16, 0.0, 0.5, 0.5, 0.0)).unwrap();
        let x = s.draw(RngStream::new(3, 0)).unwrap().data;
        let mut worst = 0.0_f64;
        let mut pairs = 0;
        'outer: for a in 1..16 {
            for b in (a + 1)..16 {
                let (ca, cb) = (x.col(a), x.col(b));
                let ma = ca.iter().sum::<f64>() / n as f64;
                let mb = cb.iter().sum::<f64>() / n as f64;
                let sab: f64 = ca.iter().zip(cb).map(|(u, v)| (u - ma) * (v - mb)).sum();
                let saa: f64 = ca.iter().map(|u| (u - ma).powi(2)).sum();
                let sbb: f64 = cb.iter().map(|v| (v - mb).powi(2)).sum();
                worst = worst.max((sab / (saa * sbb).sqrt()).abs());
                pairs += 1;
                if pairs == 100 {
                    break 'outer;
                }
            }
        }
        assert_eq!(pairs, 100);
        assert!(worst <= 4.0 / (n as f64).sqrt(), "{worst}");
    }

    #[test]
    fn fair_coin_without_signal() {
        let n = 4000;
        let s = DgpSampler::new(spec(n, 10, 0.5, 0.5, 0.0, 0.0)).unwrap();
        assert_eq!(s.c_y, 0.0);
        let data = s.draw(RngStream::new(8, 2)).unwrap().data;
        let ybar = data.y().iter().sum::<f64>() / n as f64;
        assert!((ybar - 0.5).abs() <= 3.0 * (0.25 / n as f64).sqrt(), "{ybar}");
    }

    #[test]
    fn draws_are_reproducible() {
        let s = DgpSampler::new(DgpSpec::baseline()).unwrap();
        let a = s.draw(RngStream::new(17, 4)).unwrap();
        let b = s.draw(RngStream::new(17, 4)).unwrap();
        let c = s.draw(RngStream::new(17, 5)).unwrap();
        assert_eq!(a.data.y(), b.data.y());
        assert_eq!(a.data.d(), b.data.d());
        assert_eq!(a.data.x(), b.data.x());
        assert_ne!(a.data.d(), c.data.d());
    }

    #[test]
    fn layouts_place_the_pattern() {
        let cov = DgpSampler::new(DgpSpec::baseline()).unwrap();
        assert_eq!(cov.nu_d[0], 0.0);
        assert_eq!(&cov.nu_d[1..4], &[1.0, 0.5, 1.0 / 3.0]);
        assert_eq!(cov.nu_d.len(), 250);
        let lit = DgpSampler::new(DgpSpec {
            layout: Layout::Controls,
            ..DgpSpec::baseline()
        })
        .unwrap();
        assert_eq!(&lit.nu_d[..3], &[1.0, 0.5, 1.0 / 3.0]);
        assert_eq!(lit.c_d, cov.c_d);
    }

    #[test]
    fn y_calibration_anchor() {
        let c = calibrate_signal(Design::SparseDecline, 0.5, 250, 0.75, Equation::Y).unwrap();
        assert!((c - 0.75).abs() <= 0.15, "c_y = {c}");
    }

    #[test]
    fn simulated_r2_matches_target() {
        // population R^2 of the signal from 10^5 draws of the covariates
        for (design, r2) in [(Design::SparseDecline, 0.75), (Design::ApproxQuadratic, 0.3), (Design::SparseDecline, 0.1)] {
            let sp = DgpSpec {
                design,
                r2_d: r2,
                r2_y: r2,
                n: 1000,
                p: 40,
                ..DgpSpec::baseline()
            };
            let s = DgpSampler::new(sp).unwrap();
            let (mut sum, mut sq, mut count) = (0.0, 0.0, 0.0);
            for rep in 0..100 {
                for v in s.draw(RngStream::new(21, rep)).unwrap().d_signal {
                    sum += v;
                    sq += v * v;
                    count += 1.0;
                }
            }
            let var = sq / count - (sum / count).powi(2);
            let got = var / (var + 1.0);
            assert!((got - r2).abs() <= 0.01, "{design:?} {r2}: {got}");
        }
    }

    #[test]
    fn treatment_variance_moment() {
        let sp = DgpSpec {
            n: 1000,
            ..DgpSpec::baseline()
        };
        let s = DgpSampler::new(sp).unwrap();
        let q = toeplitz_quadratic_form(&s.nu_d[1..], sp.rho);
        let target = s.c_d * s.c_d * q + 1.0;
        let mut d = Vec::new();
        for rep in 0..100 {
            d.extend(s.draw(RngStream::new(5, rep)).unwrap().data.d().iter().copied());
        }
        let m = d.len() as f64;
        let mean = d.iter().sum::<f64>() / m;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
        // Var of the sample variance for a Gaussian is 2 sigma^4 / m
        let se = (2.0 * target * target / m).sqrt();
        assert!((var - target).abs() <= 5.0 * se, "{var} vs {target}");
    }

    #[test]
    fn reps_zero_is_rejected() {
        let cfg = McConfig::new(0, 1);
        assert!(matches!(run_replications(&DgpSpec::baseline(), &cfg), Err(Error::Argument(_))));
    }

    #[test]
    fn single_rep_has_zero_variance_and_no_se() {
        let out = Ok(RepOutcome {
            alpha_check: 0.3,
            std_err: 0.1,
            reject: false,
            ln_statistic: None,
            reject_indirect: None,
        });
        let s = summarize_method(Method::Naive, 0.2, &[&out]);
        assert_eq!(s.variance, 0.0);
        assert!(s.se_bias.is_none() && s.se_rp.is_none());
        assert!((s.bias - 0.1).abs() < 1e-15);
    }

    #[test]
    fn failures_are_counted_and_flagged() {
        let good = Ok(RepOutcome {
            alpha_check: 0.0,
            std_err: 1.0,
            reject: true,
            ln_statistic: None,
            reject_indirect: None,
        });
        let bad: std::result::Result<RepOutcome, String> = Err("separation".into());
        let s = summarize_method(Method::Naive, 0.0, &[&good, &bad, &bad, &good]);
        assert_eq!(s.successes, 2);
        assert_eq!(s.failure_rate, 0.5);
        assert!(s.invalid);
        assert_eq!(s.failures, vec![("separation".to_string(), 2)]);
        assert_eq!(s.rp, 1.0);
    }
}
