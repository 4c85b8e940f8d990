//! Confidence regions and tests for the treatment coefficient.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimators::{CriterionProfile, InferenceResult};
use crate::numeric::{chi2_1_quantile, normal_quantile};

const ENDPOINT_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RegionKind {
    #[serde(rename = "CR_D")]
    Direct,
    #[serde(rename = "CR_I")]
    Indirect,
    #[serde(rename = "CR_DS")]
    DoubleSelection,
    #[serde(rename = "naive")]
    Naive,
}

impl RegionKind {
    pub fn name(&self) -> &'static str {
        match self {
            RegionKind::Direct => "CR_D",
            RegionKind::Indirect => "CR_I",
            RegionKind::DoubleSelection => "CR_DS",
            RegionKind::Naive => "naive",
        }
    }

    pub fn is_wald(&self) -> bool {
        !matches!(self, RegionKind::Indirect)
    }
}

/// A finite union of closed intervals.
#[derive(Debug, Clone, Serialize)]
pub struct ConfidenceRegion {
    pub kind: RegionKind,
    pub level: f64,
    pub intervals: Vec<(f64, f64)>,
    pub warnings: Vec<String>,
}

impl ConfidenceRegion {
    pub fn covers(&self, alpha: f64) -> bool {
        self.intervals.iter().any(|&(lo, hi)| lo <= alpha && alpha <= hi)
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    /// Smallest interval containing the region.
    pub fn hull(&self) -> Option<(f64, f64)> {
        let lo = self.intervals.first()?.0;
        let hi = self.intervals.last()?.1;
        Some((lo, hi))
    }
}

fn check_xi(xi: f64) -> Result<()> {
    if xi > 0.0 && xi <= 0.5 {
        Ok(())
    } else {
        Err(Error::Argument(format!("xi must lie in (0, 0.5], got {xi}")))
    }
}

/// `Phi^{-1}(1 - xi/2) * sqrt(sigma / n)`.
pub fn wald_half_width(sigma_sq: f64, n: usize, xi: f64) -> Result<f64> {
    check_xi(xi)?;
    Ok(normal_quantile(1.0 - xi / 2.0)? * (sigma_sq / n as f64).sqrt())
}

pub fn build_region(
    result: &InferenceResult,
    profile: Option<&CriterionProfile>,
    kind: RegionKind,
    xi: f64,
) -> Result<ConfidenceRegion> {
    check_xi(xi)?;
    if kind.is_wald() {
        let h = wald_half_width(result.sigma_used, result.n_used, xi)?;
        return Ok(ConfidenceRegion {
            kind,
            level: 1.0 - xi,
            intervals: vec![(result.alpha_check - h, result.alpha_check + h)],
            warnings: Vec::new(),
        });
    }
    let profile = profile.ok_or_else(|| Error::Argument("CR_I needs a criterion profile".into()))?;
    let threshold = chi2_1_quantile(1.0 - xi)?;
    let crit = &profile.criterion;
    let excess = |a: f64| crit.statistic(a).map(|s| s - threshold);

    let mut points: Vec<f64> = profile.evaluations.iter().map(|e| e.0).collect();
    let m = profile.minimizer;
    if m > points[0] && m < points[points.len() - 1] && !points.contains(&m) {
        let k = points.partition_point(|&a| a < m);
        points.insert(k, m);
    }
    let inside: Vec<bool> = points
        .iter()
        .map(|&a| excess(a).map(|e| e <= 0.0))
        .collect::<Result<_>>()?;

    // Between a point outside and a point inside, shrink toward the boundary
    // keeping the inside end.
    let refine = |mut outside: f64, mut within: f64| -> Result<f64> {
        while (within - outside).abs() > ENDPOINT_TOL {
            let mid = 0.5 * (within + outside);
            if excess(mid)? <= 0.0 {
                within = mid;
            } else {
                outside = mid;
            }
        }
        Ok(within)
    };

    let mut intervals = Vec::new();
    let mut k = 0;
    while k < points.len() {
        if !inside[k] {
            k += 1;
            continue;
        }
        let start = k;
        while k + 1 < points.len() && inside[k + 1] {
            k += 1;
        }
        let lo = if start == 0 { points[0] } else { refine(points[start - 1], points[start])? };
        let hi = if k + 1 == points.len() { points[k] } else { refine(points[k + 1], points[k])? };
        intervals.push((lo, hi));
        k += 1;
    }
    let mut warnings = Vec::new();
    if intervals.is_empty() {
        warnings.push("criterion exceeds the critical value on the whole search window; region is empty".into());
    }
    Ok(ConfidenceRegion {
        kind,
        level: 1.0 - xi,
        intervals,
        warnings,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TestOutcome {
    pub reject: bool,
    /// Wald statistic `n (alpha_check - alpha0)^2 / sigma` or `n L_n(alpha0)`.
    pub statistic: f64,
    pub region: ConfidenceRegion,
}

/// Level-`xi` test of `alpha = alpha0`; rejects exactly when `alpha0` lies
/// outside the matching region.
pub fn test_alpha(
    result: &InferenceResult,
    profile: Option<&CriterionProfile>,
    kind: RegionKind,
    alpha0: f64,
    xi: f64,
) -> Result<TestOutcome> {
    let region = build_region(result, profile, kind, xi)?;
    let statistic = if kind.is_wald() {
        let diff = result.alpha_check - alpha0;
        result.n_used as f64 * diff * diff / result.sigma_used
    } else {
        // build_region has already checked that the profile exists
        profile.unwrap().criterion.statistic(alpha0)?
    };
    Ok(TestOutcome {
        reject: !region.covers(alpha0),
        statistic,
        region,
    })
}
