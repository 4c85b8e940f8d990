use std::path::Path;

use hdlogit::estimators::{Analysis, Diagnostics, Method, PipelineConfig};
use hdlogit::inference::{test_alpha, RegionKind};
use hdlogit::pen_logistic::PenaltyRule;
use hdlogit::simulate::wald_region;
use hdlogit::Dataset;
use nalgebra::DMatrix;
use serde::Serialize;

use crate::{Failure, FitArgs, PenaltyArg, PipelineArgs, RegionArg};

const INTERCEPT: &str = "(intercept)";

pub fn pipeline_config(a: &PipelineArgs) -> Result<PipelineConfig, Failure> {
    let penalty_rule = match a.penalty_rule {
        PenaltyArg::Caption => PenaltyRule::Caption,
        PenaltyArg::Hoeffding => PenaltyRule::Hoeffding { gamma: a.hoeffding_gamma },
    };
    if !(a.search_constant > 0.0 && a.search_constant.is_finite()) {
        return Err(Failure::data(format!("search constant must be positive, got {}", a.search_constant)));
    }
    Ok(PipelineConfig {
        penalty_rule,
        penalize_treatment: !a.unpenalized_treatment,
        search_constant: a.search_constant,
        h0_mode: a.h0_mode,
    })
}

/// Columns of a CSV file, parsed as numbers.
struct Table {
    header: Vec<String>,
    columns: Vec<Vec<f64>>,
}

fn read_table(path: &Path) -> Result<Table, Failure> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Failure::data(format!("{}: {e}", path.display())))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let mut columns = vec![Vec::new(); header.len()];
    for (row, record) in reader.records().enumerate() {
        // data rows are numbered from 1, after the header
        let record = record.map_err(|e| Failure::data(format!("row {}: {e}", row + 1)))?;
        for (j, cell) in record.iter().enumerate() {
            let cell = cell.trim();
            let v: f64 = cell.parse().map_err(|_| {
                Failure::data(format!("column '{}' row {}: cannot parse '{cell}' as a number", header[j], row + 1))
            })?;
            if !v.is_finite() {
                return Err(Failure::data(format!("column '{}' row {}: value is {cell}", header[j], row + 1)));
            }
            columns[j].push(v);
        }
    }
    Ok(Table { header, columns })
}

impl Table {
    fn column(&self, name: &str) -> Result<&[f64], Failure> {
        self.header
            .iter()
            .position(|h| h == name)
            .map(|j| self.columns[j].as_slice())
            .ok_or_else(|| Failure::data(format!("missing column '{name}'")))
    }
}

#[derive(Serialize)]
struct TestReport {
    alpha0: f64,
    statistic: f64,
    reject: bool,
}

#[derive(Serialize)]
struct ConfigEcho<'a> {
    data: String,
    outcome: &'a str,
    treatment: &'a str,
    controls: &'a [String],
    intercept: bool,
    n: usize,
    method: &'a str,
    xi: f64,
    region: &'static str,
    seed: u64,
    pipeline: PipelineConfig,
    lambda2: f64,
}

#[derive(Serialize)]
struct FitReport<'a> {
    method: &'a str,
    alpha_check: f64,
    std_err: f64,
    ci_lo: Option<f64>,
    ci_hi: Option<f64>,
    region_kind: &'static str,
    intervals: Vec<(f64, f64)>,
    test: TestReport,
    sigma1_sq: f64,
    sigma2_sq: f64,
    support_step1: Vec<String>,
    support_step2: Vec<String>,
    support_final: Vec<String>,
    diagnostics: Diagnostics,
    config_echo: ConfigEcho<'a>,
}

pub fn run(a: &FitArgs) -> Result<(), Failure> {
    let method: Method = a.method.parse().map_err(|e: hdlogit::Error| Failure::data(e.to_string()))?;
    if !(a.xi > 0.0 && a.xi <= 0.5) {
        return Err(Failure::data(format!("xi must lie in (0, 0.5], got {}", a.xi)));
    }
    let config = pipeline_config(&a.pipeline)?;
    let table = read_table(&a.data)?;
    let y = table.column(&a.outcome)?.to_vec();
    if let Some(i) = y.iter().position(|&v| v != 0.0 && v != 1.0) {
        return Err(Failure::data(format!("column '{}' row {}: outcome must be 0 or 1, got {}", a.outcome, i + 1, y[i])));
    }
    let d = table.column(&a.treatment)?.to_vec();
    let controls: Vec<String> = match &a.controls {
        Some(c) => c.iter().map(|s| s.trim().to_string()).collect(),
        None => table
            .header
            .iter()
            .filter(|h| **h != a.outcome && **h != a.treatment)
            .cloned()
            .collect(),
    };
    let mut names = Vec::new();
    let mut cols: Vec<&[f64]> = Vec::new();
    let ones = vec![1.0; y.len()];
    if !a.no_intercept {
        names.push(INTERCEPT.to_string());
        cols.push(&ones);
    }
    for c in &controls {
        if *c == a.outcome || *c == a.treatment {
            return Err(Failure::data(format!("column '{c}' cannot be both a control and the outcome or treatment")));
        }
        cols.push(table.column(c)?);
        names.push(c.clone());
    }
    if cols.is_empty() {
        return Err(Failure::data("no control columns"));
    }
    let x = DMatrix::from_fn(y.len(), cols.len(), |i, j| cols[j][i]);
    let mut data = Dataset::new(y, d, x)?;
    if !a.no_intercept {
        data = data.with_intercept(0)?;
    }

    let analysis = Analysis::new(&data, config)?;
    let (result, profile) = analysis.fit(method)?;
    let kind = match a.region {
        RegionArg::Wald => wald_region(method),
        RegionArg::Indirect if profile.is_some() => RegionKind::Indirect,
        RegionArg::Indirect => {
            return Err(Failure::data(format!("the indirect region needs an IV method, not {}", method.name())));
        }
    };
    let test = test_alpha(&result, profile.as_ref(), kind, a.alpha0, a.xi)?;
    let hull = test.region.hull();

    let mut diagnostics = result.diagnostics.clone();
    diagnostics.warnings.extend(test.region.warnings.iter().cloned());
    for s in [
        &mut diagnostics.support_step1,
        &mut diagnostics.support_step2,
        &mut diagnostics.support_final,
        &mut diagnostics.dropped_collinear,
    ] {
        *s = analysis.original_support(s);
    }
    let named = |s: &[usize]| s.iter().map(|&j| names[j].clone()).collect::<Vec<_>>();
    let report = FitReport {
        method: method.name(),
        alpha_check: result.alpha_check,
        std_err: result.std_err(),
        ci_lo: hull.map(|h| h.0),
        ci_hi: hull.map(|h| h.1),
        region_kind: kind.name(),
        intervals: test.region.intervals.clone(),
        test: TestReport {
            alpha0: a.alpha0,
            statistic: test.statistic,
            reject: test.reject,
        },
        sigma1_sq: result.sigma1_sq,
        sigma2_sq: result.sigma2_sq,
        support_step1: named(&diagnostics.support_step1),
        support_step2: named(&diagnostics.support_step2),
        support_final: named(&diagnostics.support_final),
        diagnostics,
        config_echo: ConfigEcho {
            data: a.data.display().to_string(),
            outcome: &a.outcome,
            treatment: &a.treatment,
            controls: &controls,
            intercept: !a.no_intercept,
            n: data.n(),
            method: method.name(),
            xi: a.xi,
            region: kind.name(),
            seed: a.seed,
            pipeline: config,
            lambda2: analysis.lambda2,
        },
    };
    let mut json = serde_json::to_string_pretty(&report).map_err(|e| Failure::data(e.to_string()))?;
    json.push('\n');
    match &a.out {
        Some(path) => std::fs::write(path, json).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?,
        None => print!("{json}"),
    }
    Ok(())
}
