use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use hdlogit::estimators::{Method, PipelineConfig};
use hdlogit::simulate::{grid_cells, run_monte_carlo, DgpSpec, Layout, McConfig, McSummary};
use serde::Serialize;

use crate::fit::pipeline_config;
use crate::{Failure, GridArgs, LayoutArg, SimulateArgs, SpecArgs};

pub const HEADER: &str = "design,n,p,alpha0,r2d,r2y,method,reps,bias,variance,rmse,rp,failure_rate,seed";

fn threads(flag: Option<usize>) -> Result<usize, Failure> {
    if let Some(t) = flag {
        return Ok(t);
    }
    match std::env::var("HDLOGIT_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Failure::data(format!("HDLOGIT_THREADS must be a count, got '{v}'"))),
        Err(_) => Ok(0),
    }
}

fn base_spec(a: &SpecArgs, alpha0: f64, r2_d: f64, r2_y: f64) -> Result<DgpSpec, Failure> {
    let spec = DgpSpec {
        design: a.design.parse()?,
        n: a.n,
        p: a.p,
        alpha0,
        rho: a.rho,
        r2_d,
        r2_y,
        layout: match a.layout {
            LayoutArg::Covariates => Layout::Covariates,
            LayoutArg::Controls => Layout::Controls,
        },
    };
    spec.validate()?;
    spec.c_d()?;
    spec.c_y()?;
    Ok(spec)
}

fn mc_config(a: &SpecArgs) -> Result<McConfig, Failure> {
    if a.reps == 0 {
        return Err(Failure::data("--reps must be at least 1"));
    }
    if !(a.xi > 0.0 && a.xi <= 0.5) {
        return Err(Failure::data(format!("xi must lie in (0, 0.5], got {}", a.xi)));
    }
    let methods = a
        .methods
        .iter()
        .map(|m| m.trim().parse::<Method>())
        .collect::<Result<Vec<_>, _>>()?;
    if methods.is_empty() {
        return Err(Failure::data("no methods requested"));
    }
    let mut cfg = McConfig::new(a.reps, a.seed);
    cfg.methods = methods;
    cfg.xi = a.xi;
    cfg.threads = threads(a.threads)?;
    cfg.pipeline = pipeline_config(&a.pipeline)?;
    Ok(cfg)
}

/// CSV rows for one design, one per method.
pub fn rows(summary: &McSummary) -> String {
    let s = &summary.spec;
    let mut out = String::new();
    for m in &summary.methods {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            s.design.name(),
            s.n,
            s.p,
            s.alpha0,
            s.r2_d,
            s.r2_y,
            m.method.name(),
            summary.reps,
            m.bias,
            m.variance,
            m.rmse,
            m.rp,
            m.failure_rate,
            summary.seed
        ));
    }
    out
}

#[derive(Serialize)]
struct Echo {
    command: &'static str,
    base: DgpSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha0_list: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    r2_grid: Option<Vec<f64>>,
    reps: usize,
    seed: u64,
    xi: f64,
    methods: Vec<&'static str>,
    threads: usize,
    pipeline: PipelineConfig,
}

fn echo(command: &'static str, base: DgpSpec, alpha0_list: Option<Vec<f64>>, r2_grid: Option<Vec<f64>>, cfg: &McConfig) -> Echo {
    Echo {
        command,
        base,
        alpha0_list,
        r2_grid,
        reps: cfg.reps,
        seed: cfg.seed,
        xi: cfg.xi,
        methods: cfg.methods.iter().map(|m| m.name()).collect(),
        threads: cfg.threads,
        pipeline: cfg.pipeline,
    }
}

fn echo_json(e: &Echo) -> String {
    serde_json::to_string_pretty(e).unwrap() + "\n"
}

/// Echo without the thread count, which does not affect results.
fn resume_key(e: &Echo) -> String {
    let mut v = serde_json::to_value(e).unwrap();
    v.as_object_mut().unwrap().remove("threads");
    serde_json::to_string_pretty(&v).unwrap() + "\n"
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::data(format!("{}: {e}", path.display()))
}

/// Writes through a temporary sibling and renames into place.
fn write_atomic(path: &Path, contents: &str) -> Result<(), Failure> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Sends the CSV to `out` (or stdout) and the configuration echo next to it
/// (or to stderr).
fn emit(out: Option<&Path>, csv: &str, config: &str) -> Result<(), Failure> {
    match out {
        Some(path) => {
            write_atomic(path, csv)?;
            write_atomic(&sidecar(path, ".config.json"), config)
        }
        None => {
            eprint!("{config}");
            std::io::stdout()
                .write_all(csv.as_bytes())
                .map_err(|e| Failure::data(format!("stdout: {e}")))
        }
    }
}

fn check_writable(out: Option<&Path>) -> Result<(), Failure> {
    if let Some(path) = out {
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        if !dir.is_dir() {
            return Err(Failure::data(format!("{}: output directory does not exist", path.display())));
        }
    }
    Ok(())
}

fn run_cell(spec: &DgpSpec, cfg: &McConfig) -> Result<McSummary, Failure> {
    let s = run_monte_carlo(spec, cfg)?;
    for m in s.methods.iter().filter(|m| m.invalid) {
        eprintln!(
            "hdlogit: warning: {} at alpha0={} r2d={} r2y={} failed in {:.1}% of replications",
            m.method.name(),
            spec.alpha0,
            spec.r2_d,
            spec.r2_y,
            100.0 * m.failure_rate
        );
    }
    Ok(s)
}

pub fn simulate(a: &SimulateArgs) -> Result<(), Failure> {
    let spec = base_spec(&a.spec, a.alpha0, a.r2d, a.r2y)?;
    let cfg = mc_config(&a.spec)?;
    let out = a.spec.out.as_deref();
    check_writable(out)?;
    let summary = run_cell(&spec, &cfg)?;
    let csv = format!("{HEADER}\n{}", rows(&summary));
    let config = echo_json(&echo("simulate", spec, None, None, &cfg));
    emit(out, &csv, &config)
}

/// Parses `lo:hi:step` into an inclusive, evenly spaced list.
pub fn parse_range(s: &str) -> Result<Vec<f64>, Failure> {
    let bad = || Failure::data(format!("--r2-grid expects lo:hi:step, got '{s}'"));
    let parts: Vec<f64> = s
        .split(':')
        .map(|t| t.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<_, _>>()?;
    let [lo, hi, step] = parts[..] else { return Err(bad()) };
    if !(step > 0.0) || hi < lo {
        return Err(bad());
    }
    let count = ((hi - lo) / step + 1e-9).floor() as usize + 1;
    // round so that 0.1 steps print as 0.3 rather than 0.30000000000000004
    Ok((0..count)
        .map(|k| ((lo + k as f64 * step) * 1e10).round() / 1e10)
        .collect())
}

pub fn grid(a: &GridArgs) -> Result<(), Failure> {
    if a.alpha0_list.is_empty() {
        return Err(Failure::data("--alpha0-list is empty"));
    }
    let r2 = parse_range(&a.r2_grid)?;
    let base = base_spec(&a.spec, a.alpha0_list[0], r2[0], r2[0])?;
    let cfg = mc_config(&a.spec)?;
    let cells = grid_cells(&base, &a.alpha0_list, &r2)?;
    let out = a.spec.out.as_deref();
    check_writable(out)?;
    let e = echo("grid", base, Some(a.alpha0_list.clone()), Some(r2.clone()), &cfg);
    let config = echo_json(&e);
    let key = resume_key(&e);

    let checkpoint = out.map(|p| sidecar(p, ".cells"));
    if let Some(dir) = &checkpoint {
        let stamp = dir.join("config.json");
        if a.resume && dir.is_dir() {
            let old = fs::read_to_string(&stamp).unwrap_or_default();
            if old != key {
                return Err(Failure::data(format!(
                    "{}: checkpoint was written with a different configuration",
                    dir.display()
                )));
            }
        } else {
            if dir.is_dir() {
                fs::remove_dir_all(dir).map_err(|e| io_err(dir, e))?;
            }
            fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
            write_atomic(&stamp, &key)?;
        }
    } else if a.resume {
        return Err(Failure::data("--resume needs --out"));
    }

    let mut csv = format!("{HEADER}\n");
    for (k, cell) in cells.iter().enumerate() {
        let file = checkpoint.as_ref().map(|d| d.join(format!("cell-{k:04}.csv")));
        let cached = match &file {
            Some(f) if a.resume => fs::read_to_string(f).ok(),
            _ => None,
        };
        let body = match cached {
            Some(body) => body,
            None => {
                let body = rows(&run_cell(cell, &cfg)?);
                if let Some(f) = &file {
                    write_atomic(f, &body)?;
                }
                body
            }
        };
        csv.push_str(&body);
    }
    emit(out, &csv, &config)
}
