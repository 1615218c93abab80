//! Batch studies on the plate benchmark: convergence factors along the
//! closed loop, Newton vs double-layer timing, and per-iteration cost
//! scaling with the grid size.

use std::path::Path;

use serde::Serialize;

use crate::bench::{run_closed_loop, run_closed_loop_with, Controller, HeatBench, LoopOptions};
use crate::config::{MethodChoice, RunConfig};
use crate::error::{Error, Result};
use crate::spectral::{analysis_config, convergence_factor, oracle_factor, IterationOperator, PowerOptions};
use crate::upper::{self, SolveOptions, StageSet, UpperKind, UpperMethod};

/// One convergence factor sample.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FactorRow {
    pub sim_time_s: f64,
    pub method: String,
    pub gamma: f64,
    #[serde(rename = "horizon_T")]
    pub horizon_t: f64,
    pub rho_estimate: f64,
    /// Dense value, only for instances small enough.
    pub oracle_rho: Option<f64>,
}

pub fn write_factor_csv(path: &Path, rows: &[FactorRow]) -> Result<()> {
    write_rows(path, &["sim_time_s", "method", "gamma", "horizon_T", "rho_estimate", "oracle_rho"], rows)
}

/// Writes `rows` with an explicit header, so empty tables still carry one.
pub(crate) fn write_rows<R: Serialize>(path: &Path, header: &[&str], rows: &[R]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// What [`factor_series`] evaluates at each sampled instant.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorSeriesOptions {
    /// Splitting whose factor is measured.
    pub method: UpperMethod,
    /// Regularization values the factor is evaluated with. In current-iterate
    /// mode `γ` only enters the Jacobian, so one closed loop serves all.
    pub gammas: Vec<f64>,
    /// Controller producing the closed-loop solutions.
    pub driver: MethodChoice,
    pub every: usize,
    pub max_steps: Option<usize>,
    pub power: PowerOptions,
}

impl FactorSeriesOptions {
    pub fn from_config(cfg: &RunConfig) -> Self {
        let kind = cfg.nmpc.method.upper_kind().unwrap_or(UpperKind::Sgs);
        Self {
            method: UpperMethod { kind, omega: cfg.nmpc.omega },
            gammas: cfg.analysis.gammas.clone(),
            driver: cfg.analysis.driver,
            every: cfg.analysis.every,
            max_steps: None,
            power: cfg.analysis.power_options(cfg.seed),
        }
    }
}

/// Convergence factors along the closed loop of `cfg` run with horizon
/// `horizon`.
pub fn factor_series(cfg: &RunConfig, horizon: f64, opts: &FactorSeriesOptions) -> Result<Vec<FactorRow>> {
    let mut run = cfg.clone();
    run.nmpc.horizon = horizon;
    run.nmpc.method = opts.driver;
    let mut bench = HeatBench::from_config(&run)?;
    let mut loop_opts = LoopOptions::from_config(&run.nmpc, &run.sim);
    loop_opts.repeats = 1;
    loop_opts.max_steps = opts.max_steps;
    let mut rows = Vec::new();
    let every = opts.every.max(1);
    run_closed_loop_with(&mut bench, Controller::from_config(&run.nmpc), &loop_opts, |ctx| {
        if ctx.step % every != 0 {
            return Ok(());
        }
        for &gamma in &opts.gammas {
            let mut prob = ctx.prob.clone();
            prob.set_gamma(gamma);
            let mut op = IterationOperator::new(&prob, ctx.traj, opts.method, analysis_config())?;
            let rho = convergence_factor(&mut op, &opts.power)?;
            let oracle = oracle_factor(&mut op)?;
            rows.push(FactorRow {
                sim_time_s: ctx.t,
                method: opts.method.kind.to_string(),
                gamma,
                horizon_t: horizon,
                rho_estimate: rho,
                oracle_rho: oracle,
            });
        }
        Ok(())
    })?;
    Ok(rows)
}

/// Paired per-instant timings of the configured double-layer controller and
/// the Newton controller.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub step: usize,
    pub t_s: f64,
    pub dl_iters: usize,
    pub dl_solve_ms: f64,
    pub dl_iter_ms: f64,
    pub newton_iters: usize,
    pub newton_solve_ms: f64,
    pub newton_iter_ms: f64,
    /// `newton_iter_ms / dl_iter_ms`.
    pub ratio: f64,
}

pub const COMPARE_HEADER: [&str; 9] =
    ["step", "t_s", "dl_iters", "dl_solve_ms", "dl_iter_ms", "newton_iters", "newton_solve_ms", "newton_iter_ms", "ratio"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareSummary {
    pub method: String,
    pub steps: usize,
    pub dl_mean_iter_ms: f64,
    pub newton_mean_iter_ms: f64,
    /// Ratio of the mean per-iteration times.
    pub ratio: f64,
    pub dl_mean_iters: f64,
    pub newton_mean_iters: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareReport {
    pub rows: Vec<CompareRow>,
    pub summary: CompareSummary,
}

impl CompareReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_rows(path, &COMPARE_HEADER, &self.rows)
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        f64::NAN
    }
}

/// Runs both controllers on the same configuration for `compare.steps`
/// instants, each solve timed as the minimum of `compare.repeats`.
pub fn compare(cfg: &RunConfig) -> Result<CompareReport> {
    let mut dl_cfg = cfg.clone();
    if dl_cfg.nmpc.method == MethodChoice::Newton {
        dl_cfg.nmpc.method = MethodChoice::Sgs;
    }
    let mut opts = LoopOptions::from_config(&cfg.nmpc, &cfg.sim);
    opts.repeats = cfg.compare.repeats.max(1);
    opts.max_steps = cfg.compare.steps;

    let dl_controller = Controller::from_config(&dl_cfg.nmpc);
    let mut bench = HeatBench::from_config(&dl_cfg)?;
    let dl = run_closed_loop(&mut bench, dl_controller, &opts)?;
    let mut bench = HeatBench::from_config(cfg)?;
    let nw = run_closed_loop(&mut bench, Controller::Newton, &opts)?;

    let rows: Vec<CompareRow> = dl
        .records
        .iter()
        .zip(&nw.records)
        .map(|(a, b)| CompareRow {
            step: a.step,
            t_s: a.t,
            dl_iters: a.iters,
            dl_solve_ms: a.solve_time_ms,
            dl_iter_ms: a.mean_iter_time_ms,
            newton_iters: b.iters,
            newton_solve_ms: b.solve_time_ms,
            newton_iter_ms: b.mean_iter_time_ms,
            ratio: ratio(b.mean_iter_time_ms, a.mean_iter_time_ms),
        })
        .collect();
    let (dl_ms, nw_ms) = (dl.mean_iteration_time_ms(), nw.mean_iteration_time_ms());
    let summary = CompareSummary {
        method: dl_controller.name(),
        steps: rows.len(),
        dl_mean_iter_ms: dl_ms,
        newton_mean_iter_ms: nw_ms,
        ratio: ratio(nw_ms, dl_ms),
        dl_mean_iters: dl.summary().mean_iters,
        newton_mean_iters: nw.summary().mean_iters,
    };
    Ok(CompareReport { rows, summary })
}

/// Per-iteration cost of one controller on one grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingRow {
    pub points_per_axis: usize,
    pub n_x: usize,
    pub method: String,
    pub iters: usize,
    pub mean_iter_ms: f64,
}

pub const SCALING_HEADER: [&str; 5] = ["points_per_axis", "n_x", "method", "iters", "mean_iter_ms"];

pub fn write_scaling_csv(path: &Path, rows: &[ScalingRow]) -> Result<()> {
    write_rows(path, &SCALING_HEADER, rows)
}

/// Mean wall time of `iters` iterations from the initial trajectory of a
/// `points x points` plate (four uniform actuators per axis), best of
/// `repeats`.
pub fn iteration_time(cfg: &RunConfig, points: usize, controller: Controller, iters: usize, repeats: usize) -> Result<ScalingRow> {
    let mut run = cfg.clone();
    run.plant.grid.points_per_axis = points;
    run.plant.actuators.axis_indices.clear();
    let bench = HeatBench::from_config(&run)?;
    let opts = SolveOptions { tol: f64::MIN_POSITIVE, max_iters: iters, divergence_factor: f64::INFINITY };
    let mut best = f64::INFINITY;
    let mut done = 0;
    for _ in 0..repeats.max(1) {
        let mut traj = bench.initial_trajectory();
        let report = match controller {
            Controller::DoubleLayer { mut method, lower } => {
                let mut stages = StageSet::new(&bench.prob, lower);
                upper::run(&bench.prob, &mut method, &mut stages, &mut traj, &opts)?
            }
            Controller::Newton => {
                let mut stages = StageSet::new(&bench.prob, Default::default());
                let mut nw = crate::newton::NewtonSolver::new();
                upper::run(&bench.prob, &mut nw, &mut stages, &mut traj, &opts)?
            }
        };
        if report.iteration_times.is_empty() {
            return Err(Error::NoConvergence(format!("no iteration completed on the {points}-point grid")));
        }
        done = report.iteration_times.len();
        best = best.min(report.mean_iteration_time() * 1e3);
    }
    Ok(ScalingRow { points_per_axis: points, n_x: bench.n_x(), method: controller.name(), iters: done, mean_iter_ms: best })
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len()) as f64;
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_a_power_law() {
        let x = [10.0, 20.0, 40.0, 80.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powi(3)).collect();
        assert!((loglog_slope(&x, &y) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_factor_table_keeps_its_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        write_factor_csv(&path, &[]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.trim(), "sim_time_s,method,gamma,horizon_T,rho_estimate,oracle_rho");
    }
}
