use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pdenmpc::analysis::{self, FactorSeriesOptions};
use pdenmpc::bench::{run_closed_loop, Controller, HeatBench, LoopOptions};
use pdenmpc::checks;
use pdenmpc::config::RunConfig;
use pdenmpc::Error;

const EXIT_CONFIG: u8 = 1;
const EXIT_SOLVER: u8 = 2;
const EXIT_CHECK: u8 = 3;

#[derive(Parser)]
#[command(name = "pdenmpc", version, about = "Double-layer Jacobi NMPC on the heat-plate benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Closed-loop run with the configured controller.
    RunBench { config: PathBuf },
    /// Per-iteration timing of the configured method against Newton.
    Compare { config: PathBuf },
    /// Convergence factors and lemma checks.
    Analyze { config: PathBuf },
    /// Derivative, identity and oracle checks.
    Check { config: PathBuf },
}

/// Failure with the process exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Io(_) | Error::Json(_) | Error::Csv(_) => EXIT_CONFIG,
            _ => EXIT_SOLVER,
        };
        Failure { code, message: e.to_string() }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::RunBench { config } => load(&config).and_then(|c| run_bench(&c)),
        Command::Compare { config } => load(&config).and_then(|c| compare(&c)),
        Command::Analyze { config } => load(&config).and_then(|c| analyze(&c)),
        Command::Check { config } => load(&config).and_then(|c| check(&c)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn load(path: &Path) -> Result<RunConfig, Failure> {
    RunConfig::load(path).map_err(|e| Failure { code: EXIT_CONFIG, message: format!("{}: {e}", path.display()) })
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, Failure> {
    let dir = cfg.output.directory.clone();
    fs::create_dir_all(&dir).map_err(Error::from)?;
    Ok(dir)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CmdResult {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    fs::write(path, text + "\n").map_err(Error::from)?;
    Ok(())
}

fn run_bench(cfg: &RunConfig) -> CmdResult {
    let mut bench = HeatBench::from_config(cfg)?;
    let opts = LoopOptions::from_config(&cfg.nmpc, &cfg.sim);
    let controller = Controller::from_config(&cfg.nmpc);
    let log = run_closed_loop(&mut bench, controller, &opts)?;
    let dir = out_dir(cfg)?;
    log.write_csv(&dir.join("closed_loop.csv"))?;
    if cfg.output.states {
        log.write_states_csv(&dir.join("states.csv"), cfg.sim.sampling_period_s)?;
    }
    if cfg.output.field_snapshots {
        log.write_field_snapshots(&dir.join("fields"), &bench)?;
    }
    let summary = log.summary();
    write_json(&dir.join("summary.json"), &summary)?;
    println!(
        "{}: {} steps, mean {:.2} iterations, mean solve {:.3} ms, max residual {:.3e}, {} not converged",
        log.controller, summary.total_steps, summary.mean_iters, summary.mean_solve_ms, summary.max_kkt_residual, summary.diverged_steps
    );
    if summary.diverged_steps > 0 {
        return Err(Failure {
            code: EXIT_SOLVER,
            message: format!("{} of {} solves did not reach the tolerance", summary.diverged_steps, summary.total_steps),
        });
    }
    Ok(())
}

fn compare(cfg: &RunConfig) -> CmdResult {
    let report = analysis::compare(cfg)?;
    let dir = out_dir(cfg)?;
    report.write_csv(&dir.join("compare.csv"))?;
    write_json(&dir.join("compare_summary.json"), &report.summary)?;
    let s = &report.summary;
    println!(
        "{} {:.4} ms/iteration, newton {:.4} ms/iteration, ratio {:.1} over {} steps",
        s.method, s.dl_mean_iter_ms, s.newton_mean_iter_ms, s.ratio, s.steps
    );
    if !cfg.compare.grid_sweep.is_empty() {
        let controllers = [Controller::from_config(&cfg.nmpc), Controller::Newton];
        let mut rows = Vec::new();
        for &p in &cfg.compare.grid_sweep {
            for c in controllers {
                let row = analysis::iteration_time(cfg, p, c, cfg.compare.sweep_iters, cfg.compare.sweep_repeats)?;
                println!("grid {p}x{p} (n_x = {}): {} {:.4} ms/iteration", row.n_x, row.method, row.mean_iter_ms);
                rows.push(row);
            }
        }
        analysis::write_scaling_csv(&dir.join("scaling.csv"), &rows)?;
    }
    Ok(())
}

fn analyze(cfg: &RunConfig) -> CmdResult {
    let a = &cfg.analysis;
    if a.is_empty() {
        println!("analysis section is empty, nothing to do");
        return Ok(());
    }
    let dir = out_dir(cfg)?;
    let horizons = if !a.horizon_sweep.is_empty() {
        a.horizon_sweep.clone()
    } else if a.convergence_factor {
        vec![cfg.nmpc.horizon]
    } else {
        Vec::new()
    };
    if !horizons.is_empty() {
        let opts = FactorSeriesOptions::from_config(cfg);
        let mut rows = Vec::new();
        for &t in &horizons {
            let part = analysis::factor_series(cfg, t, &opts)?;
            for &g in &opts.gammas {
                let vals: Vec<f64> = part.iter().filter(|r| r.gamma == g).map(|r| r.rho_estimate).collect();
                let max = vals.iter().cloned().fold(0.0, f64::max);
                let below = vals.iter().filter(|v| **v < 1.0).count();
                println!("T = {t} s, gamma = {g}: max factor {max:.4}, below 1 at {below} of {} instants", vals.len());
            }
            rows.extend(part);
        }
        analysis::write_factor_csv(&dir.join("factors.csv"), &rows)?;
    }
    if a.lemma_checks {
        let mut rows = checks::nilpotency_checks(cfg.seed, 20)?;
        rows.extend(checks::squared_factor_checks(cfg.seed)?);
        for r in &rows {
            print_row(r);
        }
        checks::write_check_csv(&dir.join("lemma_checks.csv"), &rows)?;
    }
    Ok(())
}

fn print_row(r: &checks::CheckRow) {
    let tag = if r.passed { "PASS" } else { "FAIL" };
    println!("{tag} {:<28} {:<36} value {:.3e} tolerance {:.1e}", r.check, r.instance, r.value, r.tolerance);
}

fn check(cfg: &RunConfig) -> CmdResult {
    let rows = checks::run_suite(cfg.seed)?;
    for r in &rows {
        print_row(r);
    }
    let dir = out_dir(cfg)?;
    checks::write_check_csv(&dir.join("checks.csv"), &rows)?;
    let failed = rows.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(Failure { code: EXIT_CHECK, message: format!("{failed} of {} checks failed", rows.len()) });
    }
    println!("all {} checks passed", rows.len());
    Ok(())
}
