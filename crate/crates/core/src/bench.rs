//! The heated copper plate: plant, NMPC problem, references and the
//! receding-horizon closed loop.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;

use crate::config::{HeatPlateParams, MethodChoice, NmpcConfig, PlantConfig, ReferenceConfig, RunConfig, SimConfig};
use crate::dynamics::Dynamics;
use crate::error::{Error, Result};
use crate::linalg::BandMatrix;
use crate::lower::StageSolveConfig;
use crate::newton::NewtonSolver;
use crate::ocp::{InputBox, OcpProblem, OcpSettings, QuadraticTracking, Trajectory};
use crate::pde::{Coefficient, DiscretizedSystem, PdeModel, SpatialGrid};
use crate::upper::{self, SolveOptions, SolveReport, StageSet, Termination, UpperMethod};
use crate::Real;

/// `ρC_p t_z ẇ = k t_z Δw − 2h_c(w − T_a) − 2εδ(w⁴ − T_a⁴)` with insulated
/// edges.
pub fn heat_model<T: Real>(p: &HeatPlateParams, sides: Vec<T>) -> PdeModel<T> {
    let lit = T::lit;
    let rad = 2.0 * p.emissivity * p.stefan_boltzmann;
    let d0 = 2.0 * p.hc * p.ta + rad * p.ta.powi(4);
    let d = Coefficient::Polynomial(vec![lit(d0), lit(-2.0 * p.hc), T::zero(), T::zero(), lit(-rad)]);
    PdeModel::first_order(
        sides,
        Coefficient::Constant(lit(p.rho * p.cp * p.tz)),
        Coefficient::Constant(lit(p.k * p.tz)),
        d,
        Coefficient::zero(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceKind {
    Slope,
    VShape,
}

/// The plate benchmark: discretized plant and the NMPC problem built on it.
pub struct HeatBench {
    pub plant: PlantConfig,
    pub nmpc: NmpcConfig,
    pub sim: SimConfig,
    sys: Arc<DiscretizedSystem<f64>>,
    pub prob: OcpProblem<f64>,
}

impl std::fmt::Debug for HeatBench {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HeatBench").field("plant", &self.plant).field("nmpc", &self.nmpc).field("sim", &self.sim).finish()
    }
}

impl HeatBench {
    pub fn build(plant: PlantConfig, nmpc: NmpcConfig, sim: SimConfig) -> Result<Self> {
        plant.validate()?;
        nmpc.validate()?;
        sim.validate()?;
        let p = plant.grid.points_per_axis;
        let side = plant.grid.side;
        let idx = plant.axis_indices();
        let grid = SpatialGrid::with_lattice(&[p, p], &[side, side], &[idx.clone(), idx])?;
        let sys = Arc::new(DiscretizedSystem::new(heat_model(&plant.params, vec![side, side]), grid)?);
        let (n_x, n_u) = (sys.n_x(), sys.n_u());
        let ta = plant.params.ta;
        let cost = QuadraticTracking::new(vec![nmpc.q; n_x], vec![nmpc.r; n_u], nmpc.n_stages);
        let bounds = InputBox::uniform(n_x, n_u, ta + nmpc.input_bounds[0], ta + nmpc.input_bounds[1])?;
        let settings = OcpSettings {
            n_stages: nmpc.n_stages,
            horizon: nmpc.horizon,
            tau: nmpc.tau,
            gamma: nmpc.gamma,
            reg_mode: nmpc.reg_mode,
        };
        let dynamics: Arc<dyn Dynamics<f64>> = sys.clone();
        let prob = OcpProblem::new(dynamics, cost, bounds, settings, vec![ta; n_x])?;
        let mut bench = Self { plant, nmpc, sim, sys, prob };
        bench.set_references(0.0);
        Ok(bench)
    }

    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        Self::build(cfg.plant.clone(), cfg.nmpc.clone(), cfg.sim.clone())
    }

    pub fn system(&self) -> &Arc<DiscretizedSystem<f64>> {
        &self.sys
    }

    pub fn grid(&self) -> &SpatialGrid<f64> {
        self.sys.grid()
    }

    pub fn n_x(&self) -> usize {
        self.sys.n_x()
    }

    pub fn n_u(&self) -> usize {
        self.sys.n_u()
    }

    pub fn ambient(&self) -> f64 {
        self.plant.params.ta
    }

    fn x_coordinate(&self, g: usize) -> f64 {
        let grid = self.grid();
        grid.coords(g)[0] as f64 * grid.steps()[0]
    }

    /// One reference shape over the full grid.
    pub fn shape_field(&self, kind: ReferenceKind) -> Vec<f64> {
        let r: &ReferenceConfig = &self.sim.references;
        let ta = self.ambient();
        let side = self.plant.grid.side;
        (0..self.grid().total_points())
            .map(|g| {
                let s = self.x_coordinate(g) / side;
                ta + match kind {
                    ReferenceKind::Slope => r.slope_low + (r.slope_high - r.slope_low) * s,
                    ReferenceKind::VShape => r.vshape_center + (r.vshape_edge - r.vshape_center) * (2.0 * s - 1.0).abs(),
                }
            })
            .collect()
    }

    /// Weight of the V shape at time `t`: 0 before the switch, 1 after the
    /// fade, linear in between.
    pub fn vshape_weight(&self, t: f64) -> f64 {
        let r = &self.sim.references;
        if t <= r.switch_time_s {
            0.0
        } else if r.fade_s <= 0.0 || t >= r.switch_time_s + r.fade_s {
            1.0
        } else {
            (t - r.switch_time_s) / r.fade_s
        }
    }

    /// Reference temperature over the full grid at time `t`.
    pub fn reference_field(&self, t: f64) -> Vec<f64> {
        let w = self.vshape_weight(t);
        let slope = self.shape_field(ReferenceKind::Slope);
        if w == 0.0 {
            return slope;
        }
        let v = self.shape_field(ReferenceKind::VShape);
        if w == 1.0 {
            return v;
        }
        slope.iter().zip(&v).map(|(a, b)| (1.0 - w) * a + w * b).collect()
    }

    /// Splits a full-grid field into state and input parts.
    pub fn split_field(&self, field: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let grid = self.grid();
        let x = (0..grid.n_grid_states()).map(|s| field[grid.grid_of_state(s)]).collect();
        let u = grid.actuators().iter().map(|&g| field[g]).collect();
        (x, u)
    }

    /// Stage `i` tracks the reference at `t + (i+1) h`.
    pub fn set_references(&mut self, t: f64) {
        let h = self.nmpc.h();
        for i in 0..self.nmpc.n_stages {
            let (x, u) = self.split_field(&self.reference_field(t + (i + 1) as f64 * h));
            self.prob.cost.set_reference(i, &x, &u);
        }
    }

    pub fn initial_state(&self) -> Vec<f64> {
        vec![self.ambient(); self.n_x()]
    }

    /// States `x̄₀`, inputs at the box midpoint, costates zero.
    pub fn initial_trajectory(&self) -> Trajectory<f64> {
        Trajectory::constant(self.prob.x0(), &self.prob.constraint.midpoint(), self.nmpc.n_stages)
    }

    /// Integrates the plant over `dt` with backward Euler substeps no longer
    /// than `substep`.
    pub fn plant_step(&self, x: &[f64], u: &[f64], dt: f64, substep: f64) -> Result<Vec<f64>> {
        let n_sub = ((dt / substep) - 1e-9).ceil().max(1.0) as usize;
        let dt_sub = dt / n_sub as f64;
        let mut y = x.to_vec();
        for _ in 0..n_sub {
            y = backward_euler(self.sys.as_ref(), &y, u, dt_sub)?;
        }
        Ok(y)
    }

    /// RMS deviation of the plate field from the reference at `t` [K].
    pub fn tracking_rms(&self, x: &[f64], u: &[f64], t: f64) -> f64 {
        let field = self.grid().assemble_field(x, u);
        let r = self.reference_field(t);
        let ss: f64 = field.iter().zip(&r).map(|(a, b)| (a - b) * (a - b)).sum();
        (ss / field.len() as f64).sqrt()
    }
}

/// Solves `y = x + dt f(u, y)` by Newton's method with banded Jacobians.
pub fn backward_euler<D: Dynamics<f64> + ?Sized>(sys: &D, x: &[f64], u: &[f64], dt: f64) -> Result<Vec<f64>> {
    let n = sys.n_x();
    let p = sys.pattern().clone();
    let (mut kl, mut ku) = (0, 0);
    for r in 0..n {
        for &id in p.row(r) {
            if id < n {
                if id < r {
                    kl = kl.max(r - id);
                } else {
                    ku = ku.max(id - r);
                }
            }
        }
    }
    let mut lin = sys.new_linearization();
    let mut y = x.to_vec();
    let mut f = vec![0.0; n];
    let scale = 1.0 + crate::norm_inf(x);
    for _ in 0..50 {
        sys.eval(u, &y, &mut f);
        let mut r: Vec<f64> = (0..n).map(|j| y[j] - x[j] - dt * f[j]).collect();
        if crate::norm_inf(&r) <= 1e-12 * scale {
            return Ok(y);
        }
        sys.linearize(u, &y, &mut lin);
        let mut m = BandMatrix::zeros(n, kl, ku);
        for row in 0..n {
            m.add(row, row, 1.0);
            for k in p.range(row) {
                let id = p.ids()[k];
                if id < n {
                    m.add(row, id, -dt * lin.grad[k]);
                }
            }
        }
        m.factor()?.solve_in_place(&mut r);
        y.iter_mut().zip(&r).for_each(|(a, b)| *a -= b);
    }
    Err(Error::NoConvergence("backward Euler step of the plant".into()))
}

/// Which solver drives the closed loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Controller {
    DoubleLayer { method: UpperMethod, lower: StageSolveConfig },
    Newton,
}

impl Controller {
    pub fn from_config(nmpc: &NmpcConfig) -> Self {
        match nmpc.method.upper_kind() {
            Some(kind) => Controller::DoubleLayer { method: UpperMethod { kind, omega: nmpc.omega }, lower: nmpc.lower },
            None => Controller::Newton,
        }
    }

    pub fn name(&self) -> String {
        match self {
            Controller::DoubleLayer { method, .. } => method.kind.to_string(),
            Controller::Newton => "newton".into(),
        }
    }

    pub fn method_choice(&self) -> MethodChoice {
        match self {
            Controller::DoubleLayer { method, .. } => match method.kind {
                upper::UpperKind::Jacobi => MethodChoice::Jacobi,
                upper::UpperKind::Fgs => MethodChoice::Fgs,
                upper::UpperKind::Bgs => MethodChoice::Bgs,
                upper::UpperKind::Sor => MethodChoice::Sor,
                upper::UpperKind::Sgs => MethodChoice::Sgs,
            },
            Controller::Newton => MethodChoice::Newton,
        }
    }
}

/// Reusable solver state of a controller.
pub struct ControllerState {
    controller: Controller,
    stages: StageSet<f64>,
    newton: NewtonSolver<f64>,
}

impl ControllerState {
    pub fn new(controller: Controller, prob: &OcpProblem<f64>) -> Self {
        let cfg = match controller {
            Controller::DoubleLayer { lower, .. } => lower,
            Controller::Newton => StageSolveConfig::default(),
        };
        Self { controller, stages: StageSet::new(prob, cfg), newton: NewtonSolver::new() }
    }

    pub fn solve(&mut self, prob: &OcpProblem<f64>, traj: &mut Trajectory<f64>, opts: &SolveOptions) -> Result<SolveReport> {
        match self.controller {
            Controller::DoubleLayer { mut method, .. } => upper::run(prob, &mut method, &mut self.stages, traj, opts),
            Controller::Newton => upper::run(prob, &mut self.newton, &mut self.stages, traj, opts),
        }
    }

    pub fn newton(&self) -> &NewtonSolver<f64> {
        &self.newton
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopOptions {
    pub solve: SolveOptions,
    /// Timed solves per instant from identical warm starts.
    pub repeats: usize,
    /// Stop after this many instants (`None`: the configured duration).
    pub max_steps: Option<usize>,
}

impl LoopOptions {
    pub fn from_config(nmpc: &NmpcConfig, sim: &SimConfig) -> Self {
        Self { solve: SolveOptions::new(nmpc.tol, nmpc.max_iters), repeats: sim.repeats, max_steps: None }
    }
}

/// One sampling instant of the closed loop.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub t: f64,
    pub iters: usize,
    pub solve_time_ms: f64,
    pub mean_iter_time_ms: f64,
    pub kkt_inf_norm: f64,
    pub alpha_min: f64,
    /// Applied input `u₁`.
    pub inputs: Vec<f64>,
    pub tracking_rms: f64,
    pub min_constraint_ratio: f64,
    pub termination: Termination,
}

/// What the per-instant hook sees after each solve.
pub struct StepContext<'a> {
    pub step: usize,
    pub t: f64,
    pub prob: &'a OcpProblem<f64>,
    pub traj: &'a Trajectory<f64>,
    pub report: &'a SolveReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopLog {
    pub controller: String,
    pub n_u: usize,
    pub records: Vec<StepRecord>,
    /// Plant state at every instant, followed by the final state.
    pub states: Vec<Vec<f64>>,
    pub diverged: bool,
}

/// Run totals. `diverged_steps` counts instants whose solve did not reach
/// the tolerance, whether it blew up or ran out of iterations.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub total_steps: usize,
    pub mean_iters: f64,
    pub mean_solve_ms: f64,
    pub max_kkt_residual: f64,
    pub diverged_steps: usize,
}

impl ClosedLoopLog {
    pub fn summary(&self) -> Summary {
        let n = self.records.len();
        let mean = |f: &dyn Fn(&StepRecord) -> f64| if n == 0 { 0.0 } else { self.records.iter().map(f).sum::<f64>() / n as f64 };
        Summary {
            total_steps: n,
            mean_iters: mean(&|r| r.iters as f64),
            mean_solve_ms: mean(&|r| r.solve_time_ms),
            max_kkt_residual: self.records.iter().map(|r| r.kkt_inf_norm).fold(0.0, f64::max),
            diverged_steps: self.records.iter().filter(|r| r.termination != Termination::Converged).count(),
        }
    }

    /// Mean of the per-iteration times over instants with iterations [ms].
    pub fn mean_iteration_time_ms(&self) -> f64 {
        let v: Vec<f64> = self.records.iter().filter(|r| r.iters > 0).map(|r| r.mean_iter_time_ms).collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let n_u = self.n_u;
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> =
            ["step", "t_s", "iters", "solve_time_ms", "mean_iter_time_ms", "kkt_inf_norm", "alpha_min"].map(String::from).to_vec();
        header.extend((1..=n_u).map(|k| format!("u_{k}")));
        header.push("tracking_rms_K".into());
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![
                r.step.to_string(),
                r.t.to_string(),
                r.iters.to_string(),
                r.solve_time_ms.to_string(),
                r.mean_iter_time_ms.to_string(),
                r.kkt_inf_norm.to_string(),
                r.alpha_min.to_string(),
            ];
            row.extend(r.inputs.iter().map(|u| u.to_string()));
            row.push(r.tracking_rms.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Wide table of the state vector per instant.
    pub fn write_states_csv(&self, path: &Path, sampling_period: f64) -> Result<()> {
        let n_x = self.states.first().map_or(0, Vec::len);
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["step".to_string(), "t_s".to_string()];
        header.extend((1..=n_x).map(|j| format!("x_{j}")));
        w.write_record(&header)?;
        for (k, x) in self.states.iter().enumerate() {
            let mut row = vec![k.to_string(), (k as f64 * sampling_period).to_string()];
            row.extend(x.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// One `P x P` field file per instant (actuators hold the applied input),
    /// row-major with one grid row of constant y per line.
    pub fn write_field_snapshots(&self, dir: &Path, bench: &HeatBench) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let p = bench.plant.grid.points_per_axis;
        for r in &self.records {
            let field = bench.grid().assemble_field(&self.states[r.step], &r.inputs);
            let mut w = csv::WriterBuilder::new().has_headers(false).from_path(dir.join(format!("field_{:04}.csv", r.step)))?;
            for row in field.chunks(p) {
                w.write_record(row.iter().map(|v| v.to_string()))?;
            }
            w.flush()?;
        }
        Ok(())
    }
}

/// Runs the receding-horizon loop from `x̄₀ = T_a`.
pub fn run_closed_loop(bench: &mut HeatBench, controller: Controller, opts: &LoopOptions) -> Result<ClosedLoopLog> {
    run_closed_loop_with(bench, controller, opts, |_| Ok(()))
}

/// As [`run_closed_loop`], calling `hook` after every solve with the solved
/// trajectory.
pub fn run_closed_loop_with(
    bench: &mut HeatBench,
    controller: Controller,
    opts: &LoopOptions,
    mut hook: impl FnMut(&StepContext<'_>) -> Result<()>,
) -> Result<ClosedLoopLog> {
    let steps = opts.max_steps.map_or(bench.sim.n_steps(), |m| m.min(bench.sim.n_steps()));
    let ts = bench.sim.sampling_period_s;
    let mut x = bench.initial_state();
    bench.prob.set_x0(&x);
    let mut traj = bench.initial_trajectory();
    let mut state = ControllerState::new(controller, &bench.prob);
    let mut log = ClosedLoopLog {
        controller: controller.name(),
        n_u: bench.n_u(),
        records: Vec::new(), states: vec![x.clone()], diverged: false };

    for step in 0..steps {
        let t = step as f64 * ts;
        bench.set_references(t);
        bench.prob.set_x0(&x);
        bench.prob.refresh_u_tilde(&traj);

        let start = traj.clone();
        let mut best_ms = f64::INFINITY;
        let mut best_iter_ms = f64::INFINITY;
        let mut report = None;
        for _ in 0..opts.repeats.max(1) {
            traj = start.clone();
            let t0 = Instant::now();
            let rep = state.solve(&bench.prob, &mut traj, &opts.solve)?;
            best_ms = best_ms.min(t0.elapsed().as_secs_f64() * 1e3);
            best_iter_ms = best_iter_ms.min(rep.mean_iteration_time() * 1e3);
            report = Some(rep);
        }
        let report = report.expect("at least one solve");
        hook(&StepContext { step, t, prob: &bench.prob, traj: &traj, report: &report })?;

        let u = traj.u(0).to_vec();
        log.records.push(StepRecord {
            step,
            t,
            iters: report.iterations,
            solve_time_ms: best_ms,
            mean_iter_time_ms: if report.iterations > 0 { best_iter_ms } else { 0.0 },
            kkt_inf_norm: report.final_residual(),
            alpha_min: report.min_step(),
            tracking_rms: bench.tracking_rms(&x, &u, t),
            inputs: u.clone(),
            min_constraint_ratio: report.min_constraint_ratio,
            termination: report.termination,
        });
        if report.termination == Termination::Diverged {
            log.diverged = true;
            break;
        }
        x = bench.plant_step(&x, &u, ts, bench.sim.plant_substep_s)?;
        log.states.push(x.clone());
        traj.shift();
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_bench() -> HeatBench {
        HeatBench::build(PlantConfig::default(), NmpcConfig::default(), SimConfig::default()).unwrap()
    }

    #[test]
    fn dimensions_match_the_plate() {
        let b = default_bench();
        assert_eq!((b.n_x(), b.n_u()), (153, 16));
    }

    #[test]
    fn ambient_plate_is_at_rest() {
        let b = default_bench();
        let mut f = vec![1.0; b.n_x()];
        b.system().eval(&[300.0; 16], &b.initial_state(), &mut f);
        assert!(crate::norm_inf(&f) < 1e-9, "{}", crate::norm_inf(&f));
    }

    #[test]
    fn reference_schedule() {
        let b = default_bench();
        assert_eq!(b.reference_field(0.0), b.shape_field(ReferenceKind::Slope));
        assert_eq!(b.reference_field(1000.0), b.shape_field(ReferenceKind::VShape));
        let mid = b.reference_field(525.0);
        let (s, v) = (b.shape_field(ReferenceKind::Slope), b.shape_field(ReferenceKind::VShape));
        for ((m, a), c) in mid.iter().zip(&s).zip(&v) {
            assert!((m - 0.5 * (a + c)).abs() < 1e-12);
        }
        assert_eq!(s[0], 350.0);
        assert!((s[12] - 550.0).abs() < 1e-12);
        assert_eq!(v[6], 350.0);
    }

    #[test]
    fn backward_euler_satisfies_its_equation() {
        let b = default_bench();
        let x = b.initial_state();
        let u = vec![650.0; 16];
        let y = b.plant_step(&x, &u, 5.0, 5.0).unwrap();
        let mut f = vec![0.0; y.len()];
        b.system().eval(&u, &y, &mut f);
        let r = (0..y.len()).map(|j| (y[j] - x[j] - 5.0 * f[j]).abs()).fold(0.0, f64::max);
        assert!(r < 1e-9, "{r}");
        assert!(y.iter().all(|v| *v >= 300.0 - 1e-9));
    }
}
