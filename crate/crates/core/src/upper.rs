//! Upper layer: block splittings of the temporally coupled KKT system.
//!
//! The KKT matrix is `D + L + U` with `Dᵢ` on the block diagonal, `M_L`
//! (identity from `x_{i−1}` into the state rows) below it and `M_U` (identity
//! from `λ_{i+1}` into the costate rows) above it. Each method replaces the
//! Newton direction by a splitting that only needs stage solves.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lower::{StageSolveConfig, StageSolver};
use crate::ocp::{InequalityConstraint, OcpProblem, StageBlock, StageCost, Trajectory};
use crate::parallel;
use crate::Real;

/// Which block splitting to iterate with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpperKind {
    Jacobi,
    Fgs,
    Bgs,
    Sor,
    Sgs,
}

impl UpperKind {
    pub const ALL: [UpperKind; 5] = [UpperKind::Jacobi, UpperKind::Fgs, UpperKind::Bgs, UpperKind::Sor, UpperKind::Sgs];

    pub fn name(self) -> &'static str {
        match self {
            UpperKind::Jacobi => "jacobi",
            UpperKind::Fgs => "fgs",
            UpperKind::Bgs => "bgs",
            UpperKind::Sor => "sor",
            UpperKind::Sgs => "sgs",
        }
    }
}

impl std::fmt::Display for UpperKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpperMethod {
    pub kind: UpperKind,
    /// Relaxation factor; only read by SOR.
    pub omega: f64,
}

impl UpperMethod {
    pub fn new(kind: UpperKind) -> Self {
        Self { kind, omega: 1.0 }
    }

    pub fn sor(omega: f64) -> Result<Self> {
        let m = Self { kind: UpperKind::Sor, omega };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.omega > 0.0) || !self.omega.is_finite() {
            return Err(Error::Config(format!("SOR relaxation must be positive, got {}", self.omega)));
        }
        Ok(())
    }
}

/// One stage's Jacobian, residual block and solver.
#[derive(Debug)]
pub struct Stage<T: Real> {
    pub block: StageBlock<T>,
    pub solver: StageSolver<T>,
    tmp: Vec<T>,
    err: Option<Error>,
}

impl<T: Real> Stage<T> {
    fn take_err(&mut self, i: usize) -> Result<()> {
        match self.err.take() {
            Some(e) => Err(e.at_stage(i)),
            None => Ok(()),
        }
    }
}

/// Stage Jacobians, the stacked residual and the stage solvers of one
/// trajectory, with the block sweeps built on them.
#[derive(Debug)]
pub struct StageSet<T: Real> {
    n_x: usize,
    n_u: usize,
    pub stages: Vec<Stage<T>>,
    /// Stacked residual `𝒦` from the last [`StageSet::evaluate`].
    pub resid: Vec<T>,
    buf_a: Vec<T>,
    buf_b: Vec<T>,
}

impl<T: Real> StageSet<T> {
    pub fn new<C: StageCost<T>, G: InequalityConstraint<T>>(prob: &OcpProblem<T, C, G>, cfg: StageSolveConfig) -> Self {
        let len = prob.stage_len();
        let n = prob.n_stages();
        let stages = (0..n)
            .map(|_| {
                let block = StageBlock::new(prob);
                let solver = StageSolver::for_block(&block, cfg);
                Stage { block, solver, tmp: vec![T::zero(); len], err: None }
            })
            .collect();
        Self {
            n_x: prob.n_x(),
            n_u: prob.n_u(),
            stages,
            resid: vec![T::zero(); len * n],
            buf_a: vec![T::zero(); len * n],
            buf_b: vec![T::zero(); len * n],
        }
    }

    pub fn n_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn stage_len(&self) -> usize {
        2 * self.n_x + self.n_u
    }

    pub fn dim(&self) -> usize {
        self.stage_len() * self.n_stages()
    }

    /// Linearizes every stage and fills [`Self::resid`].
    pub fn evaluate<C: StageCost<T>, G: InequalityConstraint<T>>(
        &mut self,
        prob: &OcpProblem<T, C, G>,
        traj: &Trajectory<T>,
    ) -> Result<()> {
        let len = self.stage_len();
        for_each_stage(&mut self.stages, &mut self.resid, len, |i, st, r| {
            if let Err(e) = prob.evaluate_stage(i, traj, &mut st.block, r) {
                st.err = Some(e);
            }
        });
        self.stages.iter_mut().enumerate().try_for_each(|(i, s)| s.take_err(i))
    }

    /// Prepares every stage solver from its block.
    pub fn prepare(&mut self) -> Result<()> {
        let mut empty: Vec<T> = Vec::new();
        for_each_stage(&mut self.stages, &mut empty, 0, |_, st, _| {
            if let Err(e) = st.solver.prepare(&st.block) {
                st.err = Some(e);
            }
        });
        self.stages.iter_mut().enumerate().try_for_each(|(i, s)| s.take_err(i))
    }

    pub fn replace_config(&mut self, cfg: StageSolveConfig) {
        for st in &mut self.stages {
            st.solver = StageSolver::for_block(&st.block, cfg);
        }
    }

    pub fn resid_inf_norm(&self) -> T {
        crate::norm_inf(&self.resid)
    }

    /// `out = D⁻¹ rhs`, stage by stage.
    pub fn jacobi(&mut self, rhs: &[T], out: &mut [T]) -> Result<()> {
        let len = self.stage_len();
        for_each_stage(&mut self.stages, out, len, |i, st, o| {
            if let Err(e) = st.solver.solve(&st.block, &rhs[i * len..(i + 1) * len], o) {
                st.err = Some(e);
            }
        });
        self.stages.iter_mut().enumerate().try_for_each(|(i, s)| s.take_err(i))
    }

    /// `out = (D + ωL)⁻¹ rhs` by a forward sweep.
    pub fn forward(&mut self, rhs: &[T], omega: T, out: &mut [T]) -> Result<()> {
        let len = self.stage_len();
        for i in 0..self.n_stages() {
            let Stage { block, solver, tmp, .. } = &mut self.stages[i];
            tmp.copy_from_slice(&rhs[i * len..(i + 1) * len]);
            if i > 0 {
                let prev = &out[(i - 1) * len..(i - 1) * len + self.n_x];
                for (t, p) in tmp.iter_mut().zip(prev) {
                    *t -= omega * *p;
                }
            }
            solver.solve(block, tmp, &mut out[i * len..(i + 1) * len]).map_err(|e| e.at_stage(i))?;
        }
        Ok(())
    }

    /// `out = (D + U)⁻¹ rhs` by a backward sweep.
    pub fn backward(&mut self, rhs: &[T], out: &mut [T]) -> Result<()> {
        let len = self.stage_len();
        let lam0 = self.n_x + self.n_u;
        let n = self.n_stages();
        for i in (0..n).rev() {
            let Stage { block, solver, tmp, .. } = &mut self.stages[i];
            tmp.copy_from_slice(&rhs[i * len..(i + 1) * len]);
            if i + 1 < n {
                let next = &out[(i + 1) * len + lam0..(i + 2) * len];
                for (t, p) in tmp[lam0..].iter_mut().zip(next) {
                    *t -= *p;
                }
            }
            solver.solve(block, tmp, &mut out[i * len..(i + 1) * len]).map_err(|e| e.at_stage(i))?;
        }
        Ok(())
    }

    /// `out = L v` (states of the previous stage into the state rows).
    pub fn apply_l(&self, v: &[T], out: &mut [T]) {
        let len = self.stage_len();
        out.iter_mut().for_each(|o| *o = T::zero());
        for i in 1..self.n_stages() {
            out[i * len..i * len + self.n_x].copy_from_slice(&v[(i - 1) * len..(i - 1) * len + self.n_x]);
        }
    }

    /// `out = U v` (costates of the next stage into the costate rows).
    pub fn apply_u(&self, v: &[T], out: &mut [T]) {
        let len = self.stage_len();
        let lam0 = self.n_x + self.n_u;
        out.iter_mut().for_each(|o| *o = T::zero());
        for i in 0..self.n_stages().saturating_sub(1) {
            out[i * len + lam0..(i + 1) * len].copy_from_slice(&v[(i + 1) * len + lam0..(i + 2) * len]);
        }
    }

    /// `out = D v` with the chosen part of each stage block.
    pub fn apply_d(&self, part: crate::ocp::Part, v: &[T], out: &mut [T]) {
        let len = self.stage_len();
        for (i, st) in self.stages.iter().enumerate() {
            st.block.apply(part, &v[i * len..(i + 1) * len], &mut out[i * len..(i + 1) * len]);
        }
    }

    /// `out = (D + L + U) v`.
    pub fn apply_kkt(&self, v: &[T], out: &mut [T]) {
        let mut t = vec![T::zero(); v.len()];
        self.apply_d(crate::ocp::Part::Full, v, out);
        self.apply_l(v, &mut t);
        out.iter_mut().zip(&t).for_each(|(o, a)| *o += *a);
        self.apply_u(v, &mut t);
        out.iter_mut().zip(&t).for_each(|(o, a)| *o += *a);
    }

    /// Splitting direction for `method` from the current residual.
    /// Solvers must be prepared.
    pub fn direction(&mut self, method: UpperMethod, delta: &mut [T]) -> Result<()> {
        let resid = std::mem::take(&mut self.resid);
        let r = self.direction_for(method, &resid, delta);
        self.resid = resid;
        r
    }

    fn direction_for(&mut self, method: UpperMethod, rhs: &[T], delta: &mut [T]) -> Result<()> {
        match method.kind {
            UpperKind::Jacobi => self.jacobi(rhs, delta),
            UpperKind::Fgs => self.forward(rhs, T::one(), delta),
            UpperKind::Bgs => self.backward(rhs, delta),
            UpperKind::Sor => {
                let omega = T::lit(method.omega);
                self.forward(rhs, omega, delta)?;
                delta.iter_mut().for_each(|d| *d *= omega);
                Ok(())
            }
            UpperKind::Sgs => {
                let mut z = std::mem::take(&mut self.buf_a);
                let mut r2 = std::mem::take(&mut self.buf_b);
                let res = (|| {
                    self.backward(rhs, &mut z)?;
                    self.apply_u(&z, &mut r2);
                    for (a, b) in r2.iter_mut().zip(rhs) {
                        *a = *b - *a;
                    }
                    self.forward(&r2, T::one(), delta)
                })();
                self.buf_a = z;
                self.buf_b = r2;
                res
            }
        }
    }
}

/// Runs `f(i, stage, chunk_i)` for every stage, where `chunk_i` is the i-th
/// `len`-sized piece of `flat` (empty when `len == 0`).
fn for_each_stage<T, F>(stages: &mut [Stage<T>], flat: &mut [T], len: usize, f: F)
where
    T: Real,
    F: Fn(usize, &mut Stage<T>, &mut [T]) + Sync + Send,
{
    match parallel::pool() {
        Some(pool) => {
            use rayon::prelude::*;
            pool.install(|| {
                if len == 0 {
                    stages.par_iter_mut().enumerate().for_each(|(i, s)| f(i, s, &mut []));
                } else {
                    stages
                        .par_iter_mut()
                        .zip(flat.par_chunks_mut(len))
                        .enumerate()
                        .for_each(|(i, (s, c))| f(i, s, c));
                }
            })
        }
        None => {
            if len == 0 {
                stages.iter_mut().enumerate().for_each(|(i, s)| f(i, s, &mut []));
            } else {
                stages.iter_mut().zip(flat.chunks_mut(len)).enumerate().for_each(|(i, (s, c))| f(i, s, c));
            }
        }
    }
}

/// Computes a search direction from evaluated stages.
pub trait DirectionSolver<T: Real> {
    fn compute(&mut self, stages: &mut StageSet<T>, delta: &mut [T]) -> Result<()>;
}

impl<T: Real> DirectionSolver<T> for UpperMethod {
    fn compute(&mut self, stages: &mut StageSet<T>, delta: &mut [T]) -> Result<()> {
        stages.prepare()?;
        stages.direction(*self, delta)
    }
}

/// Largest `α ∈ (0, 1]` with `G(S − αΔS) ≥ 0.005 G(S)` at every stage.
///
/// Affine constraints use the exact ratio test; others backtrack by 0.9.
pub fn fraction_to_boundary<T: Real, C: StageCost<T>, G: InequalityConstraint<T>>(
    prob: &OcpProblem<T, C, G>,
    traj: &Trajectory<T>,
    delta: &[T],
) -> Result<T> {
    let m = prob.constraint.len();
    if m == 0 {
        return Ok(T::one());
    }
    let (n_x, n_u) = (prob.n_x(), prob.n_u());
    let len = prob.stage_len();
    let keep = T::lit(0.995);
    let mut g = Vec::with_capacity(m);
    let mut grad = Vec::new();
    let mut alpha = T::one();
    if prob.constraint.is_affine() {
        for i in 0..prob.n_stages() {
            prob.check_interior(i, traj.u(i), traj.x(i), &mut g)?;
            let d = &delta[i * len..(i + 1) * len];
            for (j, gj) in g.iter().enumerate() {
                grad.clear();
                prob.constraint.gradient(j, traj.u(i), traj.x(i), &mut grad);
                let jd: T = grad.iter().map(|&(id, v)| v * d[id]).sum();
                if jd > T::zero() {
                    alpha = alpha.min(keep * *gj / jd);
                }
            }
        }
        return Ok(alpha);
    }

    let mut gs = Vec::with_capacity(prob.n_stages());
    for i in 0..prob.n_stages() {
        prob.check_interior(i, traj.u(i), traj.x(i), &mut g)?;
        gs.push(g.clone());
    }
    let floor = T::lit(0.005);
    let (mut xt, mut ut, mut gt) = (vec![T::zero(); n_x], vec![T::zero(); n_u], vec![T::zero(); m]);
    for _ in 0..400 {
        let ok = (0..prob.n_stages()).all(|i| {
            let d = &delta[i * len..(i + 1) * len];
            for j in 0..n_x {
                xt[j] = traj.x(i)[j] - alpha * d[j];
            }
            for k in 0..n_u {
                ut[k] = traj.u(i)[k] - alpha * d[n_x + k];
            }
            prob.constraint.eval(&ut, &xt, &mut gt);
            gt.iter().zip(&gs[i]).all(|(a, b)| *a >= floor * *b)
        });
        if ok {
            return Ok(alpha);
        }
        alpha *= T::lit(0.9);
    }
    Ok(alpha)
}

/// Why an iteration stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxIterations,
    /// The residual grew past the divergence guard or became non-finite.
    Diverged,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub tol: f64,
    pub max_iters: usize,
    /// Abort when `‖𝒦ᵏ‖∞` exceeds this multiple of `‖𝒦⁰‖∞`.
    pub divergence_factor: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { tol: 1.0, max_iters: 100, divergence_factor: 1e4 }
    }
}

impl SolveOptions {
    pub fn new(tol: f64, max_iters: usize) -> Self {
        Self { tol, max_iters, ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub iterations: usize,
    /// `‖𝒦ᵏ‖∞` for `k = 0..=iterations`.
    pub residual_history: Vec<f64>,
    /// `α^max` per iteration.
    pub step_sizes: Vec<f64>,
    /// Wall time per iteration in seconds.
    pub iteration_times: Vec<f64>,
    pub termination: Termination,
    /// Smallest `G_j(S^{k+1}) / G_j(S^k)` over all accepted steps (1 when no
    /// step was taken or there are no constraints).
    pub min_constraint_ratio: f64,
}

impl SolveReport {
    pub fn converged(&self) -> bool {
        self.termination == Termination::Converged
    }

    pub fn final_residual(&self) -> f64 {
        self.residual_history.last().copied().unwrap_or(f64::NAN)
    }

    pub fn total_time(&self) -> f64 {
        self.iteration_times.iter().sum()
    }

    pub fn mean_iteration_time(&self) -> f64 {
        if self.iteration_times.is_empty() {
            0.0
        } else {
            self.total_time() / self.iteration_times.len() as f64
        }
    }

    pub fn min_step(&self) -> f64 {
        self.step_sizes.iter().copied().fold(1.0, f64::min)
    }
}

/// Iterates `S ← S − α ΔS` with directions from `dir` until
/// `‖𝒦‖∞ < tol`, the iteration budget is spent, or the divergence guard trips.
pub fn run<T, C, G, D>(
    prob: &OcpProblem<T, C, G>,
    dir: &mut D,
    stages: &mut StageSet<T>,
    traj: &mut Trajectory<T>,
    opts: &SolveOptions,
) -> Result<SolveReport>
where
    T: Real,
    C: StageCost<T>,
    G: InequalityConstraint<T>,
    D: DirectionSolver<T> + ?Sized,
{
    let mut delta = vec![T::zero(); stages.dim()];
    let mut report = SolveReport {
        iterations: 0,
        residual_history: Vec::new(),
        step_sizes: Vec::new(),
        iteration_times: Vec::new(),
        termination: Termination::MaxIterations,
        min_constraint_ratio: 1.0,
    };
    let m = prob.constraint.len();
    let mut g_new = vec![T::zero(); m];
    let mut initial = f64::NAN;
    loop {
        let t0 = Instant::now();
        stages.evaluate(prob, traj)?;
        let norm = stages.resid_inf_norm().as_f64();
        report.residual_history.push(norm);
        if report.iterations == 0 {
            initial = norm;
        }
        if !norm.is_finite() || norm > opts.divergence_factor * initial.max(f64::MIN_POSITIVE) {
            report.termination = Termination::Diverged;
            break;
        }
        if norm < opts.tol {
            report.termination = Termination::Converged;
            break;
        }
        if report.iterations >= opts.max_iters {
            report.termination = Termination::MaxIterations;
            break;
        }
        dir.compute(stages, &mut delta)?;
        if delta.iter().any(|d| !d.is_finite()) {
            report.termination = Termination::Diverged;
            break;
        }
        let alpha = fraction_to_boundary(prob, traj, &delta)?;
        traj.step(alpha, &delta);
        for (i, st) in stages.stages.iter().enumerate() {
            prob.constraint.eval(traj.u(i), traj.x(i), &mut g_new);
            for (a, b) in g_new.iter().zip(st.block.constraint_values()) {
                report.min_constraint_ratio = report.min_constraint_ratio.min((*a / *b).as_f64());
            }
        }
        report.step_sizes.push(alpha.as_f64());
        report.iteration_times.push(t0.elapsed().as_secs_f64());
        report.iterations += 1;
    }
    Ok(report)
}

/// Solves the KKT conditions with an upper-layer method from `traj`
/// (updated in place).
pub fn solve<T: Real, C: StageCost<T>, G: InequalityConstraint<T>>(
    prob: &OcpProblem<T, C, G>,
    method: UpperMethod,
    cfg: StageSolveConfig,
    traj: &mut Trajectory<T>,
    opts: &SolveOptions,
) -> Result<SolveReport> {
    method.validate()?;
    cfg.validate()?;
    let mut stages = StageSet::new(prob, cfg);
    let mut m = method;
    run(prob, &mut m, &mut stages, traj, opts)
}

/// Outcome of a single iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInfo<T> {
    pub delta: Vec<T>,
    pub alpha: T,
    pub residual_inf_norm: T,
}

/// One iteration `S ← S − α ΔS` of `dir` from `traj`.
pub fn step_with<T, C, G, D>(
    prob: &OcpProblem<T, C, G>,
    dir: &mut D,
    cfg: StageSolveConfig,
    traj: &mut Trajectory<T>,
) -> Result<StepInfo<T>>
where
    T: Real,
    C: StageCost<T>,
    G: InequalityConstraint<T>,
    D: DirectionSolver<T> + ?Sized,
{
    let mut stages = StageSet::new(prob, cfg);
    stages.evaluate(prob, traj)?;
    let norm = stages.resid_inf_norm();
    let mut delta = vec![T::zero(); stages.dim()];
    dir.compute(&mut stages, &mut delta)?;
    let alpha = fraction_to_boundary(prob, traj, &delta)?;
    traj.step(alpha, &delta);
    Ok(StepInfo { delta, alpha, residual_inf_norm: norm })
}

/// One upper-layer iteration.
pub fn step<T: Real, C: StageCost<T>, G: InequalityConstraint<T>>(
    prob: &OcpProblem<T, C, G>,
    method: UpperMethod,
    cfg: StageSolveConfig,
    traj: &mut Trajectory<T>,
) -> Result<StepInfo<T>> {
    let mut m = method;
    step_with(prob, &mut m, cfg, traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::{lq_problem, random_problem};
    use crate::ocp::Part;

    fn evaluated(seed: u64, n_stages: usize) -> (OcpProblem<f64>, Trajectory<f64>, StageSet<f64>) {
        let (prob, traj) = random_problem::<f64>(seed, 4, 2, n_stages, 0.5).unwrap();
        let mut set = StageSet::new(&prob, StageSolveConfig::exact());
        set.evaluate(&prob, &traj).unwrap();
        set.prepare().unwrap();
        (prob, traj, set)
    }

    fn gap(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    /// `(D + a L + b U) v`.
    fn apply_split(set: &StageSet<f64>, a: f64, b: f64, v: &[f64]) -> Vec<f64> {
        let n = v.len();
        let (mut out, mut t) = (vec![0.0; n], vec![0.0; n]);
        set.apply_d(Part::Full, v, &mut out);
        set.apply_l(v, &mut t);
        out.iter_mut().zip(&t).for_each(|(o, x)| *o += a * x);
        set.apply_u(v, &mut t);
        out.iter_mut().zip(&t).for_each(|(o, x)| *o += b * x);
        out
    }

    #[test]
    fn sweeps_solve_their_splittings() {
        let (_, _, mut set) = evaluated(3, 5);
        let r = set.resid.clone();
        let mut d = vec![0.0; set.dim()];
        for (kind, a, b) in [(UpperKind::Jacobi, 0.0, 0.0), (UpperKind::Fgs, 1.0, 0.0), (UpperKind::Bgs, 0.0, 1.0)] {
            set.direction(UpperMethod::new(kind), &mut d).unwrap();
            assert!(gap(&apply_split(&set, a, b, &d), &r) < 1e-11, "{kind}");
        }
        let omega = 1.3;
        set.direction(UpperMethod::sor(omega).unwrap(), &mut d).unwrap();
        let y: Vec<f64> = d.iter().map(|v| v / omega).collect();
        assert!(gap(&apply_split(&set, omega, 0.0, &y), &r) < 1e-11);
    }

    #[test]
    fn sgs_is_a_backward_then_forward_sweep() {
        let (_, _, mut set) = evaluated(4, 4);
        let r = set.resid.clone();
        let n = set.dim();
        let mut d = vec![0.0; n];
        set.direction(UpperMethod::new(UpperKind::Sgs), &mut d).unwrap();
        // (D+L) d = r − U z with (D+U) z = r
        let mut z = vec![0.0; n];
        set.direction(UpperMethod::new(UpperKind::Bgs), &mut z).unwrap();
        let mut uz = vec![0.0; n];
        set.apply_u(&z, &mut uz);
        let want: Vec<f64> = r.iter().zip(&uz).map(|(a, b)| a - b).collect();
        assert!(gap(&apply_split(&set, 1.0, 0.0, &d), &want) < 1e-11);
    }

    #[test]
    fn fixed_points_of_all_methods_agree() {
        let prob = lq_problem::<f64>(9, 3, 2, 4, 0.5).unwrap();
        let opts = SolveOptions::new(1e-11, 400);
        let mut reference = None;
        for kind in UpperKind::ALL {
            let mut traj = Trajectory::zeros(3, 2, 4);
            let rep = solve(&prob, UpperMethod::new(kind), StageSolveConfig::exact(), &mut traj, &opts).unwrap();
            assert!(rep.converged(), "{kind}: {:?}", rep.termination);
            match &reference {
                None => reference = Some(traj),
                Some(t) => assert!(gap(t.as_slice(), traj.as_slice()) < 1e-9, "{kind}"),
            }
        }
    }

    #[test]
    fn boundary_rule_keeps_half_a_percent() {
        let (prob, traj, set) = evaluated(5, 3);
        // push every input towards its lower bound by far more than the gap
        let mut delta = vec![0.0; set.dim()];
        let len = prob.stage_len();
        for i in 0..3 {
            for k in 0..2 {
                delta[i * len + 4 + k] = 10.0;
            }
        }
        let alpha = fraction_to_boundary(&prob, &traj, &delta).unwrap();
        let mut next = traj.clone();
        next.step(alpha, &delta);
        let worst = (0..3)
            .flat_map(|i| (0..2).map(move |k| (i, k)))
            .map(|(i, k)| (next.u(i)[k] + 1.0) / (traj.u(i)[k] + 1.0))
            .fold(f64::INFINITY, f64::min);
        assert!((worst - 0.005).abs() < 1e-12, "{worst}");
        assert!(alpha > 0.0 && alpha < 1.0);
    }

    #[test]
    fn budget_and_guards() {
        let prob = lq_problem::<f64>(2, 3, 2, 6, 0.0).unwrap();
        let mut traj = Trajectory::zeros(3, 2, 6);
        let none = SolveOptions { tol: 1e-300, max_iters: 0, divergence_factor: 1e4 };
        let rep = solve(&prob, UpperMethod::new(UpperKind::Jacobi), StageSolveConfig::exact(), &mut traj, &none).unwrap();
        assert_eq!((rep.iterations, rep.termination, rep.residual_history.len()), (0, Termination::MaxIterations, 1));
        assert_eq!(traj, Trajectory::zeros(3, 2, 6));
        // a guard below one trips as soon as the residual fails to shrink enough
        let strict = SolveOptions { tol: 1e-300, max_iters: 50, divergence_factor: 1e-30 };
        let rep = solve(&prob, UpperMethod::new(UpperKind::Jacobi), StageSolveConfig::exact(), &mut traj, &strict).unwrap();
        assert_eq!(rep.termination, Termination::Diverged);
        assert!(UpperMethod::sor(0.0).is_err());
        assert!(UpperMethod::sor(f64::INFINITY).is_err());
    }
}
