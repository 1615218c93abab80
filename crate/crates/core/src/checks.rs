//! Invariant and oracle suite behind the `check` command.
//!
//! Every check returns a measured value and the tolerance it is held to, so
//! the caller decides how to report. Instances are drawn from a seeded RNG.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dynamics::Dynamics;
use crate::error::Result;
use crate::instances::{lq_problem, random_problem, small_plate};
use crate::lower::StageSolveConfig;
use crate::newton::NewtonSolver;
use crate::ocp::{InequalityConstraint, OcpProblem, Part, RegMode, StageCost, Trajectory};
use crate::pde::{finite_difference_check, Coefficient, CoeffDerivs, DiscretizedSystem, PdeModel, SpatialGrid};
use crate::spectral::{analysis_config, convergence_factor, nilpotency_amplification, oracle_factor, verify_gs_squared};
use crate::spectral::{IterationOperator, PowerOptions};
use crate::upper::{self, fraction_to_boundary, SolveOptions, UpperKind, UpperMethod};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRow {
    pub check: String,
    pub instance: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckRow {
    /// Passes when `value <= tolerance`.
    pub fn at_most(check: &str, instance: String, value: f64, tolerance: f64) -> Self {
        Self { check: check.into(), instance, value, tolerance, passed: value <= tolerance }
    }
}

pub fn write_check_csv(path: &Path, rows: &[CheckRow]) -> Result<()> {
    crate::analysis::write_rows(path, &["check", "instance", "value", "tolerance", "passed"], rows)
}

/// Second-order 1D system whose coefficients depend on the input and whose
/// Neumann data is input dependent, to exercise every derivative path.
pub fn wave_system(points: usize) -> Result<DiscretizedSystem<f64>> {
    let damping = Coefficient::state(|w: f64| [0.2 + 0.1 * w * w, 0.2 * w, 0.2]);
    let c = Coefficient::general(|u: &[f64], w: f64, d: &mut CoeffDerivs<f64>| {
        d.value = 1.0 + 0.3 * u[0] * w;
        d.dw = 0.3 * u[0];
        d.du[0] = 0.3 * w;
        d.duw[0] = 0.3;
    });
    let d = Coefficient::state(|w: f64| [w.sin(), w.cos(), -w.sin()]);
    let e = Coefficient::general(|u: &[f64], w: f64, d: &mut CoeffDerivs<f64>| {
        d.value = 0.5 * u[0] * u[0] - 0.1 * w;
        d.dw = -0.1;
        d.du[0] = u[0];
        d.duu[0] = 1.0;
    });
    let model = PdeModel::second_order(vec![1.0], Coefficient::Constant(1.0), damping, c, d, e);
    let grid = SpatialGrid::new(&[points], &[1.0], vec![points / 2])?;
    DiscretizedSystem::new(model, grid)
}

/// Derivatives of every system against central differences at
/// `points` random admissible points each.
pub fn derivative_checks(seed: u64, points: usize) -> Result<Vec<CheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plate = small_plate(5, vec![1, 3], 3, 15.0, 0.5)?;
    let wave = wave_system(7)?;
    let (dense, _) = random_problem::<f64>(seed, 4, 2, 2, 0.5)?;
    type Sample<'a> = (&'a str, &'a dyn Dynamics<f64>, (f64, f64));
    let systems: [Sample; 3] = [
        ("plate 5x5", plate.system().as_ref(), (300.0, 700.0)),
        ("wave 1d", &wave, (-1.0, 1.0)),
        ("dense cubic", dense.dynamics().as_ref(), (-1.0, 1.0)),
    ];
    let mut rows = Vec::new();
    for (name, sys, (lo, hi)) in systems {
        let mut worst = 0.0f64;
        for _ in 0..points {
            let x: Vec<f64> = (0..sys.n_x()).map(|_| rng.gen_range(lo..hi)).collect();
            let u: Vec<f64> = (0..sys.n_u()).map(|_| rng.gen_range(lo..hi)).collect();
            let lam: Vec<f64> = (0..sys.n_x()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            worst = worst.max(finite_difference_check(sys, &u, &x, &lam).max_error());
        }
        rows.push(CheckRow::at_most("derivatives", name.into(), worst, 1e-5));
    }

    // stage Jacobians of the KKT residual on the plate
    let prob = &plate.prob;
    let mut worst = 0.0f64;
    for _ in 0..points.min(10) {
        let mut traj = plate.initial_trajectory();
        for v in traj.as_mut_slice() {
            *v = rng.gen_range(320.0..680.0);
        }
        for i in 0..prob.n_stages() {
            for l in traj.lam_mut(i) {
                *l = rng.gen_range(-50.0..50.0);
            }
        }
        let i = rng.gen_range(0..prob.n_stages());
        worst = worst.max(stage_jacobian_gap(prob, &traj, i)?);
    }
    rows.push(CheckRow::at_most("stage jacobian", "plate 5x5".into(), worst, 1e-5));
    Ok(rows)
}

/// Relative gap between the stage Jacobian and central differences of the
/// stage residual. In current-iterate mode the residual carries no `γ` term,
/// so `γI` is added to the differenced input block.
pub fn stage_jacobian_gap<C: StageCost<f64>, G: InequalityConstraint<f64>>(
    prob: &OcpProblem<f64, C, G>,
    traj: &Trajectory<f64>,
    i: usize,
) -> Result<f64> {
    let (n_x, n_u) = (prob.n_x(), prob.n_u());
    let x_prev = if i == 0 { prob.x0().to_vec() } else { traj.x(i - 1).to_vec() };
    let lam_next = (i + 1 < prob.n_stages()).then(|| traj.lam(i + 1).to_vec());
    let s = traj.stage(i).to_vec();
    let ut = prob.u_tilde(i).to_vec();
    let d = prob.stage_jacobian(i, &x_prev, &s, lam_next.as_deref())?.to_dense(Part::Full);
    let n = s.len();
    let mut diff = 0.0f64;
    let mut scale = 0.0f64;
    let mut sp = s.clone();
    for j in 0..n {
        let e = 1e-6 * s[j].abs().max(1.0);
        sp[j] = s[j] + e;
        let rp = prob.kkt_stage_residual(i, &x_prev, &sp, lam_next.as_deref(), &ut)?;
        sp[j] = s[j] - e;
        let rm = prob.kkt_stage_residual(i, &x_prev, &sp, lam_next.as_deref(), &ut)?;
        sp[j] = s[j];
        for r in 0..n {
            let mut fd = (rp[r] - rm[r]) / (2.0 * e);
            let in_u = |k: usize| k >= n_x && k < n_x + n_u;
            if prob.reg_mode() == RegMode::CurrentIterate && r == j && in_u(r) {
                fd += prob.gamma();
            }
            diff = diff.max((fd - d[(r, j)]).abs());
            scale = scale.max(d[(r, j)].abs());
        }
    }
    Ok(diff / scale.max(1.0))
}

/// Nilpotency of the `D̄` splitting on `count` random instances with
/// `N ∈ {2, …, 6}`, after `N` and after `2N − 1` applications, and the
/// control case with the full `D` (which must not vanish).
pub fn nilpotency_checks(seed: u64, count: usize) -> Result<Vec<CheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut rows = Vec::new();
    for k in 0..count {
        let n = rng.gen_range(2..=6);
        let n_x = rng.gen_range(2..=5);
        let n_u = rng.gen_range(1..=3);
        let (prob, traj) = random_problem::<f64>(seed.wrapping_add(k as u64), n_x, n_u, n, 0.5)?;
        let amp = nilpotency_amplification(&prob, &traj, Part::Bar, n, 10, seed.wrapping_add(k as u64))?;
        rows.push(CheckRow::at_most("nilpotency", format!("random {k} N={n} nx={n_x} nu={n_u}"), amp, 1e-8));
        let long = nilpotency_amplification(&prob, &traj, Part::Bar, 2 * n - 1, 10, seed.wrapping_add(k as u64))?;
        rows.push(CheckRow::at_most("nilpotency 2N-1", format!("random {k} N={n} nx={n_x} nu={n_u}"), long, 1e-8));
    }
    let plate = small_plate(5, vec![1, 3], 4, 20.0, 0.5)?;
    let traj = plate.initial_trajectory();
    let full = nilpotency_amplification(&plate.prob, &traj, Part::Full, 7, 10, seed)?;
    rows.push(CheckRow {
        check: "nilpotency control (full D)".into(),
        instance: "plate 5x5 N=4".into(),
        value: full,
        tolerance: 1e-8,
        passed: full > 1e-8,
    });
    Ok(rows)
}

/// Dense squared-factor law on a tiny plate and on random instances.
pub fn squared_factor_checks(seed: u64) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    let plate = small_plate(3, vec![1], 3, 15.0, 0.5)?;
    let traj = plate.initial_trajectory();
    let f = verify_gs_squared(&plate.prob, &traj)?;
    rows.push(CheckRow::at_most("squared factor", format!("plate 3x3 N=3 rho_J={:.6}", f.jacobi), f.squared_gap(), 1e-8));
    for k in 0..3u64 {
        let (prob, traj) = random_problem::<f64>(seed.wrapping_add(100 + k), 3, 2, 4, 0.5)?;
        let f = verify_gs_squared(&prob, &traj)?;
        rows.push(CheckRow::at_most(
            "squared factor",
            format!("random {k} N=4 rho_J={:.6}", f.jacobi),
            f.squared_gap(),
            1e-8,
        ));
    }
    Ok(rows)
}

/// Matrix-free estimate against the dense oracle on a small LQ instance.
pub fn estimator_check(seed: u64) -> Result<Vec<CheckRow>> {
    let prob = lq_problem::<f64>(seed, 2, 1, 3, 0.5)?;
    let traj = Trajectory::zeros(2, 1, 3);
    let mut rows = Vec::new();
    for kind in UpperKind::ALL {
        let mut op = IterationOperator::new(&prob, &traj, UpperMethod::new(kind), StageSolveConfig::exact())?;
        let est = convergence_factor(&mut op, &PowerOptions { seed, ..PowerOptions::default() })?;
        let oracle = oracle_factor(&mut op)?.unwrap_or(f64::NAN);
        rows.push(CheckRow::at_most("estimator", format!("lq N=3 {kind}"), (est - oracle).abs(), 1e-6));
    }
    Ok(rows)
}

/// SOR with `ω = 1` against FGS (bitwise), and `N = 1` steps of every
/// method against the Newton step.
pub fn identity_checks(seed: u64) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    let plate = small_plate(5, vec![1, 3], 4, 20.0, 0.5)?;
    let traj = plate.initial_trajectory();
    let cfg = StageSolveConfig::default();
    let mut a = traj.clone();
    let mut b = traj.clone();
    let sa = upper::step(&plate.prob, UpperMethod::new(UpperKind::Fgs), cfg, &mut a)?;
    let sb = upper::step(&plate.prob, UpperMethod::sor(1.0)?, cfg, &mut b)?;
    let same = sa.delta.iter().zip(&sb.delta).all(|(p, q)| p.to_bits() == q.to_bits());
    rows.push(CheckRow {
        check: "sor(1) = fgs".into(),
        instance: "plate 5x5 N=4".into(),
        value: if same { 0.0 } else { 1.0 },
        tolerance: 0.0,
        passed: same,
    });

    for k in 0..3u64 {
        let (prob, traj) = random_problem::<f64>(seed.wrapping_add(200 + k), 4, 2, 1, 0.5)?;
        let mut t = traj.clone();
        let newton = upper::step_with(&prob, &mut NewtonSolver::new(), StageSolveConfig::exact(), &mut t)?;
        for kind in UpperKind::ALL {
            let mut t = traj.clone();
            let s = upper::step(&prob, UpperMethod::new(kind), analysis_config(), &mut t)?;
            let gap = s.delta.iter().zip(&newton.delta).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            let scale = crate::norm_inf(&newton.delta).max(1.0);
            rows.push(CheckRow::at_most("N=1 step = newton", format!("random {k} {kind}"), gap / scale, 1e-12));
        }
    }
    Ok(rows)
}

/// Closed form of the step bound for the affine input box.
pub fn fraction_to_boundary_check(seed: u64) -> Result<Vec<CheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf7b);
    let mut worst = 0.0f64;
    for k in 0..20u64 {
        let (prob, traj) = random_problem::<f64>(seed.wrapping_add(300 + k), 3, 2, 3, 0.5)?;
        let delta: Vec<f64> = (0..traj.as_slice().len()).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let alpha = fraction_to_boundary(&prob, &traj, &delta)?;
        let expected = box_step_bound(&traj, &delta, prob.n_x(), prob.n_u(), -1.0, 1.0);
        worst = worst.max((alpha - expected).abs());
    }
    Ok(vec![CheckRow::at_most("fraction to boundary", "random box N=3".into(), worst, 1e-12)])
}

/// `min(1, 0.995 G/(JΔ))` written out for `lo ≤ u ≤ hi` and `S − αΔ`.
pub fn box_step_bound(traj: &Trajectory<f64>, delta: &[f64], n_x: usize, n_u: usize, lo: f64, hi: f64) -> f64 {
    let len = 2 * n_x + n_u;
    let mut alpha = 1.0f64;
    for i in 0..traj.n_stages() {
        for k in 0..n_u {
            let (u, d) = (traj.u(i)[k], delta[i * len + n_x + k]);
            // G = u − lo shrinks when d > 0, G = hi − u shrinks when d < 0
            if d > 0.0 {
                alpha = alpha.min(0.995 * (u - lo) / d);
            } else if d < 0.0 {
                alpha = alpha.min(0.995 * (hi - u) / -d);
            }
        }
    }
    alpha
}

/// SGS against Newton on the small plate at a tight tolerance.
pub fn oracle_equivalence_check() -> Result<Vec<CheckRow>> {
    let plate = small_plate(5, vec![1, 3], 5, 25.0, 0.5)?;
    let opts = SolveOptions::new(1e-8, 2000);
    let mut sgs = plate.initial_trajectory();
    let rep = upper::solve(&plate.prob, UpperMethod::new(UpperKind::Sgs), StageSolveConfig::default(), &mut sgs, &opts)?;
    let mut nw = plate.initial_trajectory();
    let rep_n = crate::newton::solve(&plate.prob, &mut nw, &opts)?;
    let gap = relative_gap(nw.as_slice(), sgs.as_slice());
    let mut row = CheckRow::at_most("sgs = newton", "plate 5x5 N=5 T=25".into(), gap, 1e-6);
    row.passed &= rep.converged() && rep_n.converged();
    Ok(vec![row])
}

/// `‖a − b‖∞ / (1 + ‖a‖∞)`.
pub fn relative_gap(a: &[f64], b: &[f64]) -> f64 {
    let d = a.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    d / (1.0 + crate::norm_inf(a))
}

/// Linearity of the iteration operators on the small plate.
pub fn linearity_check(seed: u64) -> Result<Vec<CheckRow>> {
    let plate = small_plate(5, vec![1, 3], 4, 20.0, 0.5)?;
    let traj = plate.initial_trajectory();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for kind in UpperKind::ALL {
        let mut op = IterationOperator::new(&plate.prob, &traj, UpperMethod::new(kind), analysis_config())?;
        let n = op.dim();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (a, b) = (0.7, -1.3);
        let comb: Vec<f64> = v.iter().zip(&w).map(|(p, q)| a * p + b * q).collect();
        let (mut mv, mut mw, mut mc) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        op.apply(&v, &mut mv)?;
        op.apply(&w, &mut mw)?;
        op.apply(&comb, &mut mc)?;
        let gap = (0..n).map(|j| (mc[j] - a * mv[j] - b * mw[j]).abs()).fold(0.0, f64::max);
        let scale = crate::norm_inf(&mc).max(1.0);
        rows.push(CheckRow::at_most("operator linearity", format!("plate 5x5 {kind}"), gap / scale, 1e-10));
    }
    Ok(rows)
}

/// The whole suite.
pub fn run_suite(seed: u64) -> Result<Vec<CheckRow>> {
    let mut rows = derivative_checks(seed, 50)?;
    rows.extend(nilpotency_checks(seed, 20)?);
    rows.extend(squared_factor_checks(seed)?);
    rows.extend(estimator_check(seed)?);
    rows.extend(identity_checks(seed)?);
    rows.extend(fraction_to_boundary_check(seed)?);
    rows.extend(oracle_equivalence_check()?);
    rows.extend(linearity_check(seed)?);
    Ok(rows)
}
