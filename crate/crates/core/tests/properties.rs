use proptest::prelude::*;

use pdenmpc::bench::HeatBench;
use pdenmpc::config::{NmpcConfig, PlantConfig, SimConfig};
use pdenmpc::instances::{lq_problem, random_problem, small_plate};
use pdenmpc::lower::{StageSolveConfig, StageSolver};
use pdenmpc::ocp::{InequalityConstraint, Part, RegMode, StageBlock, Trajectory};
use pdenmpc::pde::adjoint_gaps;
use pdenmpc::spectral::{oracle_factor, IterationOperator};
use pdenmpc::upper::{self, fraction_to_boundary, SolveOptions, StageSet, UpperKind, UpperMethod};
use pdenmpc::{discretize, Coefficient, DiscretizedSystem, Dynamics, Newton, PdeModel, SpatialGrid};

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn benchmark() -> HeatBench {
    HeatBench::build(PlantConfig::default(), NmpcConfig::default(), SimConfig::default()).unwrap()
}

fn diffusion(points: &[usize], sides: &[f64], actuators: Vec<usize>) -> DiscretizedSystem<f64> {
    let model = PdeModel::first_order(sides.to_vec(), Coefficient::Constant(1.0), Coefficient::Constant(1.0), Coefficient::zero(), Coefficient::zero());
    discretize(model, SpatialGrid::new(points, sides, actuators).unwrap()).unwrap()
}

fn grid_distance(grid: &SpatialGrid<f64>, a: usize, b: usize) -> usize {
    grid.coords(a).iter().zip(grid.coords(b)).map(|(x, y)| x.abs_diff(y)).sum()
}

fn all_methods() -> Vec<UpperMethod> {
    let mut m: Vec<UpperMethod> = UpperKind::ALL.iter().map(|k| UpperMethod::new(*k)).collect();
    m[3] = UpperMethod::sor(1.3).unwrap();
    m
}

fn plate_state(n: usize, seed: u64) -> Vec<f64> {
    (0..n).map(|j| 300.0 + ((j as u64 * 2654435761 + seed * 97) % 400) as f64).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn plate_jacobians_are_adjoint(seed in 0u64..1000) {
        let bench = benchmark();
        let sys = bench.system();
        let mut lin = sys.new_linearization();
        sys.linearize(&plate_state(bench.n_u(), seed + 1), &plate_state(bench.n_x(), seed), &mut lin);
        let (gx, gu) = adjoint_gaps(&lin, seed);
        prop_assert!(gx <= 1e-12 && gu <= 1e-12, "{gx} {gu}");
    }

    #[test]
    fn stencil_is_local(px in 3usize..7, py in 3usize..7, pick in 0usize..1000, seed in 0u64..1000) {
        let sys = diffusion(&[px, py], &[1.0, 1.5], vec![px + 1]);
        let grid = sys.grid();
        let x = plate_state(sys.n_x(), seed);
        let u = [450.0];
        let j = pick % sys.n_x();
        let (mut f0, mut f1) = (vec![0.0; sys.n_x()], vec![0.0; sys.n_x()]);
        sys.eval(&u, &x, &mut f0);
        let mut xp = x.clone();
        xp[j] += 1.0;
        sys.eval(&u, &xp, &mut f1);
        for k in 0..sys.n_x() {
            if f0[k] != f1[k] {
                prop_assert!(grid_distance(grid, grid.grid_of_state(j), grid.grid_of_state(k)) <= 1);
            }
        }
        prop_assert!(f0[j] != f1[j]);
    }

    /// Actuator nodes take the input value: `f` equals the plain Neumann
    /// stencil applied to the assembled field.
    #[test]
    fn actuators_substitute_the_input(px in 3usize..7, py in 3usize..7, pick in 0usize..1000, seed in 0u64..1000) {
        let act = pick % (px * py);
        let sys = diffusion(&[px, py], &[1.0, 0.8], vec![act]);
        let grid = sys.grid();
        let x = plate_state(sys.n_x(), seed);
        let u = [100.0 + (seed % 50) as f64];
        let w = grid.assemble_field(&x, &u);
        let mut f = vec![0.0; sys.n_x()];
        sys.eval(&u, &x, &mut f);
        let (dx, dy) = (grid.steps()[0], grid.steps()[1]);
        let at = |i: usize, j: usize| w[i + px * j];
        for (s, fs) in f.iter().enumerate() {
            let c = grid.coords(grid.grid_of_state(s));
            let (i, j) = (c[0], c[1]);
            let second = |lo: f64, mid: f64, hi: f64, h: f64| (lo - 2.0 * mid + hi) / (h * h);
            let xl = if i == 0 { at(1, j) } else { at(i - 1, j) };
            let xr = if i == px - 1 { at(px - 2, j) } else { at(i + 1, j) };
            let yl = if j == 0 { at(i, 1) } else { at(i, j - 1) };
            let yr = if j == py - 1 { at(i, py - 2) } else { at(i, j + 1) };
            let want = second(xl, at(i, j), xr, dx) + second(yl, at(i, j), yr, dy);
            prop_assert!((fs - want).abs() <= 1e-9 * want.abs().max(1.0), "{fs} vs {want}");
        }
        let mut fu = vec![0.0; sys.n_x()];
        sys.eval(&[u[0] + 1.0], &x, &mut fu);
        for k in 0..sys.n_x() {
            if fu[k] != f[k] {
                prop_assert_eq!(grid_distance(grid, act, grid.grid_of_state(k)), 1);
            }
        }
    }

    /// Pure diffusion with zero flux conserves heat under trapezoid weights.
    #[test]
    fn diffusion_conserves_heat(px in 3usize..8, py in 3usize..8, lx in 0.5f64..3.0, seed in 0u64..1000) {
        let sys = diffusion(&[px, py], &[lx, 1.0], Vec::new());
        let grid = sys.grid();
        let x = plate_state(sys.n_x(), seed);
        let mut f = vec![0.0; sys.n_x()];
        sys.eval(&[], &x, &mut f);
        let edge = |c: usize, n: usize| if c == 0 || c == n - 1 { 0.5 } else { 1.0 };
        let total: f64 = (0..sys.n_x()).map(|s| {
            let c = grid.coords(grid.grid_of_state(s));
            edge(c[0], px) * edge(c[1], py) * f[s]
        }).sum();
        prop_assert!(total.abs() <= 1e-9 * inf_norm(&f).max(1.0), "{total}");
    }

    #[test]
    fn hessian_blocks_are_symmetric(seed in 0u64..1000, n_x in 1usize..5, n_u in 1usize..4) {
        let (prob, traj) = random_problem::<f64>(seed, n_x, n_u, 3, 0.5).unwrap();
        let d = prob.stage_jacobian(1, traj.x(0), traj.stage(1), Some(traj.lam(2))).unwrap().to_dense(Part::Full);
        let n = n_x + n_u;
        // (x, u) columns; λ rows hold ∇ₓ, u rows hold ∇ᵤ
        let m = |a: usize, b: usize| {
            let row = if a < n_x { n_x + n_u + a } else { a };
            d[(row, b)]
        };
        for a in 0..n {
            for b in 0..n {
                prop_assert!((m(a, b) - m(b, a)).abs() <= 1e-12 * (1.0 + m(a, b).abs()));
            }
        }
    }

    /// `𝒦'(S) v` from central differences of the residual matches
    /// `(D + M_L + M_U) v`, and the couplings only reach neighbouring stages.
    #[test]
    fn couplings_match_finite_differences(seed in 0u64..1000) {
        let (mut prob, traj) = random_problem::<f64>(seed, 3, 2, 4, 0.5).unwrap();
        prob.set_reg_mode(RegMode::Fixed);
        let mut stages = StageSet::new(&prob, StageSolveConfig::default());
        stages.evaluate(&prob, &traj).unwrap();
        let n = stages.dim();
        let v: Vec<f64> = (0..n).map(|k| ((k as u64 * 7919 + seed) % 200) as f64 / 100.0 - 1.0).collect();
        let mut kv = vec![0.0; n];
        stages.apply_kkt(&v, &mut kv);
        let eps = 1e-6;
        let shifted = |sign: f64| {
            let mut t = traj.clone();
            t.step(-sign * eps, &v);
            prob.kkt_residual(&t).unwrap()
        };
        let (rp, rm) = (shifted(1.0), shifted(-1.0));
        let fd: Vec<f64> = rp.iter().zip(&rm).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
        prop_assert!(max_abs_diff(&fd, &kv) <= 1e-6 * (1.0 + inf_norm(&kv)));

        let len = prob.stage_len();
        let (mut lv, mut uv) = (vec![0.0; n], vec![0.0; n]);
        stages.apply_l(&v, &mut lv);
        stages.apply_u(&v, &mut uv);
        prop_assert!(lv[..len].iter().all(|x| *x == 0.0));
        prop_assert!(uv[n - len..].iter().all(|x| *x == 0.0));
    }

    #[test]
    fn barrier_is_linear_in_tau(seed in 0u64..1000, tau in 0.01f64..10.0) {
        let (mut prob, traj) = random_problem::<f64>(seed, 3, 2, 2, 0.5).unwrap();
        let mut h = [0.0; 3];
        for (k, hk) in h.iter_mut().enumerate() {
            prob.set_tau(tau * (k + 1) as f64);
            *hk = prob.hamiltonian(0, traj.x(0), traj.u(0), traj.lam(0)).unwrap();
        }
        prop_assert!((h[2] - 2.0 * h[1] + h[0]).abs() <= 1e-10 * (1.0 + h[2].abs()));
    }

    #[test]
    fn steps_stay_strictly_feasible(seed in 0u64..1000, scale in 0.1f64..100.0) {
        let (prob, mut traj) = random_problem::<f64>(seed, 2, 3, 3, 0.5).unwrap();
        let delta: Vec<f64> = (0..traj.as_slice().len())
            .map(|k| scale * (((k as u64 * 104729 + seed) % 200) as f64 / 100.0 - 1.0))
            .collect();
        let alpha = fraction_to_boundary(&prob, &traj, &delta).unwrap();
        prop_assert!(alpha > 0.0 && alpha <= 1.0);
        let m = prob.constraint.len();
        let before: Vec<Vec<f64>> = (0..3).map(|i| {
            let mut g = vec![0.0; m];
            prob.constraint.eval(traj.u(i), traj.x(i), &mut g);
            g
        }).collect();
        traj.step(alpha, &delta);
        for (i, old) in before.iter().enumerate() {
            let mut g = vec![0.0; m];
            prob.constraint.eval(traj.u(i), traj.x(i), &mut g);
            for (a, b) in g.iter().zip(old) {
                prop_assert!(*a > 0.0 && *a >= 0.005 * b - 1e-12 * b, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn zero_residual_is_a_fixed_point(seed in 0u64..1000, n_stages in 1usize..6) {
        let mut prob = lq_problem::<f64>(seed, 3, 2, n_stages, 0.5).unwrap();
        for i in 0..n_stages {
            prob.cost.set_reference(i, &[0.0; 3], &[0.0; 2]);
        }
        prob.set_x0(&[0.0; 3]);
        let traj = Trajectory::zeros(3, 2, n_stages);
        for method in all_methods() {
            let mut stages = StageSet::new(&prob, StageSolveConfig::default());
            stages.evaluate(&prob, &traj).unwrap();
            stages.prepare().unwrap();
            prop_assert_eq!(inf_norm(&stages.resid), 0.0);
            let mut delta = vec![1.0; stages.dim()];
            stages.direction(method, &mut delta).unwrap();
            prop_assert_eq!(inf_norm(&delta), 0.0);
        }
    }

    #[test]
    fn unit_relaxation_is_forward_gauss_seidel(seed in 0u64..1000) {
        let (prob, traj) = random_problem::<f64>(seed, 3, 2, 5, 0.5).unwrap();
        let mut stages = StageSet::new(&prob, StageSolveConfig::default());
        stages.evaluate(&prob, &traj).unwrap();
        stages.prepare().unwrap();
        let (mut a, mut b) = (vec![0.0; stages.dim()], vec![0.0; stages.dim()]);
        stages.direction(UpperMethod::sor(1.0).unwrap(), &mut a).unwrap();
        stages.direction(UpperMethod::new(UpperKind::Fgs), &mut b).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn iteration_operators_are_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let (prob, traj) = random_problem::<f64>(seed, 3, 2, 4, 0.5).unwrap();
        for method in all_methods() {
            let mut op = IterationOperator::new(&prob, &traj, method, StageSolveConfig::default()).unwrap();
            let n = op.dim();
            let v: Vec<f64> = (0..n).map(|k| ((k * 37 % 19) as f64 - 9.0) / 9.0).collect();
            let w: Vec<f64> = (0..n).map(|k| ((k * 53 % 23) as f64 - 11.0) / 11.0).collect();
            let combo: Vec<f64> = v.iter().zip(&w).map(|(x, y)| a * x + b * y).collect();
            let (mut ov, mut ow, mut oc) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
            op.apply(&v, &mut ov).unwrap();
            op.apply(&w, &mut ow).unwrap();
            op.apply(&combo, &mut oc).unwrap();
            let want: Vec<f64> = ov.iter().zip(&ow).map(|(x, y)| a * x + b * y).collect();
            prop_assert!(max_abs_diff(&oc, &want) <= 1e-10 * (1.0 + inf_norm(&want)));
        }
    }
}

fn block_residual(block: &StageBlock<f64>, rhs: &[f64], sol: &[f64]) -> f64 {
    let mut r = vec![0.0; rhs.len()];
    block.apply(Part::Full, sol, &mut r);
    max_abs_diff(&r, rhs)
}

fn plate_stages(points: usize, seed: u64) -> (HeatBench, StageSet<f64>) {
    let bench = small_plate(points, vec![1, points - 2], 3, 15.0, 0.5).unwrap();
    let mut traj = bench.initial_trajectory();
    for i in 0..3 {
        traj.x_mut(i).copy_from_slice(&plate_state(bench.n_x(), seed + i as u64));
    }
    let mut stages = StageSet::new(&bench.prob, StageSolveConfig::default());
    stages.evaluate(&bench.prob, &traj).unwrap();
    (bench, stages)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn exact_stage_solves_have_no_residual(seed in 0u64..1000, points in 4usize..8) {
        let (_, stages) = plate_stages(points, seed);
        let block = &stages.stages[1].block;
        let rhs: Vec<f64> = (0..block.len()).map(|k| ((k as u64 * 31 + seed) % 41) as f64 - 20.0).collect();
        let mut s = StageSolver::for_block(block, StageSolveConfig::direct());
        s.prepare(block).unwrap();
        let mut out = vec![0.0; rhs.len()];
        s.solve(block, &rhs, &mut out).unwrap();
        prop_assert!(block_residual(block, &rhs, &out) <= 1e-9 * inf_norm(&rhs));
    }

    #[test]
    fn state_jacobian_is_diagonally_dominant(seed in 0u64..1000) {
        let bench = benchmark();
        let sys = bench.system();
        let mut lin = sys.new_linearization();
        sys.linearize(&plate_state(bench.n_u(), seed + 3), &plate_state(bench.n_x(), seed), &mut lin);
        let (fx, _) = lin.dense_jacobians();
        for r in 0..bench.n_x() {
            let off: f64 = (0..bench.n_x()).filter(|c| *c != r).map(|c| fx[(r, c)].abs()).sum();
            prop_assert!(fx[(r, r)].abs() >= off, "row {r}");
        }
    }

    /// In Fixed mode the LQ iteration is stationary, so its error shrinks at
    /// the spectral radius of the iteration matrix. The error is renormalized
    /// after every step so the average runs over many iterations.
    #[test]
    fn error_decays_at_the_spectral_radius(seed in 0u64..1000, kind in 0usize..3) {
        let mut prob = lq_problem::<f64>(seed, 3, 2, 4, 0.5).unwrap();
        prob.set_reg_mode(RegMode::Fixed);
        let method = UpperMethod::new([UpperKind::Jacobi, UpperKind::Fgs, UpperKind::Bgs][kind]);
        let zero = Trajectory::zeros(3, 2, 4);
        let mut op = IterationOperator::new(&prob, &zero, method, StageSolveConfig::exact()).unwrap();
        let rho = oracle_factor(&mut op).unwrap().unwrap();
        prop_assume!((0.2..0.95).contains(&rho));

        let mut exact = zero.clone();
        let mut stages = StageSet::new(&prob, StageSolveConfig::exact());
        upper::run(&prob, &mut Newton::new(), &mut stages, &mut exact, &SolveOptions::new(1e-12, 5)).unwrap();
        let mut traj = zero;
        let mut delta = vec![0.0; stages.dim()];
        let mut log_growth = 0.0;
        for k in 0..200 {
            stages.evaluate(&prob, &traj).unwrap();
            stages.prepare().unwrap();
            stages.direction(method, &mut delta).unwrap();
            traj.step(1.0, &delta);
            let err: Vec<f64> = traj.as_slice().iter().zip(exact.as_slice()).map(|(a, b)| a - b).collect();
            let norm = err.iter().map(|v| v * v).sum::<f64>().sqrt();
            if k >= 100 {
                log_growth += norm.ln();
            }
            for (s, (e, x)) in traj.as_mut_slice().iter_mut().zip(err.iter().zip(exact.as_slice())) {
                *s = x + e / norm;
            }
        }
        let rate = (log_growth / 100.0).exp();
        prop_assert!((rate - rho).abs() <= 0.1 * rho, "rate {rate} vs {rho}");
    }
}

fn solve_with(block: &StageBlock<f64>, rhs: &[f64], cfg: StageSolveConfig) -> Vec<f64> {
    let mut s = StageSolver::for_block(block, cfg);
    s.prepare(block).unwrap();
    let mut out = vec![0.0; rhs.len()];
    s.solve(block, rhs, &mut out).unwrap();
    out
}

/// Each Schur sweep cuts the stage residual until it meets the floor left by
/// the inner solves; past that it stays flat.
#[test]
fn iterative_residual_falls_with_schur_sweeps() {
    let bench = benchmark();
    let mut traj = bench.initial_trajectory();
    for i in 0..bench.prob.n_stages() {
        traj.x_mut(i).copy_from_slice(&plate_state(bench.n_x(), i as u64));
    }
    let mut stages = StageSet::new(&bench.prob, StageSolveConfig::default());
    stages.evaluate(&bench.prob, &traj).unwrap();
    for i in [0, 10, 19] {
        let block = &stages.stages[i].block;
        let rhs: Vec<f64> = (0..block.len()).map(|k| (k * 29 % 37) as f64 - 18.0).collect();
        for inner in [2, 8] {
            let res: Vec<f64> = (0..=6)
                .map(|schur| {
                    let cfg = StageSolveConfig { schur_iters: schur, inner_jacobi_iters: inner, ..StageSolveConfig::default() };
                    block_residual(block, &rhs, &solve_with(block, &rhs, cfg))
                })
                .collect();
            let floor = res[6];
            for k in 1..res.len() {
                assert!(res[k] <= res[k - 1] * (1.0 + 1e-4), "stage {i}, inner {inner}: {res:?}");
                if res[k - 1] > 2.0 * floor {
                    assert!(res[k] < 0.5 * res[k - 1], "stage {i}, inner {inner}: {res:?}");
                }
            }
        }
    }
}
