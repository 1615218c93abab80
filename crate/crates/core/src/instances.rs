//! Small problems shared by tests, checks and the analysis commands.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bench::HeatBench;
use crate::config::{GridConfig, NmpcConfig, PlantConfig, SimConfig, ActuatorConfig};
use crate::dynamics::{DenseDynamics, Dynamics};
use crate::error::Result;
use crate::linalg::DenseMatrix;
use crate::ocp::{InputBox, NoConstraint, OcpProblem, OcpSettings, QuadraticTracking, RegMode, Trajectory};
use crate::Real;

fn uniform<T: Real>(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> T {
    T::lit(rng.gen_range(lo..hi))
}

fn random_matrix<T: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DenseMatrix<T> {
    let data = (0..rows * cols).map(|_| uniform(rng, -scale, scale)).collect();
    DenseMatrix::from_row_major(rows, cols, data).expect("sizes match")
}

/// Random mildly nonlinear problem with an input box `[-1, 1]` and a random
/// interior trajectory.
///
/// Dynamics `f = A x + B u + c + κ ⊙ x³` with `A = −I + 0.5·rand`, step
/// `h = 0.1`, barrier `τ = 0.1`.
pub fn random_problem<T: Real>(
    seed: u64,
    n_x: usize,
    n_u: usize,
    n_stages: usize,
    gamma: f64,
) -> Result<(OcpProblem<T>, Trajectory<T>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = random_matrix::<T>(&mut rng, n_x, n_x, 0.5);
    for i in 0..n_x {
        a[(i, i)] -= T::one();
    }
    let b = random_matrix(&mut rng, n_x, n_u, 1.0);
    let c = (0..n_x).map(|_| uniform(&mut rng, -0.2, 0.2)).collect();
    let cubic = (0..n_x).map(|_| uniform(&mut rng, -0.1, 0.1)).collect();
    let dynamics: Arc<dyn Dynamics<T>> = Arc::new(DenseDynamics::new(a, b, c, cubic));

    let q = (0..n_x).map(|_| uniform(&mut rng, 0.5, 1.5)).collect();
    let r = (0..n_u).map(|_| uniform(&mut rng, 0.1, 1.0)).collect();
    let mut cost = QuadraticTracking::new(q, r, n_stages);
    for i in 0..n_stages {
        let xr: Vec<T> = (0..n_x).map(|_| uniform(&mut rng, -1.0, 1.0)).collect();
        let ur: Vec<T> = (0..n_u).map(|_| uniform(&mut rng, -0.5, 0.5)).collect();
        cost.set_reference(i, &xr, &ur);
    }
    let bounds = InputBox::uniform(n_x, n_u, -T::one(), T::one())?;
    let settings = OcpSettings {
        n_stages,
        horizon: T::lit(0.1 * n_stages as f64),
        tau: T::lit(0.1),
        gamma: T::lit(gamma),
        reg_mode: RegMode::CurrentIterate,
    };
    let x0: Vec<T> = (0..n_x).map(|_| uniform(&mut rng, -1.0, 1.0)).collect();
    let prob = OcpProblem::new(dynamics, cost, bounds, settings, x0)?;

    let mut traj = Trajectory::zeros(n_x, n_u, n_stages);
    for v in traj.as_mut_slice() {
        *v = uniform(&mut rng, -1.0, 1.0);
    }
    for i in 0..n_stages {
        for u in traj.u_mut(i) {
            *u = uniform(&mut rng, -0.9, 0.9);
        }
    }
    Ok((prob, traj))
}

/// Unconstrained linear-quadratic problem (`f = A x + B u`) with random
/// references; the KKT system is linear.
pub fn lq_problem<T: Real>(
    seed: u64,
    n_x: usize,
    n_u: usize,
    n_stages: usize,
    gamma: f64,
) -> Result<OcpProblem<T, QuadraticTracking<T>, NoConstraint>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = random_matrix::<T>(&mut rng, n_x, n_x, 0.5);
    for i in 0..n_x {
        a[(i, i)] -= T::one();
    }
    let b = random_matrix(&mut rng, n_x, n_u, 1.0);
    let dynamics: Arc<dyn Dynamics<T>> = Arc::new(DenseDynamics::linear(a, b));
    let mut cost = QuadraticTracking::new(vec![T::one(); n_x], vec![T::lit(0.5); n_u], n_stages);
    for i in 0..n_stages {
        let xr: Vec<T> = (0..n_x).map(|_| uniform(&mut rng, -1.0, 1.0)).collect();
        cost.set_reference(i, &xr, &vec![T::zero(); n_u]);
    }
    let settings = OcpSettings {
        n_stages,
        horizon: T::lit(0.2 * n_stages as f64),
        tau: T::one(),
        gamma: T::lit(gamma),
        reg_mode: RegMode::CurrentIterate,
    };
    let x0 = (0..n_x).map(|_| uniform(&mut rng, -1.0, 1.0)).collect();
    OcpProblem::new(dynamics, cost, NoConstraint, settings, x0)
}

/// A small plate: `points x points` grid, actuators on the lattice
/// `axis_indices²`, otherwise benchmark settings with horizon `horizon` over
/// `n_stages` stages.
pub fn small_plate(points: usize, axis_indices: Vec<usize>, n_stages: usize, horizon: f64, gamma: f64) -> Result<HeatBench> {
    let plant = PlantConfig {
        grid: GridConfig { points_per_axis: points, side: 1.0 },
        actuators: ActuatorConfig { axis_indices },
        ..PlantConfig::default()
    };
    let nmpc = NmpcConfig { horizon, n_stages, gamma, ..NmpcConfig::default() };
    HeatBench::build(plant, nmpc, SimConfig::default())
}
