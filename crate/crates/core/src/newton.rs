//! Newton baseline: the exact KKT direction by a block Riccati-type
//! recursion with dense stage factorizations.
//!
//! Going backward, `D̂ᵢ = Dᵢ − M_U D̂ᵢ₊₁⁻¹ M_L` and `r̂ᵢ = 𝒦ᵢ − M_U D̂ᵢ₊₁⁻¹ r̂ᵢ₊₁`.
//! Only the costate rows of `D̂ᵢ₊₁⁻¹ [M_L | r̂ᵢ₊₁]` are needed. The forward
//! pass is then `Δsᵢ = D̂ᵢ⁻¹ (r̂ᵢ − M_L Δsᵢ₋₁)`.

use crate::error::Result;
use crate::linalg::{DenseLu, DenseMatrix};
use crate::lower::StageSolveConfig;
use crate::ocp::{InequalityConstraint, OcpProblem, Part, StageCost, Trajectory};
use crate::upper::{self, DirectionSolver, SolveOptions, SolveReport, StageSet};
use crate::Real;

#[derive(Debug, Clone)]
pub struct NewtonSolver<T> {
    lus: Vec<DenseLu<T>>,
    dhat: DenseMatrix<T>,
    rhat: Vec<T>,
    z: Vec<T>,
}

impl<T: Real> Default for NewtonSolver<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> NewtonSolver<T> {
    pub fn new() -> Self {
        Self { lus: Vec::new(), dhat: DenseMatrix::zeros(0, 0), rhat: Vec::new(), z: Vec::new() }
    }

    /// Density of the factors of `D̂ᵢ` from the last direction.
    pub fn factor_density(&self, stage: usize) -> Option<f64> {
        self.lus.get(stage).map(|lu| lu.factor_density())
    }
}

impl<T: Real> DirectionSolver<T> for NewtonSolver<T> {
    fn compute(&mut self, stages: &mut StageSet<T>, delta: &mut [T]) -> Result<()> {
        let n = stages.n_stages();
        let len = stages.stage_len();
        let Some(first) = stages.stages.first() else { return Ok(()) };
        let n_x = first.block.n_x();
        let lam0 = len - n_x;
        let m = n_x + 1;
        if self.lus.len() != n || self.dhat.rows() != len {
            self.lus = (0..n).map(|_| DenseLu::with_size(len)).collect();
            self.dhat = DenseMatrix::zeros(len, len);
        }
        self.rhat.clear();
        self.rhat.extend_from_slice(&stages.resid);
        self.z.resize(len * m, T::zero());

        for i in (0..n).rev() {
            stages.stages[i].block.fill_dense(Part::Full, &mut self.dhat);
            if i + 1 < n {
                let z = &mut self.z;
                z.iter_mut().for_each(|v| *v = T::zero());
                for a in 0..n_x {
                    z[a * m + a] = T::one();
                }
                for r in 0..len {
                    z[r * m + n_x] = self.rhat[(i + 1) * len + r];
                }
                self.lus[i + 1].solve_many_tail(z, m, lam0);
                for a in 0..n_x {
                    let row = &z[(lam0 + a) * m..(lam0 + a + 1) * m];
                    for b in 0..n_x {
                        self.dhat[(lam0 + a, b)] -= row[b];
                    }
                    self.rhat[i * len + lam0 + a] -= row[n_x];
                }
            }
            self.lus[i].refactor(&self.dhat).map_err(|e| e.at_stage(i))?;
        }

        for i in 0..n {
            let (done, rest) = delta.split_at_mut(i * len);
            let d = &mut rest[..len];
            d.copy_from_slice(&self.rhat[i * len..(i + 1) * len]);
            if i > 0 {
                let prev = &done[(i - 1) * len..(i - 1) * len + n_x];
                for (a, b) in d.iter_mut().zip(prev) {
                    *a -= *b;
                }
            }
            self.lus[i].solve_in_place(d);
        }
        Ok(())
    }
}

/// Newton's method with the fraction-to-boundary step from `traj`.
pub fn solve<T: Real, C: StageCost<T>, G: InequalityConstraint<T>>(
    prob: &OcpProblem<T, C, G>,
    traj: &mut Trajectory<T>,
    opts: &SolveOptions,
) -> Result<SolveReport> {
    let mut stages = StageSet::new(prob, StageSolveConfig::default());
    let mut newton = NewtonSolver::new();
    upper::run(prob, &mut newton, &mut stages, traj, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::{lq_problem, random_problem};
    use crate::upper::Termination;

    #[test]
    fn direction_solves_the_full_kkt_system() {
        let (prob, traj) = random_problem::<f64>(11, 5, 2, 6, 0.5).unwrap();
        let mut set = StageSet::new(&prob, StageSolveConfig::default());
        set.evaluate(&prob, &traj).unwrap();
        let mut d = vec![0.0; set.dim()];
        NewtonSolver::new().compute(&mut set, &mut d).unwrap();
        let mut kd = vec![0.0; d.len()];
        set.apply_kkt(&d, &mut kd);
        let err = kd.iter().zip(&set.resid).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-11, "{err}");
    }

    #[test]
    fn linear_problem_takes_one_step() {
        let prob = lq_problem::<f64>(1, 4, 2, 5, 0.0).unwrap();
        let mut traj = Trajectory::zeros(4, 2, 5);
        let rep = solve(&prob, &mut traj, &SolveOptions::new(1e-10, 5)).unwrap();
        assert_eq!((rep.iterations, rep.termination), (1, Termination::Converged));
    }

    #[test]
    fn quadratic_convergence_near_the_solution() {
        let (prob, mut traj) = random_problem::<f64>(12, 4, 2, 4, 0.0).unwrap();
        let rep = solve(&prob, &mut traj, &SolveOptions::new(1e-13, 30)).unwrap();
        assert!(rep.converged());
        let h = &rep.residual_history;
        let k = h.len() - 2;
        // last contraction much stronger than linear
        assert!(h[k + 1] < 1e-2 * h[k] || h[k + 1] < 1e-13, "{h:?}");
    }
}
