//! Convergence factors of the splitting iterations.
//!
//! Near a solution the error of each upper-layer method evolves by a fixed
//! iteration matrix. These are applied matrix-free through the stage
//! solvers; their spectral radii are estimated by power iteration followed
//! by a short Arnoldi process, or computed densely for small instances.

use nalgebra::{DMatrix, Schur};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::lower::{LowerMode, StageSolveConfig};
use crate::ocp::{InequalityConstraint, OcpProblem, Part, StageCost, Trajectory};
use crate::upper::{StageSet, UpperKind, UpperMethod};
use crate::Real;

/// Largest size for which dense eigenvalues are computed.
pub const DENSE_ORACLE_LIMIT: usize = 400;

/// The error-propagation matrix of one splitting at a frozen trajectory:
///
/// | method | matrix |
/// |--------|--------|
/// | Jacobi | `D⁻¹(L+U)` |
/// | FGS    | `(D+L)⁻¹U` |
/// | BGS    | `(D+U)⁻¹L` |
/// | SOR    | `(D+ωL)⁻¹(ωU+(ω−1)D)` |
/// | SGS    | `(D+L)⁻¹U(D+U)⁻¹L` |
///
/// With `part = Part::Bar` the diagonal blocks are replaced by `D̄ᵢ`.
#[derive(Debug)]
pub struct IterationOperator<T: Real> {
    method: UpperMethod,
    part: Part,
    stages: StageSet<T>,
    t1: Vec<T>,
    t2: Vec<T>,
}

impl<T: Real> IterationOperator<T> {
    /// Operator with exact stage solves of the full `Dᵢ` (structured direct
    /// solves, or dense LU when `cfg.mode` is exact).
    pub fn new<C: StageCost<T>, G: InequalityConstraint<T>>(
        prob: &OcpProblem<T, C, G>,
        traj: &Trajectory<T>,
        method: UpperMethod,
        cfg: StageSolveConfig,
    ) -> Result<Self> {
        method.validate()?;
        let mut stages = StageSet::new(prob, cfg);
        stages.evaluate(prob, traj)?;
        stages.prepare()?;
        Ok(Self::from_stages(method, Part::Full, stages))
    }

    /// Operator built on a chosen part of the diagonal blocks, factored
    /// densely.
    pub fn with_part<C: StageCost<T>, G: InequalityConstraint<T>>(
        prob: &OcpProblem<T, C, G>,
        traj: &Trajectory<T>,
        method: UpperMethod,
        part: Part,
    ) -> Result<Self> {
        method.validate()?;
        if part == Part::Tilde {
            return Err(Error::Config("the tilde part alone is not a splitting".into()));
        }
        let mut stages = StageSet::new(prob, StageSolveConfig::exact());
        stages.evaluate(prob, traj)?;
        for (i, st) in stages.stages.iter_mut().enumerate() {
            st.solver.prepare_dense(&st.block, part).map_err(|e| e.at_stage(i))?;
        }
        Ok(Self::from_stages(method, part, stages))
    }

    fn from_stages(method: UpperMethod, part: Part, stages: StageSet<T>) -> Self {
        let n = stages.dim();
        Self { method, part, stages, t1: vec![T::zero(); n], t2: vec![T::zero(); n] }
    }

    pub fn dim(&self) -> usize {
        self.stages.dim()
    }

    pub fn method(&self) -> UpperMethod {
        self.method
    }

    pub fn stages(&self) -> &StageSet<T> {
        &self.stages
    }

    /// `out = M v`.
    pub fn apply(&mut self, v: &[T], out: &mut [T]) -> Result<()> {
        let (t1, t2) = (&mut self.t1, &mut self.t2);
        let st = &mut self.stages;
        match self.method.kind {
            UpperKind::Jacobi => {
                st.apply_l(v, t1);
                st.apply_u(v, t2);
                t1.iter_mut().zip(t2.iter()).for_each(|(a, b)| *a += *b);
                st.jacobi(t1, out)
            }
            UpperKind::Fgs => {
                st.apply_u(v, t1);
                st.forward(t1, T::one(), out)
            }
            UpperKind::Bgs => {
                st.apply_l(v, t1);
                st.backward(t1, out)
            }
            UpperKind::Sor => {
                let omega = T::lit(self.method.omega);
                st.apply_u(v, t1);
                st.apply_d(self.part, v, t2);
                t1.iter_mut().zip(t2.iter()).for_each(|(a, b)| *a = omega * *a + (omega - T::one()) * *b);
                st.forward(t1, omega, out)
            }
            UpperKind::Sgs => {
                st.apply_l(v, t1);
                st.backward(t1, t2)?;
                st.apply_u(t2, t1);
                st.forward(t1, T::one(), out)
            }
        }
    }

    /// Dense materialization by columns.
    pub fn to_dense(&mut self) -> Result<DenseMatrix<T>> {
        let n = self.dim();
        let mut m = DenseMatrix::zeros(n, n);
        let mut e = vec![T::zero(); n];
        let mut col = vec![T::zero(); n];
        for j in 0..n {
            e[j] = T::one();
            self.apply(&e, &mut col)?;
            e[j] = T::zero();
            for i in 0..n {
                m[(i, j)] = col[i];
            }
        }
        Ok(m)
    }
}

/// Settings of the matrix-free estimator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerOptions {
    /// Power steps per seed before the Arnoldi refinement.
    pub iters: usize,
    pub seeds: usize,
    pub seed: u64,
    /// Arnoldi subspace dimension (0 disables the refinement).
    pub krylov: usize,
}

impl Default for PowerOptions {
    fn default() -> Self {
        Self { iters: 30, seeds: 5, seed: 0, krylov: 20 }
    }
}

/// Spectral radius estimate of `op`.
///
/// Each seed runs `iters` normalized power steps to damp the non-dominant
/// components, then `krylov` Arnoldi steps from the resulting vector. The
/// estimate is the largest Ritz value modulus (or the last growth ratio when
/// the refinement is disabled); the result is the maximum over seeds.
pub fn convergence_factor<T: Real>(op: &mut IterationOperator<T>, opts: &PowerOptions) -> Result<f64> {
    let n = op.dim();
    if n == 0 {
        return Ok(0.0);
    }
    let mut best = 0.0f64;
    let mut w = vec![T::zero(); n];
    for s in 0..opts.seeds.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(s as u64));
        let mut v: Vec<T> = (0..n).map(|_| T::lit(rng.gen_range(-1.0..1.0))).collect();
        if normalize(&mut v) == 0.0 {
            continue;
        }
        let mut ratio = 0.0;
        let mut vanished = false;
        for _ in 0..opts.iters {
            op.apply(&v, &mut w)?;
            let nrm = crate::norm2(&w).as_f64();
            if !nrm.is_finite() {
                return Err(Error::NoConvergence("iteration operator produced a non-finite vector".into()));
            }
            ratio = nrm;
            if nrm == 0.0 {
                vanished = true;
                break;
            }
            let inv = T::lit(1.0 / nrm);
            v.iter_mut().zip(&w).for_each(|(a, b)| *a = *b * inv);
        }
        let est = if vanished {
            0.0
        } else if opts.krylov > 0 {
            arnoldi_radius(op, &v, opts.krylov.min(n))?
        } else {
            ratio
        };
        best = best.max(est);
    }
    Ok(best)
}

fn normalize<T: Real>(v: &mut [T]) -> f64 {
    let nrm = crate::norm2(v).as_f64();
    if nrm > 0.0 {
        let inv = T::lit(1.0 / nrm);
        v.iter_mut().for_each(|a| *a *= inv);
    }
    nrm
}

/// Largest Ritz value modulus of an `m`-step Arnoldi process from `start`.
fn arnoldi_radius<T: Real>(op: &mut IterationOperator<T>, start: &[T], m: usize) -> Result<f64> {
    let n = start.len();
    let mut q: Vec<Vec<T>> = vec![start.to_vec()];
    let mut h = DMatrix::<f64>::zeros(m + 1, m);
    let mut w = vec![T::zero(); n];
    let mut k = m;
    let mut scale = 0.0f64;
    for j in 0..m {
        op.apply(&q[j], &mut w)?;
        scale = scale.max(crate::norm2(&w).as_f64());
        // two passes of classical Gram-Schmidt
        for _ in 0..2 {
            for (i, qi) in q.iter().enumerate() {
                let c = crate::dot(qi, &w);
                h[(i, j)] += c.as_f64();
                w.iter_mut().zip(qi).for_each(|(a, b)| *a -= c * *b);
            }
        }
        let nrm = crate::norm2(&w).as_f64();
        h[(j + 1, j)] = nrm;
        if nrm <= 1e-13 * scale.max(f64::MIN_POSITIVE) {
            k = j + 1;
            break;
        }
        if j + 1 < m {
            let inv = T::lit(1.0 / nrm);
            q.push(w.iter().map(|a| *a * inv).collect());
        }
    }
    let hk = h.view((0, 0), (k, k)).into_owned();
    max_eigenvalue_modulus(hk)
}

/// Largest eigenvalue modulus by a bounded Schur iteration.
fn max_eigenvalue_modulus(a: DMatrix<f64>) -> Result<f64> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NoConvergence("non-finite matrix passed to the eigenvalue solver".into()));
    }
    if a.amax() == 0.0 {
        return Ok(0.0);
    }
    let n = a.nrows().max(1);
    if let Some(schur) = Schur::try_new(a.clone(), f64::EPSILON, 1000 * n) {
        return Ok(schur.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max));
    }
    // the shifted QR sweeps can cycle on matrices with exact identity
    // couplings; an orthogonal similarity keeps the spectrum and breaks that
    let mut rng = ChaCha8Rng::seed_from_u64(0x5c4u64);
    for _ in 0..3 {
        let r = DMatrix::from_fn(a.nrows(), a.nrows(), |_, _| rng.gen_range(-1.0..1.0));
        let q = r.qr().q();
        let b = q.transpose() * &a * &q;
        if let Some(schur) = Schur::try_new(b, f64::EPSILON, 1000 * n) {
            return Ok(schur.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max));
        }
    }
    Err(Error::NoConvergence("Schur iteration did not converge".into()))
}

/// Spectral radius of a dense matrix from its eigenvalues.
pub fn dense_spectral_radius<T: Real>(m: &DenseMatrix<T>) -> Result<f64> {
    let n = m.rows();
    if n == 0 {
        return Ok(0.0);
    }
    max_eigenvalue_modulus(DMatrix::from_row_iterator(n, n, m.as_slice().iter().map(|v| v.as_f64())))
}

/// Dense eigenvalue oracle; `None` above [`DENSE_ORACLE_LIMIT`] unknowns.
pub fn oracle_factor<T: Real>(op: &mut IterationOperator<T>) -> Result<Option<f64>> {
    if op.dim() > DENSE_ORACLE_LIMIT {
        return Ok(None);
    }
    Ok(Some(dense_spectral_radius(&op.to_dense()?)?))
}

/// Largest norm of `(D̄⁻¹(L+U))^applications v` over `vectors` random unit
/// vectors. With `part = Part::Full` the same is measured for `D`.
pub fn nilpotency_amplification<T: Real, C: StageCost<T>, G: InequalityConstraint<T>>(
    prob: &OcpProblem<T, C, G>,
    traj: &Trajectory<T>,
    part: Part,
    applications: usize,
    vectors: usize,
    seed: u64,
) -> Result<f64> {
    let mut op = IterationOperator::with_part(prob, traj, UpperMethod::new(UpperKind::Jacobi), part)?;
    let n = op.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = vec![T::zero(); n];
    let mut worst = 0.0f64;
    for _ in 0..vectors {
        let mut v: Vec<T> = (0..n).map(|_| T::lit(rng.gen_range(-1.0..1.0))).collect();
        normalize(&mut v);
        for _ in 0..applications {
            op.apply(&v, &mut w)?;
            std::mem::swap(&mut v, &mut w);
        }
        worst = worst.max(crate::norm2(&v).as_f64());
    }
    Ok(worst)
}

/// `N`-fold amplification of the `D̄` splitting (predicted to vanish).
pub fn verify_lemma_nilpotent<T: Real, C: StageCost<T>, G: InequalityConstraint<T>>(
    prob: &OcpProblem<T, C, G>,
    traj: &Trajectory<T>,
    seed: u64,
) -> Result<f64> {
    nilpotency_amplification(prob, traj, Part::Bar, prob.n_stages(), 10, seed)
}

/// Dense spectral radii of the Jacobi, FGS and BGS iteration matrices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GsFactors {
    pub jacobi: f64,
    pub fgs: f64,
    pub bgs: f64,
}

impl GsFactors {
    /// `max(|ρ_FGS − ρ_J²|, |ρ_BGS − ρ_J²|)`.
    pub fn squared_gap(&self) -> f64 {
        let sq = self.jacobi * self.jacobi;
        (self.fgs - sq).abs().max((self.bgs - sq).abs())
    }
}

pub fn verify_gs_squared<T: Real, C: StageCost<T>, G: InequalityConstraint<T>>(
    prob: &OcpProblem<T, C, G>,
    traj: &Trajectory<T>,
) -> Result<GsFactors> {
    let mut rho = [0.0; 3];
    for (r, kind) in rho.iter_mut().zip([UpperKind::Jacobi, UpperKind::Fgs, UpperKind::Bgs]) {
        let mut op = IterationOperator::new(prob, traj, UpperMethod::new(kind), StageSolveConfig::exact())?;
        *r = oracle_factor(&mut op)?.ok_or_else(|| {
            Error::Config(format!("dense oracle limited to {DENSE_ORACLE_LIMIT} unknowns, got {}", op.dim()))
        })?;
    }
    Ok(GsFactors { jacobi: rho[0], fgs: rho[1], bgs: rho[2] })
}

/// Lower-layer configuration used by the analysis: exact structured solves.
pub fn analysis_config() -> StageSolveConfig {
    StageSolveConfig { mode: LowerMode::Direct, ..StageSolveConfig::default() }
}
