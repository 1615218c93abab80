//! Relaxed, regularized NMPC problem on a backward-Euler grid, its stagewise
//! KKT residual and the structured stage Jacobians.
//!
//! A stage is stored flat as `s = (x, u, λ)`. The residual of stage `i` is
//!
//! ```text
//! 𝒦ᵢ = [ x_{i-1} − xᵢ + h f(uᵢ, xᵢ)
//!        h ∇ᵤℋᵢ + γ (uᵢ − ũᵢ)
//!        λ_{i+1} − λᵢ + h ∇ₓℋᵢ ]
//! ```
//!
//! with `ℋ = l − τ Σ ln G + λᵀ f`, `x₀ = x̄₀` and `λ_{N+1} = 0`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dynamics::{zero, Dynamics, Linearization};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::Real;

/// Accumulates a symmetric Hessian over `(x, u)` split into the blocks the
/// solvers consume.
#[derive(Debug, Clone)]
pub struct HessianAccumulator<T> {
    n_x: usize,
    n_u: usize,
    /// `(a, b, v)` with `a ≤ b < n_x`, meaning `H[a][b] = H[b][a] += v`.
    pub xx: Vec<(usize, usize, T)>,
    /// `(state, input, v)`.
    pub xu: Vec<(usize, usize, T)>,
    pub uu: DenseMatrix<T>,
}

impl<T: Real> HessianAccumulator<T> {
    pub fn new(n_x: usize, n_u: usize) -> Self {
        Self { n_x, n_u, xx: Vec::new(), xu: Vec::new(), uu: DenseMatrix::zeros(n_u, n_u) }
    }

    pub fn clear(&mut self) {
        self.xx.clear();
        self.xu.clear();
        self.uu.fill(T::zero());
    }

    /// Adds `v` to `H[a][b]` and, if `a ≠ b`, to `H[b][a]` (global ids).
    pub fn add(&mut self, a: usize, b: usize, v: T) {
        let n_x = self.n_x;
        match (a < n_x, b < n_x) {
            (true, true) => self.xx.push((a.min(b), a.max(b), v)),
            (true, false) => self.xu.push((a, b - n_x, v)),
            (false, true) => self.xu.push((b, a - n_x, v)),
            (false, false) => {
                let (i, j) = (a - n_x, b - n_x);
                self.uu[(i, j)] += v;
                if i != j {
                    self.uu[(j, i)] += v;
                }
            }
        }
    }

    /// Merges duplicate entries.
    pub fn coalesce(&mut self) {
        fn merge<T: Real>(v: &mut Vec<(usize, usize, T)>) {
            v.sort_unstable_by_key(|e| (e.0, e.1));
            let mut w = 0;
            for r in 0..v.len() {
                if w > 0 && v[w - 1].0 == v[r].0 && v[w - 1].1 == v[r].1 {
                    let add = v[r].2;
                    v[w - 1].2 += add;
                } else {
                    v[w] = v[r];
                    w += 1;
                }
            }
            v.truncate(w);
        }
        merge(&mut self.xx);
        merge(&mut self.xu);
    }

    /// `out_x += α H_xx vx`.
    pub fn add_xx(&self, alpha: T, vx: &[T], out_x: &mut [T]) {
        for &(a, b, v) in &self.xx {
            let w = alpha * v;
            out_x[a] += w * vx[b];
            if a != b {
                out_x[b] += w * vx[a];
            }
        }
    }

    /// `out_x += α H_xu vu`.
    pub fn add_xu(&self, alpha: T, vu: &[T], out_x: &mut [T]) {
        for &(a, k, v) in &self.xu {
            out_x[a] += alpha * v * vu[k];
        }
    }

    /// `out_u += α H_ux vx`.
    pub fn add_ux(&self, alpha: T, vx: &[T], out_u: &mut [T]) {
        for &(a, k, v) in &self.xu {
            out_u[k] += alpha * v * vx[a];
        }
    }

    /// `out_u += α H_uu vu`.
    pub fn add_uu(&self, alpha: T, vu: &[T], out_u: &mut [T]) {
        for (i, o) in out_u.iter_mut().enumerate() {
            let s: T = self.uu.row(i).iter().zip(vu).map(|(a, b)| *a * *b).sum();
            *o += alpha * s;
        }
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn n_u(&self) -> usize {
        self.n_u
    }
}

/// Stage cost `lᵢ(u, x)`.
pub trait StageCost<T: Real>: Send + Sync {
    fn value(&self, stage: usize, u: &[T], x: &[T]) -> T;
    /// Adds `∇ᵤl` and `∇ₓl`.
    fn add_gradient(&self, stage: usize, u: &[T], x: &[T], gu: &mut [T], gx: &mut [T]);
    fn add_hessian(&self, stage: usize, u: &[T], x: &[T], acc: &mut HessianAccumulator<T>);
}

/// `l = ½ ‖x − x_ref‖²_Q + ½ ‖u − u_ref‖²_R` with diagonal weights and
/// per-stage references.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticTracking<T> {
    q: Vec<T>,
    r: Vec<T>,
    x_ref: Vec<T>,
    u_ref: Vec<T>,
}

impl<T: Real> QuadraticTracking<T> {
    /// Zero references for `n_stages` stages.
    pub fn new(q: Vec<T>, r: Vec<T>, n_stages: usize) -> Self {
        let (n_x, n_u) = (q.len(), r.len());
        Self { q, r, x_ref: vec![T::zero(); n_x * n_stages], u_ref: vec![T::zero(); n_u * n_stages] }
    }

    pub fn n_stages(&self) -> usize {
        if self.q.is_empty() {
            0
        } else {
            self.x_ref.len() / self.q.len()
        }
    }

    pub fn set_reference(&mut self, stage: usize, x_ref: &[T], u_ref: &[T]) {
        let (n_x, n_u) = (self.q.len(), self.r.len());
        self.x_ref[stage * n_x..(stage + 1) * n_x].copy_from_slice(x_ref);
        self.u_ref[stage * n_u..(stage + 1) * n_u].copy_from_slice(u_ref);
    }

    pub fn x_ref(&self, stage: usize) -> &[T] {
        let n = self.q.len();
        &self.x_ref[stage * n..(stage + 1) * n]
    }

    pub fn u_ref(&self, stage: usize) -> &[T] {
        let n = self.r.len();
        &self.u_ref[stage * n..(stage + 1) * n]
    }
}

impl<T: Real> StageCost<T> for QuadraticTracking<T> {
    fn value(&self, stage: usize, u: &[T], x: &[T]) -> T {
        let half = T::lit(0.5);
        let ex: T = x.iter().zip(self.x_ref(stage)).zip(&self.q).map(|((a, b), q)| *q * (*a - *b) * (*a - *b)).sum();
        let eu: T = u.iter().zip(self.u_ref(stage)).zip(&self.r).map(|((a, b), r)| *r * (*a - *b) * (*a - *b)).sum();
        half * (ex + eu)
    }

    fn add_gradient(&self, stage: usize, u: &[T], x: &[T], gu: &mut [T], gx: &mut [T]) {
        for (j, g) in gx.iter_mut().enumerate() {
            *g += self.q[j] * (x[j] - self.x_ref(stage)[j]);
        }
        for (k, g) in gu.iter_mut().enumerate() {
            *g += self.r[k] * (u[k] - self.u_ref(stage)[k]);
        }
    }

    fn add_hessian(&self, _stage: usize, _u: &[T], _x: &[T], acc: &mut HessianAccumulator<T>) {
        let n_x = self.q.len();
        for (j, q) in self.q.iter().enumerate() {
            if *q != T::zero() {
                acc.add(j, j, *q);
            }
        }
        for (k, r) in self.r.iter().enumerate() {
            if *r != T::zero() {
                acc.add(n_x + k, n_x + k, *r);
            }
        }
    }
}

/// Inequality constraints `G(u, x) ≥ 0`, relaxed by a log barrier.
pub trait InequalityConstraint<T: Real>: Send + Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Affine constraints allow the exact fraction-to-the-boundary ratio.
    fn is_affine(&self) -> bool;

    fn eval(&self, u: &[T], x: &[T], g: &mut [T]);

    /// Appends the nonzero entries `(global id, ∂G_j/∂z)` of constraint `j`.
    fn gradient(&self, j: usize, u: &[T], x: &[T], out: &mut Vec<(usize, T)>);

    /// Adds `weight · ∇²G_j`; affine constraints add nothing.
    fn add_hessian(&self, _j: usize, _u: &[T], _x: &[T], _weight: T, _acc: &mut HessianAccumulator<T>) {}
}

/// `lo ≤ u ≤ hi` written as `G = (u − lo, hi − u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct InputBox<T> {
    pub lo: Vec<T>,
    pub hi: Vec<T>,
    n_x: usize,
}

impl<T: Real> InputBox<T> {
    pub fn new(n_x: usize, lo: Vec<T>, hi: Vec<T>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::InvalidProblem("box bounds of different lengths".into()));
        }
        if let Some(k) = lo.iter().zip(&hi).position(|(l, h)| !(l < h)) {
            return Err(Error::InvalidProblem(format!("box bound {k} is empty")));
        }
        Ok(Self { lo, hi, n_x })
    }

    pub fn uniform(n_x: usize, n_u: usize, lo: T, hi: T) -> Result<Self> {
        Self::new(n_x, vec![lo; n_u], vec![hi; n_u])
    }

    pub fn midpoint(&self) -> Vec<T> {
        self.lo.iter().zip(&self.hi).map(|(l, h)| (*l + *h) * T::lit(0.5)).collect()
    }
}

impl<T: Real> InequalityConstraint<T> for InputBox<T> {
    fn len(&self) -> usize {
        2 * self.lo.len()
    }

    fn is_affine(&self) -> bool {
        true
    }

    fn eval(&self, u: &[T], _x: &[T], g: &mut [T]) {
        let n = self.lo.len();
        for k in 0..n {
            g[k] = u[k] - self.lo[k];
            g[n + k] = self.hi[k] - u[k];
        }
    }

    fn gradient(&self, j: usize, _u: &[T], _x: &[T], out: &mut Vec<(usize, T)>) {
        let n = self.lo.len();
        if j < n {
            out.push((self.n_x + j, T::one()));
        } else {
            out.push((self.n_x + j - n, -T::one()));
        }
    }
}

/// No inequality constraints.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NoConstraint;

impl<T: Real> InequalityConstraint<T> for NoConstraint {
    fn len(&self) -> usize {
        0
    }

    fn is_affine(&self) -> bool {
        true
    }

    fn eval(&self, _u: &[T], _x: &[T], _g: &mut [T]) {}

    fn gradient(&self, _j: usize, _u: &[T], _x: &[T], _out: &mut Vec<(usize, T)>) {}
}

/// How the regularization anchor `ũ` is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegMode {
    /// `ũ` is a stored reference.
    Fixed,
    /// `ũ = uᵏ`: the term vanishes from the residual but `γI` stays in the
    /// Jacobian.
    CurrentIterate,
}

/// Scalar settings of an [`OcpProblem`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OcpSettings<T> {
    pub n_stages: usize,
    pub horizon: T,
    pub tau: T,
    pub gamma: T,
    pub reg_mode: RegMode,
}

/// The relaxed, regularized NMPC problem.
#[derive(Clone)]
pub struct OcpProblem<T: Real, C = QuadraticTracking<T>, G = InputBox<T>> {
    dynamics: Arc<dyn Dynamics<T>>,
    pub cost: C,
    pub constraint: G,
    settings: OcpSettings<T>,
    x0: Vec<T>,
    u_tilde: Vec<T>,
}

impl<T: Real, C: StageCost<T>, G: InequalityConstraint<T>> OcpProblem<T, C, G> {
    pub fn new(dynamics: Arc<dyn Dynamics<T>>, cost: C, constraint: G, settings: OcpSettings<T>, x0: Vec<T>) -> Result<Self> {
        let s = &settings;
        if s.n_stages == 0 {
            return Err(Error::InvalidProblem("at least one stage required".into()));
        }
        if !(s.horizon > T::zero()) {
            return Err(Error::InvalidProblem(format!("horizon must be positive, got {}", s.horizon)));
        }
        if !(s.tau > T::zero()) {
            return Err(Error::InvalidProblem(format!("barrier parameter must be positive, got {}", s.tau)));
        }
        if !(s.gamma >= T::zero()) {
            return Err(Error::InvalidProblem(format!("regularization must be non-negative, got {}", s.gamma)));
        }
        if x0.len() != dynamics.n_x() {
            return Err(Error::Dimension(format!("x0 has {} entries, n_x = {}", x0.len(), dynamics.n_x())));
        }
        let u_tilde = vec![T::zero(); s.n_stages * dynamics.n_u()];
        Ok(Self { dynamics, cost, constraint, settings, x0, u_tilde })
    }

    pub fn dynamics(&self) -> &Arc<dyn Dynamics<T>> {
        &self.dynamics
    }

    pub fn settings(&self) -> &OcpSettings<T> {
        &self.settings
    }

    pub fn n_x(&self) -> usize {
        self.dynamics.n_x()
    }

    pub fn n_u(&self) -> usize {
        self.dynamics.n_u()
    }

    pub fn n_stages(&self) -> usize {
        self.settings.n_stages
    }

    /// Length of one stage vector `(x, u, λ)`.
    pub fn stage_len(&self) -> usize {
        2 * self.n_x() + self.n_u()
    }

    pub fn h(&self) -> T {
        self.settings.horizon / T::from_count(self.settings.n_stages)
    }

    pub fn gamma(&self) -> T {
        self.settings.gamma
    }

    pub fn tau(&self) -> T {
        self.settings.tau
    }

    pub fn reg_mode(&self) -> RegMode {
        self.settings.reg_mode
    }

    pub fn set_gamma(&mut self, gamma: T) {
        self.settings.gamma = gamma;
    }

    pub fn set_tau(&mut self, tau: T) {
        self.settings.tau = tau;
    }

    pub fn set_reg_mode(&mut self, mode: RegMode) {
        self.settings.reg_mode = mode;
    }

    pub fn x0(&self) -> &[T] {
        &self.x0
    }

    pub fn set_x0(&mut self, x0: &[T]) {
        self.x0.copy_from_slice(x0);
    }

    pub fn u_tilde(&self, stage: usize) -> &[T] {
        let n = self.n_u();
        &self.u_tilde[stage * n..(stage + 1) * n]
    }

    pub fn set_u_tilde(&mut self, stage: usize, u: &[T]) {
        let n = self.n_u();
        self.u_tilde[stage * n..(stage + 1) * n].copy_from_slice(u);
    }

    /// In current-iterate mode, copies the inputs of `traj` into `ũ`.
    pub fn refresh_u_tilde(&mut self, traj: &Trajectory<T>) {
        if self.settings.reg_mode == RegMode::CurrentIterate {
            for i in 0..self.n_stages() {
                let n = self.n_u();
                self.u_tilde[i * n..(i + 1) * n].copy_from_slice(traj.u(i));
            }
        }
    }

    /// Evaluates `G` at a stage and checks strict positivity.
    pub fn check_interior(&self, stage: usize, u: &[T], x: &[T], g: &mut Vec<T>) -> Result<()> {
        g.resize(self.constraint.len(), T::zero());
        self.constraint.eval(u, x, g);
        for (j, v) in g.iter().enumerate() {
            if !(*v > T::zero()) {
                return Err(Error::Domain { stage, index: j, value: v.as_f64() });
            }
        }
        Ok(())
    }

    /// `ℋ = l − τ Σ ln G + λᵀ f` at stage `stage`.
    pub fn hamiltonian(&self, stage: usize, x: &[T], u: &[T], lambda: &[T]) -> Result<T> {
        let mut g = Vec::new();
        self.check_interior(stage, u, x, &mut g)?;
        let mut f = vec![T::zero(); self.n_x()];
        self.dynamics.eval(u, x, &mut f);
        let barrier: T = g.iter().map(|v| v.ln()).sum();
        let lf: T = lambda.iter().zip(&f).map(|(a, b)| *a * *b).sum();
        Ok(self.cost.value(stage, u, x) - self.tau() * barrier + lf)
    }

    /// Linearizes stage `i` of `traj` into `block` and writes `𝒦ᵢ` into
    /// `resid`.
    pub fn evaluate_stage(&self, i: usize, traj: &Trajectory<T>, block: &mut StageBlock<T>, resid: &mut [T]) -> Result<()> {
        let n = self.n_stages();
        let x_prev = if i == 0 { &self.x0[..] } else { traj.x(i - 1) };
        let lam_next = if i + 1 == n { None } else { Some(traj.lam(i + 1)) };
        self.evaluate_stage_at(i, x_prev, traj.stage(i), lam_next, self.u_tilde(i), block, resid)
    }

    /// Stage residual and Jacobian at explicit neighbours. `lam_next = None`
    /// stands for `λ_{N+1} = 0`.
    #[allow(clippy::too_many_arguments)]
    pub fn evaluate_stage_at(
        &self,
        i: usize,
        x_prev: &[T],
        s: &[T],
        lam_next: Option<&[T]>,
        u_tilde: &[T],
        block: &mut StageBlock<T>,
        resid: &mut [T],
    ) -> Result<()> {
        let (n_x, n_u) = (self.n_x(), self.n_u());
        let (x, rest) = s.split_at(n_x);
        let (u, lam) = rest.split_at(n_u);
        let h = self.h();
        let tau = self.tau();
        block.h = h;
        block.gamma = self.gamma();

        self.check_interior(i, u, x, &mut block.g_val)?;
        self.dynamics.linearize(u, x, &mut block.lin);

        // ∇ℋ into scratch
        let (gx, gu) = (&mut block.tmp_x, &mut block.tmp_u);
        zero(gx);
        zero(gu);
        self.cost.add_gradient(i, u, x, gu, gx);
        block.lin.gemv_x_t(T::one(), lam, gx);
        block.lin.gemv_u_t(T::one(), lam, gu);

        block.hess.clear();
        self.cost.add_hessian(i, u, x, &mut block.hess);
        for e in &block.lin.hess {
            let w = lam[e.row] * e.val;
            if w != T::zero() {
                block.hess.add(e.a, e.b, w);
            }
        }
        for j in 0..self.constraint.len() {
            let gj = block.g_val[j];
            block.g_grad.clear();
            self.constraint.gradient(j, u, x, &mut block.g_grad);
            let c1 = -tau / gj;
            let c2 = tau / (gj * gj);
            for (p, &(a, va)) in block.g_grad.iter().enumerate() {
                if a < n_x {
                    gx[a] += c1 * va;
                } else {
                    gu[a - n_x] += c1 * va;
                }
                for &(b, vb) in &block.g_grad[p..] {
                    block.hess.add(a, b, c2 * va * vb);
                }
            }
            self.constraint.add_hessian(j, u, x, c1, &mut block.hess);
        }
        block.hess.coalesce();

        let (rx, rest) = resid.split_at_mut(n_x);
        let (ru, rl) = rest.split_at_mut(n_u);
        for j in 0..n_x {
            rx[j] = x_prev[j] - x[j] + h * block.lin.f[j];
        }
        for k in 0..n_u {
            ru[k] = h * gu[k];
        }
        if self.reg_mode() == RegMode::Fixed && block.gamma != T::zero() {
            for k in 0..n_u {
                ru[k] += block.gamma * (u[k] - u_tilde[k]);
            }
        }
        for j in 0..n_x {
            let next = lam_next.map_or(T::zero(), |l| l[j]);
            rl[j] = next - lam[j] + h * gx[j];
        }
        Ok(())
    }

    /// Convenience form of [`Self::evaluate_stage_at`] returning the residual
    /// only.
    pub fn kkt_stage_residual(&self, i: usize, x_prev: &[T], s: &[T], lam_next: Option<&[T]>, u_tilde: &[T]) -> Result<Vec<T>> {
        let mut block = StageBlock::new(self);
        let mut r = vec![T::zero(); self.stage_len()];
        self.evaluate_stage_at(i, x_prev, s, lam_next, u_tilde, &mut block, &mut r)?;
        Ok(r)
    }

    /// Convenience form of [`Self::evaluate_stage_at`] returning the Jacobian.
    pub fn stage_jacobian(&self, i: usize, x_prev: &[T], s: &[T], lam_next: Option<&[T]>) -> Result<StageBlock<T>> {
        let mut block = StageBlock::new(self);
        let mut r = vec![T::zero(); self.stage_len()];
        let ut = self.u_tilde(i).to_vec();
        self.evaluate_stage_at(i, x_prev, s, lam_next, &ut, &mut block, &mut r)?;
        Ok(block)
    }

    /// Full residual `𝒦(S)` (allocating; solvers use their own buffers).
    pub fn kkt_residual(&self, traj: &Trajectory<T>) -> Result<Vec<T>> {
        let len = self.stage_len();
        let mut out = vec![T::zero(); len * self.n_stages()];
        let mut block = StageBlock::new(self);
        for i in 0..self.n_stages() {
            self.evaluate_stage(i, traj, &mut block, &mut out[i * len..(i + 1) * len])?;
        }
        Ok(out)
    }
}

/// Which part of `Dᵢ = D̄ᵢ + h D̃ᵢ` to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Full,
    /// `D̄ᵢ`: `Dᵢ` without the `∇ᵤf` and `(∇ᵤf)ᵀ` couplings.
    Bar,
    /// `D̃ᵢ`: only `∇ᵤf` at (x, u) and `(∇ᵤf)ᵀ` at (u, λ).
    Tilde,
}

/// Stage Jacobian `Dᵢ = ∂𝒦ᵢ/∂sᵢ` in structured form:
///
/// ```text
/// [ h∇ₓf − I    h∇ᵤf           0          ]
/// [ hℋ_ux       hℋ_uu + γI     h(∇ᵤf)ᵀ    ]
/// [ hℋ_xx       hℋ_xu          h(∇ₓf)ᵀ − I ]
/// ```
#[derive(Debug, Clone)]
pub struct StageBlock<T> {
    pub h: T,
    pub gamma: T,
    pub lin: Linearization<T>,
    /// Hessian of `ℋ` (not scaled by `h`).
    pub hess: HessianAccumulator<T>,
    second_order: Option<usize>,
    g_val: Vec<T>,
    g_grad: Vec<(usize, T)>,
    tmp_x: Vec<T>,
    tmp_u: Vec<T>,
}

impl<T: Real> StageBlock<T> {
    pub fn new<C: StageCost<T>, G: InequalityConstraint<T>>(prob: &OcpProblem<T, C, G>) -> Self {
        let (n_x, n_u) = (prob.n_x(), prob.n_u());
        Self {
            h: prob.h(),
            gamma: prob.gamma(),
            lin: prob.dynamics().new_linearization(),
            hess: HessianAccumulator::new(n_x, n_u),
            second_order: prob.dynamics().second_order_split(),
            g_val: Vec::new(),
            g_grad: Vec::new(),
            tmp_x: vec![T::zero(); n_x],
            tmp_u: vec![T::zero(); n_u],
        }
    }

    pub fn n_x(&self) -> usize {
        self.lin.n_x()
    }

    pub fn n_u(&self) -> usize {
        self.lin.n_u()
    }

    pub fn len(&self) -> usize {
        2 * self.n_x() + self.n_u()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn second_order_split(&self) -> Option<usize> {
        self.second_order
    }

    /// Constraint values `G(uᵢ, xᵢ)` from the last evaluation.
    pub fn constraint_values(&self) -> &[T] {
        &self.g_val
    }

    /// `out = part · v`.
    pub fn apply(&self, part: Part, v: &[T], out: &mut [T]) {
        let (n_x, n_u) = (self.n_x(), self.n_u());
        let h = self.h;
        let (vx, rest) = v.split_at(n_x);
        let (vu, vl) = rest.split_at(n_u);
        let (ox, rest) = out.split_at_mut(n_x);
        let (ou, ol) = rest.split_at_mut(n_u);
        zero(ox);
        zero(ou);
        zero(ol);
        if part == Part::Tilde {
            self.lin.gemv_u(T::one(), vu, ox);
            self.lin.gemv_u_t(T::one(), vl, ou);
            return;
        }
        self.lin.gemv_x(h, vx, ox);
        for j in 0..n_x {
            ox[j] -= vx[j];
        }
        self.hess.add_ux(h, vx, ou);
        self.hess.add_uu(h, vu, ou);
        for k in 0..n_u {
            ou[k] += self.gamma * vu[k];
        }
        self.hess.add_xx(h, vx, ol);
        self.hess.add_xu(h, vu, ol);
        self.lin.gemv_x_t(h, vl, ol);
        for j in 0..n_x {
            ol[j] -= vl[j];
        }
        if part == Part::Full {
            self.lin.gemv_u(h, vu, ox);
            self.lin.gemv_u_t(h, vl, ou);
        }
    }

    /// Dense materialization, assembled from the stored entries.
    pub fn to_dense(&self, part: Part) -> DenseMatrix<T> {
        let mut m = DenseMatrix::zeros(self.len(), self.len());
        self.fill_dense(part, &mut m);
        m
    }

    /// Writes the dense materialization into `m` (resized if needed).
    pub fn fill_dense(&self, part: Part, m: &mut DenseMatrix<T>) {
        let (n_x, n_u) = (self.n_x(), self.n_u());
        let n = self.len();
        if m.rows() != n || m.cols() != n {
            *m = DenseMatrix::zeros(n, n);
        } else {
            m.fill(T::zero());
        }
        let (ou, ol) = (n_x, n_x + n_u);
        let h = self.h;
        let p = self.lin.pattern();
        let (sx, su) = match part {
            Part::Full => (h, h),
            Part::Bar => (h, T::zero()),
            Part::Tilde => (T::zero(), T::one()),
        };
        for r in 0..n_x {
            for k in p.range(r) {
                let id = p.ids()[k];
                let g = self.lin.grad[k];
                if id < n_x {
                    m[(r, id)] += sx * g;
                    m[(ol + id, ol + r)] += sx * g;
                } else {
                    m[(r, id)] += su * g;
                    m[(ou + id - n_x, ol + r)] += su * g;
                }
            }
        }
        if part == Part::Tilde {
            return;
        }
        for j in 0..n_x {
            m[(j, j)] -= T::one();
            m[(ol + j, ol + j)] -= T::one();
        }
        for &(a, b, v) in &self.hess.xx {
            m[(ol + a, b)] += h * v;
            if a != b {
                m[(ol + b, a)] += h * v;
            }
        }
        for &(a, k, v) in &self.hess.xu {
            m[(ol + a, n_x + k)] += h * v;
            m[(ou + k, a)] += h * v;
        }
        for i in 0..n_u {
            for j in 0..n_u {
                m[(ou + i, n_x + j)] += h * self.hess.uu[(i, j)];
            }
            m[(ou + i, n_x + i)] += self.gamma;
        }
    }
}

/// Primal-dual iterate `S = (s₁, …, s_N)`, `sᵢ = (xᵢ, uᵢ, λᵢ)`, stored flat.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    n_x: usize,
    n_u: usize,
    n_stages: usize,
    data: Vec<T>,
}

impl<T: Real> Trajectory<T> {
    pub fn zeros(n_x: usize, n_u: usize, n_stages: usize) -> Self {
        Self { n_x, n_u, n_stages, data: vec![T::zero(); (2 * n_x + n_u) * n_stages] }
    }

    /// States `x̄₀` replicated, inputs `u_init`, costates zero.
    pub fn constant(x0: &[T], u_init: &[T], n_stages: usize) -> Self {
        let mut t = Self::zeros(x0.len(), u_init.len(), n_stages);
        for i in 0..n_stages {
            t.x_mut(i).copy_from_slice(x0);
            t.u_mut(i).copy_from_slice(u_init);
        }
        t
    }

    pub fn from_flat(n_x: usize, n_u: usize, n_stages: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != (2 * n_x + n_u) * n_stages {
            return Err(Error::Dimension(format!("trajectory of {} values", data.len())));
        }
        Ok(Self { n_x, n_u, n_stages, data })
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn n_u(&self) -> usize {
        self.n_u
    }

    pub fn n_stages(&self) -> usize {
        self.n_stages
    }

    pub fn stage_len(&self) -> usize {
        2 * self.n_x + self.n_u
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn stage(&self, i: usize) -> &[T] {
        let l = self.stage_len();
        &self.data[i * l..(i + 1) * l]
    }

    pub fn stage_mut(&mut self, i: usize) -> &mut [T] {
        let l = self.stage_len();
        &mut self.data[i * l..(i + 1) * l]
    }

    pub fn x(&self, i: usize) -> &[T] {
        &self.stage(i)[..self.n_x]
    }

    pub fn u(&self, i: usize) -> &[T] {
        &self.stage(i)[self.n_x..self.n_x + self.n_u]
    }

    pub fn lam(&self, i: usize) -> &[T] {
        &self.stage(i)[self.n_x + self.n_u..]
    }

    pub fn x_mut(&mut self, i: usize) -> &mut [T] {
        let n = self.n_x;
        &mut self.stage_mut(i)[..n]
    }

    pub fn u_mut(&mut self, i: usize) -> &mut [T] {
        let (a, b) = (self.n_x, self.n_x + self.n_u);
        &mut self.stage_mut(i)[a..b]
    }

    pub fn lam_mut(&mut self, i: usize) -> &mut [T] {
        let a = self.n_x + self.n_u;
        &mut self.stage_mut(i)[a..]
    }

    /// Receding-horizon warm start: `sᵢ ← sᵢ₊₁`, last stage repeated.
    pub fn shift(&mut self) {
        let l = self.stage_len();
        if self.n_stages > 1 {
            self.data.copy_within(l.., 0);
        }
    }

    /// `S ← S − α ΔS`.
    pub fn step(&mut self, alpha: T, delta: &[T]) {
        for (s, d) in self.data.iter_mut().zip(delta) {
            *s -= alpha * *d;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::DenseDynamics;

    const A: f64 = -0.5;
    const B: f64 = 2.0;
    const Q: f64 = 3.0;
    const R: f64 = 0.25;
    const TAU: f64 = 0.1;
    const GAMMA: f64 = 0.7;

    /// Scalar problem `f = a x + b u` on two stages with `u ∈ [-1, 1]`.
    fn scalar(mode: RegMode) -> OcpProblem<f64> {
        let a = DenseMatrix::from_row_major(1, 1, vec![A]).unwrap();
        let b = DenseMatrix::from_row_major(1, 1, vec![B]).unwrap();
        let mut cost = QuadraticTracking::new(vec![Q], vec![R], 2);
        cost.set_reference(0, &[1.0], &[0.1]);
        cost.set_reference(1, &[-1.0], &[0.0]);
        let settings = OcpSettings { n_stages: 2, horizon: 0.4, tau: TAU, gamma: GAMMA, reg_mode: mode };
        let bounds = InputBox::uniform(1, 1, -1.0, 1.0).unwrap();
        OcpProblem::new(Arc::new(DenseDynamics::linear(a, b)), cost, bounds, settings, vec![0.5]).unwrap()
    }

    #[test]
    fn residual_matches_the_hand_computation() {
        let mut prob = scalar(RegMode::Fixed);
        prob.set_u_tilde(0, &[0.2]);
        prob.set_u_tilde(1, &[-0.1]);
        // (x, u, λ) per stage
        let traj = Trajectory::from_flat(1, 1, 2, vec![0.3, 0.4, -0.6, -0.2, -0.5, 0.9]).unwrap();
        let r = prob.kkt_residual(&traj).unwrap();
        let h = 0.2;
        let barrier = |u: f64| -TAU / (u + 1.0) + TAU / (1.0 - u);
        let want = [
            0.5 - 0.3 + h * (A * 0.3 + B * 0.4),
            h * (R * (0.4 - 0.1) + B * -0.6 + barrier(0.4)) + GAMMA * (0.4 - 0.2),
            0.9 - -0.6 + h * (Q * (0.3 - 1.0) + A * -0.6),
            0.3 - -0.2 + h * (A * -0.2 + B * -0.5),
            h * (R * -0.5 + B * 0.9 + barrier(-0.5)) + GAMMA * (-0.5 - -0.1),
            0.0 - 0.9 + h * (Q * (-0.2 + 1.0) + A * 0.9),
        ];
        for (k, (g, w)) in r.iter().zip(want).enumerate() {
            assert!((g - w).abs() < 1e-14, "entry {k}: {g} vs {w}");
        }
    }

    #[test]
    fn current_iterate_drops_the_regularization_from_the_residual() {
        let mut fixed = scalar(RegMode::Fixed);
        let mut current = scalar(RegMode::CurrentIterate);
        let traj = Trajectory::from_flat(1, 1, 2, vec![0.3, 0.4, -0.6, -0.2, -0.5, 0.9]).unwrap();
        fixed.refresh_u_tilde(&traj);
        current.refresh_u_tilde(&traj);
        // refresh is a no-op in fixed mode, so ũ stays zero there
        assert_eq!(fixed.u_tilde(0), &[0.0]);
        assert_eq!(current.u_tilde(0), &[0.4]);
        let (rf, rc) = (fixed.kkt_residual(&traj).unwrap(), current.kkt_residual(&traj).unwrap());
        assert!((rf[1] - rc[1] - GAMMA * 0.4).abs() < 1e-15);
        // the Jacobian keeps γI in both modes
        let block = current.stage_jacobian(0, &[0.5], traj.stage(0), Some(traj.lam(1))).unwrap();
        let d = block.to_dense(Part::Full);
        let h = 0.2;
        assert!((d[(1, 1)] - (h * (R + TAU / 1.4f64.powi(2) + TAU / 0.6f64.powi(2)) + GAMMA)).abs() < 1e-14);
    }

    #[test]
    fn structured_apply_matches_the_dense_blocks() {
        let prob = scalar(RegMode::CurrentIterate);
        let traj = Trajectory::from_flat(1, 1, 2, vec![0.3, 0.4, -0.6, -0.2, -0.5, 0.9]).unwrap();
        let block = prob.stage_jacobian(0, &[0.5], traj.stage(0), Some(traj.lam(1))).unwrap();
        let v = [0.7, -1.1, 0.4];
        for part in [Part::Full, Part::Bar, Part::Tilde] {
            let d = block.to_dense(part);
            let mut want = [0.0; 3];
            d.matvec(&v, &mut want);
            let mut got = [0.0; 3];
            block.apply(part, &v, &mut got);
            for k in 0..3 {
                assert!((got[k] - want[k]).abs() < 1e-14, "{part:?} row {k}");
            }
        }
        // D = D̄ + h D̃
        let (full, bar, tilde) = (block.to_dense(Part::Full), block.to_dense(Part::Bar), block.to_dense(Part::Tilde));
        for (f, (b, t)) in full.as_slice().iter().zip(bar.as_slice().iter().zip(tilde.as_slice())) {
            assert!((f - b - block.h * t).abs() < 1e-15);
        }
    }

    #[test]
    fn infeasible_inputs_are_rejected() {
        let prob = scalar(RegMode::Fixed);
        let traj = Trajectory::from_flat(1, 1, 2, vec![0.3, 1.0, -0.6, -0.2, -0.5, 0.9]).unwrap();
        assert!(matches!(prob.kkt_residual(&traj), Err(Error::Domain { stage: 0, index: 1, .. })));
        assert!(prob.hamiltonian(0, &[0.0], &[-1.5], &[0.0]).is_err());
    }

    #[test]
    fn shift_moves_stages_forward() {
        let mut t = Trajectory::from_flat(1, 1, 3, (0..9).map(f64::from).collect()).unwrap();
        t.shift();
        assert_eq!(t.as_slice(), &[3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 6.0, 7.0, 8.0]);
        assert!(Trajectory::<f64>::from_flat(2, 1, 2, vec![0.0; 9]).is_err());
    }

    #[test]
    fn settings_are_validated() {
        let a = DenseMatrix::from_row_major(1, 1, vec![A]).unwrap();
        let b = DenseMatrix::from_row_major(1, 1, vec![B]).unwrap();
        let dyn_: Arc<dyn Dynamics<f64>> = Arc::new(DenseDynamics::linear(a, b));
        let cost = || QuadraticTracking::new(vec![Q], vec![R], 1);
        let ok = OcpSettings { n_stages: 1, horizon: 1.0, tau: 1.0, gamma: 0.0, reg_mode: RegMode::Fixed };
        assert!(OcpProblem::new(dyn_.clone(), cost(), NoConstraint, ok, vec![0.0]).is_ok());
        for bad in [
            OcpSettings { n_stages: 0, ..ok },
            OcpSettings { horizon: 0.0, ..ok },
            OcpSettings { tau: -1.0, ..ok },
            OcpSettings { gamma: f64::NAN, ..ok },
        ] {
            assert!(OcpProblem::new(dyn_.clone(), cost(), NoConstraint, bad, vec![0.0]).is_err());
        }
        assert!(OcpProblem::new(dyn_, cost(), NoConstraint, ok, vec![0.0, 1.0]).is_err());
        assert!(InputBox::<f64>::new(0, vec![1.0], vec![1.0]).is_err());
    }
}
