//! Structured solver for one stage system `Dᵢ Δsᵢ = r`.
//!
//! With `v₁ = Δλ`, `v₂ = Δx`, `v₃ = Δu` the stage system reads
//!
//! ```text
//! [ 0     F_x   F_u  ] [v₁]   [b₁]      F_x = h∇ₓf − I, F_u = h∇ᵤf
//! [ F_xᵀ  A_xx  A_xu ] [v₂] = [b₂]      A = h∇²ℋ (+ γI on A_uu)
//! [ F_uᵀ  A_ux  A_uu ] [v₃]   [b₃]
//! ```
//!
//! and is solved by a fixed-point iteration on the input block, where every
//! application of the inverse of `K = [0 F_x; F_xᵀ A_xx]` costs one solve with
//! `F_x` and one with `F_xᵀ`. Those are done by a few Jacobi sweeps. For
//! `x = (W, Ẇ)` systems the `F_x` solves are reduced to the spatial matrix
//! `E = h g_Ẇ − I + h² g_W` first.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{BandLu, BandMatrix, DenseLu, DenseMatrix};
use crate::ocp::{Part, StageBlock};
use crate::Real;

/// How stage systems are solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LowerMode {
    /// Jacobi sweeps for the spatial solves and a fixed number of Schur
    /// fixed-point iterations.
    #[default]
    Iterative,
    /// Dense LU of the whole stage matrix.
    Exact,
    /// Band LU of the spatial matrix and an explicit input Schur complement.
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageSolveConfig {
    pub inner_jacobi_iters: usize,
    pub schur_iters: usize,
    pub mode: LowerMode,
}

impl Default for StageSolveConfig {
    fn default() -> Self {
        Self { inner_jacobi_iters: 2, schur_iters: 2, mode: LowerMode::Iterative }
    }
}

impl StageSolveConfig {
    pub fn exact() -> Self {
        Self { mode: LowerMode::Exact, ..Self::default() }
    }

    pub fn direct() -> Self {
        Self { mode: LowerMode::Direct, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == LowerMode::Iterative && (self.inner_jacobi_iters == 0 || self.schur_iters == 0) {
            return Err(Error::Config("lower-layer iteration counts must be at least 1".into()));
        }
        Ok(())
    }
}

/// `v ← iterate after `iters` Jacobi sweeps for `(diag + off) v = b`,
/// starting from `v⁰ = diag⁻¹ b`. `off_apply(v, out)` must write the
/// off-diagonal product into `out`.
pub fn jacobi_linear_solve<T: Real>(
    diag: &[T],
    mut off_apply: impl FnMut(&[T], &mut [T]),
    b: &[T],
    iters: usize,
    v: &mut [T],
    scratch: &mut [T],
) -> Result<()> {
    if let Some(i) = diag.iter().position(|d| *d == T::zero() || !d.is_finite()) {
        return Err(Error::Singular { what: "Jacobi diagonal", stage: 0, index: i });
    }
    for ((vi, bi), di) in v.iter_mut().zip(b).zip(diag) {
        *vi = *bi / *di;
    }
    for _ in 0..iters {
        off_apply(v, scratch);
        for i in 0..v.len() {
            v[i] = (b[i] - scratch[i]) / diag[i];
        }
    }
    Ok(())
}

/// Compressed rows of an off-diagonal part.
#[derive(Debug, Clone, Default)]
struct Csr<T> {
    offsets: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<T>,
}

impl<T: Real> Csr<T> {
    fn clear(&mut self) {
        self.offsets.clear();
        self.offsets.push(0);
        self.cols.clear();
        self.vals.clear();
    }

    fn end_row(&mut self) {
        self.offsets.push(self.cols.len());
    }

    fn push(&mut self, c: usize, v: T) {
        self.cols.push(c);
        self.vals.push(v);
    }

    fn rows(&self) -> usize {
        self.offsets.len() - 1
    }

    /// `out = M v`.
    fn apply(&self, v: &[T], out: &mut [T]) {
        for (r, o) in out.iter_mut().enumerate().take(self.rows()) {
            let mut s = T::zero();
            for k in self.offsets[r]..self.offsets[r + 1] {
                s += self.vals[k] * v[self.cols[k]];
            }
            *o = s;
        }
    }

    /// `out = Mᵀ v`.
    fn apply_t(&self, v: &[T], out: &mut [T]) {
        out.iter_mut().for_each(|o| *o = T::zero());
        for r in 0..self.rows() {
            let vr = v[r];
            for k in self.offsets[r]..self.offsets[r + 1] {
                out[self.cols[k]] += self.vals[k] * vr;
            }
        }
    }

    fn bandwidths(&self) -> (usize, usize) {
        let (mut kl, mut ku) = (0, 0);
        for r in 0..self.rows() {
            for &c in &self.cols[self.offsets[r]..self.offsets[r + 1]] {
                if c < r {
                    kl = kl.max(r - c);
                } else {
                    ku = ku.max(c - r);
                }
            }
        }
        (kl, ku)
    }
}

/// Reusable per-stage solver and workspace.
#[derive(Debug, Clone)]
pub struct StageSolver<T: Real> {
    cfg: StageSolveConfig,
    n_x: usize,
    n_u: usize,
    /// `Some(n_s)` for `x = (W, Ẇ)` systems.
    split: Option<usize>,
    h: T,
    e_diag: Vec<T>,
    e_off: Csr<T>,
    g_w: Csr<T>,
    a_uu: DenseMatrix<T>,
    a_uu_lu: DenseLu<T>,
    band: Option<BandLu<T>>,
    schur_lu: DenseLu<T>,
    dense: DenseMatrix<T>,
    dense_lu: DenseLu<T>,
    ws: Workspace<T>,
}

/// Scratch vectors named after the quantities they hold.
#[derive(Debug, Clone)]
struct Workspace<T> {
    b1: Vec<T>,
    b2: Vec<T>,
    b3: Vec<T>,
    b4: Vec<T>,
    b5: Vec<T>,
    v1: Vec<T>,
    v2: Vec<T>,
    v3: Vec<T>,
    v4: Vec<T>,
    v5: Vec<T>,
    tu: Vec<T>,
    tx: Vec<T>,
    te: Vec<T>,
    te2: Vec<T>,
    te3: Vec<T>,
}

impl<T: Real> Workspace<T> {
    fn new(n_x: usize, n_u: usize, n_e: usize) -> Self {
        let z = |n| vec![T::zero(); n];
        Self {
            b1: z(n_x),
            b2: z(n_x),
            b3: z(n_u),
            b4: z(n_x),
            b5: z(n_x),
            v1: z(n_x),
            v2: z(n_x),
            v3: z(n_u),
            v4: z(n_x),
            v5: z(n_x),
            tu: z(n_u),
            tx: z(n_x),
            te: z(n_e),
            te2: z(n_e),
            te3: z(n_e),
        }
    }
}

impl<T: Real> StageSolver<T> {
    pub fn new(n_x: usize, n_u: usize, split: Option<usize>, cfg: StageSolveConfig) -> Self {
        let n_e = split.unwrap_or(n_x);
        let n = 2 * n_x + n_u;
        let dense_n = if cfg.mode == LowerMode::Exact { n } else { 0 };
        Self {
            cfg,
            n_x,
            n_u,
            split,
            h: T::zero(),
            e_diag: vec![T::zero(); n_e],
            e_off: Csr::default(),
            g_w: Csr::default(),
            a_uu: DenseMatrix::zeros(n_u, n_u),
            a_uu_lu: DenseLu::with_size(n_u),
            band: None,
            schur_lu: DenseLu::with_size(n_u),
            dense: DenseMatrix::zeros(dense_n, dense_n),
            dense_lu: DenseLu::with_size(dense_n),
            ws: Workspace::new(n_x, n_u, n_e),
        }
    }

    pub fn for_block(block: &StageBlock<T>, cfg: StageSolveConfig) -> Self {
        Self::new(block.n_x(), block.n_u(), block.second_order_split(), cfg)
    }

    pub fn config(&self) -> &StageSolveConfig {
        &self.cfg
    }

    /// Factors or preprocesses `Dᵢ` from `block`.
    pub fn prepare(&mut self, block: &StageBlock<T>) -> Result<()> {
        match self.cfg.mode {
            LowerMode::Exact => self.prepare_dense(block, Part::Full),
            LowerMode::Iterative | LowerMode::Direct => self.prepare_structured(block),
        }
    }

    /// Dense LU of a chosen part of `Dᵢ` (analysis only; used with
    /// [`LowerMode::Exact`]).
    pub fn prepare_dense(&mut self, block: &StageBlock<T>, part: Part) -> Result<()> {
        block.fill_dense(part, &mut self.dense);
        self.dense_lu.refactor(&self.dense)
    }

    fn prepare_structured(&mut self, block: &StageBlock<T>) -> Result<()> {
        let h = block.h;
        self.h = h;
        let lin = &block.lin;
        let p = lin.pattern();
        let n_x = self.n_x;
        self.e_off.clear();
        self.g_w.clear();
        match self.split {
            None => {
                for r in 0..n_x {
                    let mut d = -T::one();
                    for k in p.range(r) {
                        let id = p.ids()[k];
                        if id == r {
                            d += h * lin.grad[k];
                        } else if id < n_x {
                            self.e_off.push(id, h * lin.grad[k]);
                        }
                    }
                    self.e_diag[r] = d;
                    self.e_off.end_row();
                }
            }
            Some(n_s) => {
                let h2 = h * h;
                for r in 0..n_s {
                    let row = n_s + r;
                    let mut d = -T::one();
                    for k in p.range(row) {
                        let id = p.ids()[k];
                        let g = lin.grad[k];
                        if id < n_s {
                            self.g_w.push(id, g);
                            if id == r {
                                d += h2 * g;
                            } else {
                                self.e_off.push(id, h2 * g);
                            }
                        } else if id < n_x {
                            if id - n_s == r {
                                d += h * g;
                            } else {
                                self.e_off.push(id - n_s, h * g);
                            }
                        }
                    }
                    self.e_diag[r] = d;
                    self.e_off.end_row();
                    self.g_w.end_row();
                }
            }
        }
        if let Some(i) = self.e_diag.iter().position(|d| *d == T::zero() || !d.is_finite()) {
            return Err(Error::Singular { what: "spatial diagonal", stage: 0, index: i });
        }

        let n_u = self.n_u;
        for i in 0..n_u {
            for j in 0..n_u {
                self.a_uu[(i, j)] = h * block.hess.uu[(i, j)];
            }
            self.a_uu[(i, i)] += block.gamma;
        }
        self.a_uu_lu.refactor(&self.a_uu).map_err(|e| match e {
            Error::Singular { index, .. } => Error::Singular { what: "input block A_uu", stage: 0, index },
            other => other,
        })?;

        if self.cfg.mode == LowerMode::Direct {
            let n_e = self.e_diag.len();
            let (kl, ku) = self.e_off.bandwidths();
            let mut m = match self.band.take() {
                Some(lu) if lu.dim() == n_e => {
                    let m = lu.into_matrix();
                    if m.bandwidths() == (kl, ku) {
                        m
                    } else {
                        BandMatrix::zeros(n_e, kl, ku)
                    }
                }
                _ => BandMatrix::zeros(n_e, kl, ku),
            };
            for r in 0..n_e {
                m.add(r, r, self.e_diag[r]);
                for k in self.e_off.offsets[r]..self.e_off.offsets[r + 1] {
                    m.add(r, self.e_off.cols[k], self.e_off.vals[k]);
                }
            }
            self.band = Some(m.factor().map_err(|e| match e {
                Error::Singular { index, .. } => Error::Singular { what: "spatial band pivot", stage: 0, index },
                other => other,
            })?);

            // S = A_uu − C K⁻¹ B, one column at a time
            let mut schur = self.a_uu.clone();
            let mut unit = vec![T::zero(); n_u];
            let mut ws = std::mem::replace(&mut self.ws, Workspace::new(0, 0, 0));
            for k in 0..n_u {
                unit[k] = T::one();
                block.lin.apply_dfdu(&unit, &mut ws.b4);
                ws.b4.iter_mut().for_each(|v| *v *= h);
                ws.b5.iter_mut().for_each(|v| *v = T::zero());
                block.hess.add_xu(h, &unit, &mut ws.b5);
                unit[k] = T::zero();
                self.inner_solve_ws(block, &mut ws)?;
                self.apply_c(block, &ws.v4, &ws.v5, &mut ws.tu);
                for i in 0..n_u {
                    schur[(i, k)] -= ws.tu[i];
                }
            }
            self.ws = ws;
            self.schur_lu.refactor(&schur).map_err(|e| match e {
                Error::Singular { index, .. } => Error::Singular { what: "input Schur complement", stage: 0, index },
                other => other,
            })?;
        }
        Ok(())
    }

    /// `E y = rhs` (or `Eᵀ y = rhs`).
    fn solve_e(&self, transpose: bool, rhs: &[T], y: &mut [T], scratch: &mut [T]) -> Result<()> {
        match (&self.band, self.cfg.mode) {
            (Some(lu), LowerMode::Direct) => {
                y.copy_from_slice(rhs);
                if transpose {
                    lu.solve_transpose_in_place(y);
                } else {
                    lu.solve_in_place(y);
                }
                Ok(())
            }
            _ => {
                let iters = self.cfg.inner_jacobi_iters;
                if transpose {
                    jacobi_linear_solve(&self.e_diag, |v, o| self.e_off.apply_t(v, o), rhs, iters, y, scratch)
                } else {
                    jacobi_linear_solve(&self.e_diag, |v, o| self.e_off.apply(v, o), rhs, iters, y, scratch)
                }
            }
        }
    }

    /// `F_x y = b` (`transpose = false`) or `F_xᵀ y = b`.
    fn solve_fx(&self, transpose: bool, b: &[T], y: &mut [T], te: &mut [T], te2: &mut [T], te3: &mut [T]) -> Result<()> {
        match self.split {
            None => self.solve_e(transpose, b, y, te),
            Some(n_s) => {
                let h = self.h;
                let (b6, b7) = b.split_at(n_s);
                let (y6, y7) = y.split_at_mut(n_s);
                if !transpose {
                    // E y₇ = b₇ + h g_W b₆, y₆ = h y₇ − b₆
                    self.g_w.apply(b6, te2);
                    for r in 0..n_s {
                        te2[r] = b7[r] + h * te2[r];
                    }
                    self.solve_e(false, te2, y7, te)?;
                    for r in 0..n_s {
                        y6[r] = h * y7[r] - b6[r];
                    }
                } else {
                    // Eᵀ q = c₇ + h c₆, p = h g_Wᵀ q − c₆
                    for r in 0..n_s {
                        te2[r] = b7[r] + h * b6[r];
                    }
                    self.solve_e(true, te2, y7, te)?;
                    self.g_w.apply_t(y7, te3);
                    for r in 0..n_s {
                        y6[r] = h * te3[r] - b6[r];
                    }
                }
                Ok(())
            }
        }
    }

    /// `K [v₄; v₅] = [b₄; b₅]` on the workspace.
    fn inner_solve_ws(&self, block: &StageBlock<T>, ws: &mut Workspace<T>) -> Result<()> {
        self.solve_fx(false, &ws.b4, &mut ws.v5, &mut ws.te, &mut ws.te2, &mut ws.te3)?;
        ws.tx.copy_from_slice(&ws.b5);
        block.hess.add_xx(-block.h, &ws.v5, &mut ws.tx);
        self.solve_fx(true, &ws.tx, &mut ws.v4, &mut ws.te, &mut ws.te2, &mut ws.te3)
    }

    /// Public form of the inner solve: returns `(v₄, v₅)` with
    /// `F_x v₅ = b₄`, `F_xᵀ v₄ = b₅ − A_xx v₅`. Requires a structured mode.
    pub fn inner_solve(&mut self, block: &StageBlock<T>, b4: &[T], b5: &[T]) -> Result<(Vec<T>, Vec<T>)> {
        let mut ws = std::mem::replace(&mut self.ws, Workspace::new(0, 0, 0));
        ws.b4.copy_from_slice(b4);
        ws.b5.copy_from_slice(b5);
        let r = self.inner_solve_ws(block, &mut ws);
        let out = (ws.v4.clone(), ws.v5.clone());
        self.ws = ws;
        r.map(|_| out)
    }

    /// `out = F_uᵀ p₄ + A_ux p₅`.
    fn apply_c(&self, block: &StageBlock<T>, p4: &[T], p5: &[T], out: &mut [T]) {
        out.iter_mut().for_each(|o| *o = T::zero());
        block.lin.gemv_u_t(block.h, p4, out);
        block.hess.add_ux(block.h, p5, out);
    }

    /// `b₄ = F_u v₃ − b₁`, `b₅ = A_xu v₃ − b₂` (scaled by `sign`).
    fn load_b_minus(block: &StageBlock<T>, ws: &mut Workspace<T>, sign: T) {
        let h = block.h;
        for j in 0..ws.b4.len() {
            ws.b4[j] = -sign * ws.b1[j];
            ws.b5[j] = -sign * ws.b2[j];
        }
        block.lin.gemv_u(sign * h, &ws.v3, &mut ws.b4);
        block.hess.add_xu(sign * h, &ws.v3, &mut ws.b5);
    }

    /// Solves `Dᵢ out = rhs`; both vectors in the `(x, u, λ)` layout.
    pub fn solve(&mut self, block: &StageBlock<T>, rhs: &[T], out: &mut [T]) -> Result<()> {
        if self.cfg.mode == LowerMode::Exact {
            out.copy_from_slice(rhs);
            self.dense_lu.solve_in_place(out);
            return Ok(());
        }
        let (n_x, n_u) = (self.n_x, self.n_u);
        let mut ws = std::mem::replace(&mut self.ws, Workspace::new(0, 0, 0));
        let r = self.solve_structured(block, rhs, &mut ws);
        if r.is_ok() {
            out[..n_x].copy_from_slice(&ws.v2);
            out[n_x..n_x + n_u].copy_from_slice(&ws.v3);
            out[n_x + n_u..].copy_from_slice(&ws.v1);
        }
        self.ws = ws;
        r
    }

    fn solve_structured(&self, block: &StageBlock<T>, rhs: &[T], ws: &mut Workspace<T>) -> Result<()> {
        let (n_x, n_u) = (self.n_x, self.n_u);
        ws.b1.copy_from_slice(&rhs[..n_x]);
        ws.b3.copy_from_slice(&rhs[n_x..n_x + n_u]);
        ws.b2.copy_from_slice(&rhs[n_x + n_u..]);

        if self.cfg.mode == LowerMode::Direct {
            // v₃ = S⁻¹ (b₃ − C K⁻¹ [b₁; b₂])
            ws.b4.copy_from_slice(&ws.b1);
            ws.b5.copy_from_slice(&ws.b2);
            self.inner_solve_ws(block, ws)?;
            self.apply_c(block, &ws.v4, &ws.v5, &mut ws.tu);
            for k in 0..n_u {
                ws.v3[k] = ws.b3[k] - ws.tu[k];
            }
            self.schur_lu.solve_in_place(&mut ws.v3);
        } else {
            ws.v3.copy_from_slice(&ws.b3);
            self.a_uu_lu.solve_in_place(&mut ws.v3);
            for _ in 0..self.cfg.schur_iters {
                Self::load_b_minus(block, ws, T::one());
                self.inner_solve_ws(block, ws)?;
                self.apply_c(block, &ws.v4, &ws.v5, &mut ws.tu);
                for k in 0..n_u {
                    ws.v3[k] = ws.b3[k] + ws.tu[k];
                }
                self.a_uu_lu.solve_in_place(&mut ws.v3);
            }
        }
        // [v₁; v₂] = K⁻¹ ([b₁; b₂] − B v₃)
        Self::load_b_minus(block, ws, -T::one());
        self.inner_solve_ws(block, ws)?;
        ws.v1.copy_from_slice(&ws.v4);
        ws.v2.copy_from_slice(&ws.v5);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::small_plate;

    fn plate_block() -> StageBlock<f64> {
        let b = small_plate(5, vec![1, 3], 4, 20.0, 0.5).unwrap();
        let traj = b.initial_trajectory();
        let mut s = traj.stage(1).to_vec();
        // perturb so the Hessian terms are not trivial
        for (k, v) in s.iter_mut().enumerate() {
            *v += 0.3 * ((k * 7 % 11) as f64 - 5.0);
        }
        b.prob.stage_jacobian(1, traj.x(0), &s, Some(traj.lam(2))).unwrap()
    }

    fn rhs(n: usize) -> Vec<f64> {
        (0..n).map(|k| ((k * 13 % 17) as f64 - 8.0) / 8.0).collect()
    }

    fn solve(block: &StageBlock<f64>, cfg: StageSolveConfig) -> Vec<f64> {
        let mut s = StageSolver::for_block(block, cfg);
        s.prepare(block).unwrap();
        let r = rhs(block.len());
        let mut out = vec![0.0; block.len()];
        s.solve(block, &r, &mut out).unwrap();
        out
    }

    fn max_gap(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn jacobi_sweeps_converge_on_a_dominant_system() {
        // 4 on the diagonal, -1 on both neighbours
        let n = 8;
        let diag = vec![4.0; n];
        let off = |v: &[f64], out: &mut [f64]| {
            for i in 0..n {
                out[i] = -(if i > 0 { v[i - 1] } else { 0.0 }) - (if i + 1 < n { v[i + 1] } else { 0.0 });
            }
        };
        let b = vec![1.0; n];
        let (mut v, mut scratch) = (vec![0.0; n], vec![0.0; n]);
        jacobi_linear_solve(&diag, off, &b, 60, &mut v, &mut scratch).unwrap();
        let mut r = vec![0.0; n];
        off(&v, &mut r);
        let res = (0..n).map(|i| (4.0 * v[i] + r[i] - 1.0).abs()).fold(0.0, f64::max);
        assert!(res < 1e-12, "{res}");
    }

    #[test]
    fn zero_diagonal_is_reported() {
        let (mut v, mut s) = (vec![0.0; 2], vec![0.0; 2]);
        let err = jacobi_linear_solve(&[1.0, 0.0], |_, o| o.fill(0.0), &[1.0, 1.0], 1, &mut v, &mut s);
        assert!(matches!(err, Err(Error::Singular { index: 1, .. })));
    }

    #[test]
    fn direct_mode_matches_dense_lu() {
        let block = plate_block();
        let exact = solve(&block, StageSolveConfig::exact());
        let direct = solve(&block, StageSolveConfig::direct());
        let scale = exact.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max_gap(&exact, &direct) < 1e-10 * scale, "{}", max_gap(&exact, &direct));
    }

    #[test]
    fn iterative_mode_approaches_the_exact_solve() {
        let block = plate_block();
        let exact = solve(&block, StageSolveConfig::exact());
        let gap = |inner, schur| {
            let cfg = StageSolveConfig { inner_jacobi_iters: inner, schur_iters: schur, mode: LowerMode::Iterative };
            max_gap(&exact, &solve(&block, cfg))
        };
        let coarse = gap(2, 2);
        let fine = gap(40, 40);
        assert!(fine < 1e-8, "{fine}");
        assert!(fine < coarse);
    }

    #[test]
    fn default_is_two_sweeps() {
        let c = StageSolveConfig::default();
        assert_eq!((c.inner_jacobi_iters, c.schur_iters, c.mode), (2, 2, LowerMode::Iterative));
        let bad = StageSolveConfig { inner_jacobi_iters: 0, ..c };
        assert!(bad.validate().is_err());
        assert!(StageSolveConfig { inner_jacobi_iters: 0, ..StageSolveConfig::exact() }.validate().is_ok());
    }
}
