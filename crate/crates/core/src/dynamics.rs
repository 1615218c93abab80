//! Finite-dimensional dynamics `ẋ = f(u, x)` with matrix-free derivatives.
//!
//! Derivatives are stored per row as index lists into the stacked variable
//! vector `(x, u)` (global id `j < n_x` is `x_j`, otherwise `u_{j - n_x}`),
//! with coefficient values refreshed at every linearization point.

use std::sync::Arc;

use crate::linalg::DenseMatrix;
use crate::Real;

/// Sparsity of `∇f`: for each row, the global ids it depends on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowPattern {
    n_x: usize,
    n_u: usize,
    offsets: Vec<usize>,
    ids: Vec<usize>,
}

impl RowPattern {
    pub fn new(n_x: usize, n_u: usize, rows: &[Vec<usize>]) -> Self {
        assert_eq!(rows.len(), n_x, "one pattern row per state");
        let mut offsets = Vec::with_capacity(n_x + 1);
        let mut ids = Vec::new();
        offsets.push(0);
        for r in rows {
            debug_assert!(r.iter().all(|&id| id < n_x + n_u));
            ids.extend_from_slice(r);
            offsets.push(ids.len());
        }
        Self { n_x, n_u, offsets, ids }
    }

    pub fn dense(n_x: usize, n_u: usize) -> Self {
        let all: Vec<usize> = (0..n_x + n_u).collect();
        Self::new(n_x, n_u, &vec![all; n_x])
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn n_u(&self) -> usize {
        self.n_u
    }

    pub fn nnz(&self) -> usize {
        self.ids.len()
    }

    #[inline]
    pub fn range(&self, row: usize) -> std::ops::Range<usize> {
        self.offsets[row]..self.offsets[row + 1]
    }

    #[inline]
    pub fn row(&self, row: usize) -> &[usize] {
        &self.ids[self.range(row)]
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }
}

/// One second-derivative entry `∂²f_row / ∂z_a ∂z_b` (stored once per
/// unordered pair).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HessEntry<T> {
    pub row: usize,
    pub a: usize,
    pub b: usize,
    pub val: T,
}

/// Value, first and second derivatives of `f` at one point.
#[derive(Debug, Clone)]
pub struct Linearization<T> {
    pattern: Arc<RowPattern>,
    pub f: Vec<T>,
    /// `∂f_row/∂z_id`, aligned with [`RowPattern::ids`].
    pub grad: Vec<T>,
    pub hess: Vec<HessEntry<T>>,
}

impl<T: Real> Linearization<T> {
    pub fn new(pattern: Arc<RowPattern>) -> Self {
        let n = pattern.n_x();
        let nnz = pattern.nnz();
        Self { pattern, f: vec![T::zero(); n], grad: vec![T::zero(); nnz], hess: Vec::new() }
    }

    pub fn pattern(&self) -> &RowPattern {
        &self.pattern
    }

    pub fn n_x(&self) -> usize {
        self.pattern.n_x
    }

    pub fn n_u(&self) -> usize {
        self.pattern.n_u
    }

    /// `out += α ∇ₓf · v`.
    pub fn gemv_x(&self, alpha: T, v: &[T], out: &mut [T]) {
        let p = &*self.pattern;
        for (r, o) in out.iter_mut().enumerate() {
            let mut s = T::zero();
            for k in p.range(r) {
                let id = p.ids[k];
                if id < p.n_x {
                    s += self.grad[k] * v[id];
                }
            }
            *o += alpha * s;
        }
    }

    /// `out += α (∇ₓf)ᵀ · w`.
    pub fn gemv_x_t(&self, alpha: T, w: &[T], out: &mut [T]) {
        let p = &*self.pattern;
        for (r, &wr) in w.iter().enumerate() {
            let aw = alpha * wr;
            for k in p.range(r) {
                let id = p.ids[k];
                if id < p.n_x {
                    out[id] += self.grad[k] * aw;
                }
            }
        }
    }

    /// `out += α ∇ᵤf · v`.
    pub fn gemv_u(&self, alpha: T, v: &[T], out: &mut [T]) {
        let p = &*self.pattern;
        for (r, o) in out.iter_mut().enumerate() {
            let mut s = T::zero();
            for k in p.range(r) {
                let id = p.ids[k];
                if id >= p.n_x {
                    s += self.grad[k] * v[id - p.n_x];
                }
            }
            *o += alpha * s;
        }
    }

    /// `out += α (∇ᵤf)ᵀ · w`.
    pub fn gemv_u_t(&self, alpha: T, w: &[T], out: &mut [T]) {
        let p = &*self.pattern;
        for (r, &wr) in w.iter().enumerate() {
            let aw = alpha * wr;
            for k in p.range(r) {
                let id = p.ids[k];
                if id >= p.n_x {
                    out[id - p.n_x] += self.grad[k] * aw;
                }
            }
        }
    }

    /// `out = ∇ₓf · v`.
    pub fn apply_dfdx(&self, v: &[T], out: &mut [T]) {
        zero(out);
        self.gemv_x(T::one(), v, out);
    }

    /// `out = (∇ₓf)ᵀ · w`.
    pub fn apply_dfdx_t(&self, w: &[T], out: &mut [T]) {
        zero(out);
        self.gemv_x_t(T::one(), w, out);
    }

    /// `out = ∇ᵤf · v`.
    pub fn apply_dfdu(&self, v: &[T], out: &mut [T]) {
        zero(out);
        self.gemv_u(T::one(), v, out);
    }

    /// `out = (∇ᵤf)ᵀ · w`.
    pub fn apply_dfdu_t(&self, w: &[T], out: &mut [T]) {
        zero(out);
        self.gemv_u_t(T::one(), w, out);
    }

    /// Diagonal of `∇ₓf`.
    pub fn diag_dfdx(&self, out: &mut [T]) {
        let p = &*self.pattern;
        for (r, o) in out.iter_mut().enumerate() {
            *o = T::zero();
            for k in p.range(r) {
                if p.ids[k] == r {
                    *o += self.grad[k];
                }
            }
        }
    }

    /// `[out_x; out_u] = ∇²_{(x,u)}(λᵀf) · [vx; vu]`.
    pub fn hess_apply(&self, lambda: &[T], vx: &[T], vu: &[T], out_x: &mut [T], out_u: &mut [T]) {
        let n_x = self.pattern.n_x;
        out_x.iter_mut().for_each(|o| *o = T::zero());
        out_u.iter_mut().for_each(|o| *o = T::zero());
        let get = |id: usize| if id < n_x { vx[id] } else { vu[id - n_x] };
        for e in &self.hess {
            let w = lambda[e.row] * e.val;
            let (va, vb) = (get(e.a), get(e.b));
            let mut put = |id: usize, v: T| {
                if id < n_x {
                    out_x[id] += v;
                } else {
                    out_u[id - n_x] += v;
                }
            };
            put(e.a, w * vb);
            if e.a != e.b {
                put(e.b, w * va);
            }
        }
    }

    /// Dense `∇ₓf` and `∇ᵤf` (analysis and tests only).
    pub fn dense_jacobians(&self) -> (DenseMatrix<T>, DenseMatrix<T>) {
        let p = &*self.pattern;
        let mut jx = DenseMatrix::zeros(p.n_x, p.n_x);
        let mut ju = DenseMatrix::zeros(p.n_x, p.n_u);
        for r in 0..p.n_x {
            for k in p.range(r) {
                let id = p.ids[k];
                if id < p.n_x {
                    jx[(r, id)] += self.grad[k];
                } else {
                    ju[(r, id - p.n_x)] += self.grad[k];
                }
            }
        }
        (jx, ju)
    }
}

#[inline]
pub(crate) fn zero<T: Real>(v: &mut [T]) {
    v.iter_mut().for_each(|x| *x = T::zero());
}

/// A finite-dimensional control system `ẋ = f(u, x)`.
pub trait Dynamics<T: Real>: Send + Sync {
    fn n_x(&self) -> usize;
    fn n_u(&self) -> usize;
    fn pattern(&self) -> &Arc<RowPattern>;
    fn eval(&self, u: &[T], x: &[T], f: &mut [T]);
    /// Fills value, gradients and second derivatives at `(u, x)`.
    fn linearize(&self, u: &[T], x: &[T], out: &mut Linearization<T>);

    /// For systems of the form `x = (W, Ẇ)`, `f = (Ẇ, g)`: the length of `W`.
    fn second_order_split(&self) -> Option<usize> {
        None
    }

    fn new_linearization(&self) -> Linearization<T> {
        Linearization::new(Arc::clone(self.pattern()))
    }
}

/// Dense affine dynamics `f = A x + B u + c + κ ⊙ x³` used for small test and
/// analysis problems. The optional diagonal cubic term makes the Hessian
/// nonzero.
#[derive(Debug, Clone)]
pub struct DenseDynamics<T> {
    pub a: DenseMatrix<T>,
    pub b: DenseMatrix<T>,
    pub c: Vec<T>,
    pub cubic: Vec<T>,
    pattern: Arc<RowPattern>,
}

impl<T: Real> DenseDynamics<T> {
    pub fn new(a: DenseMatrix<T>, b: DenseMatrix<T>, c: Vec<T>, cubic: Vec<T>) -> Self {
        let n_x = a.rows();
        assert_eq!(a.cols(), n_x);
        assert_eq!(b.rows(), n_x);
        assert_eq!(c.len(), n_x);
        assert_eq!(cubic.len(), n_x);
        let pattern = Arc::new(RowPattern::dense(n_x, b.cols()));
        Self { a, b, c, cubic, pattern }
    }

    pub fn linear(a: DenseMatrix<T>, b: DenseMatrix<T>) -> Self {
        let n = a.rows();
        Self::new(a, b, vec![T::zero(); n], vec![T::zero(); n])
    }
}

impl<T: Real> Dynamics<T> for DenseDynamics<T> {
    fn n_x(&self) -> usize {
        self.a.rows()
    }

    fn n_u(&self) -> usize {
        self.b.cols()
    }

    fn pattern(&self) -> &Arc<RowPattern> {
        &self.pattern
    }

    fn eval(&self, u: &[T], x: &[T], f: &mut [T]) {
        for r in 0..self.n_x() {
            let ax: T = self.a.row(r).iter().zip(x).map(|(p, q)| *p * *q).sum();
            let bu: T = self.b.row(r).iter().zip(u).map(|(p, q)| *p * *q).sum();
            f[r] = ax + bu + self.c[r] + self.cubic[r] * x[r].powi(3);
        }
    }

    fn linearize(&self, u: &[T], x: &[T], out: &mut Linearization<T>) {
        let (n_x, n_u) = (self.n_x(), self.n_u());
        self.eval(u, x, &mut out.f);
        out.hess.clear();
        let three = T::lit(3.0);
        let six = T::lit(6.0);
        for r in 0..n_x {
            let base = r * (n_x + n_u);
            out.grad[base..base + n_x].copy_from_slice(self.a.row(r));
            out.grad[base + r] += three * self.cubic[r] * x[r] * x[r];
            out.grad[base + n_x..base + n_x + n_u].copy_from_slice(self.b.row(r));
            if self.cubic[r] != T::zero() {
                out.hess.push(HessEntry { row: r, a: r, b: r, val: six * self.cubic[r] * x[r] });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_dynamics_operators_are_adjoint() {
        let a = DenseMatrix::from_row_major(2, 2, vec![1.0, 2.0, -0.5, 0.3]).unwrap();
        let b = DenseMatrix::from_row_major(2, 1, vec![0.7, -1.1]).unwrap();
        let sys = DenseDynamics::new(a, b, vec![0.1, 0.2], vec![0.5, 0.0]);
        let mut lin = sys.new_linearization();
        sys.linearize(&[0.3], &[1.5, -0.4], &mut lin);
        let (v, w) = ([0.2, -1.3], [0.9, 0.4]);
        let mut jv = [0.0; 2];
        let mut jtw = [0.0; 2];
        lin.apply_dfdx(&v, &mut jv);
        lin.apply_dfdx_t(&w, &mut jtw);
        let lhs: f64 = w.iter().zip(&jv).map(|(a, b)| a * b).sum();
        let rhs: f64 = v.iter().zip(&jtw).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-14);
        let mut d = [0.0; 2];
        lin.diag_dfdx(&mut d);
        assert!((d[0] - (1.0 + 1.5 * 1.5 * 1.5)).abs() < 1e-14);
        assert_eq!(d[1], 0.3);
    }
}
