use crate::error::{Error, Result};
use crate::Real;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> DenseMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// `out = self * v`.
    pub fn matvec(&self, v: &[T], out: &mut [T]) {
        debug_assert_eq!(v.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.row(i).iter().zip(v).map(|(a, b)| *a * *b).sum();
        }
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, rhs: &Self) -> Self {
        assert_eq!(self.cols, rhs.rows, "matmul dimension mismatch");
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == T::zero() {
                    continue;
                }
                let src = rhs.row(k);
                for (o, b) in out.row_mut(i).iter_mut().zip(src) {
                    *o += a * *b;
                }
            }
        }
        out
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, x| m.max(x.abs()))
    }

    pub fn map<U: Real>(&self, f: impl Fn(T) -> U) -> DenseMatrix<U> {
        DenseMatrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|x| f(*x)).collect() }
    }
}

impl<T> std::ops::Index<(usize, usize)> for DenseMatrix<T> {
    type Output = T;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for DenseMatrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

/// LU factorization with partial (row) pivoting, `P A = L U`.
///
/// Pivots are stored as the sequence of row interchanges performed at each
/// elimination step.
#[derive(Debug, Clone)]
pub struct DenseLu<T> {
    n: usize,
    lu: Vec<T>,
    piv: Vec<usize>,
}

impl<T: Real> DenseLu<T> {
    /// Allocates storage for an `n x n` factorization.
    pub fn with_size(n: usize) -> Self {
        Self { n, lu: vec![T::zero(); n * n], piv: vec![0; n] }
    }

    pub fn factor(a: &DenseMatrix<T>) -> Result<Self> {
        let mut lu = Self::with_size(a.rows());
        lu.refactor(a)?;
        Ok(lu)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Factors `a` in place of the previous factorization (no allocation when
    /// the size matches).
    pub fn refactor(&mut self, a: &DenseMatrix<T>) -> Result<()> {
        if a.rows() != a.cols() {
            return Err(Error::Dimension(format!("LU of a {}x{} matrix", a.rows(), a.cols())));
        }
        if a.rows() != self.n {
            *self = Self::with_size(a.rows());
        }
        self.lu.copy_from_slice(a.as_slice());
        self.factor_in_place()
    }

    fn factor_in_place(&mut self) -> Result<()> {
        let n = self.n;
        let a = &mut self.lu;
        for k in 0..n {
            let mut p = k;
            let mut best = a[k * n + k].abs();
            for i in k + 1..n {
                let v = a[i * n + k].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            self.piv[k] = p;
            if !(best > T::zero()) || !best.is_finite() {
                return Err(Error::Singular { what: "dense LU pivot", stage: 0, index: k });
            }
            if p != k {
                for j in 0..n {
                    a.swap(k * n + j, p * n + j);
                }
            }
            let d = a[k * n + k];
            let (top, bottom) = a.split_at_mut((k + 1) * n);
            let pivot_row = &top[k * n + k + 1..k * n + n];
            for row in bottom.chunks_exact_mut(n) {
                let l = row[k] / d;
                row[k] = l;
                if l != T::zero() {
                    for (x, y) in row[k + 1..].iter_mut().zip(pivot_row) {
                        *x -= l * *y;
                    }
                }
            }
        }
        Ok(())
    }

    /// Fraction of structurally nonzero entries in the combined `L + U`
    /// storage.
    pub fn factor_density(&self) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        let nnz = self.lu.iter().filter(|v| **v != T::zero()).count();
        nnz as f64 / (self.n * self.n) as f64
    }

    /// Solves `A x = b` in place.
    pub fn solve_in_place(&self, b: &mut [T]) {
        let n = self.n;
        debug_assert_eq!(b.len(), n);
        let a = &self.lu;
        for k in 0..n {
            b.swap(k, self.piv[k]);
        }
        for k in 0..n {
            let bk = b[k];
            if bk != T::zero() {
                for i in k + 1..n {
                    b[i] -= a[i * n + k] * bk;
                }
            }
        }
        for k in (0..n).rev() {
            let bk = b[k] / a[k * n + k];
            b[k] = bk;
            if bk != T::zero() {
                for i in 0..k {
                    b[i] -= a[i * n + k] * bk;
                }
            }
        }
    }

    /// Solves `A X = B` for a row-major `n x m` right-hand side, computing only
    /// rows `first_row..n` of `X` (the remaining rows are left in an
    /// unspecified state).
    pub fn solve_many_tail(&self, b: &mut [T], m: usize, first_row: usize) {
        let n = self.n;
        debug_assert_eq!(b.len(), n * m);
        let a = &self.lu;
        for k in 0..n {
            let p = self.piv[k];
            if p != k {
                for j in 0..m {
                    b.swap(k * m + j, p * m + j);
                }
            }
        }
        for k in 0..n {
            let (top, bottom) = b.split_at_mut((k + 1) * m);
            let src = &top[k * m..];
            if src.iter().all(|x| *x == T::zero()) {
                continue;
            }
            for (r, row) in bottom.chunks_exact_mut(m).enumerate() {
                let l = a[(k + 1 + r) * n + k];
                if l != T::zero() {
                    for (x, y) in row.iter_mut().zip(src) {
                        *x -= l * *y;
                    }
                }
            }
        }
        for k in (first_row..n).rev() {
            let d = T::one() / a[k * n + k];
            let (top, rest) = b.split_at_mut(k * m);
            let src = &mut rest[..m];
            src.iter_mut().for_each(|x| *x *= d);
            for i in first_row..k {
                let u = a[i * n + k];
                if u != T::zero() {
                    for (x, y) in top[i * m..(i + 1) * m].iter_mut().zip(src.iter()) {
                        *x -= u * *y;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(n: usize, rng: &mut ChaCha8Rng) -> DenseMatrix<f64> {
        let data = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        DenseMatrix::from_row_major(n, n, data).unwrap()
    }

    #[test]
    fn lu_solve_recovers_known_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [1, 2, 5, 17] {
            let a = random_matrix(n, &mut rng);
            let x: Vec<f64> = (0..n).map(|i| i as f64 - 2.5).collect();
            let mut b = vec![0.0; n];
            a.matvec(&x, &mut b);
            let lu = DenseLu::factor(&a).unwrap();
            lu.solve_in_place(&mut b);
            for (p, q) in b.iter().zip(&x) {
                assert!((p - q).abs() < 1e-9, "{p} vs {q}");
            }
        }
    }

    #[test]
    fn singular_matrix_reports_pivot() {
        let a = DenseMatrix::from_row_major(2, 2, vec![1.0, 2.0, 2.0, 4.0]).unwrap();
        match DenseLu::factor(&a) {
            Err(Error::Singular { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected singular, got {other:?}"),
        }
    }

    #[test]
    fn multi_rhs_tail_matches_single_solves() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 12;
        let m = 4;
        let a = random_matrix(n, &mut rng);
        let lu = DenseLu::factor(&a).unwrap();
        let rhs: Vec<f64> = (0..n * m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut many = rhs.clone();
        lu.solve_many_tail(&mut many, m, 7);
        for j in 0..m {
            let mut col: Vec<f64> = (0..n).map(|i| rhs[i * m + j]).collect();
            lu.solve_in_place(&mut col);
            for i in 7..n {
                assert!((col[i] - many[i * m + j]).abs() < 1e-10);
            }
        }
    }
}
