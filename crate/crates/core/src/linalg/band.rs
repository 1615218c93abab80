use crate::error::{Error, Result};
use crate::Real;

/// Square band matrix in LAPACK general-band layout with room for pivoting
/// fill-in (`2 kl + ku + 1` stored diagonals, column-major).
#[derive(Debug, Clone)]
pub struct BandMatrix<T> {
    n: usize,
    kl: usize,
    ku: usize,
    ab: Vec<T>,
}

impl<T: Real> BandMatrix<T> {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        let ldab = 2 * kl + ku + 1;
        Self { n, kl, ku, ab: vec![T::zero(); ldab * n] }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn bandwidths(&self) -> (usize, usize) {
        (self.kl, self.ku)
    }

    #[inline]
    fn ldab(&self) -> usize {
        2 * self.kl + self.ku + 1
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> usize {
        debug_assert!(i + self.ku >= j && j + self.kl >= i, "({i},{j}) outside band");
        j * self.ldab() + self.kl + self.ku + i - j
    }

    pub fn clear(&mut self) {
        self.ab.iter_mut().for_each(|x| *x = T::zero());
    }

    pub fn add(&mut self, i: usize, j: usize, v: T) {
        let s = self.slot(i, j);
        self.ab[s] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        if i + self.ku < j || j + self.kl < i {
            return T::zero();
        }
        self.ab[self.slot(i, j)]
    }

    /// Factors in place (`gbtf2`-style partial pivoting).
    pub fn factor(self) -> Result<BandLu<T>> {
        let mut lu = BandLu { m: self, piv: Vec::new() };
        lu.factor_in_place()?;
        Ok(lu)
    }
}

/// LU factors of a [`BandMatrix`].
#[derive(Debug, Clone)]
pub struct BandLu<T> {
    m: BandMatrix<T>,
    piv: Vec<usize>,
}

impl<T: Real> BandLu<T> {
    /// Gives the storage back for reassembly, keeping the allocation.
    pub fn into_matrix(mut self) -> BandMatrix<T> {
        self.m.clear();
        self.m
    }

    pub fn dim(&self) -> usize {
        self.m.n
    }

    fn factor_in_place(&mut self) -> Result<()> {
        let n = self.m.n;
        let (kl, ku) = (self.m.kl, self.m.ku);
        let ld = self.m.ldab();
        let kv = kl + ku;
        let ab = &mut self.m.ab;
        self.piv.clear();
        self.piv.resize(n, 0);
        let mut ju = 0usize;
        for j in 0..n {
            let km = kl.min(n - 1 - j);
            let col = j * ld;
            let mut jp = 0;
            let mut best = ab[col + kv].abs();
            for i in 1..=km {
                let v = ab[col + kv + i].abs();
                if v > best {
                    best = v;
                    jp = i;
                }
            }
            self.piv[j] = j + jp;
            if !(best > T::zero()) || !best.is_finite() {
                return Err(Error::Singular { what: "band LU pivot", stage: 0, index: j });
            }
            ju = ju.max((j + ku + jp).min(n - 1));
            if jp != 0 {
                for c in j..=ju {
                    let a = c * ld + kv + j - c;
                    ab.swap(a, a + jp);
                }
            }
            if km > 0 {
                let inv = T::one() / ab[col + kv];
                for i in 1..=km {
                    ab[col + kv + i] *= inv;
                }
                for c in j + 1..=ju {
                    let top = c * ld + kv + j - c;
                    let u = ab[top];
                    if u == T::zero() {
                        continue;
                    }
                    for i in 1..=km {
                        let l = ab[col + kv + i];
                        ab[top + i] -= l * u;
                    }
                }
            }
        }
        Ok(())
    }

    /// Solves `A x = b` in place.
    pub fn solve_in_place(&self, b: &mut [T]) {
        let n = self.m.n;
        let (kl, ku) = (self.m.kl, self.m.ku);
        let ld = self.m.ldab();
        let kv = kl + ku;
        let ab = &self.m.ab;
        for j in 0..n {
            b.swap(j, self.piv[j]);
            let bj = b[j];
            if bj != T::zero() {
                for i in 1..=kl.min(n - 1 - j) {
                    b[j + i] -= ab[j * ld + kv + i] * bj;
                }
            }
        }
        for j in (0..n).rev() {
            let bj = b[j] / ab[j * ld + kv];
            b[j] = bj;
            if bj != T::zero() {
                for i in j.saturating_sub(kv)..j {
                    b[i] -= ab[j * ld + kv + i - j] * bj;
                }
            }
        }
    }

    /// Solves `Aᵀ x = b` in place.
    pub fn solve_transpose_in_place(&self, b: &mut [T]) {
        let n = self.m.n;
        let (kl, ku) = (self.m.kl, self.m.ku);
        let ld = self.m.ldab();
        let kv = kl + ku;
        let ab = &self.m.ab;
        for j in 0..n {
            let mut s = b[j];
            for i in j.saturating_sub(kv)..j {
                s -= ab[j * ld + kv + i - j] * b[i];
            }
            b[j] = s / ab[j * ld + kv];
        }
        for j in (0..n).rev() {
            let mut s = b[j];
            for i in 1..=kl.min(n - 1 - j) {
                s -= ab[j * ld + kv + i] * b[j + i];
            }
            b[j] = s;
            b.swap(j, self.piv[j]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{DenseLu, DenseMatrix};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_band(n: usize, kl: usize, ku: usize, seed: u64) -> (BandMatrix<f64>, DenseMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut band = BandMatrix::zeros(n, kl, ku);
        let mut dense = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in i.saturating_sub(kl)..(i + ku + 1).min(n) {
                // weak diagonal so that pivoting actually happens
                let v = rng.gen_range(-1.0..1.0) * if i == j { 0.05 } else { 1.0 };
                band.add(i, j, v);
                dense[(i, j)] = v;
            }
        }
        (band, dense)
    }

    #[test]
    fn band_solves_match_dense() {
        for (n, kl, ku, seed) in [(1, 0, 0, 1), (6, 1, 2, 2), (20, 4, 3, 3), (30, 7, 7, 4)] {
            let (band, dense) = random_band(n, kl, ku, seed);
            let blu = band.factor().unwrap();
            let dlu = DenseLu::factor(&dense).unwrap();
            let dlu_t = DenseLu::factor(&dense.transpose()).unwrap();
            let b: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7).sin()).collect();

            let (mut x1, mut x2) = (b.clone(), b.clone());
            blu.solve_in_place(&mut x1);
            dlu.solve_in_place(&mut x2);
            let (mut y1, mut y2) = (b.clone(), b.clone());
            blu.solve_transpose_in_place(&mut y1);
            dlu_t.solve_in_place(&mut y2);
            for i in 0..n {
                assert!((x1[i] - x2[i]).abs() < 1e-9 * (1.0 + x2[i].abs()), "n={n} i={i}");
                assert!((y1[i] - y2[i]).abs() < 1e-9 * (1.0 + y2[i].abs()), "n={n} i={i} (T)");
            }
        }
    }

    #[test]
    fn zero_column_is_singular() {
        let mut m = BandMatrix::<f64>::zeros(3, 1, 1);
        m.add(0, 0, 1.0);
        m.add(2, 2, 1.0);
        m.add(0, 1, 2.0);
        assert!(matches!(m.factor(), Err(Error::Singular { index: 1, .. })));
    }
}
