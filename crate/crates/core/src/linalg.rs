//! Dense helpers. The small eigen/inverse routines are `f64`; the blocked
//! Cholesky factor is generic and runs on GEMM.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2};

use crate::error::{Error, Result};
use crate::scalar::Real;

const BLOCK: usize = 96;

/// Lower Cholesky factor of a symmetric positive definite matrix.
#[derive(Clone, Debug)]
pub struct Cholesky<T> {
    l: Array2<T>,
}

impl<T: Real> Cholesky<T> {
    /// Right-looking blocked factorization; only the lower triangle of `a`
    /// is read.
    pub fn new(a: &Array2<T>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::DimensionMismatch("Cholesky needs a square matrix".into()));
        }
        let mut l = a.clone();
        let mut k0 = 0;
        while k0 < n {
            let k1 = (k0 + BLOCK).min(n);
            // diagonal block
            for j in k0..k1 {
                let mut d = l[[j, j]];
                for p in k0..j {
                    d -= l[[j, p]] * l[[j, p]];
                }
                if !(d > T::zero()) {
                    return Err(Error::Numerical(format!("matrix is not positive definite (pivot {j})")));
                }
                let d = d.sqrt();
                l[[j, j]] = d;
                for i in j + 1..k1 {
                    let mut x = l[[i, j]];
                    for p in k0..j {
                        x -= l[[i, p]] * l[[j, p]];
                    }
                    l[[i, j]] = x / d;
                }
            }
            if k1 < n {
                // panel: rows below solve X L_kk^T = B
                for i in k1..n {
                    for j in k0..k1 {
                        let mut x = l[[i, j]];
                        for p in k0..j {
                            x -= l[[i, p]] * l[[j, p]];
                        }
                        l[[i, j]] = x / l[[j, j]];
                    }
                }
                let panel = l.slice(s![k1.., k0..k1]).to_owned();
                let mut trail = l.slice_mut(s![k1.., k1..]);
                general_mat_mul(-T::one(), &panel, &panel.t(), T::one(), &mut trail);
            }
            k0 = k1;
        }
        for i in 0..n {
            for j in i + 1..n {
                l[[i, j]] = T::zero();
            }
        }
        Ok(Self { l })
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn factor(&self) -> &Array2<T> {
        &self.l
    }

    /// Replaces every row `x` of `b` by `x A^{-1}`.
    pub fn solve_rows(&self, b: &mut Array2<T>) {
        let n = self.dim();
        assert_eq!(b.ncols(), n, "right-hand side width");
        let l = &self.l;
        // Z L^T = B, forward over column blocks
        let mut k0 = 0;
        while k0 < n {
            let k1 = (k0 + BLOCK).min(n);
            if k0 > 0 {
                let done = b.slice(s![.., ..k0]).to_owned();
                let lk = l.slice(s![k0..k1, ..k0]);
                let mut cur = b.slice_mut(s![.., k0..k1]);
                general_mat_mul(-T::one(), &done, &lk.t(), T::one(), &mut cur);
            }
            for mut row in b.rows_mut() {
                for j in k0..k1 {
                    let mut x = row[j];
                    for p in k0..j {
                        x -= row[p] * l[[j, p]];
                    }
                    row[j] = x / l[[j, j]];
                }
            }
            k0 = k1;
        }
        // Y L = Z, backward over column blocks
        let mut k1 = n;
        while k1 > 0 {
            let k0 = k1.saturating_sub(BLOCK);
            if k1 < n {
                let done = b.slice(s![.., k1..]).to_owned();
                let lk = l.slice(s![k1.., k0..k1]);
                let mut cur = b.slice_mut(s![.., k0..k1]);
                general_mat_mul(-T::one(), &done, &lk, T::one(), &mut cur);
            }
            for mut row in b.rows_mut() {
                for j in (k0..k1).rev() {
                    let mut x = row[j];
                    for p in j + 1..k1 {
                        x -= row[p] * l[[p, j]];
                    }
                    row[j] = x / l[[j, j]];
                }
            }
            k1 = k0;
        }
    }
}

pub fn to_na(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

pub fn from_na(a: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.nrows(), a.ncols()), |(i, j)| a[(i, j)])
}

/// Eigenpairs of a symmetric matrix, sorted ascending. Columns of the
/// returned matrix are eigenvectors.
pub fn sym_eigen(a: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = a.nrows();
    let mut m = to_na(a);
    // symmetrize against roundoff in the caller
    for i in 0..n {
        for j in 0..i {
            let s = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = s;
            m[(j, i)] = s;
        }
    }
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[x].total_cmp(&eig.eigenvalues[y]));
    let vals = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vecs = Array2::from_shape_fn((n, n), |(i, j)| eig.eigenvectors[(i, order[j])]);
    (vals, vecs)
}

pub fn min_eigenvalue(a: &Array2<f64>) -> f64 {
    sym_eigen(a).0[0]
}

pub fn max_eigenvalue(a: &Array2<f64>) -> f64 {
    *sym_eigen(a).0.last().expect("non-empty matrix")
}

pub fn inverse(a: &Array2<f64>) -> Result<Array2<f64>> {
    to_na(a)
        .try_inverse()
        .map(|m| from_na(&m))
        .ok_or_else(|| Error::Numerical("singular matrix".into()))
}

/// Singular values, descending.
pub fn singular_values(a: &Array2<f64>) -> Vec<f64> {
    let svd = to_na(a).svd(false, false);
    let mut s: Vec<f64> = svd.singular_values.iter().copied().collect();
    s.sort_by(|x, y| y.total_cmp(x));
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn eigen_sorted() {
        let a = array![[2.0, 1.0], [1.0, 2.0]];
        let (v, q) = sym_eigen(&a);
        assert!((v[0] - 1.0).abs() < 1e-14 && (v[1] - 3.0).abs() < 1e-14);
        assert!((q[[0, 0]] + q[[1, 0]]).abs() < 1e-14);
        let inv = inverse(&a).unwrap();
        assert!((inv[[0, 0]] - 2.0 / 3.0).abs() < 1e-14);
        assert!(inverse(&array![[1.0, 2.0], [2.0, 4.0]]).is_err());
        let s = singular_values(&array![[3.0, 0.0], [0.0, -4.0]]);
        assert_eq!(s, vec![4.0, 3.0]);
    }

    #[test]
    fn blocked_cholesky_solves() {
        let n = 250;
        let b = Array2::from_shape_fn((n, n), |(i, j)| ((i * 7 + j * 13) % 17) as f64 / 17.0 - 0.5);
        let mut a = b.t().dot(&b);
        for i in 0..n {
            a[[i, i]] += n as f64;
        }
        let ch = Cholesky::new(&a).unwrap();
        let l = ch.factor();
        let r = l.dot(&l.t()) - &a;
        assert!(r.iter().fold(0.0f64, |m, x| m.max(x.abs())) < 1e-10);
        let x = Array2::from_shape_fn((3, n), |(i, j)| (i + j) as f64 * 0.01);
        let mut y = x.dot(&a);
        ch.solve_rows(&mut y);
        let e = (&y - &x).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(e < 1e-12, "{e}");
        let mut neg = a.clone();
        neg[[5, 5]] = -1.0;
        assert!(Cholesky::new(&neg).is_err());
    }
}
