use super::Mat;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Cholesky factor `A = L Lᵀ` of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky<T> {
    l: Mat<T>,
}

impl<T: Real> Cholesky<T> {
    /// Factors `a`, reading only its lower triangle. Fails with
    /// [`Error::SingularSystem`] on a non-positive pivot.
    pub fn new(a: &Mat<T>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::Shape(format!(
                "Cholesky needs a square matrix, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        let mut l = Mat::zeros(n, n);
        for j in 0..n {
            let mut pivot = a[(j, j)];
            for k in 0..j {
                pivot -= l[(j, k)] * l[(j, k)];
            }
            if !(pivot > T::zero()) || !pivot.is_finite() {
                return Err(Error::SingularSystem);
            }
            let ljj = pivot.sqrt();
            l[(j, j)] = ljj;
            for i in j + 1..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / ljj;
            }
        }
        Ok(Cholesky { l })
    }

    pub fn factor(&self) -> &Mat<T> {
        &self.l
    }

    /// Solves `A X = B` for every column of `b` with the one factorization.
    pub fn solve(&self, b: &Mat<T>) -> Result<Mat<T>> {
        let n = self.l.nrows();
        if b.nrows() != n {
            return Err(Error::Shape(format!(
                "right-hand side has {} rows, system has {n}",
                b.nrows()
            )));
        }
        let mut x = b.clone();
        for c in 0..x.ncols() {
            let col = x.col_mut(c);
            for i in 0..n {
                let mut s = col[i];
                for k in 0..i {
                    s -= self.l[(i, k)] * col[k];
                }
                col[i] = s / self.l[(i, i)];
            }
            for i in (0..n).rev() {
                let mut s = col[i];
                for k in i + 1..n {
                    s -= self.l[(k, i)] * col[k];
                }
                col[i] = s / self.l[(i, i)];
            }
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_spd_system() {
        let a = Mat::from_rows(&[[4.0, 2.0, 0.4], [2.0, 5.0, 1.0], [0.4, 1.0, 3.0]]);
        let x_true = Mat::from_rows(&[[1.0, -1.0], [2.0, 0.5], [-3.0, 0.25]]);
        let b = a.matmul(&x_true).unwrap();
        let x = Cholesky::new(&a).unwrap().solve(&b).unwrap();
        assert!(x.sub(&x_true).unwrap().frobenius_norm() < 1e-13);
    }

    #[test]
    fn rejects_singular_matrix() {
        let a = Mat::from_rows(&[[1.0, 1.0], [1.0, 1.0]]);
        assert!(matches!(Cholesky::new(&a), Err(Error::SingularSystem)));
    }
}
