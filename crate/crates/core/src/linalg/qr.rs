use super::Mat;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Minimises `‖A X − B‖²_F + Σ_j γ_j ‖X_j,:‖²` by Householder QR of the
/// stacked matrix `[A; diag(√γ)]`. Slower than the normal equations but
/// does not square the condition number.
pub fn least_squares_qr<T: Real>(a: &Mat<T>, b: &Mat<T>, gamma: &[T]) -> Result<Mat<T>> {
    let (m, n) = a.shape();
    if b.nrows() != m || gamma.len() != n {
        return Err(Error::Shape(format!(
            "least squares with A {m}x{n}, B {}x{}, {} penalties",
            b.nrows(),
            b.ncols(),
            gamma.len()
        )));
    }
    let rows = m + n;
    let k = b.ncols();
    let mut r = Mat::from_fn(rows, n, |i, j| {
        if i < m {
            a[(i, j)]
        } else if i - m == j {
            gamma[j].sqrt()
        } else {
            T::zero()
        }
    });
    let mut rhs = Mat::from_fn(rows, k, |i, j| if i < m { b[(i, j)] } else { T::zero() });

    for j in 0..n {
        let norm = r.col(j)[j..].iter().map(|&x| x * x).sum::<T>().sqrt();
        if norm == T::zero() {
            return Err(Error::SingularSystem);
        }
        let alpha = if r[(j, j)] > T::zero() { -norm } else { norm };
        let mut v: Vec<T> = r.col(j)[j..].to_vec();
        v[0] -= alpha;
        let vnorm2: T = v.iter().map(|&x| x * x).sum();
        if vnorm2 == T::zero() {
            continue;
        }
        for c in j..n {
            let col = &mut r.col_mut(c)[j..];
            let s = super::dot(&v, col) * T::two() / vnorm2;
            for (x, &vi) in col.iter_mut().zip(&v) {
                *x -= s * vi;
            }
        }
        for c in 0..k {
            let col = &mut rhs.col_mut(c)[j..];
            let s = super::dot(&v, col) * T::two() / vnorm2;
            for (x, &vi) in col.iter_mut().zip(&v) {
                *x -= s * vi;
            }
        }
    }

    let mut x = Mat::zeros(n, k);
    for c in 0..k {
        for i in (0..n).rev() {
            let mut s = rhs[(i, c)];
            for t in i + 1..n {
                s -= r[(i, t)] * x[(t, c)];
            }
            let d = r[(i, i)];
            if d == T::zero() || !d.is_finite() {
                return Err(Error::SingularSystem);
            }
            x[(i, c)] = s / d;
        }
    }
    Ok(x)
}
