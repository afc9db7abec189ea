//! Serial POD reference by one-sided Jacobi SVD of the full matrix.

use crate::dimred::fix_signs;
use crate::error::{Error, Result};
use crate::linalg::{dot, Mat};

/// Thin SVD `Q = U Σ Wᵀ` with singular values descending.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Mat<f64>,
    pub sigma: Vec<f64>,
    pub w: Mat<f64>,
}

/// Hestenes one-sided Jacobi: rotates column pairs of `Q` until all are
/// mutually orthogonal. Needs `nrows ≥ ncols`.
pub fn jacobi_svd(q: &Mat<f64>) -> Result<Svd> {
    let (m, n) = q.shape();
    if m < n {
        return Err(Error::Shape(format!("Jacobi SVD needs a tall matrix, got {m}x{n}")));
    }
    let mut a = q.clone();
    let mut w = Mat::<f64>::identity(n);
    for _sweep in 0..80 {
        let mut rotated = false;
        for i in 0..n {
            for j in i + 1..n {
                let alpha = dot(a.col(i), a.col(i));
                let beta = dot(a.col(j), a.col(j));
                let gamma = dot(a.col(i), a.col(j));
                if gamma == 0.0 || gamma.abs() <= 1e-17 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for mat in [&mut a, &mut w] {
                    for k in 0..mat.nrows() {
                        let (x, y) = (mat[(k, i)], mat[(k, j)]);
                        mat[(k, i)] = c * x - s * y;
                        mat[(k, j)] = s * x + c * y;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = (0..n).map(|j| dot(a.col(j), a.col(j)).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]));
    let sigma: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let mut w = Mat::from_fn(n, n, |i, k| w[(i, order[k])]);
    fix_signs(&mut w);
    let u = Mat::from_fn(m, n, |i, k| {
        if sigma[k] > 0.0 {
            dot(&q.row(i), w.col(k)) / sigma[k]
        } else {
            0.0
        }
    });
    Ok(Svd { u, sigma, w })
}

/// Reference POD of an already transformed matrix.
#[derive(Debug, Clone)]
pub struct SerialPod {
    /// `V_r`, `m × r`.
    pub basis: Mat<f64>,
    /// `V_rᵀ Q`, `r × n_t`.
    pub qhat: Mat<f64>,
    pub sigma: Vec<f64>,
}

/// Thin SVD of `q`, truncated to `r`, with the same sign rule as the
/// Gram-based path (applied to the right singular vectors).
pub fn oracle_serial_pod(q: &Mat<f64>, r: usize) -> Result<SerialPod> {
    let svd = jacobi_svd(q)?;
    if r == 0 || r > svd.sigma.len() {
        return Err(Error::InvalidArgument(format!("r = {r} outside 1..={}", svd.sigma.len())));
    }
    let basis = svd.u.leading_cols(r);
    let qhat = basis.tr_matmul(q)?;
    Ok(SerialPod {
        basis,
        qhat,
        sigma: svd.sigma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn diagonal_matrix() {
        let pod = oracle_serial_pod(&Mat::diag(&[3.0, 2.0]), 2).unwrap();
        assert_eq!(pod.sigma, vec![3.0, 2.0]);
        assert_eq!(pod.qhat, Mat::diag(&[3.0, 2.0]));
    }

    #[test]
    fn full_rank_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let q = Mat::from_fn(30, 6, |_, _| rng.random_range(-1.0..1.0));
        let pod = oracle_serial_pod(&q, 6).unwrap();
        let back = pod.basis.matmul(&pod.qhat).unwrap();
        assert!(back.sub(&q).unwrap().frobenius_norm() <= 1e-10 * q.frobenius_norm());
        let vtv = pod.basis.tr_matmul(&pod.basis).unwrap();
        assert!(vtv.sub(&Mat::identity(6)).unwrap().frobenius_norm() < 1e-12);
    }
}
