#![allow(dead_code)]

use dopinf::comm::{run_in_process, CommHandle};
use dopinf::linalg::dot;
use dopinf::snapshot_store::{plan_partition, AlignMode, SnapshotPartition};
use dopinf::Matrix;
use rand::Rng;
use rand_distr::StandardNormal;

pub fn gaussian(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Columns orthonormalized by two passes of modified Gram–Schmidt.
pub fn orthonormal(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let mut q = gaussian(rows, cols, rng);
    for _ in 0..2 {
        for j in 0..cols {
            for k in 0..j {
                let c = dot(q.col(k), q.col(j));
                let prev = q.col(k).to_vec();
                for (x, p) in q.col_mut(j).iter_mut().zip(&prev) {
                    *x -= c * p;
                }
            }
            let n = dot(q.col(j), q.col(j)).sqrt();
            q.col_mut(j).iter_mut().for_each(|x| *x /= n);
        }
    }
    q
}

/// `U diag(σ) Wᵀ` with random orthonormal factors.
pub fn with_spectrum(rows: usize, sigma: &[f64], rng: &mut impl Rng) -> Matrix {
    let n = sigma.len();
    let u = orthonormal(rows, n, rng);
    let w = orthonormal(n, n, rng);
    let us = Matrix::from_fn(rows, n, |i, k| u[(i, k)] * sigma[k]);
    us.matmul(&w.transpose()).unwrap()
}

/// Row-balanced split of `q` over `p` in-process ranks; `f` gets each
/// rank's partition.
pub fn on_ranks<R: Send>(
    q: &Matrix,
    p: usize,
    f: impl Fn(&mut CommHandle, &SnapshotPartition<f64>) -> R + Sync,
) -> Vec<R> {
    let plan = plan_partition(q.nrows(), p, AlignMode::RowBalanced, q.nrows()).unwrap();
    let parts = SnapshotPartition::split(q, &plan).unwrap();
    run_in_process(p, |mut comm| {
        let part = &parts[comm.rank()];
        f(&mut comm, part)
    })
}

pub fn rel_frobenius(a: &Matrix, b: &Matrix) -> f64 {
    a.sub(b).unwrap().frobenius_norm() / b.frobenius_norm()
}
