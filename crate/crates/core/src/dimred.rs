//! Method-of-snapshots reduction: Gram assembly across ranks, eigenpairs of
//! the Gram matrix, the projection factor `T_r`, and the reduced trajectory.

use std::path::Path;

use crate::comm::CommHandle;
use crate::error::{Error, Result};
use crate::linalg::{asymmetry, symmetric_eigen, Mat};
use crate::repro::{fixed_to_mat, gram_fixed, FixedScale};
use crate::scalar::Real;
use crate::sidecar::{read_file, write_file, Decoder, Encoder};

const MAGIC: &[u8; 8] = b"DOPINFRF";

/// Relative asymmetry above which a Gram matrix is rejected.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// How per-rank Gram contributions are summed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GramMode {
    /// Exact fixed-point accumulation: identical bits for any rank count.
    #[default]
    Reproducible,
    /// Floating-point blocks summed by the communicator's reduce order.
    Float,
}

impl std::str::FromStr for GramMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reproducible" | "fixed" => Ok(GramMode::Reproducible),
            "float" => Ok(GramMode::Float),
            _ => Err(Error::InvalidArgument(format!("unknown gram mode `{s}`"))),
        }
    }
}

/// Rank selection rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RankRequest {
    Fixed(usize),
    /// Retained-energy threshold in `(0, 1]`.
    Energy(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReductionFactors<T> {
    pub gram: Mat<T>,
    /// Descending, with values below [`Self::clamp_threshold`] set to zero.
    pub eigenvalues: Vec<T>,
    pub eigenvectors: Mat<T>,
    pub singular_values: Vec<T>,
    /// `U_r Λ_r^{-1/2}`, `n_t × r`.
    pub projection: Mat<T>,
    /// Cumulative retained-energy ratio after each mode.
    pub energy: Vec<T>,
    pub r_requested: usize,
    pub clamp_threshold: T,
}

impl<T: Real> ReductionFactors<T> {
    pub fn r(&self) -> usize {
        self.projection.ncols()
    }

    /// Number of eigenvalues above the clamp threshold.
    pub fn numerical_rank(&self) -> usize {
        self.eigenvalues.iter().filter(|&&l| l > T::zero()).count()
    }

    /// Set when the requested rank had to be truncated.
    pub fn rank_deficient(&self) -> bool {
        self.r() < self.r_requested
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        Encoder::new(MAGIC)
            .usize(self.r_requested)
            .f64(self.clamp_threshold.to_f64())
            .mat(&self.gram)
            .reals(&self.eigenvalues)
            .mat(&self.eigenvectors)
            .reals(&self.singular_values)
            .mat(&self.projection)
            .reals(&self.energy)
            .finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut d = Decoder::new(bytes, MAGIC, "reduction factor")?;
        let f = ReductionFactors {
            r_requested: d.usize()?,
            clamp_threshold: T::of(d.f64()?),
            gram: d.mat()?,
            eigenvalues: d.reals()?,
            eigenvectors: d.mat()?,
            singular_values: d.reals()?,
            projection: d.mat()?,
            energy: d.reals()?,
        };
        d.finish()?;
        let n = f.gram.nrows();
        if f.eigenvalues.len() != n || f.eigenvectors.shape() != (n, n) || f.projection.nrows() != n {
            return Err(Error::Format("inconsistent reduction factors".into()));
        }
        Ok(f)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

/// `Q_iᵀ Q_i` in floating point.
pub fn local_gram<T: Real>(block: &Mat<T>) -> Mat<T> {
    block.gram()
}

/// `Σ_i Q_iᵀ Q_i` over all ranks.
pub fn global_gram<T: Real>(comm: &mut CommHandle, block: &Mat<T>, mode: GramMode) -> Result<Mat<T>> {
    match mode {
        GramMode::Float => comm.allreduce_sum_matrix(&local_gram(block)),
        GramMode::Reproducible => {
            let local_max = block.max_abs().to_f64();
            if !local_max.is_finite() {
                return Err(Error::InvalidArgument("snapshot block holds non-finite values".into()));
            }
            let max_abs = comm.allreduce_max_vector(&[local_max])?[0];
            let scale = FixedScale::for_products(max_abs);
            let sum = comm.allreduce_sum_fixed(&gram_fixed(block, &scale))?;
            Ok(fixed_to_mat(&sum, block.ncols(), &scale))
        }
    }
}

/// Smallest `r` whose cumulative energy ratio reaches `threshold`.
pub fn choose_r_by_energy<T: Real>(eigenvalues: &[T], threshold: f64) -> Result<usize> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "energy threshold {threshold} outside (0, 1]"
        )));
    }
    let energy = cumulative_energy(eigenvalues)?;
    let nonzero = eigenvalues.iter().filter(|&&l| l > T::zero()).count();
    let r = energy
        .iter()
        .position(|&e| Real::to_f64(e) >= threshold)
        .map_or(nonzero, |k| k + 1);
    Ok(r.min(nonzero).max(1))
}

fn cumulative_energy<T: Real>(eigenvalues: &[T]) -> Result<Vec<T>> {
    let total: T = eigenvalues.iter().copied().sum();
    if !(total > T::zero()) {
        return Err(Error::ZeroSpectrum);
    }
    let mut acc = T::zero();
    Ok(eigenvalues
        .iter()
        .map(|&l| {
            acc += l;
            acc / total
        })
        .collect())
}

/// Flips each column so its largest-magnitude entry is positive.
pub fn fix_signs<T: Real>(vectors: &mut Mat<T>) {
    for j in 0..vectors.ncols() {
        let col = vectors.col_mut(j);
        let mut k = 0;
        for (i, x) in col.iter().enumerate() {
            if x.abs() > col[k].abs() {
                k = i;
            }
        }
        if col[k] < T::zero() {
            for x in col.iter_mut() {
                *x = -*x;
            }
        }
    }
}

/// Eigendecomposition of `D` and the projection factor for `request`.
pub fn eig_factors<T: Real>(gram: &Mat<T>, request: RankRequest) -> Result<ReductionFactors<T>> {
    let n = gram.nrows();
    if n == 0 || gram.ncols() != n {
        return Err(Error::Shape(format!("Gram matrix is {}x{}", n, gram.ncols())));
    }
    let asym = asymmetry(gram).to_f64();
    if !(asym <= SYMMETRY_TOL) {
        return Err(Error::NotSymmetric { asymmetry: asym });
    }
    let eig = symmetric_eigen(gram)?;
    let mut values = eig.values;
    let mut vectors = eig.vectors;
    fix_signs(&mut vectors);

    let lead = values[0].max(T::zero());
    let clamp = T::of_usize(n) * lead * T::epsilon();
    for l in values.iter_mut() {
        if *l < clamp || *l <= T::zero() {
            *l = T::zero();
        }
    }
    let energy = cumulative_energy(&values)?;
    let r_requested = match request {
        RankRequest::Fixed(r) => {
            if r == 0 || r > n {
                return Err(Error::InvalidArgument(format!("r = {r} outside 1..={n}")));
            }
            r
        }
        RankRequest::Energy(e) => choose_r_by_energy(&values, e)?,
    };
    let rank = values.iter().filter(|&&l| l > T::zero()).count();
    let r = r_requested.min(rank);
    let projection = Mat::from_fn(n, r, |i, k| vectors[(i, k)] / values[k].sqrt());
    Ok(ReductionFactors {
        gram: gram.clone(),
        singular_values: values.iter().map(|l| l.sqrt()).collect(),
        eigenvalues: values,
        eigenvectors: vectors,
        projection,
        energy,
        r_requested,
        clamp_threshold: clamp,
    })
}

/// `Q̂ = T_rᵀ D`, `r × n_t`.
pub fn reduced_trajectory<T: Real>(projection: &Mat<T>, gram: &Mat<T>) -> Result<Mat<T>> {
    projection.tr_matmul(gram)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comm::run_in_process;
    use crate::snapshot_store::{plan_partition, AlignMode, SnapshotPartition};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Mat<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn rel(a: &Mat<f64>, b: &Mat<f64>) -> f64 {
        a.sub(b).unwrap().frobenius_norm() / b.frobenius_norm()
    }

    #[test]
    fn local_gram_examples() {
        let q = Mat::from_rows(&[[1.0, 0.0], [0.0, 2.0]]);
        assert_eq!(local_gram(&q), Mat::from_rows(&[[1.0, 0.0], [0.0, 4.0]]));
        let c = Mat::from_rows(&[[3.0], [4.0]]);
        assert_eq!(local_gram(&c), Mat::from_rows(&[[25.0]]));
        let r = random(7, 3, 1);
        let naive = Mat::from_fn(3, 3, |i, j| (0..7).map(|k| r[(k, i)] * r[(k, j)]).sum::<f64>());
        assert!(rel(&local_gram(&r), &naive) < 1e-13);
    }

    #[test]
    fn global_gram_matches_serial() {
        let q = random(6, 2, 2);
        let serial = q.gram();
        let plan = plan_partition(6, 2, AlignMode::RowBalanced, 6).unwrap();
        let parts = SnapshotPartition::split(&q, &plan).unwrap();
        for mode in [GramMode::Float, GramMode::Reproducible] {
            let d = run_in_process(2, |mut c| {
                let r = c.rank();
                global_gram(&mut c, &parts[r].block, mode).unwrap()
            });
            assert_eq!(d[0], d[1]);
            assert!(rel(&d[0], &serial) < 1e-13);
        }
        let single = global_gram(&mut CommHandle::loopback(), &q, GramMode::Float).unwrap();
        assert_eq!(single, local_gram(&q));
    }

    #[test]
    fn reproducible_gram_ignores_row_order_and_split() {
        let q = random(50, 4, 3);
        let reversed = Mat::from_fn(50, 4, |i, j| q[(49 - i, j)]);
        let mut lb = CommHandle::loopback();
        let a = global_gram(&mut lb, &q, GramMode::Reproducible).unwrap();
        let b = global_gram(&mut lb, &reversed, GramMode::Reproducible).unwrap();
        assert_eq!(a, b);
        let plan = plan_partition(50, 3, AlignMode::RowBalanced, 50).unwrap();
        let parts = SnapshotPartition::split(&q, &plan).unwrap();
        let d = run_in_process(3, |mut c| {
            let r = c.rank();
                global_gram(&mut c, &parts[r].block, GramMode::Reproducible).unwrap()
        });
        assert!(d.iter().all(|x| *x == a));
    }

    #[test]
    fn diagonal_gram_factors() {
        let f = eig_factors(&Mat::diag(&[4.0, 1.0]), RankRequest::Fixed(2)).unwrap();
        assert_eq!(f.eigenvalues, vec![4.0, 1.0]);
        assert_eq!(f.singular_values, vec![2.0, 1.0]);
        assert_eq!(f.projection, Mat::diag(&[0.5, 1.0]));
    }

    #[test]
    fn identity_gram_gives_unit_singular_values() {
        let f = eig_factors(&Mat::<f64>::identity(3), RankRequest::Fixed(3)).unwrap();
        assert_eq!(f.singular_values, vec![1.0; 3]);
        let t = &f.projection;
        assert!(rel(&t.tr_matmul(t).unwrap(), &Mat::identity(3)) < 1e-15);
    }

    #[test]
    fn energy_rule_examples() {
        assert_eq!(choose_r_by_energy(&[9.0, 4.0], 0.9).unwrap(), 2);
        assert_eq!(choose_r_by_energy(&[9.0, 4.0], 0.5).unwrap(), 1);
        assert_eq!(choose_r_by_energy(&[9.0, 4.0, 0.0, 0.0], 1.0).unwrap(), 2);
        assert!(matches!(choose_r_by_energy(&[0.0, 0.0], 0.5), Err(Error::ZeroSpectrum)));
    }

    #[test]
    fn rank_deficient_request_is_truncated() {
        let q = Mat::from_fn(10, 4, |i, j| (i as f64 + 1.0) * (j as f64 + 1.0));
        let f = eig_factors(&q.gram(), RankRequest::Fixed(3)).unwrap();
        assert_eq!(f.numerical_rank(), 1);
        assert_eq!(f.r(), 1);
        assert!(f.rank_deficient());
    }

    #[test]
    fn asymmetric_input_is_rejected() {
        let d = Mat::from_rows(&[[1.0, 0.5], [0.4, 1.0]]);
        assert!(matches!(eig_factors(&d, RankRequest::Fixed(1)), Err(Error::NotSymmetric { .. })));
    }

    #[test]
    fn reduced_trajectory_of_diagonal_data() {
        let q = Mat::diag(&[3.0, 2.0]);
        let f = eig_factors(&q.gram(), RankRequest::Fixed(2)).unwrap();
        assert_eq!(f.projection, Mat::diag(&[1.0 / 3.0, 0.5]));
        let qhat = reduced_trajectory(&f.projection, &f.gram).unwrap();
        assert_eq!(qhat, q);
    }

    #[test]
    fn orthogonal_columns_give_norms_on_diagonal() {
        let q = Mat::from_rows(&[[2.0, 0.0, 0.0], [0.0, 0.0, 5.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]]);
        let f = eig_factors(&q.gram(), RankRequest::Fixed(3)).unwrap();
        let qhat = reduced_trajectory(&f.projection, &f.gram).unwrap();
        let norms = [5.0, 2.0, 1.0];
        for (k, &n) in norms.iter().enumerate() {
            let row: Vec<f64> = qhat.row(k);
            assert!((row.iter().map(|x| x.abs()).fold(0.0, f64::max) - n).abs() < 1e-14);
            assert_eq!(row.iter().filter(|x| x.abs() > 1e-14).count(), 1);
        }
    }

    #[test]
    fn factors_round_trip_through_bytes() {
        let q = random(20, 5, 9);
        let f = eig_factors(&q.gram(), RankRequest::Energy(0.9)).unwrap();
        assert_eq!(ReductionFactors::from_bytes(&f.to_bytes()).unwrap(), f);
        assert!(ReductionFactors::<f64>::from_bytes(b"DOPINFRF").is_err());
    }

    // 5×5 oracle: bisection on det(D − λI), then shifted inverse iteration.
    fn det(m: &Mat<f64>) -> f64 {
        let n = m.nrows();
        let mut a = m.clone();
        let mut d = 1.0;
        for k in 0..n {
            let p = (k..n).max_by(|&i, &j| a[(i, k)].abs().total_cmp(&a[(j, k)].abs())).unwrap();
            if a[(p, k)] == 0.0 {
                return 0.0;
            }
            if p != k {
                for j in 0..n {
                    let t = a[(k, j)];
                    a[(k, j)] = a[(p, j)];
                    a[(p, j)] = t;
                }
                d = -d;
            }
            d *= a[(k, k)];
            for i in k + 1..n {
                let f = a[(i, k)] / a[(k, k)];
                for j in k..n {
                    let v = a[(k, j)];
                    a[(i, j)] -= f * v;
                }
            }
        }
        d
    }

    fn shifted(d: &Mat<f64>, s: f64) -> Mat<f64> {
        Mat::from_fn(d.nrows(), d.ncols(), |i, j| d[(i, j)] - if i == j { s } else { 0.0 })
    }

    fn solve(a: &Mat<f64>, b: &[f64]) -> Vec<f64> {
        let n = b.len();
        let mut m = Mat::from_fn(n, n + 1, |i, j| if j < n { a[(i, j)] } else { b[i] });
        for k in 0..n {
            let p = (k..n).max_by(|&i, &j| m[(i, k)].abs().total_cmp(&m[(j, k)].abs())).unwrap();
            for j in 0..=n {
                let t = m[(k, j)];
                m[(k, j)] = m[(p, j)];
                m[(p, j)] = t;
            }
            for i in 0..n {
                if i != k {
                    let f = m[(i, k)] / m[(k, k)];
                    for j in k..=n {
                        let v = m[(k, j)];
                        m[(i, j)] -= f * v;
                    }
                }
            }
        }
        (0..n).map(|i| m[(i, n)] / m[(i, i)]).collect()
    }

    #[test]
    fn spd_five_by_five_matches_bisection_oracle() {
        let b = random(8, 5, 77);
        let d = b.gram();
        let f = eig_factors(&d, RankRequest::Fixed(5)).unwrap();
        // Gershgorin bound brackets the spectrum
        let hi = (0..5).map(|i| (0..5).map(|j| d[(i, j)].abs()).sum::<f64>()).fold(0.0, f64::max);
        let n_grid = 20_000;
        let mut roots = Vec::new();
        let mut prev = det(&shifted(&d, -1e-9));
        for s in 1..=n_grid {
            let x = -1e-9 + (hi + 1e-9) * s as f64 / n_grid as f64;
            let cur = det(&shifted(&d, x));
            if prev.signum() != cur.signum() {
                let (mut a, mut c) = (x - (hi + 1e-9) / n_grid as f64, x);
                let fa = det(&shifted(&d, a));
                for _ in 0..200 {
                    let m = 0.5 * (a + c);
                    if det(&shifted(&d, m)).signum() == fa.signum() {
                        a = m;
                    } else {
                        c = m;
                    }
                }
                roots.push(0.5 * (a + c));
            }
            prev = cur;
        }
        roots.reverse();
        assert_eq!(roots.len(), 5);
        for (k, &lam) in roots.iter().enumerate() {
            assert!((f.eigenvalues[k] - lam).abs() <= 1e-10 * roots[0], "λ{k}");
            let mut v = vec![1.0; 5];
            for _ in 0..50 {
                let w = solve(&shifted(&d, lam + 1e-9 * roots[0]), &v);
                let n = w.iter().map(|x| x * x).sum::<f64>().sqrt();
                v = w.iter().map(|x| x / n).collect();
            }
            let mut m = Mat::from_col_major(5, 1, v).unwrap();
            fix_signs(&mut m);
            for i in 0..5 {
                assert!((m[(i, 0)] - f.eigenvectors[(i, k)]).abs() < 1e-10, "u{k}[{i}]");
            }
        }
    }
}
