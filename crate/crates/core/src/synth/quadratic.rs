//! Snapshots of a random stable quadratic system living in an exact
//! `r*`-dimensional subspace.

use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{Cholesky, Mat};
use crate::opinf::{max_admissible_r, quad_dim, ModelForm, ModelTerms, RomOperators};
use crate::rollout::rollout;
use crate::sidecar::{read_file, write_file, Decoder, Encoder};
use crate::snapshot_store::{DatasetHeader, DatasetWriter, Manifest};

const MAGIC: &[u8; 8] = b"DOPINFST";
/// Embedding rows are drawn in fixed chunks so any row range can be
/// regenerated without the rows before it.
const CHUNK_ROWS: usize = 4096;
const MAX_ATTEMPTS: u64 = 16;
const SPECTRAL_RADIUS: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuadraticSpec {
    pub n: usize,
    pub r_star: usize,
    pub n_t: usize,
    pub seed: u64,
}

/// Ground truth behind a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTruth {
    pub n: usize,
    pub r_star: usize,
    pub seed: u64,
    /// Seed actually used after divergent draws were rejected.
    pub effective_seed: u64,
    pub ops: RomOperators<f64>,
    pub q0: Vec<f64>,
    /// `r* × n_t` reduced trajectory.
    pub trajectory: Mat<f64>,
    /// Maps raw Gaussian embedding rows to orthonormal ones.
    pub mixing: Mat<f64>,
}

impl SyntheticTruth {
    pub fn dt(&self) -> f64 {
        self.ops.dt
    }

    fn raw_rows(seed: u64, r: usize, rows: Range<usize>) -> Mat<f64> {
        let mut out = Mat::zeros(rows.len(), r);
        let first = rows.start / CHUNK_ROWS;
        let last = rows.end.div_ceil(CHUNK_ROWS);
        for chunk in first..last {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
            rng.set_stream(chunk as u64);
            let start = chunk * CHUNK_ROWS;
            for g in start..start + CHUNK_ROWS {
                let vals: Vec<f64> = (0..r).map(|_| rng.sample(StandardNormal)).collect();
                if rows.contains(&g) {
                    for (k, v) in vals.into_iter().enumerate() {
                        out[(g - rows.start, k)] = v;
                    }
                }
            }
        }
        out
    }

    /// Rows of the orthonormal embedding basis.
    pub fn embedding_rows(&self, rows: Range<usize>) -> Mat<f64> {
        Self::raw_rows(self.effective_seed, self.r_star, rows)
            .matmul(&self.mixing)
            .expect("r* columns")
    }

    pub fn embedding(&self) -> Mat<f64> {
        self.embedding_rows(0..self.n)
    }

    /// Full states for the given rows and reduced trajectory.
    pub fn states(&self, rows: Range<usize>, trajectory: &Mat<f64>) -> Result<Mat<f64>> {
        self.embedding_rows(rows).matmul(trajectory)
    }

    /// Continues the true dynamics to `n_steps` total steps from `q0`.
    pub fn extended_trajectory(&self, n_steps: usize) -> Result<Mat<f64>> {
        Ok(rollout(&self.ops, &self.q0, n_steps)?.states)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        Encoder::new(MAGIC)
            .usize(self.n)
            .usize(self.r_star)
            .u64(self.seed)
            .u64(self.effective_seed)
            .reals(&self.ops.c)
            .mat(&self.ops.a)
            .mat(&self.ops.h)
            .reals(&self.q0)
            .mat(&self.trajectory)
            .mat(&self.mixing)
            .finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut d = Decoder::new(bytes, MAGIC, "synthetic truth")?;
        let n = d.usize()?;
        let r_star = d.usize()?;
        let seed = d.u64()?;
        let effective_seed = d.u64()?;
        let mut ops = RomOperators::zeros(r_star, ModelForm::Discrete, 1.0);
        ops.c = d.reals()?;
        ops.a = d.mat()?;
        ops.h = d.mat()?;
        let t = SyntheticTruth {
            n,
            r_star,
            seed,
            effective_seed,
            ops,
            q0: d.reals()?,
            trajectory: d.mat()?,
            mixing: d.mat()?,
        };
        d.finish()?;
        if t.ops.a.shape() != (r_star, r_star) || t.mixing.shape() != (r_star, r_star) {
            return Err(Error::Format("synthetic truth shapes do not match r*".into()));
        }
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat<f64> {
    Mat::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Random orthogonal matrix by Gram–Schmidt on Gaussian columns.
fn orthogonal(rng: &mut ChaCha8Rng, n: usize) -> Mat<f64> {
    let mut q = gaussian(rng, n, n);
    for j in 0..n {
        for _ in 0..2 {
            for k in 0..j {
                let p: f64 = (0..n).map(|i| q[(i, k)] * q[(i, j)]).sum();
                for i in 0..n {
                    q[(i, j)] -= p * q[(i, k)];
                }
            }
        }
        let norm = q.col(j).iter().map(|x| x * x).sum::<f64>().sqrt();
        q.col_mut(j).iter_mut().for_each(|x| *x /= norm);
    }
    q
}

/// Rotation-scaling blocks with moduli in `[0.85, 0.95]` (the first exactly
/// 0.95), conjugated by a random orthogonal matrix.
fn stable_linear(rng: &mut ChaCha8Rng, r: usize) -> Mat<f64> {
    let mut block = Mat::zeros(r, r);
    let mut k = 0;
    while k < r {
        let rho = if k == 0 { SPECTRAL_RADIUS } else { rng.random_range(0.85..SPECTRAL_RADIUS) };
        if k + 1 < r {
            let theta: f64 = rng.random_range(0.05..0.6);
            let (s, c) = theta.sin_cos();
            block[(k, k)] = rho * c;
            block[(k, k + 1)] = -rho * s;
            block[(k + 1, k)] = rho * s;
            block[(k + 1, k + 1)] = rho * c;
            k += 2;
        } else {
            block[(k, k)] = rho;
            k += 1;
        }
    }
    let o = orthogonal(rng, r);
    o.matmul(&block).and_then(|m| m.matmul(&o.transpose())).expect("square")
}

fn scaled_to_norm(mut m: Mat<f64>, norm: f64) -> Mat<f64> {
    let f = norm / m.frobenius_norm();
    m.as_mut_slice().iter_mut().for_each(|x| *x *= f);
    m
}

fn draw_system(seed: u64, r: usize, n_t: usize) -> Option<(RomOperators<f64>, Vec<f64>, Mat<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ops = RomOperators::zeros(r, ModelForm::Discrete, 1.0);
    ops.a = stable_linear(&mut rng, r);
    ops.h = scaled_to_norm(gaussian(&mut rng, r, quad_dim(r)), 0.2);
    let c = scaled_to_norm(gaussian(&mut rng, r, 1), 0.05);
    ops.c = c.col(0).to_vec();
    let q0 = scaled_to_norm(gaussian(&mut rng, r, 1), 1.0).col(0).to_vec();
    // the admissibility of later extrapolation is checked over twice the span
    let traj = rollout(&ops, &q0, 2 * n_t).ok()?;
    if traj.diverged_at.is_some() || traj.states.max_abs() > 10.0 {
        return None;
    }
    Some((ops, q0, traj.states.leading_cols(n_t)))
}

/// Builds the truth for `spec` without writing anything.
pub fn quadratic_truth(spec: &QuadraticSpec) -> Result<SyntheticTruth> {
    let QuadraticSpec { n, r_star, n_t, seed } = *spec;
    let bound = max_admissible_r(ModelForm::Discrete, n_t, ModelTerms::default());
    if r_star == 0 || r_star > n || r_star > bound || n_t < 2 * r_star {
        return Err(Error::InvalidArgument(format!(
            "r* = {r_star} needs 1 ≤ r* ≤ min(n = {n}, {bound}) and n_t = {n_t} ≥ 2r*"
        )));
    }
    let (effective_seed, (ops, q0, trajectory)) = (0..MAX_ATTEMPTS)
        .map(|k| seed.wrapping_add(k.wrapping_mul(0x2545_f491_4f6c_dd1d)))
        .find_map(|s| draw_system(s, r_star, n_t).map(|sys| (s, sys)))
        .ok_or_else(|| Error::Generator(format!("no bounded system in {MAX_ATTEMPTS} draws")))?;

    // CholeskyQR2 over the streamed rows
    let mut mixing = Mat::identity(r_star);
    for _ in 0..2 {
        let mut g = Mat::zeros(r_star, r_star);
        let mut start = 0;
        while start < n {
            let end = (start + CHUNK_ROWS).min(n);
            let rows = SyntheticTruth::raw_rows(effective_seed, r_star, start..end).matmul(&mixing)?;
            let gb = rows.gram();
            for (x, y) in g.as_mut_slice().iter_mut().zip(gb.as_slice()) {
                *x += *y;
            }
            start = end;
        }
        let l = Cholesky::new(&g).map_err(|_| Error::Generator("embedding is rank deficient".into()))?;
        // mixing ← mixing · L⁻ᵀ
        let linv_t = l.solve(&Mat::identity(r_star))?;
        let lt = l.factor().transpose();
        let inv = lt.matmul(&linv_t)?; // = Lᵀ (L Lᵀ)⁻¹ = L⁻¹
        mixing = mixing.matmul(&inv.transpose())?;
    }
    Ok(SyntheticTruth {
        n,
        r_star,
        seed,
        effective_seed,
        ops,
        q0,
        trajectory,
        mixing,
    })
}

/// Writes the snapshot dataset for `spec` shard by shard and returns its
/// manifest together with the truth.
pub fn gen_subspace_quadratic(
    path: &Path,
    spec: &QuadraticSpec,
    shard_count: usize,
) -> Result<(Manifest, SyntheticTruth)> {
    let truth = quadratic_truth(spec)?;
    if shard_count == 0 || shard_count > spec.n {
        return Err(Error::InvalidArgument(format!(
            "{shard_count} shards for {} rows",
            spec.n
        )));
    }
    let mut writer = DatasetWriter::create(path, DatasetHeader::new(1, spec.n, spec.n_t))?;
    let (base, extra) = (spec.n / shard_count, spec.n % shard_count);
    let mut start = 0;
    for s in 0..shard_count {
        let len = base + (s < extra) as usize;
        writer.push_shard(&truth.states(start..start + len, &truth.trajectory)?)?;
        start += len;
    }
    Ok((writer.finish()?, truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::jacobi_svd;

    #[test]
    fn embedding_is_orthonormal_and_regenerable() {
        let spec = QuadraticSpec { n: 9000, r_star: 5, n_t: 40, seed: 3 };
        let truth = quadratic_truth(&spec).unwrap();
        let e = truth.embedding();
        let err = e.tr_matmul(&e).unwrap().sub(&Mat::identity(5)).unwrap().frobenius_norm();
        assert!(err < 1e-12, "{err}");
        let part = truth.embedding_rows(4090..4100);
        assert_eq!(part, e.rows_range(4090..4100));
    }

    #[test]
    fn linear_operator_has_target_spectral_radius() {
        let truth = quadratic_truth(&QuadraticSpec { n: 50, r_star: 4, n_t: 30, seed: 1 }).unwrap();
        // ‖Aᵏ‖^(1/k) approaches the spectral radius
        let mut p = truth.ops.a.clone();
        for _ in 0..399 {
            p = p.matmul(&truth.ops.a).unwrap();
        }
        let rho = p.frobenius_norm().powf(1.0 / 400.0);
        assert!((rho - SPECTRAL_RADIUS).abs() < 5e-3, "{rho}");
    }

    #[test]
    fn snapshots_have_rank_r_star() {
        let dir = tempfile::tempdir().unwrap();
        let spec = QuadraticSpec { n: 200, r_star: 3, n_t: 20, seed: 11 };
        let (m, _) = gen_subspace_quadratic(&dir.path().join("q"), &spec, 3).unwrap();
        let s = crate::snapshot_store::read_full::<f64>(&m).unwrap();
        let svd = jacobi_svd(&s).unwrap();
        for k in 3..20 {
            assert!(svd.sigma[k] <= 1e-10 * svd.sigma[0], "σ{k} = {}", svd.sigma[k]);
        }
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let spec = QuadraticSpec { n: 64, r_star: 2, n_t: 10, seed: 5 };
        let (a, ta) = gen_subspace_quadratic(&dir.path().join("a"), &spec, 2).unwrap();
        let (b, tb) = gen_subspace_quadratic(&dir.path().join("b"), &spec, 2).unwrap();
        assert_eq!(ta, tb);
        for (x, y) in a.shards.iter().zip(&b.shards) {
            assert_eq!(std::fs::read(a.shard_path(x)).unwrap(), std::fs::read(b.shard_path(y)).unwrap());
        }
        assert_eq!(SyntheticTruth::from_bytes(&ta.to_bytes()).unwrap(), ta);
    }

    #[test]
    fn rank_one_columns_are_multiples_of_one_vector() {
        let truth = quadratic_truth(&QuadraticSpec { n: 3, r_star: 1, n_t: 4, seed: 2 }).unwrap();
        let s = truth.states(0..3, &truth.trajectory).unwrap();
        let e = truth.embedding();
        for j in 0..4 {
            let f = truth.trajectory[(0, j)];
            for i in 0..3 {
                assert!((s[(i, j)] - f * e[(i, 0)]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn oversized_r_star_is_rejected() {
        assert!(quadratic_truth(&QuadraticSpec { n: 100, r_star: 9, n_t: 40, seed: 0 }).is_err());
    }
}
