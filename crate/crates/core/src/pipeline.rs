//! End-to-end training on one rank of a communicator, assessment of the
//! learned model against the stored snapshots, and the on-disk run layout.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use crate::comm::CommHandle;
use crate::dimred::{eig_factors, global_gram, reduced_trajectory, GramMode, RankRequest, ReductionFactors};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::opinf::{grid_search_opinf, ModelForm, ModelTerms, RegSearchOutcome, RomOperators, SearchConfig};
use crate::postproc::{basis_partition, reconstruct, relative_error, BasisPartition, ErrorTable};
use crate::rollout::{rollout, ReducedTrajectory};
use crate::scalar::Real;
use crate::snapshot_store::{plan_partition, read_partition_window, AlignMode, Manifest, PartitionPlan, SnapshotPartition};
use crate::transforms::{transform_owned, TransformConfig, TransformParams};

pub const FACTORS_FILE: &str = "factors.bin";
pub const OPERATORS_FILE: &str = "operators.bin";
pub const TRAJECTORY_FILE: &str = "trajectory.bin";
pub const SEARCH_LOG_FILE: &str = "search_log.csv";
pub const RUN_FILE: &str = "run.txt";

pub fn transform_file(rank: usize, p: usize) -> String {
    format!("transform-{rank}-of-{p}.bin")
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub transform: TransformConfig,
    pub align: AlignMode,
    pub rank: RankRequest,
    pub gram: GramMode,
    pub form: ModelForm,
    /// Spacing of the snapshots.
    pub dt: f64,
    pub terms: ModelTerms,
    pub search: SearchConfig,
    /// Leading columns used for training; all when `None`.
    pub train_cols: Option<usize>,
    /// Leading rows used; all when `None`.
    pub row_limit: Option<usize>,
}

/// Wall seconds per phase. Time spent in collectives is reported under
/// `comm` only.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PhaseTimings {
    pub io: f64,
    pub compute: f64,
    pub learn: f64,
    pub comm: f64,
    pub total: f64,
}

pub struct TrainOutput<T> {
    pub plan: PartitionPlan,
    /// This rank's transformed training block.
    pub transformed: SnapshotPartition<T>,
    pub params: TransformParams<T>,
    pub factors: ReductionFactors<T>,
    /// Projected training trajectory, `r × n_train`.
    pub qhat: Mat<T>,
    pub ops: RomOperators<T>,
    pub search: RegSearchOutcome,
    pub timings: PhaseTimings,
}

impl<T: Real> TrainOutput<T> {
    pub fn n_train(&self) -> usize {
        self.qhat.ncols()
    }

    pub fn basis(&self) -> Result<BasisPartition<T>> {
        basis_partition(&self.transformed, &self.factors.projection)
    }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

/// Rows covered by `config` and the partition plan for this communicator.
pub fn plan_for(manifest: &Manifest, config: &TrainConfig, p: usize) -> Result<PartitionPlan> {
    let h = &manifest.header;
    let rows = config.row_limit.unwrap_or(h.n_rows);
    if rows == 0 || rows > h.n_rows {
        return Err(Error::InvalidArgument(format!("row limit {rows} outside 1..={}", h.n_rows)));
    }
    // a single-variable window is itself a single-variable dataset
    let rows_per_var = if h.n_vars == 1 { rows } else { h.rows_per_var };
    plan_partition(rows, p, config.align, rows_per_var)
}

/// Reads this rank's rows with all stored columns.
pub fn read_rows<T: Real>(comm: &CommHandle, manifest: &Manifest, config: &TrainConfig) -> Result<SnapshotPartition<T>> {
    let plan = plan_for(manifest, config, comm.size())?;
    read_partition_window(manifest, &plan, comm.rank())
}

fn training_columns(manifest: &Manifest, config: &TrainConfig) -> Result<usize> {
    let n = manifest.header.n_cols;
    match config.train_cols {
        None => Ok(n),
        Some(k) if (2..=n).contains(&k) => Ok(k),
        Some(k) => Err(Error::InvalidArgument(format!("training columns {k} outside 2..={n}"))),
    }
}

/// Runs the whole learning pipeline for this rank. Every rank returns the
/// same factors and operators.
pub fn train<T: Real>(comm: &mut CommHandle, manifest: &Manifest, config: &TrainConfig) -> Result<TrainOutput<T>> {
    let start = Instant::now();
    let comm0 = comm.comm_time();
    let n_train = training_columns(manifest, config)?;

    let t = Instant::now();
    let mut part = read_rows::<T>(comm, manifest, config)?;
    if n_train < part.block.ncols() {
        part.block = part.block.leading_cols(n_train);
    }
    let io = secs(t.elapsed());

    let (t, c) = (Instant::now(), comm.comm_time());
    let plan = part.plan.clone();
    let (transformed, params) = transform_owned(part, &config.transform, comm)?;
    let gram = global_gram(comm, &transformed.block, config.gram)?;
    let factors = eig_factors(&gram, config.rank)?;
    let qhat = reduced_trajectory(&factors.projection, &factors.gram)?;
    let compute = secs(t.elapsed().saturating_sub(comm.comm_time() - c));

    let (t, c) = (Instant::now(), comm.comm_time());
    let (ops, search) = grid_search_opinf(comm, &qhat, config.form, config.dt, config.terms, &config.search)?;
    let learn = secs(t.elapsed().saturating_sub(comm.comm_time() - c));

    let timings = PhaseTimings {
        io,
        compute,
        learn,
        comm: secs(comm.comm_time() - comm0),
        total: secs(start.elapsed()),
    };
    Ok(TrainOutput {
        plan,
        transformed,
        params,
        factors,
        qhat,
        ops,
        search,
        timings,
    })
}

/// Errors of the learned model against the stored snapshots.
#[derive(Debug, Clone, PartialEq)]
pub struct Assessment<T> {
    pub trajectory: ReducedTrajectory<T>,
    /// Columns `0..n_train`.
    pub training: ErrorTable,
    /// Columns `n_train..`, cut short at divergence; `None` without
    /// held-out columns.
    pub prediction: Option<ErrorTable>,
}

/// Rolls the model out from the first projected state over every stored
/// column, reconstructs this rank's rows and compares with `raw`, the rank's
/// untransformed rows including held-out columns.
pub fn assess<T: Real>(comm: &mut CommHandle, out: &TrainOutput<T>, raw: &SnapshotPartition<T>) -> Result<Assessment<T>> {
    let n_total = raw.block.ncols();
    let n_train = out.n_train();
    if n_total < n_train {
        return Err(Error::Shape(format!("{n_total} stored columns, {n_train} used for training")));
    }
    let trajectory = rollout(&out.ops, out.qhat.col(0), n_total - 1)?;
    let recon = reconstruct(&out.basis()?, &trajectory.states, &out.params)?;
    let reached = recon.ncols();
    let cols_train = reached.min(n_train);
    let n_vars = raw.n_vars;
    let training = relative_error(
        comm,
        &recon.leading_cols(cols_train),
        &raw.block.leading_cols(cols_train),
        &raw.var_map,
        n_vars,
    )?;
    let prediction = if n_total > n_train {
        let end = reached.max(n_train);
        Some(relative_error(
            comm,
            &recon.cols_range(n_train..end),
            &raw.block.cols_range(n_train..end),
            &raw.var_map,
            n_vars,
        )?)
    } else {
        None
    };
    Ok(Assessment {
        trajectory,
        training,
        prediction,
    })
}

/// `key=value` summary written next to the sidecars.
pub fn run_summary<T: Real>(out: &TrainOutput<T>, p: usize) -> String {
    let mut s = String::new();
    let f = &out.factors;
    let _ = writeln!(s, "ranks={p}");
    let _ = writeln!(s, "n_rows={}", out.plan.n_rows);
    let _ = writeln!(s, "n_train={}", out.n_train());
    let _ = writeln!(s, "r={}", f.r());
    let _ = writeln!(s, "r_requested={}", f.r_requested);
    let _ = writeln!(s, "rank_deficient={}", f.rank_deficient());
    let _ = writeln!(s, "energy={:e}", f.energy[f.r() - 1].to_f64());
    let _ = writeln!(s, "form={}", out.ops.form);
    let _ = writeln!(s, "terms={}", out.ops.terms);
    let _ = writeln!(s, "beta1={:e}", out.search.winner.0);
    let _ = writeln!(s, "beta2={:e}", out.search.winner.1);
    let _ = writeln!(s, "winner_error={:e}", out.search.winner_error);
    let _ = writeln!(s, "scalar={}", T::NAME);
    s
}

/// Writes the run directory. Rank 0 writes the shared files; every rank
/// writes its own transform parameters.
pub fn write_outputs<T: Real>(dir: &Path, out: &TrainOutput<T>, comm: &mut CommHandle) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (rank, p) = (comm.rank(), comm.size());
    out.params.save(&dir.join(transform_file(rank, p)))?;
    if rank == 0 {
        out.factors.save(&dir.join(FACTORS_FILE))?;
        out.ops.save(&dir.join(OPERATORS_FILE))?;
        ReducedTrajectory::projected(out.qhat.clone(), out.ops.dt).save(&dir.join(TRAJECTORY_FILE))?;
        let log = dir.join(SEARCH_LOG_FILE);
        fs::write(&log, out.search.search_log_csv()).map_err(|e| Error::io(&log, e))?;
        let run = dir.join(RUN_FILE);
        fs::write(&run, run_summary(out, p)).map_err(|e| Error::io(&run, e))?;
    }
    comm.barrier()
}

/// Sidecars of a finished run as seen by one rank.
pub struct TrainedModel<T> {
    pub factors: ReductionFactors<T>,
    pub ops: RomOperators<T>,
    pub training: ReducedTrajectory<T>,
    pub params: TransformParams<T>,
}

impl<T: Real> TrainedModel<T> {
    pub fn load(dir: &Path, rank: usize, p: usize) -> Result<Self> {
        Ok(TrainedModel {
            factors: ReductionFactors::load(&dir.join(FACTORS_FILE))?,
            ops: RomOperators::load(&dir.join(OPERATORS_FILE))?,
            training: ReducedTrajectory::load(&dir.join(TRAJECTORY_FILE))?,
            params: TransformParams::load(&dir.join(transform_file(rank, p)))?,
        })
    }

    /// This rank's basis rows rebuilt from the raw snapshots.
    pub fn basis(&self, raw: &SnapshotPartition<T>) -> Result<BasisPartition<T>> {
        let n_train = self.factors.gram.nrows();
        if raw.block.ncols() < n_train {
            return Err(Error::Shape(format!(
                "{} stored columns, model trained on {n_train}",
                raw.block.ncols()
            )));
        }
        let q = crate::transforms::apply_forward(&raw.block.leading_cols(n_train), &self.params)?;
        Ok(BasisPartition {
            rank: raw.rank,
            block: q.matmul(&self.factors.projection)?,
            var_map: self.params.var_map.clone(),
        })
    }
}

/// Default run directory name for a dataset path.
pub fn default_out_dir(data: &Path) -> PathBuf {
    let stem = data.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
    data.with_file_name(format!("{stem}.run"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comm::run_in_process;
    use crate::opinf::SolverKind;
    use crate::snapshot_store::{read_manifest, write_dataset, DatasetHeader};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn config(r: usize) -> TrainConfig {
        TrainConfig {
            transform: TransformConfig::default(),
            align: AlignMode::RowBalanced,
            rank: RankRequest::Fixed(r),
            gram: GramMode::Reproducible,
            form: ModelForm::Discrete,
            dt: 0.1,
            terms: ModelTerms::default(),
            search: SearchConfig {
                beta1: vec![1e-8, 1e-4],
                beta2: vec![1e-6, 1e-2],
                tau: 0.5,
                trial_steps: 0,
                solver: SolverKind::Cholesky,
            },
            train_cols: Some(16),
            row_limit: None,
        }
    }

    fn dataset(dir: &Path) -> Manifest {
        // traveling pulses: smooth, low-rank, bounded
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let phase: f64 = rng.random_range(0.0..1.0);
        let s = Mat::from_fn(60, 24, |i, j| {
            let x = i as f64 / 60.0;
            (std::f64::consts::TAU * (x - 0.01 * j as f64 + phase)).sin() * (1.0 - 0.01 * j as f64)
        });
        let path = dir.join("d.manifest");
        write_dataset(&s, &DatasetHeader::new(1, 60, 24), 3, &path).unwrap();
        read_manifest(&path).unwrap()
    }

    #[test]
    fn outputs_agree_across_rank_counts() {
        let dir = tempfile::tempdir().unwrap();
        let m = dataset(dir.path());
        let cfg = config(3);
        let single = train::<f64>(&mut CommHandle::loopback(), &m, &cfg).unwrap();
        for p in [2, 3] {
            let outs = run_in_process(p, |mut c| {
                let o = train::<f64>(&mut c, &m, &cfg).unwrap();
                (o.factors.to_bytes(), o.ops.to_bytes())
            });
            for (f, o) in outs {
                assert_eq!(f, single.factors.to_bytes());
                assert_eq!(o, single.ops.to_bytes());
            }
        }
    }

    #[test]
    fn assessment_and_sidecars() {
        let dir = tempfile::tempdir().unwrap();
        let m = dataset(dir.path());
        let cfg = config(3);
        let mut comm = CommHandle::loopback();
        let out = train::<f64>(&mut comm, &m, &cfg).unwrap();
        let raw = read_rows::<f64>(&comm, &m, &cfg).unwrap();
        let a = assess(&mut comm, &out, &raw).unwrap();
        assert_eq!(a.trajectory.len(), 24);
        assert!(a.training.worst_aggregate() < 0.5, "{:?}", a.training.aggregate);
        assert!(a.prediction.is_some());

        let run = dir.path().join("run");
        write_outputs(&run, &out, &mut comm).unwrap();
        let model = TrainedModel::<f64>::load(&run, 0, 1).unwrap();
        assert_eq!(model.ops, out.ops);
        assert_eq!(model.basis(&raw).unwrap().block, out.basis().unwrap().block);
        // a single traveling harmonic spans two modes after centering
        let summary = run_summary(&out, 1);
        assert!(summary.contains("\nr=2\nr_requested=3\nrank_deficient=true\n"), "{summary}");
    }

    #[test]
    fn timings_are_consistent() {
        let dir = tempfile::tempdir().unwrap();
        let m = dataset(dir.path());
        let out = train::<f64>(&mut CommHandle::loopback(), &m, &config(2)).unwrap();
        let t = out.timings;
        assert!(t.io >= 0.0 && t.compute >= 0.0 && t.learn >= 0.0 && t.comm >= 0.0);
        assert!(t.io + t.compute + t.learn <= t.total + 1e-9);
    }

    #[test]
    fn training_columns_are_validated() {
        let dir = tempfile::tempdir().unwrap();
        let m = dataset(dir.path());
        let cfg = TrainConfig { train_cols: Some(99), ..config(2) };
        assert!(matches!(train::<f64>(&mut CommHandle::loopback(), &m, &cfg), Err(Error::InvalidArgument(_))));
    }
}
