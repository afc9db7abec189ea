mod launch;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dopinf::bench::{log_grid, report_csv, run_strong, run_weak, BenchConfig};
use dopinf::comm::{BackendKind, CommHandle, ReduceOrder};
use dopinf::dimred::{GramMode, RankRequest};
use dopinf::opinf::{max_admissible_r, max_admissible_r_full_kronecker, ModelForm, ModelTerms, SearchConfig, SolverKind};
use dopinf::pipeline::{
    default_out_dir, read_rows, run_summary, train, transform_file, write_outputs, TrainConfig, TrainedModel,
    TRAJECTORY_FILE,
};
use dopinf::postproc::{gather_probes, probe, probe_csv, reconstruct, relative_error, Probe};
use dopinf::rollout::{rollout, ReducedTrajectory};
use dopinf::snapshot_store::{read_manifest, write_manifest, write_shard, AlignMode, DatasetHeader, Manifest, ShardEntry};
use dopinf::synth::{gen_burgers, gen_subspace_quadratic, BurgersIc, BurgersSpec, QuadraticSpec};
use dopinf::transforms::{LiftingSpec, TransformConfig};
use dopinf::{Error, Real, Result};

use launch::{run_ranks, LaunchArgs, Outcome};

#[derive(Parser)]
#[command(name = "dopinf", version, about = "Distributed operator inference on sharded snapshot data")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate snapshots of a random quadratic system in an exact subspace.
    GenQuadratic(GenQuadraticArgs),
    /// Generate viscous Burgers snapshots.
    GenBurgers(GenBurgersArgs),
    /// Learn a reduced model: transforms, Gram reduction, regularization search.
    Train(TrainArgs),
    /// Advance a trained model in time.
    Rollout(RolloutArgs),
    /// Lift a reduced trajectory back to full rows.
    Reconstruct(ReconstructArgs),
    /// Reconstruct selected rows only.
    Probe(ProbeArgs),
    /// Strong scaling: fixed problem, varying rank count.
    BenchStrong(BenchArgs),
    /// Weak scaling: rows and regularization pairs grow with the rank count.
    BenchWeak(BenchWeakArgs),
    /// Print dataset headers and reduced-dimension bounds.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct GenQuadraticArgs {
    /// Manifest path to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    r_star: usize,
    #[arg(long)]
    n_t: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    shards: usize,
}

#[derive(Args)]
struct GenBurgersArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 256)]
    nx: usize,
    #[arg(long, default_value_t = 0.01)]
    viscosity: f64,
    #[arg(long)]
    n_t: usize,
    /// Integrator step.
    #[arg(long)]
    dt: f64,
    /// Integrator steps per saved snapshot.
    #[arg(long, default_value_t = 1)]
    save_stride: usize,
    /// `zero` or `sine:amplitude[:mode[:offset]]`.
    #[arg(long, default_value = "sine:0.5")]
    ic: BurgersIc,
    #[arg(long, default_value_t = 1)]
    shards: usize,
}

/// `min:max:count`, log-spaced.
#[derive(Debug, Clone)]
struct Grid(Vec<f64>);

impl FromStr for Grid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("bad grid `{s}` (expected min:max:count)"));
        let parts: Vec<&str> = s.split(':').collect();
        let [lo, hi, n] = parts.as_slice() else {
            return Err(bad());
        };
        let lo: f64 = lo.parse().map_err(|_| bad())?;
        let hi: f64 = hi.parse().map_err(|_| bad())?;
        let n: usize = n.parse().map_err(|_| bad())?;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) || n == 0 {
            return Err(bad());
        }
        Ok(Grid(log_grid(lo, hi, n)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Scalar {
    F64,
    F32,
}

#[derive(Args, Clone)]
struct LearnArgs {
    /// Dataset manifest.
    #[arg(long)]
    data: PathBuf,
    /// Fixed reduced dimension.
    #[arg(long, conflicts_with = "energy")]
    r: Option<usize>,
    /// Retained-energy threshold in (0, 1].
    #[arg(long)]
    energy: Option<f64>,
    #[arg(long, default_value = "1e-10:1e-2:8")]
    beta1: Grid,
    #[arg(long, default_value = "1e-8:1e2:8")]
    beta2: Grid,
    /// Allowed growth of the trial rollout beyond the training deviation.
    #[arg(long, default_value_t = 0.3)]
    tau: f64,
    #[arg(long, default_value = "discrete")]
    form: ModelForm,
    /// Snapshot spacing.
    #[arg(long, default_value_t = 1.0)]
    dt: f64,
    /// Trial rollout length; at least the training span is always used.
    #[arg(long, default_value_t = 0)]
    trial_steps: usize,
    /// Operator blocks, any of the letters c, A, H.
    #[arg(long, default_value = "cAH")]
    terms: ModelTerms,
    #[arg(long, default_value = "cholesky")]
    solver: SolverKind,
    /// `reproducible` or `float` Gram summation.
    #[arg(long, default_value = "reproducible")]
    gram: GramMode,
    /// `rows` or `vars`.
    #[arg(long, default_value = "rows")]
    align: AlignMode,
    /// `identity` or `reciprocal:<variable>`.
    #[arg(long, default_value = "identity")]
    lifting: LiftingSpec,
    #[arg(long)]
    no_center: bool,
    #[arg(long)]
    no_scale: bool,
    /// Leading columns used for training.
    #[arg(long)]
    train_cols: Option<usize>,
    #[arg(long, value_enum, default_value = "f64")]
    scalar: Scalar,
    /// Recorded with the run; the pipeline itself draws no random numbers.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl LearnArgs {
    fn config(&self) -> Result<TrainConfig> {
        let rank = match (self.r, self.energy) {
            (Some(r), None) => RankRequest::Fixed(r),
            (None, Some(e)) => RankRequest::Energy(e),
            (None, None) => {
                return Err(Error::InvalidArgument("give --r or --energy".into()));
            }
            (Some(_), Some(_)) => unreachable!("clap rejects both"),
        };
        Ok(TrainConfig {
            transform: TransformConfig {
                lifting: self.lifting,
                center: !self.no_center,
                scale: !self.no_scale,
            },
            align: self.align,
            rank,
            gram: self.gram,
            form: self.form,
            dt: self.dt,
            terms: self.terms,
            search: SearchConfig {
                beta1: self.beta1.0.clone(),
                beta2: self.beta2.0.clone(),
                tau: self.tau,
                trial_steps: self.trial_steps,
                solver: self.solver,
            },
            train_cols: self.train_cols,
            row_limit: None,
        })
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    learn: LearnArgs,
    #[command(flatten)]
    launch: LaunchArgs,
    /// Run directory; defaults next to the manifest.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RolloutArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    steps: usize,
    /// Training column to start from.
    #[arg(long, default_value_t = 0)]
    start: usize,
    /// Trajectory file; a CSV copy is written next to it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    launch: LaunchArgs,
    #[arg(long, default_value = "rows")]
    align: AlignMode,
    /// Reduced trajectory; the projected training trajectory by default.
    #[arg(long)]
    trajectory: Option<PathBuf>,
    /// Manifest path for the reconstructed dataset.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    launch: LaunchArgs,
    #[arg(long, default_value = "rows")]
    align: AlignMode,
    #[arg(long)]
    trajectory: Option<PathBuf>,
    /// Comma-separated `variable:cell` pairs.
    #[arg(long, value_delimiter = ',', required = true)]
    probes: Vec<Probe>,
    /// CSV output; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    learn: LearnArgs,
    /// Rank counts to run.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    ranks: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    #[arg(long, default_value = "inproc")]
    backend: BackendKind,
    /// Sum floating-point Gram blocks in a pairwise tree.
    #[arg(long)]
    tree: bool,
    /// CSV report path; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchWeakArgs {
    #[command(flatten)]
    bench: BenchArgs,
    #[arg(long)]
    rows_per_rank: usize,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "cAH")]
    terms: ModelTerms,
}

fn truth_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("truth.bin")
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn gen_quadratic_cmd(a: &GenQuadraticArgs) -> Result<()> {
    let spec = QuadraticSpec {
        n: a.n,
        r_star: a.r_star,
        n_t: a.n_t,
        seed: a.seed,
    };
    let (m, truth) = gen_subspace_quadratic(&a.out, &spec, a.shards)?;
    let tp = truth_path(&a.out);
    truth.save(&tp)?;
    println!("wrote {} ({}x{}, {} shards)", a.out.display(), m.header.n_rows, m.header.n_cols, m.shards.len());
    println!("truth {} (effective seed {})", tp.display(), truth.effective_seed);
    Ok(())
}

fn gen_burgers_cmd(a: &GenBurgersArgs) -> Result<()> {
    let spec = BurgersSpec {
        n_x: a.nx,
        viscosity: a.viscosity,
        n_t: a.n_t,
        dt: a.dt,
        save_stride: a.save_stride,
        ic: a.ic,
    };
    let m = gen_burgers(&a.out, &spec, a.shards)?;
    println!("wrote {} ({}x{}), snapshot spacing {:e}", a.out.display(), m.header.n_rows, m.header.n_cols, spec.snapshot_dt());
    Ok(())
}

fn train_as<T: Real>(a: &TrainArgs) -> Result<Outcome> {
    let config = a.learn.config()?;
    let manifest = read_manifest(&a.learn.data)?;
    let out_dir = a.out.clone().unwrap_or_else(|| default_out_dir(&a.learn.data));
    run_ranks(&a.launch, |mut comm: CommHandle| {
        let out = train::<T>(&mut comm, &manifest, &config)?;
        write_outputs(&out_dir, &out, &mut comm)?;
        if comm.rank() == 0 {
            print!("{}", run_summary(&out, comm.size()));
            println!("seed={}", a.learn.seed);
            let t = out.timings;
            println!(
                "timings total={:.3}s io={:.3}s compute={:.3}s learn={:.3}s comm={:.3}s",
                t.total, t.io, t.compute, t.learn, t.comm
            );
            println!("wrote {}", out_dir.display());
        }
        Ok(())
    })
}

fn train_cmd(a: &TrainArgs) -> Result<Outcome> {
    match a.learn.scalar {
        Scalar::F64 => train_as::<f64>(a),
        Scalar::F32 => train_as::<f32>(a),
    }
}

fn rollout_cmd(a: &RolloutArgs) -> Result<()> {
    let ops = dopinf::opinf::RomOperators::<f64>::load(&a.model.join(dopinf::pipeline::OPERATORS_FILE))?;
    let training = ReducedTrajectory::<f64>::load(&a.model.join(TRAJECTORY_FILE))?;
    if a.start >= training.len() {
        return Err(Error::InvalidArgument(format!(
            "start column {} outside {} training columns",
            a.start,
            training.len()
        )));
    }
    let mut traj = rollout(&ops, training.states.col(a.start), a.steps)?;
    traj.t0 = a.start as f64 * training.dt;
    let out = a.out.clone().unwrap_or_else(|| a.model.join("rollout.bin"));
    traj.save(&out)?;
    write_text(&out.with_extension("csv"), &traj.to_csv())?;
    match traj.diverged_at {
        Some(k) => println!("diverged at step {k}; wrote {} columns to {}", traj.len(), out.display()),
        None => println!("wrote {} columns to {}", traj.len(), out.display()),
    }
    Ok(())
}

fn read_plan_rows(comm: &CommHandle, manifest: &Manifest, align: AlignMode) -> Result<dopinf::snapshot_store::SnapshotPartition<f64>> {
    let config = TrainConfig {
        align,
        ..LearnDefaults::config()
    };
    read_rows(comm, manifest, &config)
}

/// Placeholder learning settings for commands that only need the row plan.
struct LearnDefaults;

impl LearnDefaults {
    fn config() -> TrainConfig {
        TrainConfig {
            transform: TransformConfig::default(),
            align: AlignMode::RowBalanced,
            rank: RankRequest::Fixed(1),
            gram: GramMode::Reproducible,
            form: ModelForm::Discrete,
            dt: 1.0,
            terms: ModelTerms::default(),
            search: SearchConfig {
                beta1: vec![1.0],
                beta2: vec![1.0],
                tau: 0.5,
                trial_steps: 0,
                solver: SolverKind::Cholesky,
            },
            train_cols: None,
            row_limit: None,
        }
    }
}

fn load_model(model: &Path, comm: &CommHandle) -> Result<TrainedModel<f64>> {
    let (rank, p) = (comm.rank(), comm.size());
    if !model.join(transform_file(rank, p)).exists() {
        return Err(Error::InvalidArgument(format!(
            "{} has no transform parameters for {p} ranks; use the rank count of the training run",
            model.display()
        )));
    }
    TrainedModel::load(model, rank, p)
}

fn load_trajectory(model: &TrainedModel<f64>, path: Option<&Path>) -> Result<ReducedTrajectory<f64>> {
    let traj = match path {
        Some(p) => ReducedTrajectory::load(p)?,
        None => model.training.clone(),
    };
    if traj.r() != model.factors.r() {
        return Err(Error::Shape(format!(
            "trajectory has {} modes, model has {}",
            traj.r(),
            model.factors.r()
        )));
    }
    Ok(traj)
}

fn encode_entries(entries: &[ShardEntry]) -> Vec<u8> {
    let mut s = String::new();
    for e in entries {
        s.push_str(&format!("{} {} {} {}\n", e.file, e.start_row, e.row_count, e.byte_length));
    }
    s.into_bytes()
}

fn decode_entries(bytes: &[u8]) -> Result<Vec<ShardEntry>> {
    let bad = || Error::Collective("malformed shard list".into());
    let text = std::str::from_utf8(bytes).map_err(|_| bad())?;
    text.lines()
        .map(|line| {
            let t: Vec<&str> = line.split(' ').collect();
            if t.len() != 4 {
                return Err(bad());
            }
            Ok(ShardEntry {
                index: 0,
                file: t[0].to_string(),
                start_row: t[1].parse().map_err(|_| bad())?,
                row_count: t[2].parse().map_err(|_| bad())?,
                byte_length: t[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

fn reconstruct_cmd(a: &ReconstructArgs) -> Result<Outcome> {
    let manifest = read_manifest(&a.data)?;
    run_ranks(&a.launch, |mut comm: CommHandle| {
        let model = load_model(&a.model, &comm)?;
        let raw = read_plan_rows(&comm, &manifest, a.align)?;
        let traj = load_trajectory(&model, a.trajectory.as_deref())?;
        let recon = reconstruct(&model.basis(&raw)?, &traj.states, &model.params)?;

        let h = manifest.header;
        let header = DatasetHeader::new(h.n_vars, h.rows_per_var, recon.ncols());
        let dir = a.out.parent().map(Path::to_path_buf).unwrap_or_default();
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        let stem = a.out.file_stem().and_then(|s| s.to_str()).unwrap_or("recon");
        let mut entries = Vec::new();
        let mut local = 0;
        for (k, seg) in raw.plan.row_segments(comm.rank()).into_iter().enumerate() {
            let name = format!("{stem}.rank{:04}.seg{k:04}.bin", comm.rank());
            let rows = recon.rows_range(local..local + seg.len());
            entries.push(write_shard(&dir, &name, 0, &header, seg.start, &rows)?);
            local += seg.len();
        }
        let cols = recon.ncols().min(raw.block.ncols());
        let err = relative_error(
            &mut comm,
            &recon.leading_cols(cols),
            &raw.block.leading_cols(cols),
            &raw.var_map,
            raw.n_vars,
        )?;
        let gathered = comm.allgather_bytes(encode_entries(&entries))?;
        if comm.rank() == 0 {
            let mut all = Vec::new();
            for b in &gathered {
                all.extend(decode_entries(b)?);
            }
            all.sort_by_key(|e| e.start_row);
            for (i, e) in all.iter_mut().enumerate() {
                e.index = i;
            }
            write_manifest(&a.out, &header, all)?;
            for (v, e) in err.aggregate.iter().enumerate() {
                println!("variable {v}: relative error {e:e} over {cols} stored columns");
            }
            println!("wrote {}", a.out.display());
        }
        comm.barrier()
    })
}

fn probe_cmd(a: &ProbeArgs) -> Result<Outcome> {
    let manifest = read_manifest(&a.data)?;
    run_ranks(&a.launch, |mut comm: CommHandle| {
        let model = load_model(&a.model, &comm)?;
        let raw = read_plan_rows(&comm, &manifest, a.align)?;
        let traj = load_trajectory(&model, a.trajectory.as_deref())?;
        let recon = reconstruct(&model.basis(&raw)?, &traj.states, &model.params)?;
        let h = manifest.header;
        let owned = probe(&recon, &raw.var_map, h.n_vars, h.rows_per_var, &a.probes)?;
        let all = gather_probes(&mut comm, &owned, &a.probes)?;
        if comm.rank() == 0 {
            let csv = probe_csv(&traj.times(), &all);
            match &a.out {
                Some(p) => write_text(p, &csv)?,
                None => print!("{csv}"),
            }
        }
        Ok(())
    })
}

fn bench_config(b: &BenchArgs) -> Result<BenchConfig> {
    Ok(BenchConfig {
        backend: b.backend,
        ranks: b.ranks.clone(),
        reps: b.reps,
        reduce_order: if b.tree { ReduceOrder::Tree } else { ReduceOrder::RankOrdered },
        train: b.learn.config()?,
    })
}

fn emit_report(b: &BenchArgs, csv: &str) -> Result<()> {
    match &b.out {
        Some(p) => {
            write_text(p, csv)?;
            print!("{csv}");
            Ok(())
        }
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn bench_strong_cmd(b: &BenchArgs) -> Result<()> {
    let m = read_manifest(&b.learn.data)?;
    let config = bench_config(b)?;
    let rows = match b.learn.scalar {
        Scalar::F64 => run_strong::<f64>(&m, &config)?,
        Scalar::F32 => run_strong::<f32>(&m, &config)?,
    };
    emit_report(b, &report_csv(&rows))
}

fn bench_weak_cmd(a: &BenchWeakArgs) -> Result<()> {
    let b = &a.bench;
    let m = read_manifest(&b.learn.data)?;
    let config = bench_config(b)?;
    let rows = match b.learn.scalar {
        Scalar::F64 => run_weak::<f64>(&m, &config, a.rows_per_rank)?,
        Scalar::F32 => run_weak::<f32>(&m, &config, a.rows_per_rank)?,
    };
    emit_report(b, &report_csv(&rows))
}

fn inspect_cmd(a: &InspectArgs) -> Result<()> {
    let m = read_manifest(&a.data)?;
    let h = m.header;
    println!(
        "n_rows={} n_cols={} n_vars={} rows_per_var={} shards={}",
        h.n_rows,
        h.n_cols,
        h.n_vars,
        h.rows_per_var,
        m.shards.len()
    );
    for form in [ModelForm::Discrete, ModelForm::Continuous] {
        println!(
            "max_admissible_r form={form} terms={} compact={} full_kronecker={}",
            a.terms,
            max_admissible_r(form, h.n_cols, a.terms),
            max_admissible_r_full_kronecker(form, h.n_cols, a.terms)
        );
    }
    Ok(())
}

fn dispatch(cmd: &Cmd) -> Result<Outcome> {
    let ran = |r: Result<()>| r.map(|()| Outcome::Ran);
    match cmd {
        Cmd::GenQuadratic(a) => ran(gen_quadratic_cmd(a)),
        Cmd::GenBurgers(a) => ran(gen_burgers_cmd(a)),
        Cmd::Train(a) => train_cmd(a),
        Cmd::Rollout(a) => ran(rollout_cmd(a)),
        Cmd::Reconstruct(a) => reconstruct_cmd(a),
        Cmd::Probe(a) => probe_cmd(a),
        Cmd::BenchStrong(a) => ran(bench_strong_cmd(a)),
        Cmd::BenchWeak(a) => ran(bench_weak_cmd(a)),
        Cmd::Inspect(a) => ran(inspect_cmd(a)),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match dispatch(&cli.cmd) {
        Ok(Outcome::Ran) => ExitCode::SUCCESS,
        Ok(Outcome::Spawned(status)) => ExitCode::from(status.clamp(0, 255) as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
