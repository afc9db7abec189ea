//! Strong and weak scaling runs of the training pipeline with a per-phase
//! timing report.

use std::fmt::Write as _;

use crate::comm::{run_group, BackendKind, ReduceOrder};
use crate::error::{Error, Result};
use crate::pipeline::{train, PhaseTimings, TrainConfig};
use crate::scalar::Real;
use crate::snapshot_store::Manifest;

pub const REPORT_HEADER: &str = "mode,p,reps,total_mean,total_std,io,compute,learn,comm,speedup_or_efficiency";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalingMode {
    Strong,
    Weak,
}

impl ScalingMode {
    fn as_str(self) -> &'static str {
        match self {
            ScalingMode::Strong => "strong",
            ScalingMode::Weak => "weak",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub backend: BackendKind,
    pub ranks: Vec<usize>,
    pub reps: usize,
    pub reduce_order: ReduceOrder,
    pub train: TrainConfig,
}

/// Mean timings over the repetitions of one rank count. Each phase takes
/// the slowest rank of a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRow {
    pub mode: ScalingMode,
    pub p: usize,
    pub reps: usize,
    pub total_mean: f64,
    pub total_std: f64,
    pub io: f64,
    pub compute: f64,
    pub learn: f64,
    pub comm: f64,
    /// `T(first) / T(p)`: speedup for strong scaling, efficiency for weak.
    pub ratio: f64,
}

fn slowest(ranks: &[PhaseTimings]) -> PhaseTimings {
    ranks.iter().fold(PhaseTimings::default(), |m, t| PhaseTimings {
        io: m.io.max(t.io),
        compute: m.compute.max(t.compute),
        learn: m.learn.max(t.learn),
        comm: m.comm.max(t.comm),
        total: m.total.max(t.total),
    })
}

fn run_once<T: Real>(manifest: &Manifest, config: &BenchConfig, train_config: &TrainConfig, p: usize) -> Result<PhaseTimings> {
    let per_rank = run_group(config.backend, p, |mut comm| {
        comm.set_reduce_order(config.reduce_order);
        train::<T>(&mut comm, manifest, train_config).map(|out| out.timings)
    })?;
    Ok(slowest(&per_rank.into_iter().collect::<Result<Vec<_>>>()?))
}

fn summarize(mode: ScalingMode, p: usize, runs: &[PhaseTimings]) -> BenchRow {
    let n = runs.len() as f64;
    let mean = |f: fn(&PhaseTimings) -> f64| runs.iter().map(f).sum::<f64>() / n;
    let total_mean = mean(|t| t.total);
    let total_std = if runs.len() > 1 {
        (runs.iter().map(|t| (t.total - total_mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    BenchRow {
        mode,
        p,
        reps: runs.len(),
        total_mean,
        total_std,
        io: mean(|t| t.io),
        compute: mean(|t| t.compute),
        learn: mean(|t| t.learn),
        comm: mean(|t| t.comm),
        ratio: 1.0,
    }
}

fn check(config: &BenchConfig) -> Result<()> {
    if config.ranks.is_empty() || config.ranks.contains(&0) || config.reps == 0 {
        return Err(Error::InvalidArgument("need at least one positive rank count and one repetition".into()));
    }
    Ok(())
}

fn finish(mut rows: Vec<BenchRow>) -> Vec<BenchRow> {
    let base = rows[0].total_mean;
    for r in &mut rows {
        r.ratio = base / r.total_mean;
    }
    rows
}

/// Fixed problem, growing rank count.
pub fn run_strong<T: Real>(manifest: &Manifest, config: &BenchConfig) -> Result<Vec<BenchRow>> {
    check(config)?;
    let mut rows = Vec::new();
    for &p in &config.ranks {
        let runs = (0..config.reps)
            .map(|_| run_once::<T>(manifest, config, &config.train, p))
            .collect::<Result<Vec<_>>>()?;
        rows.push(summarize(ScalingMode::Strong, p, &runs));
    }
    Ok(finish(rows))
}

/// `rows_per_rank · p` leading rows and `p` regularization pairs per run, so
/// the work per rank stays fixed.
pub fn run_weak<T: Real>(manifest: &Manifest, config: &BenchConfig, rows_per_rank: usize) -> Result<Vec<BenchRow>> {
    check(config)?;
    let search = &config.train.search;
    let (lo, hi) = search
        .beta1
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &b| (lo.min(b), hi.max(b)));
    if !(lo > 0.0) || search.beta2.is_empty() {
        return Err(Error::InvalidArgument("weak scaling needs positive β₁ values and one β₂".into()));
    }
    let mut rows = Vec::new();
    for &p in &config.ranks {
        let n_rows = rows_per_rank * p;
        if n_rows > manifest.header.n_rows {
            return Err(Error::InvalidArgument(format!(
                "{p} ranks need {n_rows} rows, dataset has {}",
                manifest.header.n_rows
            )));
        }
        let mut train = config.train.clone();
        train.row_limit = Some(n_rows);
        train.search.beta1 = log_grid(lo, hi, p);
        train.search.beta2 = vec![search.beta2[0]];
        let runs = (0..config.reps)
            .map(|_| run_once::<T>(manifest, config, &train, p))
            .collect::<Result<Vec<_>>>()?;
        rows.push(summarize(ScalingMode::Weak, p, &runs));
    }
    Ok(finish(rows))
}

/// `n` log-spaced values from `lo` to `hi`; `[lo]` when `n == 1`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![lo];
    }
    let (a, b) = (lo.log10(), hi.log10());
    (0..n)
        .map(|k| if k + 1 == n { hi } else { 10f64.powf(a + (b - a) * k as f64 / (n - 1) as f64) })
        .collect()
}

pub fn report_csv(rows: &[BenchRow]) -> String {
    let mut s = format!("{REPORT_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.4}",
            r.mode.as_str(),
            r.p,
            r.reps,
            r.total_mean,
            r.total_std,
            r.io,
            r.compute,
            r.learn,
            r.comm,
            r.ratio
        );
    }
    s
}

/// Parses a report, rejecting anything that does not follow the schema.
pub fn parse_report(text: &str) -> Result<Vec<BenchRow>> {
    let bad = |line: usize, what: &str| Error::Format(format!("bench report line {line}: {what}"));
    let mut lines = text.lines();
    if lines.next() != Some(REPORT_HEADER) {
        return Err(bad(1, "unexpected header"));
    }
    lines
        .enumerate()
        .map(|(k, line)| {
            let n = k + 2;
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 10 {
                return Err(bad(n, "expected 10 fields"));
            }
            let mode = match f[0] {
                "strong" => ScalingMode::Strong,
                "weak" => ScalingMode::Weak,
                _ => return Err(bad(n, "mode must be strong or weak")),
            };
            let int = |s: &str| s.parse::<usize>().map_err(|_| bad(n, "expected an integer"));
            let num = |s: &str| match s.parse::<f64>() {
                Ok(x) if x.is_finite() && x >= 0.0 => Ok(x),
                _ => Err(bad(n, "expected a finite non-negative number")),
            };
            Ok(BenchRow {
                mode,
                p: int(f[1])?,
                reps: int(f[2])?,
                total_mean: num(f[3])?,
                total_std: num(f[4])?,
                io: num(f[5])?,
                compute: num(f[6])?,
                learn: num(f[7])?,
                comm: num(f[8])?,
                ratio: num(f[9])?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dimred::{GramMode, RankRequest};
    use crate::linalg::Mat;
    use crate::opinf::{ModelForm, ModelTerms, SearchConfig, SolverKind};
    use crate::snapshot_store::{write_dataset, AlignMode, DatasetHeader};
    use crate::transforms::TransformConfig;

    fn setup(dir: &std::path::Path) -> (Manifest, BenchConfig) {
        let s = Mat::from_fn(64, 12, |i, j| (i as f64 * 0.1 - j as f64 * 0.05).sin() * 0.97f64.powi(j as i32));
        let m = write_dataset(&s, &DatasetHeader::new(1, 64, 12), 2, dir.join("b.manifest")).unwrap();
        let config = BenchConfig {
            backend: BackendKind::InProcess,
            ranks: vec![1, 2],
            reps: 2,
            reduce_order: ReduceOrder::Tree,
            train: TrainConfig {
                transform: TransformConfig::default(),
                align: AlignMode::RowBalanced,
                rank: RankRequest::Fixed(2),
                gram: GramMode::Float,
                form: ModelForm::Discrete,
                dt: 1.0,
                terms: ModelTerms::default(),
                search: SearchConfig {
                    beta1: vec![1e-6, 1e-2],
                    beta2: vec![1e-4],
                    tau: 0.9,
                    trial_steps: 0,
                    solver: SolverKind::Cholesky,
                },
                train_cols: None,
                row_limit: None,
            },
        };
        (m, config)
    }

    #[test]
    fn strong_and_weak_reports_follow_the_schema() {
        let dir = tempfile::tempdir().unwrap();
        let (m, config) = setup(dir.path());
        let strong = run_strong::<f64>(&m, &config).unwrap();
        let weak = run_weak::<f32>(&m, &config, 32).unwrap();
        let csv = report_csv(&[strong, weak].concat());
        let rows = parse_report(&csv).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[0].ratio, 1.0);
        assert!(rows.iter().all(|r| r.reps == 2 && r.total_mean > 0.0));
        assert_eq!(rows[3].mode, ScalingMode::Weak);
    }

    #[test]
    fn weak_scaling_rejects_too_many_rows() {
        let dir = tempfile::tempdir().unwrap();
        let (m, config) = setup(dir.path());
        assert!(run_weak::<f64>(&m, &config, 40).is_err());
    }

    #[test]
    fn malformed_reports_are_rejected() {
        assert!(parse_report("mode,p\n").is_err());
        let bad = format!("{REPORT_HEADER}\nstrong,1,1,NaN,0,0,0,0,0,1\n");
        assert!(parse_report(&bad).is_err());
        let bad = format!("{REPORT_HEADER}\nsideways,1,1,1,0,0,0,0,0,1\n");
        assert!(parse_report(&bad).is_err());
    }

    #[test]
    fn grid_endpoints() {
        assert_eq!(log_grid(1e-4, 1.0, 1), vec![1e-4]);
        let g = log_grid(1e-4, 1.0, 5);
        assert_eq!((g[0], g[4]), (1e-4, 1.0));
        assert!((g[2] - 1e-2).abs() < 1e-15);
    }
}
