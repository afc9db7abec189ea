//! Regularization grid search spread over ranks.

use std::fmt::Write as _;

use super::{build_data_matrix, ModelForm, ModelTerms, Regression, RomOperators, SolverKind};
use crate::comm::{ArgminKey, CommHandle};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::rollout::rollout;
use crate::scalar::Real;

/// Per-mode mean and maximum deviation of the training trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingStats<T> {
    pub mean: Vec<T>,
    pub max_dev: Vec<T>,
}

impl<T: Real> TrainingStats<T> {
    pub fn from_trajectory(qhat: &Mat<T>) -> Self {
        let (r, n) = qhat.shape();
        let mean: Vec<T> = (0..r)
            .map(|k| (0..n).map(|j| qhat[(k, j)]).sum::<T>() / T::of_usize(n))
            .collect();
        let max_dev = (0..r)
            .map(|k| (0..n).fold(T::zero(), |m, j| m.max((qhat[(k, j)] - mean[k]).abs())))
            .collect();
        TrainingStats { mean, max_dev }
    }
}

/// True when every mode of `trial` stays within `(1 + τ)` times its training
/// deviation from the training mean.
pub fn stability_check<T: Real>(trial: &Mat<T>, stats: &TrainingStats<T>, tau: f64) -> bool {
    if !trial.all_finite() || trial.nrows() != stats.mean.len() {
        return false;
    }
    let largest = stats.max_dev.iter().fold(T::zero(), |m, &d| m.max(d));
    let grow = T::one() + T::of(tau);
    (0..trial.nrows()).all(|k| {
        let d = stats.max_dev[k];
        let bound = if d > T::zero() { grow * d } else { T::of(1e-12) * largest };
        (0..trial.ncols()).all(|j| (trial[(k, j)] - stats.mean[k]).abs() <= bound)
    })
}

/// Result of fitting and rolling out one regularization pair.
#[derive(Debug, Clone)]
pub struct CandidateFit<T> {
    pub ops: RomOperators<T>,
    /// Reduced rollout over the trial horizon.
    pub trial: Mat<T>,
    pub diverged: bool,
    /// Mean squared error against the training trajectory.
    pub training_error: f64,
}

/// Produces a fit for one `(β₁, β₂)`.
pub trait CandidateEvaluator<T>: Sync {
    fn evaluate(&self, beta1: f64, beta2: f64) -> Result<CandidateFit<T>>;
}

impl<T, F> CandidateEvaluator<T> for F
where
    F: Fn(f64, f64) -> Result<CandidateFit<T>> + Sync,
{
    fn evaluate(&self, beta1: f64, beta2: f64) -> Result<CandidateFit<T>> {
        self(beta1, beta2)
    }
}

/// Solve, roll out from the first training column, score against training.
pub struct OpInfEvaluator<'a, T> {
    pub regression: &'a Regression<T>,
    pub training: &'a Mat<T>,
    pub steps: usize,
    pub solver: SolverKind,
}

impl<T: Real> CandidateEvaluator<T> for OpInfEvaluator<'_, T> {
    fn evaluate(&self, beta1: f64, beta2: f64) -> Result<CandidateFit<T>> {
        let ops = self.regression.solve(beta1, beta2, self.solver)?;
        let q0 = self.training.col(0);
        let traj = rollout(&ops, q0, self.steps)?;
        let n = self.training.ncols();
        let training_error = if traj.len() < n {
            f64::INFINITY
        } else {
            let mut sum = 0.0;
            for j in 0..n {
                for (&a, &b) in traj.states.col(j).iter().zip(self.training.col(j)) {
                    let d = (a - b).to_f64();
                    sum += d * d;
                }
            }
            sum / (n * self.training.nrows()) as f64
        };
        Ok(CandidateFit {
            ops,
            diverged: traj.diverged_at.is_some(),
            trial: traj.states,
            training_error,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig {
    pub beta1: Vec<f64>,
    pub beta2: Vec<f64>,
    pub tau: f64,
    /// Trial horizon in steps; the rollout covers at least the training span.
    pub trial_steps: usize,
    pub solver: SolverKind,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateRecord {
    pub beta1: f64,
    pub beta2: f64,
    /// Training error, `+∞` when infeasible.
    pub error: f64,
    /// Training error before the feasibility filter.
    pub fit_error: f64,
    pub feasible: bool,
    /// Rank that evaluated the pair.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegSearchOutcome {
    pub beta1_grid: Vec<f64>,
    pub beta2_grid: Vec<f64>,
    /// One record per grid pair, row-major over `(β₁, β₂)`.
    pub records: Vec<CandidateRecord>,
    pub winner: (f64, f64),
    pub winner_error: f64,
    pub owner: usize,
    pub tau: f64,
    pub trial_steps: usize,
}

impl RegSearchOutcome {
    pub fn pair_count(&self) -> usize {
        self.records.len()
    }

    /// `beta1,beta2,error,feasible,rank`.
    pub fn search_log_csv(&self) -> String {
        let mut s = String::from("beta1,beta2,error,feasible,rank\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{:e},{:e},{:e},{},{}",
                r.beta1, r.beta2, r.error, r.feasible as u8, r.rank
            );
        }
        s
    }
}

/// Slots handled by `rank`: contiguous blocks of `ceil(B/p)`, with indices
/// past the end mapped onto the last pair.
fn assigned_pairs(b: usize, p: usize, rank: usize) -> Vec<usize> {
    let per = b.div_ceil(p);
    (rank * per..(rank + 1) * per).map(|s| s.min(b - 1)).collect()
}

fn encode_records(recs: &[(usize, CandidateRecord)]) -> Vec<u8> {
    let mut out = Vec::with_capacity(recs.len() * 41);
    for (idx, r) in recs {
        out.extend_from_slice(&(*idx as u64).to_le_bytes());
        for v in [r.beta1, r.beta2, r.error, r.fit_error] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(r.feasible as u8);
    }
    out
}

fn decode_records(bytes: &[u8], rank: usize) -> Result<Vec<(usize, CandidateRecord)>> {
    if bytes.len() % 41 != 0 {
        return Err(Error::Collective("malformed search records".into()));
    }
    Ok(bytes
        .chunks_exact(41)
        .map(|c| {
            let f = |o: usize| f64::from_le_bytes(c[o..o + 8].try_into().unwrap());
            let idx = u64::from_le_bytes(c[..8].try_into().unwrap()) as usize;
            (
                idx,
                CandidateRecord {
                    beta1: f(8),
                    beta2: f(16),
                    error: f(24),
                    fit_error: f(32),
                    feasible: c[40] != 0,
                    rank,
                },
            )
        })
        .collect())
}

/// Distributed search over `beta1 × beta2`. Every rank returns the same
/// winning operators and the full search log.
pub fn grid_search<T: Real, E: CandidateEvaluator<T> + ?Sized>(
    comm: &mut CommHandle,
    evaluator: &E,
    stats: &TrainingStats<T>,
    beta1: &[f64],
    beta2: &[f64],
    tau: f64,
    trial_steps: usize,
) -> Result<(RomOperators<T>, RegSearchOutcome)> {
    if beta1.is_empty() || beta2.is_empty() {
        return Err(Error::InvalidArgument("regularization grids must be nonempty".into()));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidArgument(format!("tau = {tau} outside (0, 1)")));
    }
    let b = beta1.len() * beta2.len();
    let rank = comm.rank();
    let mut local_records = Vec::new();
    let mut best: Option<(ArgminKey, RomOperators<T>)> = None;
    for idx in assigned_pairs(b, comm.size(), rank) {
        let (b1, b2) = (beta1[idx / beta2.len()], beta2[idx % beta2.len()]);
        let (fit_error, feasible, ops) = match evaluator.evaluate(b1, b2) {
            Ok(fit) => {
                let ok = !fit.diverged
                    && fit.training_error.is_finite()
                    && stability_check(&fit.trial, stats, tau);
                (fit.training_error, ok, Some(fit.ops))
            }
            Err(Error::SingularSystem) => (f64::INFINITY, false, None),
            Err(e) => return Err(e),
        };
        let error = if feasible { fit_error } else { f64::INFINITY };
        let key = ArgminKey {
            error,
            beta1: b1,
            beta2: b2,
            owner: rank,
        };
        if let Some(ops) = ops {
            if best.as_ref().is_none_or(|(k, _)| key.cmp_key(k).is_lt()) {
                best = Some((key, ops));
            }
        }
        if !local_records.iter().any(|(i, _)| *i == idx) {
            local_records.push((
                idx,
                CandidateRecord {
                    beta1: b1,
                    beta2: b2,
                    error,
                    fit_error,
                    feasible,
                    rank,
                },
            ));
        }
    }

    let gathered = comm.allgather_bytes(encode_records(&local_records))?;
    let mut records: Vec<Option<CandidateRecord>> = vec![None; b];
    for (r, bytes) in gathered.iter().enumerate() {
        for (idx, rec) in decode_records(bytes, r)? {
            if idx < b && records[idx].is_none() {
                records[idx] = Some(rec);
            }
        }
    }
    let records: Vec<CandidateRecord> = records
        .into_iter()
        .map(|r| r.ok_or_else(|| Error::Collective("search log is missing pairs".into())))
        .collect::<Result<_>>()?;

    let local_key = best
        .as_ref()
        .map_or(ArgminKey::infeasible(f64::INFINITY, f64::INFINITY, rank), |(k, _)| *k);
    let winner = comm.allreduce_argmin(local_key)?;
    if !winner.error.is_finite() {
        let best_error = records.iter().map(|r| r.fit_error).fold(f64::INFINITY, f64::min);
        return Err(Error::NoFeasiblePair { best_error });
    }
    let payload = if rank == winner.owner {
        best.as_ref().map(|(_, ops)| ops.to_bytes()).unwrap_or_default()
    } else {
        Vec::new()
    };
    let ops = RomOperators::from_bytes(&comm.broadcast_bytes(winner.owner, payload)?)?;
    Ok((
        ops,
        RegSearchOutcome {
            beta1_grid: beta1.to_vec(),
            beta2_grid: beta2.to_vec(),
            records,
            winner: (winner.beta1, winner.beta2),
            winner_error: winner.error,
            owner: winner.owner,
            tau,
            trial_steps,
        },
    ))
}

/// Builds the regression from `qhat` and runs [`grid_search`] with the
/// standard evaluator.
pub fn grid_search_opinf<T: Real>(
    comm: &mut CommHandle,
    qhat: &Mat<T>,
    form: ModelForm,
    dt: f64,
    terms: ModelTerms,
    config: &SearchConfig,
) -> Result<(RomOperators<T>, RegSearchOutcome)> {
    let regression = Regression::new(build_data_matrix(qhat, form, dt, terms)?)?;
    let stats = TrainingStats::from_trajectory(qhat);
    let steps = config.trial_steps.max(qhat.ncols() - 1);
    let evaluator = OpInfEvaluator {
        regression: &regression,
        training: qhat,
        steps,
        solver: config.solver,
    };
    grid_search(comm, &evaluator, &stats, &config.beta1, &config.beta2, config.tau, steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comm::run_in_process;

    #[test]
    fn stability_examples() {
        let stats = TrainingStats {
            mean: vec![0.0],
            max_dev: vec![1.0],
        };
        assert!(stability_check(&Mat::from_rows(&[[0.0, 1.1]]), &stats, 0.2));
        assert!(!stability_check(&Mat::from_rows(&[[0.0, -1.3]]), &stats, 0.2));
        assert!(!stability_check(&Mat::from_rows(&[[0.0, f64::NAN]]), &stats, 0.2));
    }

    #[test]
    fn zero_deviation_mode_uses_tiny_absolute_bound() {
        let stats = TrainingStats {
            mean: vec![0.0, 3.0],
            max_dev: vec![2.0, 0.0],
        };
        assert!(stability_check(&Mat::from_rows(&[[1.0], [3.0]]), &stats, 0.1));
        assert!(!stability_check(&Mat::from_rows(&[[1.0], [3.0 + 1e-9]]), &stats, 0.1));
    }

    #[test]
    fn pairs_are_split_in_contiguous_blocks() {
        assert_eq!(assigned_pairs(4, 2, 0), vec![0, 1]);
        assert_eq!(assigned_pairs(4, 2, 1), vec![2, 3]);
        assert_eq!(assigned_pairs(5, 2, 1), vec![3, 4, 4]);
        assert_eq!(assigned_pairs(1, 1, 0), vec![0]);
    }

    fn fixed_fit(error: f64, dev: f64) -> CandidateFit<f64> {
        CandidateFit {
            ops: RomOperators::zeros(1, ModelForm::Discrete, 1.0),
            trial: Mat::from_rows(&[[0.0, dev]]),
            diverged: false,
            training_error: error,
        }
    }

    #[test]
    fn smaller_error_on_second_rank_wins() {
        let stats = TrainingStats {
            mean: vec![0.0],
            max_dev: vec![1.0],
        };
        let eval = |b1: f64, _b2: f64| Ok(fixed_fit(if b1 < 1.5 { 0.5 } else { 0.3 }, 1.0));
        let out = run_in_process(2, |mut c| {
            grid_search(&mut c, &eval, &stats, &[1.0, 2.0], &[0.0], 0.1, 1).unwrap().1
        });
        assert_eq!(out[0], out[1]);
        assert_eq!(out[0].owner, 1);
        assert_eq!(out[0].winner, (2.0, 0.0));
        assert_eq!(out[0].records[1].rank, 1);
    }

    #[test]
    fn all_infeasible_reports_best_error() {
        let stats = TrainingStats {
            mean: vec![0.0],
            max_dev: vec![1.0],
        };
        let eval = |b1: f64, _b2: f64| Ok(fixed_fit(b1, 5.0));
        let err = grid_search(&mut CommHandle::loopback(), &eval, &stats, &[0.25, 2.0], &[1.0], 0.1, 1)
            .unwrap_err();
        assert!(matches!(err, Error::NoFeasiblePair { best_error } if best_error == 0.25));
    }

    #[test]
    fn search_log_format() {
        let stats = TrainingStats {
            mean: vec![0.0],
            max_dev: vec![1.0],
        };
        let eval = |_: f64, _: f64| Ok(fixed_fit(0.5, 1.0));
        let (_, out) =
            grid_search(&mut CommHandle::loopback(), &eval, &stats, &[1.0], &[2.0], 0.1, 1).unwrap();
        assert_eq!(out.search_log_csv(), "beta1,beta2,error,feasible,rank\n1e0,2e0,5e-1,1,0\n");
    }
}
