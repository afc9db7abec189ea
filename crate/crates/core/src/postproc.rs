//! Basis blocks on demand, reconstruction in original coordinates, error
//! tables and point probes.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::comm::CommHandle;
use crate::dimred::{global_gram, GramMode};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::repro::FixedScale;
use crate::scalar::Real;
use crate::snapshot_store::SnapshotPartition;
use crate::transforms::{inverse_transform, TransformParams};

/// This rank's rows of the POD basis, `V_{r,i} = Q_i T_r`.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisPartition<T> {
    pub rank: usize,
    pub block: Mat<T>,
    pub var_map: Vec<(usize, usize)>,
}

pub fn basis_partition<T: Real>(part: &SnapshotPartition<T>, projection: &Mat<T>) -> Result<BasisPartition<T>> {
    if projection.ncols() == 0 {
        return Err(Error::InvalidArgument("reduced dimension is zero".into()));
    }
    Ok(BasisPartition {
        rank: part.rank,
        block: part.block.matmul(projection)?,
        var_map: part.var_map.clone(),
    })
}

/// `‖VᵀV − I‖_F` over the distributed basis.
pub fn orthonormality_error<T: Real>(comm: &mut CommHandle, basis: &BasisPartition<T>) -> Result<f64> {
    let g = global_gram(comm, &basis.block, GramMode::Reproducible)?;
    let r = g.nrows();
    let mut s = 0.0;
    for j in 0..r {
        for i in 0..r {
            let d = g[(i, j)].to_f64() - if i == j { 1.0 } else { 0.0 };
            s += d * d;
        }
    }
    Ok(s.sqrt())
}

/// `V_{r,i} Q̃` mapped back through the inverse transforms.
pub fn reconstruct<T: Real>(
    basis: &BasisPartition<T>,
    trajectory: &Mat<T>,
    params: &TransformParams<T>,
) -> Result<Mat<T>> {
    inverse_transform(&basis.block.matmul(trajectory)?, params)
}

/// Relative errors per variable and time instant.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorTable {
    /// `[variable][time]`; absolute where the reference norm is zero.
    pub per_time: Vec<Vec<f64>>,
    pub zero_reference: Vec<Vec<bool>>,
    /// Average of `per_time` over time, per variable.
    pub mean_over_time: Vec<f64>,
    /// `‖approx_v − ref_v‖_F / ‖ref_v‖_F` over the whole window, per variable.
    pub aggregate: Vec<f64>,
}

impl ErrorTable {
    /// Largest aggregate error over the variables.
    pub fn worst_aggregate(&self) -> f64 {
        self.aggregate.iter().fold(0.0, |m, &x| m.max(x))
    }
}

/// Compares two blocks with identical layout. Squared norms are summed on a
/// fixed-point grid so the table does not depend on the rank count.
pub fn relative_error<T: Real>(
    comm: &mut CommHandle,
    approx: &Mat<T>,
    reference: &Mat<T>,
    var_map: &[(usize, usize)],
    n_vars: usize,
) -> Result<ErrorTable> {
    if approx.shape() != reference.shape() || var_map.len() != reference.nrows() {
        return Err(Error::Shape(format!(
            "approximation {:?}, reference {:?}, {} mapped rows",
            approx.shape(),
            reference.shape(),
            var_map.len()
        )));
    }
    if let Some(&(v, _)) = var_map.iter().find(|(v, _)| *v >= n_vars) {
        return Err(Error::InvalidArgument(format!("row maps to variable {v} of {n_vars}")));
    }
    let n_t = reference.ncols();
    let mut local_max = 0.0f64;
    for (a, b) in approx.as_slice().iter().zip(reference.as_slice()) {
        local_max = local_max.max((*a - *b).abs().to_f64()).max(b.abs().to_f64());
    }
    if !local_max.is_finite() {
        return Err(Error::InvalidArgument("error inputs hold non-finite values".into()));
    }
    let max_abs = comm.allreduce_max_vector(&[local_max])?[0];
    let scale = FixedScale::for_products(max_abs);
    // [diff² | ref²], each laid out variable-major over time
    let mut acc = vec![0i128; 2 * n_vars * n_t];
    for j in 0..n_t {
        for ((&a, &b), &(v, _)) in approx.col(j).iter().zip(reference.col(j)).zip(var_map) {
            let d = (a - b).to_f64();
            let r = b.to_f64();
            acc[v * n_t + j] += scale.to_fixed(d * d);
            acc[(n_vars + v) * n_t + j] += scale.to_fixed(r * r);
        }
    }
    let sums = comm.allreduce_sum_fixed(&acc)?;
    let mut table = ErrorTable {
        per_time: vec![vec![0.0; n_t]; n_vars],
        zero_reference: vec![vec![false; n_t]; n_vars],
        mean_over_time: vec![0.0; n_vars],
        aggregate: vec![0.0; n_vars],
    };
    for v in 0..n_vars {
        let (mut err_total, mut ref_total) = (0i128, 0i128);
        for j in 0..n_t {
            let e = sums[v * n_t + j];
            let r = sums[(n_vars + v) * n_t + j];
            err_total += e;
            ref_total += r;
            let e = scale.to_float(e).sqrt();
            let r = scale.to_float(r).sqrt();
            table.zero_reference[v][j] = r == 0.0;
            table.per_time[v][j] = if r == 0.0 { e } else { e / r };
        }
        table.mean_over_time[v] = table.per_time[v].iter().sum::<f64>() / n_t.max(1) as f64;
        let e = scale.to_float(err_total).sqrt();
        let r = scale.to_float(ref_total).sqrt();
        table.aggregate[v] = if r == 0.0 { e } else { e / r };
    }
    Ok(table)
}

/// A grid row named by variable and cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Probe {
    pub variable: usize,
    pub cell: usize,
}

impl FromStr for Probe {
    type Err = Error;

    /// `<variable>:<cell>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("bad probe `{s}` (expected <variable>:<cell>)"));
        let (v, c) = s.split_once(':').ok_or_else(bad)?;
        Ok(Probe {
            variable: v.trim().parse().map_err(|_| bad())?,
            cell: c.trim().parse().map_err(|_| bad())?,
        })
    }
}

/// Time series of the probes this rank owns, in probe-list order.
pub fn probe<T: Real>(
    block: &Mat<T>,
    var_map: &[(usize, usize)],
    n_vars: usize,
    rows_per_var: usize,
    probes: &[Probe],
) -> Result<Vec<(Probe, Vec<T>)>> {
    let mut out = Vec::new();
    for &p in probes {
        if p.variable >= n_vars || p.cell >= rows_per_var {
            return Err(Error::InvalidArgument(format!(
                "probe {}:{} outside {n_vars} variables x {rows_per_var} cells",
                p.variable, p.cell
            )));
        }
        if let Some(i) = var_map.iter().position(|&(v, c)| v == p.variable && c == p.cell) {
            out.push((p, block.row(i)));
        }
    }
    Ok(out)
}

/// `t,v:c,...` table; empty when no series are given.
pub fn probe_csv<T: Real>(times: &[f64], series: &[(Probe, Vec<T>)]) -> String {
    if series.is_empty() {
        return String::new();
    }
    let mut s = String::from("t");
    for (p, _) in series {
        let _ = write!(s, ",{}:{}", p.variable, p.cell);
    }
    s.push('\n');
    for (j, t) in times.iter().enumerate() {
        let _ = write!(s, "{t:e}");
        for (_, v) in series {
            let _ = write!(s, ",{:e}", v[j].to_f64());
        }
        s.push('\n');
    }
    s
}

/// Collects every rank's probe series on all ranks, in probe-list order.
pub fn gather_probes<T: Real>(
    comm: &mut CommHandle,
    owned: &[(Probe, Vec<T>)],
    probes: &[Probe],
) -> Result<Vec<(Probe, Vec<T>)>> {
    let mut payload = Vec::new();
    for (p, series) in owned {
        let idx = probes.iter().position(|q| q == p).unwrap_or(usize::MAX);
        payload.extend_from_slice(&(idx as u64).to_le_bytes());
        payload.extend_from_slice(&(series.len() as u64).to_le_bytes());
        for x in series {
            payload.extend_from_slice(&Real::to_f64(*x).to_le_bytes());
        }
    }
    let mut slots: Vec<Option<Vec<T>>> = vec![None; probes.len()];
    for bytes in comm.allgather_bytes(payload)? {
        if bytes.len() % 8 != 0 {
            return Err(Error::Collective("truncated probe payload".into()));
        }
        let mut words = bytes.chunks_exact(8).map(|w| <[u8; 8]>::try_from(w).unwrap());
        while let Some(head) = words.next() {
            let idx = u64::from_le_bytes(head) as usize;
            let len = u64::from_le_bytes(
                words
                    .next()
                    .ok_or_else(|| Error::Collective("truncated probe payload".into()))?,
            ) as usize;
            let series: Vec<T> = words.by_ref().take(len).map(|w| T::of(f64::from_le_bytes(w))).collect();
            if series.len() != len {
                return Err(Error::Collective("truncated probe payload".into()));
            }
            if let Some(slot) = slots.get_mut(idx) {
                *slot = Some(series);
            }
        }
    }
    Ok(probes
        .iter()
        .zip(slots)
        .filter_map(|(p, s)| s.map(|s| (*p, s)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comm::run_in_process;
    use crate::snapshot_store::{plan_partition, AlignMode};
    use crate::transforms::{transform, TransformConfig};

    fn single(block: Mat<f64>) -> SnapshotPartition<f64> {
        let plan = plan_partition(block.nrows(), 1, AlignMode::RowBalanced, block.nrows()).unwrap();
        SnapshotPartition::from_block(plan, 0, block).unwrap()
    }

    #[test]
    fn diagonal_basis_is_identity() {
        let part = single(Mat::diag(&[3.0, 2.0]));
        let b = basis_partition(&part, &Mat::diag(&[1.0 / 3.0, 0.5])).unwrap();
        assert_eq!(b.block, Mat::identity(2));
        assert_eq!(orthonormality_error(&mut CommHandle::loopback(), &b).unwrap(), 0.0);
        assert!(basis_partition(&part, &Mat::zeros(2, 0)).is_err());
    }

    #[test]
    fn zero_trajectory_reconstructs_the_mean() {
        let part = single(Mat::from_rows(&[[1.0, 3.0], [2.0, 6.0]]));
        let (t, params) = transform(&part, &TransformConfig::default(), &mut CommHandle::loopback()).unwrap();
        let basis = basis_partition(&t, &Mat::from_rows(&[[1.0], [0.0]])).unwrap();
        let out = reconstruct(&basis, &Mat::zeros(1, 3), &params).unwrap();
        assert_eq!(out, Mat::from_rows(&[[2.0, 2.0, 2.0], [4.0, 4.0, 4.0]]));
        let one = reconstruct(&basis, &Mat::zeros(1, 1), &params).unwrap();
        assert_eq!(one.shape(), (2, 1));
    }

    #[test]
    fn error_table_examples() {
        let reference = Mat::from_rows(&[[1.0, 2.0], [3.0, -4.0]]);
        let map = [(0, 0), (0, 1)];
        let mut lb = CommHandle::loopback();
        let same = relative_error(&mut lb, &reference, &reference, &map, 1).unwrap();
        assert_eq!(same.per_time, vec![vec![0.0, 0.0]]);
        let scaled = reference.map(|x| 1.1 * x);
        let t = relative_error(&mut lb, &scaled, &reference, &map, 1).unwrap();
        for e in &t.per_time[0] {
            assert!((e - 0.1).abs() < 1e-14);
        }
        assert!((t.aggregate[0] - 0.1).abs() < 1e-14);
    }

    #[test]
    fn zero_reference_is_flagged_absolute() {
        let reference = Mat::from_rows(&[[0.0, 1.0]]);
        let approx = Mat::from_rows(&[[0.5, 1.0]]);
        let t = relative_error(&mut CommHandle::loopback(), &approx, &reference, &[(0, 0)], 1).unwrap();
        assert_eq!(t.zero_reference, vec![vec![true, false]]);
        assert_eq!(t.per_time[0][0], 0.5);
    }

    #[test]
    fn error_table_is_independent_of_rank_count() {
        let reference = Mat::from_fn(9, 4, |i, j| ((i * 5 + j * 3) % 7) as f64 - 2.5);
        let approx = reference.map(|x| x * 1.01 + 0.003);
        let plan1 = plan_partition(9, 1, AlignMode::VariableAligned, 3).unwrap();
        let serial = relative_error(
            &mut CommHandle::loopback(),
            &approx,
            &reference,
            &plan1.variable_map(0),
            3,
        )
        .unwrap();
        let plan = plan_partition(9, 3, AlignMode::VariableAligned, 3).unwrap();
        let refs = SnapshotPartition::split(&reference, &plan).unwrap();
        let apps = SnapshotPartition::split(&approx, &plan).unwrap();
        let tables = run_in_process(3, |mut c| {
            let r = c.rank();
            relative_error(&mut c, &apps[r].block, &refs[r].block, &refs[r].var_map, 3).unwrap()
        });
        assert!(tables.iter().all(|t| *t == serial));
    }

    #[test]
    fn probes_follow_ownership() {
        let block = Mat::from_rows(&[[5.0, 5.0, 5.0], [1.0, 2.0, 3.0]]);
        let map = [(0, 4), (1, 4)];
        let got = probe(&block, &map, 2, 8, &[Probe { variable: 0, cell: 4 }]).unwrap();
        assert_eq!(got[0].1, vec![5.0; 3]);
        assert!(probe(&block, &map, 2, 8, &[Probe { variable: 1, cell: 0 }]).unwrap().is_empty());
        assert!(probe(&block, &map, 2, 8, &[Probe { variable: 2, cell: 0 }]).is_err());
        assert_eq!(probe_csv::<f64>(&[0.0], &[]), "");
        assert_eq!(probe_csv(&[0.0, 1.0, 2.0], &got), "t,0:4\n0e0,5e0\n1e0,5e0\n2e0,5e0\n");
    }

    #[test]
    fn gathered_probes_over_all_rows_give_the_transpose() {
        let full = Mat::from_fn(6, 3, |i, j| (i * 10 + j) as f64);
        let plan = plan_partition(6, 2, AlignMode::VariableAligned, 3).unwrap();
        let parts = SnapshotPartition::split(&full, &plan).unwrap();
        let probes: Vec<Probe> = (0..6).map(|g| Probe { variable: g / 3, cell: g % 3 }).collect();
        let out = run_in_process(2, |mut c| {
            let p = &parts[c.rank()];
            let owned = probe(&p.block, &p.var_map, 2, 3, &probes).unwrap();
            gather_probes(&mut c, &owned, &probes).unwrap()
        });
        let t = full.transpose();
        for (g, (_, series)) in out[0].iter().enumerate() {
            assert_eq!(series.as_slice(), t.col(g));
        }
        assert_eq!(out[0], out[1]);
    }
}
