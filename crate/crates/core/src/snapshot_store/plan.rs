use std::ops::Range;

use crate::error::{Error, Result};

/// How rows are assigned to ranks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AlignMode {
    /// Contiguous global row blocks of (nearly) equal height.
    RowBalanced,
    /// Cells are split across ranks; every rank holds all variables for its
    /// contiguous cell range.
    VariableAligned,
}

impl std::str::FromStr for AlignMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "row-balanced" | "rows" => Ok(AlignMode::RowBalanced),
            "variable-aligned" | "vars" => Ok(AlignMode::VariableAligned),
            other => Err(Error::InvalidArgument(format!("unknown alignment mode `{other}`"))),
        }
    }
}

/// Assignment of snapshot rows to `p` ranks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionPlan {
    pub p: usize,
    pub n_rows: usize,
    pub n_vars: usize,
    pub rows_per_var: usize,
    pub mode: AlignMode,
    /// Rows held by each rank.
    pub row_counts: Vec<usize>,
    /// First global row held by each rank.
    pub row_offsets: Vec<usize>,
    /// Per-rank cell split (variable-aligned mode; equals rows otherwise).
    pub cell_counts: Vec<usize>,
    pub cell_offsets: Vec<usize>,
}

/// Splits `n` items into `p` parts, remainder to the lowest parts.
fn balanced(n: usize, p: usize) -> (Vec<usize>, Vec<usize>) {
    let base = n / p;
    let extra = n % p;
    let counts: Vec<usize> = (0..p).map(|i| base + usize::from(i < extra)).collect();
    let offsets = counts
        .iter()
        .scan(0, |acc, &c| {
            let o = *acc;
            *acc += c;
            Some(o)
        })
        .collect();
    (counts, offsets)
}

/// Computes the row assignment for `p` ranks.
///
/// `rows_per_var` is the number of spatial degrees of freedom per variable;
/// it must divide `n_rows`. Row-balanced plans ignore it for the split itself
/// but keep it so local rows can be mapped back to `(variable, cell)`.
pub fn plan_partition(
    n_rows: usize,
    p: usize,
    mode: AlignMode,
    rows_per_var: usize,
) -> Result<PartitionPlan> {
    if p == 0 {
        return Err(Error::InvalidPartition("rank count must be at least 1".into()));
    }
    if p > n_rows {
        return Err(Error::InvalidPartition(format!(
            "{p} ranks exceed {n_rows} rows"
        )));
    }
    if rows_per_var == 0 || n_rows % rows_per_var != 0 {
        return Err(Error::InvalidPartition(format!(
            "rows per variable {rows_per_var} does not divide {n_rows} rows"
        )));
    }
    let n_vars = n_rows / rows_per_var;
    let plan = match mode {
        AlignMode::RowBalanced => {
            let (row_counts, row_offsets) = balanced(n_rows, p);
            PartitionPlan {
                p,
                n_rows,
                n_vars,
                rows_per_var,
                mode,
                cell_counts: row_counts.clone(),
                cell_offsets: row_offsets.clone(),
                row_counts,
                row_offsets,
            }
        }
        AlignMode::VariableAligned => {
            if p > rows_per_var {
                return Err(Error::InvalidPartition(format!(
                    "{p} ranks exceed {rows_per_var} cells"
                )));
            }
            let (cell_counts, cell_offsets) = balanced(rows_per_var, p);
            PartitionPlan {
                p,
                n_rows,
                n_vars,
                rows_per_var,
                mode,
                row_counts: cell_counts.iter().map(|c| c * n_vars).collect(),
                row_offsets: cell_offsets.clone(),
                cell_counts,
                cell_offsets,
            }
        }
    };
    Ok(plan)
}

impl PartitionPlan {
    /// Global row ranges held by `rank`, in local row order.
    pub fn row_segments(&self, rank: usize) -> Vec<Range<usize>> {
        match self.mode {
            AlignMode::RowBalanced => {
                let start = self.row_offsets[rank];
                vec![start..start + self.row_counts[rank]]
            }
            AlignMode::VariableAligned => {
                let c0 = self.cell_offsets[rank];
                let c1 = c0 + self.cell_counts[rank];
                (0..self.n_vars)
                    .map(|v| v * self.rows_per_var + c0..v * self.rows_per_var + c1)
                    .collect()
            }
        }
    }

    /// `(variable, cell)` for every local row of `rank`.
    pub fn variable_map(&self, rank: usize) -> Vec<(usize, usize)> {
        self.row_segments(rank)
            .into_iter()
            .flatten()
            .map(|g| (g / self.rows_per_var, g % self.rows_per_var))
            .collect()
    }

    /// Rank holding global row `row`, and its local index there.
    pub fn locate(&self, row: usize) -> Option<(usize, usize)> {
        if row >= self.n_rows {
            return None;
        }
        (0..self.p).find_map(|rank| {
            let mut local = 0;
            for seg in self.row_segments(rank) {
                if seg.contains(&row) {
                    return Some((rank, local + row - seg.start));
                }
                local += seg.len();
            }
            None
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn row_balanced_spreads_remainder_to_low_ranks() {
        let plan = plan_partition(10, 3, AlignMode::RowBalanced, 1).unwrap();
        assert_eq!(plan.row_counts, vec![4, 3, 3]);
        assert_eq!(plan.row_offsets, vec![0, 4, 7]);
        let single = plan_partition(8, 1, AlignMode::RowBalanced, 1).unwrap();
        assert_eq!(single.row_counts, vec![8]);
        assert_eq!(single.row_offsets, vec![0]);
    }

    #[test]
    fn variable_aligned_gives_each_rank_all_variables() {
        // 3 variables × 4 cells, cells {0,1} and {2,3}
        let plan = plan_partition(12, 2, AlignMode::VariableAligned, 4).unwrap();
        assert_eq!(plan.row_counts, vec![6, 6]);
        let expected0: Vec<usize> = vec![0, 1, 4, 5, 8, 9];
        let rows0: Vec<usize> = plan.row_segments(0).into_iter().flatten().collect();
        assert_eq!(rows0, expected0);
        let rows1: Vec<usize> = plan.row_segments(1).into_iter().flatten().collect();
        assert_eq!(rows1, vec![2, 3, 6, 7, 10, 11]);
        assert_eq!(plan.variable_map(1)[2], (1, 2));
    }

    #[test]
    fn invalid_partitions_are_rejected() {
        assert!(matches!(
            plan_partition(2, 3, AlignMode::RowBalanced, 1),
            Err(Error::InvalidPartition(_))
        ));
        assert!(matches!(
            plan_partition(12, 5, AlignMode::VariableAligned, 4),
            Err(Error::InvalidPartition(_))
        ));
        assert!(plan_partition(10, 0, AlignMode::RowBalanced, 1).is_err());
    }

    proptest! {
        #[test]
        fn partitions_are_exhaustive_and_disjoint(n in 1usize..300, p in 1usize..20, rpv_div in 1usize..5) {
            prop_assume!(p <= n);
            let mut seen = vec![0u8; n];
            let plan = plan_partition(n, p, AlignMode::RowBalanced, 1).unwrap();
            prop_assert_eq!(plan.row_counts.iter().sum::<usize>(), n);
            prop_assert!(plan.row_offsets.windows(2).all(|w| w[0] < w[1]));
            for r in 0..p {
                for g in plan.row_segments(r).into_iter().flatten() {
                    seen[g] += 1;
                }
            }
            prop_assert!(seen.iter().all(|&s| s == 1));

            // variable-aligned with n_vars = rpv_div
            let rows = n * rpv_div;
            let plan = plan_partition(rows, p, AlignMode::VariableAligned, n).unwrap();
            let mut seen = vec![0u8; rows];
            for r in 0..p {
                for g in plan.row_segments(r).into_iter().flatten() {
                    seen[g] += 1;
                }
                let (rank, local) = plan.locate(plan.row_offsets[r]).unwrap();
                prop_assert_eq!((rank, local), (r, 0));
            }
            prop_assert!(seen.iter().all(|&s| s == 1));
            prop_assert_eq!(plan.row_counts.iter().sum::<usize>(), rows);
        }
    }
}
