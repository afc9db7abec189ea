//! Per-rank lifting, centering and scaling of snapshot blocks, and their
//! inverses.
//!
//! Centering uses each row's own temporal mean. Scaling divides every row of
//! a variable by the global max-abs of that centered variable, which is the
//! only step that talks to other ranks.

use std::path::Path;
use std::str::FromStr;

use crate::comm::CommHandle;
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::scalar::Real;
use crate::sidecar::{read_file, write_file, Decoder, Encoder};
use crate::snapshot_store::SnapshotPartition;

const MAGIC: &[u8; 8] = b"DOPINFTP";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LiftingSpec {
    #[default]
    Identity,
    /// Appends `1/x` of the given variable as an auxiliary variable.
    Reciprocal { variable: usize },
}

impl FromStr for LiftingSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "identity" || s == "none" {
            return Ok(LiftingSpec::Identity);
        }
        s.strip_prefix("reciprocal:")
            .and_then(|v| v.parse().ok())
            .map(|variable| LiftingSpec::Reciprocal { variable })
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown lifting `{s}` (expected identity or reciprocal:<variable>)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Lift = 1,
    Center = 2,
    Scale = 3,
}

/// Which forward stages to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransformConfig {
    pub lifting: LiftingSpec,
    pub center: bool,
    pub scale: bool,
}

impl Default for TransformConfig {
    fn default() -> Self {
        TransformConfig {
            lifting: LiftingSpec::Identity,
            center: true,
            scale: true,
        }
    }
}

impl TransformConfig {
    pub fn identity() -> Self {
        TransformConfig {
            lifting: LiftingSpec::Identity,
            center: false,
            scale: false,
        }
    }
}

/// Everything needed to redo or undo the forward transform on one rank.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformParams<T> {
    pub lifting: LiftingSpec,
    /// Applied stages in forward order.
    pub stages: Vec<Stage>,
    /// Variables and local rows before lifting.
    pub input_vars: usize,
    pub input_rows: usize,
    /// `(variable, cell)` of each transformed row.
    pub var_map: Vec<(usize, usize)>,
    /// Temporal mean per transformed row (zero when not centering).
    pub means: Vec<T>,
    /// Scale per variable after lifting (one when not scaling).
    pub scales: Vec<T>,
}

impl<T: Real> TransformParams<T> {
    pub fn n_vars(&self) -> usize {
        self.scales.len()
    }

    fn identity_for(part: &SnapshotPartition<T>) -> Self {
        TransformParams {
            lifting: LiftingSpec::Identity,
            stages: Vec::new(),
            input_vars: part.n_vars,
            input_rows: part.block.nrows(),
            var_map: part.var_map.clone(),
            means: vec![T::zero(); part.block.nrows()],
            scales: vec![T::one(); part.n_vars],
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::new(MAGIC);
        match self.lifting {
            LiftingSpec::Identity => e.u8(0).usize(0),
            LiftingSpec::Reciprocal { variable } => e.u8(1).usize(variable),
        };
        e.usize(self.stages.len());
        for &s in &self.stages {
            e.u8(s as u8);
        }
        e.usize(self.input_vars).usize(self.input_rows);
        e.usize(self.var_map.len());
        for &(v, c) in &self.var_map {
            e.usize(v).usize(c);
        }
        e.reals(&self.means).reals(&self.scales);
        e.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut d = Decoder::new(bytes, MAGIC, "transform parameter")?;
        let lifting = match (d.u8()?, d.usize()?) {
            (0, _) => LiftingSpec::Identity,
            (1, variable) => LiftingSpec::Reciprocal { variable },
            (k, _) => return Err(Error::Format(format!("unknown lifting code {k}"))),
        };
        let n_stages = d.usize()?;
        let mut stages = Vec::new();
        for _ in 0..n_stages.min(3) {
            stages.push(match d.u8()? {
                1 => Stage::Lift,
                2 => Stage::Center,
                3 => Stage::Scale,
                k => return Err(Error::Format(format!("unknown stage code {k}"))),
            });
        }
        if stages.len() != n_stages {
            return Err(Error::Format("too many transform stages".into()));
        }
        let input_vars = d.usize()?;
        let input_rows = d.usize()?;
        let n_map = d.usize()?;
        let mut var_map = Vec::new();
        for _ in 0..n_map {
            var_map.push((d.usize()?, d.usize()?));
        }
        let means = d.reals()?;
        let scales = d.reals()?;
        d.finish()?;
        if means.len() != var_map.len() || var_map.iter().any(|&(v, _)| v >= scales.len()) {
            return Err(Error::Format("inconsistent transform parameters".into()));
        }
        Ok(TransformParams {
            lifting,
            stages,
            input_vars,
            input_rows,
            var_map,
            means,
            scales,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

/// Applies a lifting map; no communication.
pub fn lift<T: Real>(part: &SnapshotPartition<T>, spec: &LiftingSpec) -> Result<SnapshotPartition<T>> {
    let mut out = part.clone();
    let LiftingSpec::Reciprocal { variable } = *spec else {
        return Ok(out);
    };
    let (block, var_map) = lift_block(&part.block, &part.var_map, part.n_vars, variable)?;
    out.block = block;
    out.var_map = var_map;
    out.n_vars += 1;
    Ok(out)
}

fn lift_block<T: Real>(
    block: &Mat<T>,
    var_map: &[(usize, usize)],
    n_vars: usize,
    variable: usize,
) -> Result<(Mat<T>, Vec<(usize, usize)>)> {
    if variable >= n_vars {
        return Err(Error::InvalidArgument(format!(
            "cannot lift variable {variable} of {n_vars}"
        )));
    }
    let source: Vec<usize> = (0..block.nrows()).filter(|&i| var_map[i].0 == variable).collect();
    for j in 0..block.ncols() {
        if source.iter().any(|&i| block[(i, j)] == T::zero()) {
            return Err(Error::SingularLift { variable, time: j });
        }
    }
    let n = block.nrows();
    let lifted = Mat::from_fn(n + source.len(), block.ncols(), |i, j| {
        if i < n {
            block[(i, j)]
        } else {
            T::one() / block[(source[i - n], j)]
        }
    });
    let mut map = var_map.to_vec();
    map.extend(source.iter().map(|&i| (n_vars, var_map[i].1)));
    Ok((lifted, map))
}

fn row_means<T: Real>(block: &Mat<T>) -> Vec<T> {
    let n = T::of_usize(block.ncols());
    let mut sums = vec![T::zero(); block.nrows()];
    for j in 0..block.ncols() {
        for (s, &x) in sums.iter_mut().zip(block.col(j)) {
            *s += x;
        }
    }
    sums.into_iter().map(|s| s / n).collect()
}

/// Centers every row by its temporal mean and scales every variable by its
/// global max-abs. Performs one max all-reduce.
pub fn center_scale<T: Real>(
    part: &SnapshotPartition<T>,
    comm: &mut CommHandle,
) -> Result<(SnapshotPartition<T>, TransformParams<T>)> {
    let mut out = part.clone();
    let mut params = TransformParams::identity_for(part);
    center_in_place(&mut out, &mut params);
    scale_in_place(&mut out, &mut params, comm)?;
    Ok((out, params))
}

fn center_in_place<T: Real>(part: &mut SnapshotPartition<T>, params: &mut TransformParams<T>) {
    let means = row_means(&part.block);
    for j in 0..part.block.ncols() {
        for (x, &m) in part.block.col_mut(j).iter_mut().zip(&means) {
            *x -= m;
        }
    }
    params.means = means;
    params.stages.push(Stage::Center);
}

fn scale_in_place<T: Real>(
    part: &mut SnapshotPartition<T>,
    params: &mut TransformParams<T>,
    comm: &mut CommHandle,
) -> Result<()> {
    let mut local = vec![T::zero(); part.n_vars];
    for j in 0..part.block.ncols() {
        for (&x, &(v, _)) in part.block.col(j).iter().zip(&part.var_map) {
            local[v] = local[v].max(x.abs());
        }
    }
    let scales = comm.allreduce_max_vector(&local)?;
    if let Some(variable) = scales.iter().position(|&s| !(s > T::zero())) {
        return Err(Error::DegenerateVariable { variable });
    }
    for j in 0..part.block.ncols() {
        for (x, &(v, _)) in part.block.col_mut(j).iter_mut().zip(&part.var_map) {
            *x /= scales[v];
        }
    }
    params.scales = scales;
    params.stages.push(Stage::Scale);
    Ok(())
}

/// Full forward pipeline: lift, then optionally center and scale.
pub fn transform<T: Real>(
    part: &SnapshotPartition<T>,
    config: &TransformConfig,
    comm: &mut CommHandle,
) -> Result<(SnapshotPartition<T>, TransformParams<T>)> {
    transform_owned(part.clone(), config, comm)
}

/// [`transform`] reusing the storage of `part`.
pub fn transform_owned<T: Real>(
    part: SnapshotPartition<T>,
    config: &TransformConfig,
    comm: &mut CommHandle,
) -> Result<(SnapshotPartition<T>, TransformParams<T>)> {
    let (input_vars, input_rows) = (part.n_vars, part.block.nrows());
    let mut out = match config.lifting {
        LiftingSpec::Identity => part,
        spec => lift(&part, &spec)?,
    };
    let mut params = TransformParams::identity_for(&out);
    params.input_vars = input_vars;
    params.input_rows = input_rows;
    params.lifting = config.lifting;
    if config.lifting != LiftingSpec::Identity {
        params.stages.push(Stage::Lift);
    }
    if config.center {
        center_in_place(&mut out, &mut params);
    }
    if config.scale {
        scale_in_place(&mut out, &mut params, comm)?;
    }
    Ok((out, params))
}

/// Applies stored forward parameters to new columns of the same rows.
pub fn apply_forward<T: Real>(block: &Mat<T>, params: &TransformParams<T>) -> Result<Mat<T>> {
    if block.nrows() != params.input_rows {
        return Err(Error::Shape(format!(
            "block has {} rows, parameters expect {}",
            block.nrows(),
            params.input_rows
        )));
    }
    let mut out = match params.lifting {
        LiftingSpec::Identity => block.clone(),
        LiftingSpec::Reciprocal { variable } => {
            lift_block(block, &params.var_map[..params.input_rows], params.input_vars, variable)?.0
        }
    };
    for j in 0..out.ncols() {
        for (i, x) in out.col_mut(j).iter_mut().enumerate() {
            *x = (*x - params.means[i]) / params.scales[params.var_map[i].0];
        }
    }
    Ok(out)
}

/// Undoes scaling and centering, then drops auxiliary lifted rows.
pub fn inverse_transform<T: Real>(block: &Mat<T>, params: &TransformParams<T>) -> Result<Mat<T>> {
    if block.nrows() != params.var_map.len() {
        return Err(Error::Shape(format!(
            "block has {} rows, parameters describe {}",
            block.nrows(),
            params.var_map.len()
        )));
    }
    Ok(Mat::from_fn(params.input_rows, block.ncols(), |i, j| {
        block[(i, j)] * params.scales[params.var_map[i].0] + params.means[i]
    }))
}
