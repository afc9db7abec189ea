//! Sharded on-disk snapshot container and per-rank block reads.

mod format;
mod plan;

pub use format::{
    DatasetHeader, Layout, Manifest, ScalarKind, ShardEntry, ShardHeader, HEADER_BYTES,
    MANIFEST_TAG,
};
pub use plan::{plan_partition, AlignMode, PartitionPlan};

use std::fs::{self, File};
use std::io::Write;
use std::ops::Range;
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::scalar::Real;

/// One rank's block of the snapshot matrix.
#[derive(Debug, Clone)]
pub struct SnapshotPartition<T> {
    pub plan: PartitionPlan,
    pub rank: usize,
    /// `n_i × n_t` block, local rows in plan order.
    pub block: Mat<T>,
    /// `(variable, cell)` for every local row.
    pub var_map: Vec<(usize, usize)>,
    /// Variables present after lifting (equal to the plan's count before).
    pub n_vars: usize,
}

impl<T: Real> SnapshotPartition<T> {
    /// Wraps an in-memory block; the block height must match the plan entry.
    pub fn from_block(plan: PartitionPlan, rank: usize, block: Mat<T>) -> Result<Self> {
        if rank >= plan.p || block.nrows() != plan.row_counts[rank] {
            return Err(Error::Shape(format!(
                "block of {} rows for rank {rank} of a plan expecting {:?}",
                block.nrows(),
                plan.row_counts.get(rank)
            )));
        }
        Ok(SnapshotPartition {
            var_map: plan.variable_map(rank),
            n_vars: plan.n_vars,
            plan,
            rank,
            block,
        })
    }

    /// Splits a full matrix according to `plan` (test and generator helper).
    pub fn split(matrix: &Mat<T>, plan: &PartitionPlan) -> Result<Vec<Self>> {
        if matrix.nrows() != plan.n_rows {
            return Err(Error::Shape(format!(
                "matrix has {} rows, plan {}",
                matrix.nrows(),
                plan.n_rows
            )));
        }
        (0..plan.p)
            .map(|rank| {
                let rows: Vec<usize> = plan.row_segments(rank).into_iter().flatten().collect();
                let block = Mat::from_fn(rows.len(), matrix.ncols(), |i, j| matrix[(rows[i], j)]);
                Self::from_block(plan.clone(), rank, block)
            })
            .collect()
    }

    pub fn n_cols(&self) -> usize {
        self.block.ncols()
    }
}

fn le_bytes_of<T: Real>(m: &Mat<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(m.as_slice().len() * 8);
    for &x in m.as_slice() {
        out.extend_from_slice(&x.to_f64().to_le_bytes());
    }
    out
}

/// Writes one shard file holding `block` as global rows
/// `start_row..start_row + block.nrows()`; returns its manifest entry.
pub fn write_shard<T: Real>(
    dir: &Path,
    file: &str,
    index: usize,
    header: &DatasetHeader,
    start_row: usize,
    block: &Mat<T>,
) -> Result<ShardEntry> {
    if block.ncols() != header.n_cols || start_row + block.nrows() > header.n_rows {
        return Err(Error::Format(format!(
            "shard of {}x{} at row {start_row} does not fit a {}x{} dataset",
            block.nrows(),
            block.ncols(),
            header.n_rows,
            header.n_cols
        )));
    }
    let payload = le_bytes_of(block);
    let sh = ShardHeader {
        dataset: *header,
        checksum: crc32fast::hash(&payload),
        start_row,
        row_count: block.nrows(),
    };
    let path = dir.join(file);
    let mut f = File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(&sh.encode()).map_err(|e| Error::io(&path, e))?;
    f.write_all(&payload).map_err(|e| Error::io(&path, e))?;
    Ok(ShardEntry {
        index,
        file: file.to_string(),
        start_row,
        row_count: block.nrows(),
        byte_length: (HEADER_BYTES + payload.len()) as u64,
    })
}

/// Writes the manifest text file for an already written set of shards.
pub fn write_manifest(path: &Path, header: &DatasetHeader, shards: Vec<ShardEntry>) -> Result<Manifest> {
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut shards = shards;
    shards.sort_by_key(|s| s.start_row);
    let manifest = Manifest {
        header: *header,
        shards,
        dir,
    };
    // Validate coverage by round-tripping through the parser.
    let text = manifest.render();
    Manifest::parse(&text, &manifest.dir)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(manifest)
}

fn shard_file_name(manifest_path: &Path, index: usize) -> String {
    let stem = manifest_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("dataset");
    format!("{stem}.shard{index:04}.bin")
}

/// Incremental dataset writer: shards are appended top to bottom, so a large
/// dataset never has to be held in memory at once.
pub struct DatasetWriter {
    path: PathBuf,
    dir: PathBuf,
    header: DatasetHeader,
    shards: Vec<ShardEntry>,
    next_row: usize,
}

impl DatasetWriter {
    pub fn create(path: impl Into<PathBuf>, header: DatasetHeader) -> Result<Self> {
        header.validate()?;
        let path = path.into();
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        Ok(DatasetWriter {
            path,
            dir,
            header,
            shards: Vec::new(),
            next_row: 0,
        })
    }

    pub fn next_row(&self) -> usize {
        self.next_row
    }

    pub fn push_shard<T: Real>(&mut self, block: &Mat<T>) -> Result<()> {
        let index = self.shards.len();
        let name = shard_file_name(&self.path, index);
        let entry = write_shard(&self.dir, &name, index, &self.header, self.next_row, block)?;
        self.next_row += block.nrows();
        self.shards.push(entry);
        Ok(())
    }

    pub fn finish(self) -> Result<Manifest> {
        if self.next_row != self.header.n_rows {
            return Err(Error::Format(format!(
                "wrote {} of {} rows",
                self.next_row, self.header.n_rows
            )));
        }
        write_manifest(&self.path, &self.header, self.shards)
    }
}

/// Writes `matrix` as `shard_count` contiguous row shards plus a manifest at
/// `path`. Remainder rows go to the first shards.
pub fn write_dataset<T: Real>(
    matrix: &Mat<T>,
    header: &DatasetHeader,
    shard_count: usize,
    path: impl AsRef<Path>,
) -> Result<Manifest> {
    header.validate()?;
    if matrix.nrows() != header.n_rows || matrix.ncols() != header.n_cols {
        return Err(Error::Format(format!(
            "matrix is {}x{}, header says {}x{}",
            matrix.nrows(),
            matrix.ncols(),
            header.n_rows,
            header.n_cols
        )));
    }
    if shard_count == 0 || shard_count > header.n_rows {
        return Err(Error::InvalidArgument(format!(
            "shard count {shard_count} must be in 1..={}",
            header.n_rows
        )));
    }
    let plan = plan_partition(header.n_rows, shard_count, AlignMode::RowBalanced, header.rows_per_var)?;
    let mut writer = DatasetWriter::create(path.as_ref(), *header)?;
    for s in 0..shard_count {
        let start = plan.row_offsets[s];
        writer.push_shard(&matrix.rows_range(start..start + plan.row_counts[s]))?;
    }
    writer.finish()
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Manifest::parse(&text, &dir)
}

fn open_shard(manifest: &Manifest, entry: &ShardEntry) -> Result<(File, ShardHeader)> {
    let path = manifest.shard_path(entry);
    let file = File::open(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => {
            Error::CorruptDataset(format!("missing shard {}", path.display()))
        }
        _ => Error::io(&path, e),
    })?;
    let len = file.metadata().map_err(|e| Error::io(&path, e))?.len();
    if len != entry.byte_length {
        return Err(Error::CorruptDataset(format!(
            "{}: {len} bytes on disk, manifest says {}",
            path.display(),
            entry.byte_length
        )));
    }
    let mut hb = [0u8; HEADER_BYTES];
    file.read_exact_at(&mut hb, 0).map_err(|e| Error::io(&path, e))?;
    let sh = ShardHeader::decode(&hb)?;
    let h = &manifest.header;
    if sh.dataset.n_rows != h.n_rows
        || sh.dataset.n_cols != h.n_cols
        || sh.dataset.n_vars != h.n_vars
        || sh.start_row != entry.start_row
        || sh.row_count != entry.row_count
        || (HEADER_BYTES + sh.payload_bytes()) as u64 != entry.byte_length
    {
        return Err(Error::CorruptDataset(format!(
            "{}: shard header disagrees with manifest",
            path.display()
        )));
    }
    Ok((file, sh))
}

/// Copies global rows `rows` into `block` starting at local row `local`.
fn read_rows_into<T: Real>(
    manifest: &Manifest,
    rows: Range<usize>,
    block: &mut Mat<T>,
    local: usize,
) -> Result<()> {
    let n_cols = manifest.header.n_cols;
    for entry in &manifest.shards {
        let s0 = entry.start_row;
        let s1 = s0 + entry.row_count;
        let lo = rows.start.max(s0);
        let hi = rows.end.min(s1);
        if lo >= hi {
            continue;
        }
        let (file, sh) = open_shard(manifest, entry)?;
        let path = manifest.shard_path(entry);
        let dst0 = local + (lo - rows.start);
        if lo == s0 && hi == s1 {
            let mut payload = vec![0u8; sh.payload_bytes()];
            file.read_exact_at(&mut payload, HEADER_BYTES as u64)
                .map_err(|e| Error::io(&path, e))?;
            if crc32fast::hash(&payload) != sh.checksum {
                return Err(Error::CorruptDataset(format!(
                    "{}: payload checksum mismatch",
                    path.display()
                )));
            }
            let n = entry.row_count;
            for j in 0..n_cols {
                let src = &payload[j * n * 8..(j + 1) * n * 8];
                let dst = &mut block.col_mut(j)[dst0..dst0 + n];
                for (d, c) in dst.iter_mut().zip(src.chunks_exact(8)) {
                    *d = T::of(f64::from_le_bytes(c.try_into().unwrap()));
                }
            }
        } else {
            // Partial shard: one positional read per column; checksum needs
            // the whole payload so only sizes and headers are verified here.
            let n = hi - lo;
            let mut buf = vec![0u8; n * 8];
            for j in 0..n_cols {
                let off = HEADER_BYTES + (j * entry.row_count + (lo - s0)) * 8;
                file.read_exact_at(&mut buf, off as u64)
                    .map_err(|e| Error::io(&path, e))?;
                let dst = &mut block.col_mut(j)[dst0..dst0 + n];
                for (d, c) in dst.iter_mut().zip(buf.chunks_exact(8)) {
                    *d = T::of(f64::from_le_bytes(c.try_into().unwrap()));
                }
            }
        }
    }
    Ok(())
}

/// Loads the rows `plan` assigns to `rank`.
pub fn read_partition<T: Real>(
    manifest: &Manifest,
    plan: &PartitionPlan,
    rank: usize,
) -> Result<SnapshotPartition<T>> {
    if plan.n_rows != manifest.header.n_rows || plan.rows_per_var != manifest.header.rows_per_var {
        return Err(Error::InvalidPartition(format!(
            "plan for {} rows ({} per variable) does not match dataset with {} ({} per variable)",
            plan.n_rows, plan.rows_per_var, manifest.header.n_rows, manifest.header.rows_per_var
        )));
    }
    read_partition_window(manifest, plan, rank)
}

/// Like [`read_partition`] but accepts a plan over only the leading
/// `plan.n_rows` rows of the dataset (row truncation for weak scaling).
pub fn read_partition_window<T: Real>(
    manifest: &Manifest,
    plan: &PartitionPlan,
    rank: usize,
) -> Result<SnapshotPartition<T>> {
    if rank >= plan.p {
        return Err(Error::InvalidPartition(format!("rank {rank} outside plan of {}", plan.p)));
    }
    if plan.n_rows > manifest.header.n_rows {
        return Err(Error::InvalidPartition(format!(
            "plan covers {} rows, dataset has {}",
            plan.n_rows, manifest.header.n_rows
        )));
    }
    let mut block = Mat::zeros(plan.row_counts[rank], manifest.header.n_cols);
    let mut local = 0;
    for seg in plan.row_segments(rank) {
        let len = seg.len();
        read_rows_into(manifest, seg, &mut block, local)?;
        local += len;
    }
    SnapshotPartition::from_block(plan.clone(), rank, block)
}

/// Reads the whole dataset on one rank.
pub fn read_full<T: Real>(manifest: &Manifest) -> Result<Mat<T>> {
    let h = &manifest.header;
    let plan = plan_partition(h.n_rows, 1, AlignMode::RowBalanced, h.rows_per_var)?;
    Ok(read_partition(manifest, &plan, 0)?.block)
}
