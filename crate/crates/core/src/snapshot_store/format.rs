//! Byte-level layout of shard files and the text manifest.
//!
//! Shard header (64 bytes, little-endian):
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 8    | magic `DOPSNAP1`                        |
//! | 8      | 4    | format version (1)                      |
//! | 12     | 2    | scalar kind (1 = f64)                   |
//! | 14     | 2    | layout (1 = variable-major, col-major)  |
//! | 16     | 8    | global row count                        |
//! | 24     | 8    | snapshot count                          |
//! | 32     | 4    | variable count                          |
//! | 36     | 4    | CRC-32 of the payload                   |
//! | 40     | 8    | rows per variable                       |
//! | 48     | 8    | first global row of this shard          |
//! | 56     | 8    | rows in this shard                      |
//!
//! The payload follows: `row_count × n_cols` f64 values, column-major.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 8] = *b"DOPSNAP1";
pub const VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 64;
pub const MANIFEST_TAG: &str = "dopinf-manifest v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalarKind {
    F64 = 1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// Rows ordered variable by variable; within a shard, columns are contiguous.
    VariableMajor = 1,
}

/// Global description of a snapshot dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetHeader {
    pub n_rows: usize,
    pub n_cols: usize,
    pub n_vars: usize,
    pub rows_per_var: usize,
    pub scalar: ScalarKind,
    pub layout: Layout,
}

impl DatasetHeader {
    pub fn new(n_vars: usize, rows_per_var: usize, n_cols: usize) -> Self {
        DatasetHeader {
            n_rows: n_vars * rows_per_var,
            n_cols,
            n_vars,
            rows_per_var,
            scalar: ScalarKind::F64,
            layout: Layout::VariableMajor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_vars == 0 || self.n_rows != self.n_vars * self.rows_per_var {
            return Err(Error::Format(format!(
                "n_rows {} != n_vars {} x rows_per_var {}",
                self.n_rows, self.n_vars, self.rows_per_var
            )));
        }
        Ok(())
    }
}

/// Header as stored at the start of each shard.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShardHeader {
    pub dataset: DatasetHeader,
    pub checksum: u32,
    pub start_row: usize,
    pub row_count: usize,
}

impl ShardHeader {
    pub fn encode(&self) -> [u8; HEADER_BYTES] {
        let d = &self.dataset;
        let mut b = [0u8; HEADER_BYTES];
        b[0..8].copy_from_slice(&MAGIC);
        b[8..12].copy_from_slice(&VERSION.to_le_bytes());
        b[12..14].copy_from_slice(&(d.scalar as u16).to_le_bytes());
        b[14..16].copy_from_slice(&(d.layout as u16).to_le_bytes());
        b[16..24].copy_from_slice(&(d.n_rows as u64).to_le_bytes());
        b[24..32].copy_from_slice(&(d.n_cols as u64).to_le_bytes());
        b[32..36].copy_from_slice(&(d.n_vars as u32).to_le_bytes());
        b[36..40].copy_from_slice(&self.checksum.to_le_bytes());
        b[40..48].copy_from_slice(&(d.rows_per_var as u64).to_le_bytes());
        b[48..56].copy_from_slice(&(self.start_row as u64).to_le_bytes());
        b[56..64].copy_from_slice(&(self.row_count as u64).to_le_bytes());
        b
    }

    pub fn decode(b: &[u8]) -> Result<Self> {
        if b.len() < HEADER_BYTES {
            return Err(Error::CorruptDataset("truncated shard header".into()));
        }
        if b[0..8] != MAGIC {
            return Err(Error::CorruptDataset("bad shard magic".into()));
        }
        let u16_at = |o: usize| u16::from_le_bytes([b[o], b[o + 1]]);
        let u32_at = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(b[o..o + 8].try_into().unwrap()) as usize;
        let version = u32_at(8);
        if version != VERSION {
            return Err(Error::CorruptDataset(format!("unsupported version {version}")));
        }
        let scalar = match u16_at(12) {
            1 => ScalarKind::F64,
            k => return Err(Error::CorruptDataset(format!("unknown scalar kind {k}"))),
        };
        let layout = match u16_at(14) {
            1 => Layout::VariableMajor,
            k => return Err(Error::CorruptDataset(format!("unknown layout {k}"))),
        };
        let dataset = DatasetHeader {
            n_rows: u64_at(16),
            n_cols: u64_at(24),
            n_vars: u32_at(32) as usize,
            rows_per_var: u64_at(40),
            scalar,
            layout,
        };
        dataset
            .validate()
            .map_err(|e| Error::CorruptDataset(e.to_string()))?;
        Ok(ShardHeader {
            dataset,
            checksum: u32_at(36),
            start_row: u64_at(48),
            row_count: u64_at(56),
        })
    }

    pub fn payload_bytes(&self) -> usize {
        self.row_count * self.dataset.n_cols * 8
    }
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardEntry {
    pub index: usize,
    pub file: String,
    pub start_row: usize,
    pub row_count: usize,
    pub byte_length: u64,
}

/// Parsed manifest, with shard paths resolved against its directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub header: DatasetHeader,
    pub shards: Vec<ShardEntry>,
    pub dir: PathBuf,
}

impl Manifest {
    pub fn shard_path(&self, entry: &ShardEntry) -> PathBuf {
        self.dir.join(&entry.file)
    }

    pub fn render(&self) -> String {
        let h = &self.header;
        let mut s = format!(
            "{MANIFEST_TAG} n_rows={} n_cols={} n_vars={}\n",
            h.n_rows, h.n_cols, h.n_vars
        );
        for e in &self.shards {
            s.push_str(&format!(
                "shard {} {} {} {} {}\n",
                e.index, e.file, e.start_row, e.row_count, e.byte_length
            ));
        }
        s
    }

    pub fn parse(text: &str, dir: &Path) -> Result<Self> {
        let bad = |msg: String| Error::CorruptDataset(format!("manifest: {msg}"));
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let first = lines.next().ok_or_else(|| bad("empty".into()))?;
        let rest = first
            .strip_prefix(MANIFEST_TAG)
            .ok_or_else(|| bad(format!("bad header line `{first}`")))?;
        let mut fields = [None; 3];
        for tok in rest.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| bad(format!("bad field `{tok}`")))?;
            let v: usize = v.parse().map_err(|_| bad(format!("bad value `{tok}`")))?;
            match k {
                "n_rows" => fields[0] = Some(v),
                "n_cols" => fields[1] = Some(v),
                "n_vars" => fields[2] = Some(v),
                _ => return Err(bad(format!("unknown field `{k}`"))),
            }
        }
        let [Some(n_rows), Some(n_cols), Some(n_vars)] = fields else {
            return Err(bad("missing header fields".into()));
        };
        if n_vars == 0 || n_rows % n_vars != 0 {
            return Err(bad(format!("{n_rows} rows not divisible by {n_vars} variables")));
        }
        let header = DatasetHeader::new(n_vars, n_rows / n_vars, n_cols);

        let mut shards = Vec::new();
        for line in lines {
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() != 6 || toks[0] != "shard" {
                return Err(bad(format!("bad shard line `{line}`")));
            }
            let num = |s: &str| -> Result<u64> {
                s.parse().map_err(|_| bad(format!("bad number `{s}`")))
            };
            shards.push(ShardEntry {
                index: num(toks[1])? as usize,
                file: toks[2].to_string(),
                start_row: num(toks[3])? as usize,
                row_count: num(toks[4])? as usize,
                byte_length: num(toks[5])?,
            });
        }
        shards.sort_by_key(|s| s.start_row);
        let mut next = 0;
        for s in &shards {
            if s.start_row != next {
                return Err(bad(format!("shard {} does not start at row {next}", s.index)));
            }
            next += s.row_count;
        }
        if next != n_rows {
            return Err(bad(format!("shards cover {next} of {n_rows} rows")));
        }
        Ok(Manifest {
            header,
            shards,
            dir: dir.to_path_buf(),
        })
    }
}
