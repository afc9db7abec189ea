//! Little-endian binary encoding shared by the sidecar files.
//!
//! Every sidecar starts with an 8-byte magic and a `u32` version; the rest
//! is a flat sequence of `u64` counts and `f64` values.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::scalar::Real;

pub(crate) const SIDECAR_VERSION: u32 = 1;

pub(crate) struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new(magic: &[u8; 8]) -> Self {
        let mut buf = magic.to_vec();
        buf.extend_from_slice(&SIDECAR_VERSION.to_le_bytes());
        Encoder { buf }
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn usize(&mut self, v: usize) -> &mut Self {
        self.u64(v as u64)
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn reals<T: Real>(&mut self, v: &[T]) -> &mut Self {
        self.usize(v.len());
        for &x in v {
            self.f64(x.to_f64());
        }
        self
    }

    /// Shape followed by the row-major payload.
    pub fn mat<T: Real>(&mut self, m: &Mat<T>) -> &mut Self {
        self.usize(m.nrows()).usize(m.ncols());
        for x in m.to_row_major() {
            self.f64(x.to_f64());
        }
        self
    }

    pub fn finish(&mut self) -> Vec<u8> {
        std::mem::take(&mut self.buf)
    }
}

pub(crate) struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Decoder<'a> {
    pub fn new(buf: &'a [u8], magic: &[u8; 8], what: &'static str) -> Result<Self> {
        if buf.len() < 12 || &buf[..8] != magic {
            return Err(Error::Format(format!("not a {what} file")));
        }
        let version = u32::from_le_bytes(buf[8..12].try_into().unwrap());
        if version != SIDECAR_VERSION {
            return Err(Error::Format(format!("unsupported {what} version {version}")));
        }
        Ok(Decoder { buf, pos: 12, what })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!("truncated {} file", self.what)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::Format(format!("count {v} out of range")))
    }

    /// A count that must fit in the remaining bytes at `unit` bytes each.
    fn count(&mut self, unit: usize) -> Result<usize> {
        let n = self.usize()?;
        if n.saturating_mul(unit) > self.buf.len() - self.pos {
            return Err(Error::Format(format!("truncated {} file", self.what)));
        }
        Ok(n)
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn reals<T: Real>(&mut self) -> Result<Vec<T>> {
        let n = self.count(8)?;
        (0..n).map(|_| self.f64().map(T::of)).collect()
    }

    pub fn mat<T: Real>(&mut self) -> Result<Mat<T>> {
        let rows = self.usize()?;
        let cols = self.usize()?;
        let n = rows
            .checked_mul(cols)
            .filter(|&n| n * 8 <= self.buf.len() - self.pos)
            .ok_or_else(|| Error::Format(format!("truncated {} file", self.what)))?;
        let data: Vec<T> = (0..n).map(|_| self.f64().map(T::of)).collect::<Result<_>>()?;
        Mat::from_row_major(rows, cols, &data)
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!("trailing bytes in {} file", self.what)));
        }
        Ok(())
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values_round_trip() {
        let m = Mat::from_rows(&[[1.0, -2.5], [f64::MIN_POSITIVE, 3.0]]);
        let bytes = Encoder::new(b"TESTTEST").u8(4).usize(9).reals(&[0.1f64, 0.2]).mat(&m).finish();
        let mut d = Decoder::new(&bytes, b"TESTTEST", "test").unwrap();
        assert_eq!(d.u8().unwrap(), 4);
        assert_eq!(d.usize().unwrap(), 9);
        assert_eq!(d.reals::<f64>().unwrap(), vec![0.1, 0.2]);
        assert_eq!(d.mat::<f64>().unwrap(), m);
        d.finish().unwrap();
    }

    #[test]
    fn wrong_magic_and_truncation_are_rejected() {
        let bytes = Encoder::new(b"TESTTEST").reals(&[1.0f64; 4]).finish();
        assert!(Decoder::new(&bytes, b"OTHERMAG", "test").is_err());
        let mut d = Decoder::new(&bytes[..bytes.len() - 3], b"TESTTEST", "test").unwrap();
        assert!(d.reals::<f64>().is_err());
    }
}
