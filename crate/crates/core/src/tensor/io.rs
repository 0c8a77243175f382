//! `DNSE` dense matrix files.
//!
//! Layout: magic `DNSE`, version byte `0x01`, dtype byte, rows and cols as
//! little-endian `u64`, then the row-major payload in the dtype's
//! little-endian encoding.

use std::io::{Read, Write};

use super::{DType, DenseMatrix, Scalar};
use crate::error::{Error, Result};

pub(crate) const MAGIC: &[u8; 4] = b"DNSE";
pub(crate) const VERSION: u8 = 0x01;

/// A dense file decoded at its stored precision.
#[derive(Debug, Clone, PartialEq)]
pub enum DenseFile {
    /// `f32` or bf16 payload (widened to f32).
    F32(DenseMatrix<f32>, DType),
    F64(DenseMatrix<f64>),
}

impl DenseFile {
    pub fn dtype(&self) -> DType {
        match self {
            DenseFile::F32(_, d) => *d,
            DenseFile::F64(_) => DType::F64,
        }
    }
}

pub fn write_dense_bytes<T: Scalar>(m: &DenseMatrix<T>, dtype: DType) -> Result<Vec<u8>> {
    if !T::accepts(dtype) {
        return Err(Error::Format(format!(
            "cannot store {:?} elements as {}",
            T::DTYPE,
            dtype.name()
        )));
    }
    let mut out = Vec::with_capacity(22 + m.as_slice().len() * dtype.width());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(dtype.code());
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for &v in m.as_slice() {
        v.write_le(dtype, &mut out);
    }
    Ok(out)
}

pub fn write_dense<T: Scalar, W: Write>(w: &mut W, m: &DenseMatrix<T>, dtype: DType) -> Result<()> {
    w.write_all(&write_dense_bytes(m, dtype)?)?;
    Ok(())
}

pub fn read_dense_bytes(bytes: &[u8]) -> Result<DenseFile> {
    let mut cur = Cursor::new(bytes);
    cur.magic(MAGIC)?;
    let dtype = cur.header()?;
    let rows = cur.dim()?;
    let cols = cur.dim()?;
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Format("dimension overflow".into()))?;
    let file = match dtype {
        DType::F64 => DenseFile::F64(DenseMatrix::new(rows, cols, cur.scalars(dtype, n)?)?),
        d => DenseFile::F32(DenseMatrix::new(rows, cols, cur.scalars(d, n)?)?, d),
    };
    cur.finish()?;
    Ok(file)
}

pub fn read_dense<R: Read>(r: &mut R) -> Result<DenseFile> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    read_dense_bytes(&buf)
}

/// Bounds-checked little-endian reader shared by the binary formats.
pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != magic {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(())
    }

    /// Version and dtype bytes.
    pub(crate) fn header(&mut self) -> Result<DType> {
        let version = self.u8()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let code = self.u8()?;
        DType::from_code(code).ok_or_else(|| Error::Format(format!("unknown dtype code {code:#04x}")))
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn dim(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("dimension exceeds usize".into()))
    }

    pub(crate) fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        let raw = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Format("length overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub(crate) fn scalars<T: Scalar>(&mut self, dtype: DType, n: usize) -> Result<Vec<T>> {
        let w = dtype.width();
        let raw = self.take(
            n.checked_mul(w)
                .ok_or_else(|| Error::Format("length overflow".into()))?,
        )?;
        Ok(raw.chunks_exact(w).map(|c| T::read_le(dtype, c)).collect())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}
