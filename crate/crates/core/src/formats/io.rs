//! `TWLL` and `HYBR` binary files.
//!
//! All integers are little-endian. After the 4-byte magic come a version
//! byte (`0x01`) and a dtype byte (see [`DType`]).
//!
//! `TWLL`: `M, N, T, C` as `u64`; `h_nz` (`M × N/T` `u32`); `h_I`
//! (`M × N/C` `u32`); `h_v` (`M × N/C` elements). Padding slots are written
//! as stored.
//!
//! `HYBR`: `M, N, ELL_W, D_cap` as `u64`; routing bitmap of `ceil(M/8)` bytes
//! (row `r` is bit `r % 8` of byte `r / 8`); `row_nnz` (`M` `u32`); ELL column
//! indices (`M × ELL_W` `u32`); ELL values (`M × ELL_W` elements); backup row
//! count `R` as `u64`; `tail_map_reverse` (`R` `u32`); backup payload
//! (`R × N` elements). The overflow flag is implied by dense rows without a
//! backup slot.

use std::sync::Arc;

use super::{HybridMatrix, HybridPattern, TwellConfig, TwellMatrix, NO_SLOT};
use crate::error::{Error, Result};
use crate::tensor::io::{Cursor, VERSION};
use crate::tensor::{DType, Scalar};

const TWLL: &[u8; 4] = b"TWLL";
const HYBR: &[u8; 4] = b"HYBR";

/// Kind of a binary matrix file, from its magic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileKind {
    Dense,
    Twell,
    Hybrid,
}

/// Reads the magic, version and dtype of any of the three formats.
pub fn peek_header(bytes: &[u8]) -> Result<(FileKind, DType)> {
    let mut cur = Cursor::new(bytes);
    let magic = cur.take(4)?;
    let kind = match magic {
        b"DNSE" => FileKind::Dense,
        b"TWLL" => FileKind::Twell,
        b"HYBR" => FileKind::Hybrid,
        other => {
            return Err(Error::Format(format!(
                "unknown magic {:?}",
                String::from_utf8_lossy(other)
            )))
        }
    };
    Ok((kind, cur.header()?))
}

fn check_dtype<T: Scalar>(dtype: DType) -> Result<()> {
    if !T::accepts(dtype) {
        return Err(Error::Format(format!(
            "{} payload cannot be held as {}",
            dtype.name(),
            T::DTYPE.name()
        )));
    }
    Ok(())
}

fn start(magic: &[u8; 4], dtype: DType) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    out.push(VERSION);
    out.push(dtype.code());
    out
}

fn put_u64(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u64).to_le_bytes());
}

fn put_u32s(out: &mut Vec<u8>, v: &[u32]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_scalars<T: Scalar>(out: &mut Vec<u8>, v: &[T], dtype: DType) {
    for &x in v {
        x.write_le(dtype, out);
    }
}

pub fn write_twell_bytes<T: Scalar>(tw: &TwellMatrix<T>, dtype: DType) -> Result<Vec<u8>> {
    check_dtype::<T>(dtype)?;
    let mut out = start(TWLL, dtype);
    let cfg = tw.config();
    put_u64(&mut out, tw.rows());
    put_u64(&mut out, tw.cols());
    put_u64(&mut out, cfg.tile_width());
    put_u64(&mut out, cfg.compression());
    put_u32s(&mut out, tw.nnz());
    put_u32s(&mut out, tw.indices());
    put_scalars(&mut out, tw.values(), dtype);
    Ok(out)
}

pub fn read_twell_bytes<T: Scalar>(bytes: &[u8]) -> Result<(TwellMatrix<T>, DType)> {
    let mut cur = Cursor::new(bytes);
    cur.magic(TWLL)?;
    let dtype = cur.header()?;
    check_dtype::<T>(dtype)?;
    let rows = cur.dim()?;
    let cols = cur.dim()?;
    let config = TwellConfig::new(cur.dim()?, cur.dim()?)?;
    config.check_width(cols)?;
    let stored = rows
        .checked_mul(cols / config.compression())
        .ok_or_else(|| Error::Format("dimension overflow".into()))?;
    let nnz = cur.u32s(rows * (cols / config.tile_width()))?;
    let indices = cur.u32s(stored)?;
    let values = cur.scalars(dtype, stored)?;
    cur.finish()?;
    let tw = TwellMatrix::from_parts(rows, cols, config, values, indices, nnz)?;
    tw.validate()?;
    Ok((tw, dtype))
}

pub fn write_hybrid_bytes<T: Scalar>(h: &HybridMatrix<T>, dtype: DType) -> Result<Vec<u8>> {
    check_dtype::<T>(dtype)?;
    let p = h.pattern();
    let mut out = start(HYBR, dtype);
    put_u64(&mut out, p.rows);
    put_u64(&mut out, p.cols);
    put_u64(&mut out, p.ell_width);
    put_u64(&mut out, p.dense_cap);
    let mut bitmap = vec![0u8; p.rows.div_ceil(8)];
    for (r, &d) in p.routing.iter().enumerate() {
        if d {
            bitmap[r / 8] |= 1 << (r % 8);
        }
    }
    out.extend_from_slice(&bitmap);
    put_u32s(&mut out, &p.row_nnz);
    put_u32s(&mut out, &p.col_idx);
    put_scalars(&mut out, h.ell_values(), dtype);
    put_u64(&mut out, p.tail_rows.len());
    put_u32s(&mut out, &p.tail_rows);
    put_scalars(&mut out, h.tail_values(), dtype);
    Ok(out)
}

pub fn read_hybrid_bytes<T: Scalar>(bytes: &[u8]) -> Result<(HybridMatrix<T>, DType)> {
    let mut cur = Cursor::new(bytes);
    cur.magic(HYBR)?;
    let dtype = cur.header()?;
    check_dtype::<T>(dtype)?;
    let rows = cur.dim()?;
    let cols = cur.dim()?;
    let ell_width = cur.dim()?;
    let dense_cap = cur.dim()?;
    let ell_len = rows
        .checked_mul(ell_width)
        .ok_or_else(|| Error::Format("dimension overflow".into()))?;
    let bitmap = cur.take(rows.div_ceil(8))?;
    let routing: Vec<bool> = (0..rows).map(|r| bitmap[r / 8] >> (r % 8) & 1 == 1).collect();
    let row_nnz = cur.u32s(rows)?;
    let col_idx = cur.u32s(ell_len)?;
    let ell_vals = cur.scalars(dtype, ell_len)?;
    let tail_count = cur.dim()?;
    let tail_rows = cur.u32s(tail_count)?;
    let tail = cur.scalars(
        dtype,
        tail_count
            .checked_mul(cols)
            .ok_or_else(|| Error::Format("dimension overflow".into()))?,
    )?;
    cur.finish()?;

    let mut tail_map = vec![NO_SLOT; rows];
    for (s, &r) in tail_rows.iter().enumerate() {
        let r = r as usize;
        if r >= rows || tail_map[r] != NO_SLOT {
            return Err(Error::Format(format!("tail_map_reverse entry {s} is invalid")));
        }
        tail_map[r] = s as u32;
    }
    let overflow = routing.iter().zip(&tail_map).any(|(&d, &s)| d && s == NO_SLOT);
    let pattern = HybridPattern {
        rows,
        cols,
        ell_width,
        dense_cap,
        row_nnz,
        col_idx,
        routing,
        tail_map,
        tail_rows,
        overflow,
    };
    let h = HybridMatrix::with_values(Arc::new(pattern), ell_vals, tail)?;
    h.validate()?;
    Ok((h, dtype))
}
