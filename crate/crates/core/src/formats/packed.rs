//! Single-array 32-bit word layout of a bf16 TwELL matrix.
//!
//! Each (row, tile) owns `slots_per_tile` consecutive words. Word 0 holds the
//! tile's non-zero count (upper half zero); word `1 + c` holds entry `c` with
//! the 16-bit column index in the low half and the bf16 bits of the value in
//! the high half. One slot is spent on the count, so a tile holds at most
//! `slots_per_tile - 1` entries.

use half::bf16;

use super::{TwellConfig, TwellMatrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedTwell {
    rows: usize,
    cols: usize,
    config: TwellConfig,
    words: Vec<u32>,
}

impl PackedTwell {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn config(&self) -> TwellConfig {
        self.config
    }

    /// Row-major `rows × cols / compression` words.
    pub fn words(&self) -> &[u32] {
        &self.words
    }

    /// Words of one (row, tile).
    pub fn tile_words(&self, row: usize, tile: usize) -> &[u32] {
        let s = self.config.slots_per_tile();
        let base = row * (self.cols / self.config.compression()) + tile * s;
        &self.words[base..base + s]
    }
}

/// Packs count, indices and bf16 values into 32-bit words. Values are
/// rounded to bf16.
pub fn twell_pack_words(tw: &TwellMatrix<f32>) -> Result<PackedTwell> {
    let config = tw.config();
    let s = config.slots_per_tile();
    if s < 2 {
        return Err(Error::config(
            "compression",
            "packed words need at least two slots per tile",
        ));
    }
    if tw.cols() >= 1 << 16 {
        return Err(Error::IndexWidthExceeded { cols: tw.cols() });
    }
    let stride = tw.row_stride();
    let mut words = vec![0u32; tw.rows() * stride];
    for row in 0..tw.rows() {
        for tile in 0..tw.tiles_per_row() {
            let (idx, val) = tw.tile_entries(row, tile);
            let count = tw.tile_nnz(row, tile);
            if count > s - 1 {
                return Err(Error::OverflowTile {
                    row,
                    tile,
                    count,
                    capacity: s - 1,
                });
            }
            let base = row * stride + tile * s;
            words[base] = count as u32;
            for (c, (&i, &v)) in idx.iter().zip(val).enumerate() {
                words[base + 1 + c] = (i & 0xFFFF) | ((bf16::from_f32(v).to_bits() as u32) << 16);
            }
        }
    }
    Ok(PackedTwell {
        rows: tw.rows(),
        cols: tw.cols(),
        config,
        words,
    })
}

/// Inverse of [`twell_pack_words`]: entries land in slots `0..count`.
pub fn twell_unpack_words(p: &PackedTwell) -> Result<TwellMatrix<f32>> {
    let mut out = TwellMatrix::empty(p.rows, p.cols, p.config)?;
    let s = p.config.slots_per_tile();
    let nt = out.tiles_per_row();
    let stride = out.row_stride();
    let (values, indices, nnz) = out.parts_mut();
    for row in 0..p.rows {
        for tile in 0..nt {
            let w = p.tile_words(row, tile);
            let count = w[0] as usize;
            if count > s - 1 {
                return Err(Error::OverflowTile {
                    row,
                    tile,
                    count,
                    capacity: s - 1,
                });
            }
            nnz[row * nt + tile] = count as u32;
            let base = row * stride + tile * s;
            for c in 0..count {
                let word = w[1 + c];
                indices[base + c] = word & 0xFFFF;
                values[base + c] = bf16::from_bits((word >> 16) as u16).to_f32();
            }
        }
    }
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formats::dense_to_twell;
    use crate::tensor::DenseMatrix;

    #[test]
    fn single_pair_layout() {
        let mut d = DenseMatrix::<f32>::zeros(1, 8);
        d.set(0, 4, 1.5);
        let tw = dense_to_twell(&d, TwellConfig::new(4, 2).unwrap()).unwrap();
        let p = twell_pack_words(&tw).unwrap();
        assert_eq!(p.tile_words(0, 0)[0], 0);
        let w = p.tile_words(0, 1);
        assert_eq!(w[0], 1);
        assert_eq!(w[1] & 0xFFFF, 4);
        assert_eq!((w[1] >> 16) as u16, bf16::from_f32(1.5).to_bits());
        let back = twell_unpack_words(&p).unwrap();
        assert_eq!(back.tile_entries(0, 1), (&[4u32][..], &[1.5f32][..]));
    }

    #[test]
    fn capacity_is_one_less() {
        let d = DenseMatrix::from_rows(&[[1.0f32, 2.0, 0.0, 0.0]]).unwrap();
        let tw = dense_to_twell(&d, TwellConfig::new(4, 2).unwrap()).unwrap();
        assert!(matches!(
            twell_pack_words(&tw),
            Err(Error::OverflowTile {
                capacity: 1,
                count: 2,
                ..
            })
        ));
        let one = DenseMatrix::from_rows(&[[1.0f32, 0.0, 0.0, 0.0]]).unwrap();
        let tw1 = dense_to_twell(&one, TwellConfig::new(4, 4).unwrap()).unwrap();
        assert!(matches!(twell_pack_words(&tw1), Err(Error::InvalidConfig { .. })));
    }

    #[test]
    fn wide_matrices_rejected() {
        let tw = TwellMatrix::<f32>::empty(1, 1 << 16, TwellConfig::new(256, 8).unwrap()).unwrap();
        assert!(matches!(twell_pack_words(&tw), Err(Error::IndexWidthExceeded { .. })));
    }
}
