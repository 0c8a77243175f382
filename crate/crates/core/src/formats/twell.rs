use crate::error::{Error, Result, ValidationError};
use crate::tensor::{DenseMatrix, Scalar};

/// Tile geometry of a TwELL matrix: tiles of `tile_width` columns, each with
/// `tile_width / compression` storage slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TwellConfig {
    tile_width: usize,
    compression: usize,
}

impl TwellConfig {
    pub fn new(tile_width: usize, compression: usize) -> Result<Self> {
        if tile_width == 0 {
            return Err(Error::config("tile_width", "must be at least 1"));
        }
        if compression == 0 || !tile_width.is_multiple_of(compression) {
            return Err(Error::config(
                "compression",
                format!("{compression} does not divide tile width {tile_width}"),
            ));
        }
        Ok(TwellConfig {
            tile_width,
            compression,
        })
    }

    pub fn tile_width(&self) -> usize {
        self.tile_width
    }

    pub fn compression(&self) -> usize {
        self.compression
    }

    pub fn slots_per_tile(&self) -> usize {
        self.tile_width / self.compression
    }

    /// Checks that a matrix of `cols` columns splits into whole tiles.
    pub fn check_width(&self, cols: usize) -> Result<()> {
        if !cols.is_multiple_of(self.tile_width) {
            return Err(Error::dims(
                "TwellConfig",
                format!("width {cols} is not a multiple of tile width {}", self.tile_width),
            ));
        }
        Ok(())
    }
}

/// Which elements a packing pass keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PackPredicate {
    /// Strictly positive elements (post-ReLU activations).
    #[default]
    Positive,
    /// Any non-zero element.
    NonZero,
}

impl PackPredicate {
    #[inline]
    pub fn keeps<T: Scalar>(self, v: T) -> bool {
        match self {
            PackPredicate::Positive => v > T::zero(),
            PackPredicate::NonZero => !v.is_zero(),
        }
    }
}

/// Tile-wise ELLPACK storage.
///
/// Row `m`, tile `t` owns slots `t*S .. (t+1)*S` of the row's `values` and
/// `indices` (with `S = slots_per_tile`); only the first `nnz[m, t]` of them
/// are meaningful. Indices are global column numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct TwellMatrix<T: Scalar = f32> {
    rows: usize,
    cols: usize,
    config: TwellConfig,
    values: Vec<T>,
    indices: Vec<u32>,
    nnz: Vec<u32>,
}

impl<T: Scalar> TwellMatrix<T> {
    /// An empty (all-zero) matrix.
    pub fn empty(rows: usize, cols: usize, config: TwellConfig) -> Result<Self> {
        config.check_width(cols)?;
        let stored = rows * cols / config.compression;
        Ok(TwellMatrix {
            rows,
            cols,
            config,
            values: vec![T::zero(); stored],
            indices: vec![0; stored],
            nnz: vec![0; rows * (cols / config.tile_width)],
        })
    }

    /// Assembles a matrix from raw arrays. Array lengths are checked; the
    /// content is not (see [`TwellMatrix::validate`]).
    pub fn from_parts(
        rows: usize,
        cols: usize,
        config: TwellConfig,
        values: Vec<T>,
        indices: Vec<u32>,
        nnz: Vec<u32>,
    ) -> Result<Self> {
        config.check_width(cols)?;
        let stored = rows * cols / config.compression;
        let tiles = rows * (cols / config.tile_width);
        if values.len() != stored || indices.len() != stored || nnz.len() != tiles {
            return Err(Error::dims(
                "TwellMatrix::from_parts",
                format!(
                    "values {}, indices {}, nnz {} for {rows}x{cols} with {:?}",
                    values.len(),
                    indices.len(),
                    nnz.len(),
                    config
                ),
            ));
        }
        Ok(TwellMatrix {
            rows,
            cols,
            config,
            values,
            indices,
            nnz,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn config(&self) -> TwellConfig {
        self.config
    }

    pub fn tiles_per_row(&self) -> usize {
        self.cols / self.config.tile_width
    }

    /// Stored slots per row (`cols / compression`).
    pub fn row_stride(&self) -> usize {
        self.cols / self.config.compression
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    /// Per-(row, tile) counts, row-major `rows × tiles_per_row`.
    pub fn nnz(&self) -> &[u32] {
        &self.nnz
    }

    #[inline]
    pub fn tile_nnz(&self, row: usize, tile: usize) -> usize {
        self.nnz[row * self.tiles_per_row() + tile] as usize
    }

    /// Valid `(indices, values)` prefix of one tile.
    #[inline]
    pub fn tile_entries(&self, row: usize, tile: usize) -> (&[u32], &[T]) {
        let s = self.config.slots_per_tile();
        let base = row * self.row_stride() + tile * s;
        let n = self.tile_nnz(row, tile).min(s);
        (&self.indices[base..base + n], &self.values[base..base + n])
    }

    /// All stored `(column, value)` pairs of a row in ascending column order.
    pub fn row_entries(&self, row: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        (0..self.tiles_per_row()).flat_map(move |t| {
            let (idx, val) = self.tile_entries(row, t);
            idx.iter().zip(val).map(|(&i, &v)| (i as usize, v))
        })
    }

    pub fn row_nnz(&self, row: usize) -> usize {
        let nt = self.tiles_per_row();
        self.nnz[row * nt..(row + 1) * nt].iter().map(|&c| c as usize).sum()
    }

    pub fn total_nnz(&self) -> usize {
        self.nnz.iter().map(|&c| c as usize).sum()
    }

    /// Largest per-tile count.
    pub fn max_tile_nnz(&self) -> usize {
        self.nnz.iter().copied().max().unwrap_or(0) as usize
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut [T], &mut [u32], &mut [u32]) {
        (&mut self.values, &mut self.indices, &mut self.nnz)
    }

    /// Checks every structural invariant over the valid prefixes.
    pub fn validate(&self) -> Result<(), ValidationError> {
        let s = self.config.slots_per_tile();
        let tw = self.config.tile_width;
        for row in 0..self.rows {
            for tile in 0..self.tiles_per_row() {
                let count = self.tile_nnz(row, tile);
                if count > s {
                    return Err(ValidationError::CountExceedsSlots {
                        row,
                        tile,
                        count,
                        slots: s,
                    });
                }
                let (idx, _) = self.tile_entries(row, tile);
                for (slot, &i) in idx.iter().enumerate() {
                    let i = i as usize;
                    if i < tw * tile || i >= tw * (tile + 1) {
                        return Err(ValidationError::IndexOutOfTile {
                            row,
                            tile,
                            slot,
                            index: i,
                        });
                    }
                    if slot > 0 && idx[slot - 1] as usize >= i {
                        return Err(ValidationError::NonMonotoneIndices {
                            row,
                            slot: tile * s + slot,
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

/// Packs one row segment (one tile of one row) into `vals`/`idx`, returning
/// the number of kept elements. Counting continues past capacity so the
/// caller can report the true count.
#[inline]
pub(crate) fn pack_segment<T: Scalar>(
    src: &[T],
    col0: usize,
    pred: PackPredicate,
    vals: &mut [T],
    idx: &mut [u32],
) -> usize {
    let cap = vals.len();
    let mut z = 0;
    for (c, &v) in src.iter().enumerate() {
        if pred.keeps(v) {
            if z < cap {
                vals[z] = v;
                idx[z] = (col0 + c) as u32;
            }
            z += 1;
        }
    }
    z
}

/// Packs the strictly positive entries of `d` into TwELL.
pub fn dense_to_twell<T: Scalar>(d: &DenseMatrix<T>, config: TwellConfig) -> Result<TwellMatrix<T>> {
    dense_to_twell_with(d, config, PackPredicate::Positive)
}

/// Packs the entries of `d` selected by `pred` into TwELL.
pub fn dense_to_twell_with<T: Scalar>(
    d: &DenseMatrix<T>,
    config: TwellConfig,
    pred: PackPredicate,
) -> Result<TwellMatrix<T>> {
    let mut out = TwellMatrix::empty(d.rows(), d.cols(), config)?;
    let s = config.slots_per_tile();
    let tw = config.tile_width();
    let nt = out.tiles_per_row();
    let stride = out.row_stride();
    let (values, indices, nnz) = out.parts_mut();
    for row in 0..d.rows() {
        let src = d.row(row);
        for tile in 0..nt {
            let base = row * stride + tile * s;
            let count = pack_segment(
                &src[tile * tw..(tile + 1) * tw],
                tile * tw,
                pred,
                &mut values[base..base + s],
                &mut indices[base..base + s],
            );
            if count > s {
                return Err(Error::OverflowTile {
                    row,
                    tile,
                    count,
                    capacity: s,
                });
            }
            nnz[row * nt + tile] = count as u32;
        }
    }
    Ok(out)
}

/// Scatters every stored pair back to its column; unstored positions are zero.
pub fn twell_to_dense<T: Scalar>(tw: &TwellMatrix<T>) -> Result<DenseMatrix<T>> {
    tw.validate()?;
    let mut out = DenseMatrix::zeros(tw.rows(), tw.cols());
    for row in 0..tw.rows() {
        let dst = out.row_mut(row);
        for (c, v) in tw.row_entries(row) {
            dst[c] = v;
        }
    }
    Ok(out)
}
