use crate::error::{Error, Result, ValidationError};
use crate::tensor::{DenseMatrix, Scalar};

use super::PackPredicate;

/// ELLPACK-R storage: `width` padded slots per row plus the true per-row
/// count. A row whose count exceeds `width` keeps only its first `width`
/// entries here.
#[derive(Debug, Clone, PartialEq)]
pub struct EllMatrix<T: Scalar = f32> {
    pub(crate) rows: usize,
    pub(crate) cols: usize,
    pub(crate) width: usize,
    pub(crate) vals: Vec<T>,
    pub(crate) col_idx: Vec<u32>,
    pub(crate) row_nnz: Vec<u32>,
}

impl<T: Scalar> EllMatrix<T> {
    pub fn from_parts(
        rows: usize,
        cols: usize,
        width: usize,
        vals: Vec<T>,
        col_idx: Vec<u32>,
        row_nnz: Vec<u32>,
    ) -> Result<Self> {
        if vals.len() != rows * width || col_idx.len() != rows * width || row_nnz.len() != rows {
            return Err(Error::dims(
                "EllMatrix::from_parts",
                "array lengths disagree with shape",
            ));
        }
        Ok(EllMatrix {
            rows,
            cols,
            width,
            vals,
            col_idx,
            row_nnz,
        })
    }

    /// Packs the elements of `d` selected by `pred`.
    pub fn from_dense(d: &DenseMatrix<T>, width: usize, pred: PackPredicate) -> Self {
        let (rows, cols) = d.shape();
        let mut vals = vec![T::zero(); rows * width];
        let mut col_idx = vec![0u32; rows * width];
        let mut row_nnz = vec![0u32; rows];
        for r in 0..rows {
            let mut z = 0usize;
            for (c, &v) in d.row(r).iter().enumerate() {
                if pred.keeps(v) {
                    if z < width {
                        vals[r * width + z] = v;
                        col_idx[r * width + z] = c as u32;
                    }
                    z += 1;
                }
            }
            row_nnz[r] = z as u32;
        }
        EllMatrix {
            rows,
            cols,
            width,
            vals,
            col_idx,
            row_nnz,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn row_nnz(&self) -> &[u32] {
        &self.row_nnz
    }

    /// Valid prefix of a row (at most `width` entries).
    pub fn row_entries(&self, r: usize) -> (&[u32], &[T]) {
        let n = (self.row_nnz[r] as usize).min(self.width);
        let b = r * self.width;
        (&self.col_idx[b..b + n], &self.vals[b..b + n])
    }

    /// Densifies the stored prefixes; entries beyond `width` are lost.
    pub fn to_dense(&self) -> DenseMatrix<T> {
        let mut out = DenseMatrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            let (idx, val) = self.row_entries(r);
            let dst = out.row_mut(r);
            for (&c, &v) in idx.iter().zip(val) {
                dst[c as usize] = v;
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        for r in 0..self.rows {
            let (idx, _) = self.row_entries(r);
            check_row_indices(r, idx, self.cols)?;
        }
        Ok(())
    }
}

/// Range and strict-monotonicity check of one row's valid prefix.
pub(crate) fn check_row_indices(row: usize, idx: &[u32], cols: usize) -> Result<(), ValidationError> {
    for (slot, &c) in idx.iter().enumerate() {
        if c as usize >= cols {
            return Err(ValidationError::IndexOutOfRange {
                row,
                slot,
                index: c as usize,
                cols,
            });
        }
        if slot > 0 && idx[slot - 1] >= c {
            return Err(ValidationError::NonMonotoneIndices { row, slot });
        }
    }
    Ok(())
}
