use std::sync::Arc;

use crate::error::{Error, Result, ValidationError};
use crate::tensor::{DenseMatrix, Scalar};

use super::ell::check_row_indices;
use super::{PackPredicate, TwellMatrix};

/// Tail-map entry of a row without a dense backup slot.
pub const NO_SLOT: u32 = u32::MAX;

/// Static sizes of a hybrid matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct HybridCapacity {
    /// ELL slots per row; rows with more non-zeros are routed dense.
    pub ell_width: usize,
    /// Rows available in the dense backup.
    pub dense_cap: usize,
}

impl HybridCapacity {
    pub fn new(ell_width: usize, dense_cap: usize) -> Self {
        HybridCapacity { ell_width, dense_cap }
    }

    /// 128 ELL slots and a backup of one eighth of the rows.
    pub fn recommended(rows: usize) -> Self {
        HybridCapacity {
            ell_width: 128,
            dense_cap: (rows / 8).max(1),
        }
    }
}

/// Routing and index structure of a hybrid matrix, shared by every matrix
/// laid out on the same sparsity pattern.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HybridPattern {
    pub(crate) rows: usize,
    pub(crate) cols: usize,
    pub(crate) ell_width: usize,
    pub(crate) dense_cap: usize,
    /// True per-row non-zero count (may exceed `ell_width`).
    pub(crate) row_nnz: Vec<u32>,
    /// `rows × ell_width` column indices; the prefix of sparse rows is valid.
    pub(crate) col_idx: Vec<u32>,
    /// `true` for rows stored in the dense backup.
    pub(crate) routing: Vec<bool>,
    /// Row → backup slot, or [`NO_SLOT`].
    pub(crate) tail_map: Vec<u32>,
    /// Backup slot → row.
    pub(crate) tail_rows: Vec<u32>,
    pub(crate) overflow: bool,
}

impl HybridPattern {
    /// Routes rows by their true counts and allocates backup slots in row
    /// order. Rows beyond the backup capacity get no slot and set the
    /// overflow flag. Column indices start zeroed.
    pub(crate) fn route(rows: usize, cols: usize, cap: HybridCapacity, row_nnz: Vec<u32>) -> Self {
        debug_assert_eq!(row_nnz.len(), rows);
        let mut routing = vec![false; rows];
        let mut tail_map = vec![NO_SLOT; rows];
        let mut tail_rows = Vec::new();
        let mut overflow = false;
        for r in 0..rows {
            if row_nnz[r] as usize > cap.ell_width {
                routing[r] = true;
                if tail_rows.len() < cap.dense_cap {
                    tail_map[r] = tail_rows.len() as u32;
                    tail_rows.push(r as u32);
                } else {
                    overflow = true;
                }
            }
        }
        HybridPattern {
            rows,
            cols,
            ell_width: cap.ell_width,
            dense_cap: cap.dense_cap,
            row_nnz,
            col_idx: vec![0; rows * cap.ell_width],
            routing,
            tail_map,
            tail_rows,
            overflow,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn capacity(&self) -> HybridCapacity {
        HybridCapacity::new(self.ell_width, self.dense_cap)
    }

    pub fn row_nnz(&self) -> &[u32] {
        &self.row_nnz
    }

    pub fn routing(&self) -> &[bool] {
        &self.routing
    }

    pub fn tail_rows(&self) -> &[u32] {
        &self.tail_rows
    }

    pub fn overflowed(&self) -> bool {
        self.overflow
    }

    #[inline]
    pub fn is_dense_row(&self, r: usize) -> bool {
        self.routing[r]
    }

    /// Valid column indices of a sparse row (empty for dense rows).
    #[inline]
    pub fn sparse_indices(&self, r: usize) -> &[u32] {
        if self.routing[r] {
            return &[];
        }
        let b = r * self.ell_width;
        &self.col_idx[b..b + self.row_nnz[r] as usize]
    }

    /// Backup slot of a row, if it has one.
    #[inline]
    pub fn tail_slot(&self, r: usize) -> Option<usize> {
        match self.tail_map[r] {
            NO_SLOT => None,
            s => Some(s as usize),
        }
    }

    pub fn dense_row_count(&self) -> usize {
        self.routing.iter().filter(|&&d| d).count()
    }

    pub fn total_nnz(&self) -> usize {
        self.row_nnz.iter().map(|&c| c as usize).sum()
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        let shape = |what: &str| ValidationError::ShapeInconsistent(what.to_string());
        if self.row_nnz.len() != self.rows || self.routing.len() != self.rows || self.tail_map.len() != self.rows {
            return Err(shape("per-row arrays disagree with row count"));
        }
        if self.col_idx.len() != self.rows * self.ell_width {
            return Err(shape("ELL index array disagrees with rows × ell_width"));
        }
        if self.tail_rows.len() > self.dense_cap {
            return Err(ValidationError::TailMapInconsistent(format!(
                "{} backup rows exceed capacity {}",
                self.tail_rows.len(),
                self.dense_cap
            )));
        }
        let mut dropped = false;
        for r in 0..self.rows {
            let nnz = self.row_nnz[r] as usize;
            let dense = nnz > self.ell_width;
            if dense != self.routing[r] {
                return Err(ValidationError::RoutingMismatch {
                    row: r,
                    nnz,
                    width: self.ell_width,
                    routed_dense: self.routing[r],
                });
            }
            if nnz > self.cols {
                return Err(shape(&format!(
                    "row {r} claims {nnz} non-zeros in {} columns",
                    self.cols
                )));
            }
            match (dense, self.tail_slot(r)) {
                (false, None) => {
                    check_row_indices(r, self.sparse_indices(r), self.cols)?;
                }
                (false, Some(_)) => {
                    return Err(ValidationError::TailMapInconsistent(format!(
                        "sparse row {r} owns a backup slot"
                    )));
                }
                (true, Some(s)) => {
                    if self.tail_rows.get(s) != Some(&(r as u32)) {
                        return Err(ValidationError::TailMapInconsistent(format!(
                            "row {r} maps to slot {s} which does not map back"
                        )));
                    }
                }
                (true, None) => dropped = true,
            }
        }
        for (s, &r) in self.tail_rows.iter().enumerate() {
            if r as usize >= self.rows || self.tail_map[r as usize] != s as u32 {
                return Err(ValidationError::TailMapInconsistent(format!(
                    "backup slot {s} points at row {r} which does not map back"
                )));
            }
        }
        if dropped != self.overflow {
            return Err(ValidationError::TailMapInconsistent(format!(
                "overflow flag {} but dropped rows: {dropped}",
                self.overflow
            )));
        }
        Ok(())
    }
}

/// Hybrid storage: a compact ELL part for rows with at most `ell_width`
/// non-zeros and a dense backup for the rest, selected per row by a routing
/// bit.
///
/// Rows routed dense beyond the backup capacity are dropped (they read back
/// as zero) and the overflow flag is raised.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridMatrix<T: Scalar = f32> {
    pub(crate) pattern: Arc<HybridPattern>,
    /// `rows × ell_width`.
    pub(crate) ell_vals: Vec<T>,
    /// `tail_rows × cols`.
    pub(crate) tail: Vec<T>,
}

/// Mean per-row statistics accumulated during a TwELL → hybrid conversion.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ConversionStats {
    /// Mean non-zeros per row.
    pub l0: f64,
    /// Mean per-row sum of stored values.
    pub l1: f64,
}

impl<T: Scalar> HybridMatrix<T> {
    /// Attaches values to an existing pattern.
    pub fn with_values(pattern: Arc<HybridPattern>, ell_vals: Vec<T>, tail: Vec<T>) -> Result<Self> {
        if ell_vals.len() != pattern.rows * pattern.ell_width || tail.len() != pattern.tail_rows.len() * pattern.cols {
            return Err(Error::dims(
                "HybridMatrix::with_values",
                "value arrays disagree with pattern",
            ));
        }
        Ok(HybridMatrix {
            pattern,
            ell_vals,
            tail,
        })
    }

    /// Zero values on `pattern`.
    pub fn zeros_like(pattern: Arc<HybridPattern>) -> Self {
        let ell = vec![T::zero(); pattern.rows * pattern.ell_width];
        let tail = vec![T::zero(); pattern.tail_rows.len() * pattern.cols];
        HybridMatrix {
            pattern,
            ell_vals: ell,
            tail,
        }
    }

    /// Packs the entries of `d` selected by `pred`.
    pub fn from_dense(d: &DenseMatrix<T>, cap: HybridCapacity, pred: PackPredicate) -> Self {
        let (rows, cols) = d.shape();
        let counts = (0..rows)
            .map(|r| d.row(r).iter().filter(|&&v| pred.keeps(v)).count() as u32)
            .collect();
        let mut pattern = HybridPattern::route(rows, cols, cap, counts);
        let w = cap.ell_width;
        let mut ell_vals = vec![T::zero(); rows * w];
        let mut tail = vec![T::zero(); pattern.tail_rows.len() * cols];
        for r in 0..rows {
            let src = d.row(r);
            if let Some(s) = pattern.tail_slot(r) {
                let dst = &mut tail[s * cols..(s + 1) * cols];
                for (o, &v) in dst.iter_mut().zip(src) {
                    *o = if pred.keeps(v) { v } else { T::zero() };
                }
            }
            let mut z = 0;
            for (c, &v) in src.iter().enumerate() {
                if z == w {
                    break;
                }
                if pred.keeps(v) {
                    pattern.col_idx[r * w + z] = c as u32;
                    ell_vals[r * w + z] = v;
                    z += 1;
                }
            }
        }
        HybridMatrix {
            pattern: Arc::new(pattern),
            ell_vals,
            tail,
        }
    }

    pub fn rows(&self) -> usize {
        self.pattern.rows
    }

    pub fn cols(&self) -> usize {
        self.pattern.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.pattern.rows, self.pattern.cols)
    }

    pub fn pattern(&self) -> &Arc<HybridPattern> {
        &self.pattern
    }

    pub fn capacity(&self) -> HybridCapacity {
        self.pattern.capacity()
    }

    pub fn overflowed(&self) -> bool {
        self.pattern.overflow
    }

    pub fn ell_values(&self) -> &[T] {
        &self.ell_vals
    }

    pub fn tail_values(&self) -> &[T] {
        &self.tail
    }

    /// Errors with `DenseCapacityExceeded` when rows were dropped.
    pub fn check_capacity(&self) -> Result<()> {
        if self.pattern.overflow {
            return Err(Error::DenseCapacityExceeded {
                needed: self.pattern.dense_row_count(),
                capacity: self.pattern.dense_cap,
            });
        }
        Ok(())
    }

    /// `(indices, values)` of a sparse row; empty for dense rows.
    #[inline]
    pub fn sparse_row(&self, r: usize) -> (&[u32], &[T]) {
        let idx = self.pattern.sparse_indices(r);
        let b = r * self.pattern.ell_width;
        (idx, &self.ell_vals[b..b + idx.len()])
    }

    /// Backup row content of a dense row that has a slot.
    #[inline]
    pub fn tail_row(&self, r: usize) -> Option<&[T]> {
        let n = self.pattern.cols;
        self.pattern.tail_slot(r).map(|s| &self.tail[s * n..(s + 1) * n])
    }

    /// True when both matrices are laid out on the same pattern.
    pub fn shares_pattern<U: Scalar>(&self, other: &HybridMatrix<U>) -> bool {
        Arc::ptr_eq(&self.pattern, &other.pattern) || *self.pattern == *other.pattern
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        self.pattern.validate()?;
        if self.ell_vals.len() != self.pattern.rows * self.pattern.ell_width
            || self.tail.len() != self.pattern.tail_rows.len() * self.pattern.cols
        {
            return Err(ValidationError::ShapeInconsistent(
                "value arrays disagree with pattern".into(),
            ));
        }
        Ok(())
    }

    /// Maps every stored value (ELL prefixes and backup rows).
    pub fn map_values(&self, f: impl Fn(T) -> T) -> Self {
        HybridMatrix {
            pattern: Arc::clone(&self.pattern),
            ell_vals: self.ell_vals.iter().map(|&v| f(v)).collect(),
            tail: self.tail.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Compacts each TwELL row into one ELL row and routes rows with more than
/// `ell_width` non-zeros to the dense backup.
///
/// Tiles are concatenated left to right at prefix-sum offsets. Dense rows
/// keep their true count in `row_nnz`; their backup row is densified from the
/// TwELL source. When `want_stats` is set the mean per-row count (`l0`) and
/// mean per-row value sum (`l1`) are returned as well.
pub fn twell_to_hybrid<T: Scalar>(
    tw: &TwellMatrix<T>,
    ell_width: usize,
    dense_cap: usize,
    want_stats: bool,
) -> (HybridMatrix<T>, Option<ConversionStats>) {
    let rows = tw.rows();
    let cols = tw.cols();
    let slots = tw.config().slots_per_tile();
    let nt = tw.tiles_per_row();
    let counts: Vec<u32> = (0..rows)
        .map(|r| (0..nt).map(|t| tw.tile_nnz(r, t).min(slots) as u32).sum())
        .collect();
    let mut pattern = HybridPattern::route(rows, cols, HybridCapacity::new(ell_width, dense_cap), counts);
    let mut ell_vals = vec![T::zero(); rows * ell_width];
    let mut tail = vec![T::zero(); pattern.tail_rows.len() * cols];
    let mut l0 = 0.0f64;
    let mut l1 = 0.0f64;
    for r in 0..rows {
        let mut start = 0usize;
        for t in 0..nt {
            let (idx, val) = tw.tile_entries(r, t);
            if want_stats {
                l1 += val.iter().map(|v| v.as_f64()).sum::<f64>();
            }
            if start < ell_width {
                let n = idx.len().min(ell_width - start);
                let b = r * ell_width + start;
                pattern.col_idx[b..b + n].copy_from_slice(&idx[..n]);
                ell_vals[b..b + n].copy_from_slice(&val[..n]);
            }
            start += idx.len();
        }
        l0 += start as f64;
        if let Some(s) = pattern.tail_slot(r) {
            let dst = &mut tail[s * cols..(s + 1) * cols];
            for (c, v) in tw.row_entries(r) {
                dst[c] = v;
            }
        }
    }
    let stats = want_stats.then(|| {
        let m = rows.max(1) as f64;
        ConversionStats { l0: l0 / m, l1: l1 / m }
    });
    (
        HybridMatrix {
            pattern: Arc::new(pattern),
            ell_vals,
            tail,
        },
        stats,
    )
}

/// Scatters sparse rows from the ELL part and copies dense rows from the
/// backup. Dropped rows read back as zero.
pub fn hybrid_to_dense_matrix<T: Scalar>(h: &HybridMatrix<T>) -> Result<DenseMatrix<T>> {
    h.validate()?;
    let mut out = DenseMatrix::zeros(h.rows(), h.cols());
    for r in 0..h.rows() {
        let dst = out.row_mut(r);
        if let Some(src) = h.tail_row(r) {
            dst.copy_from_slice(src);
        } else {
            let (idx, val) = h.sparse_row(r);
            for (&c, &v) in idx.iter().zip(val) {
                dst[c as usize] = v;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formats::{dense_to_twell, twell_to_dense, TwellConfig};

    fn sample() -> DenseMatrix<f32> {
        DenseMatrix::from_rows(&[
            [0.0f32, 1.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0],
            [1.0, 2.0, 0.0, 3.0, 0.0, 0.0, 0.0, 4.0],
            [0.0; 8],
            [5.0, 0.0, 6.0, 0.0, 0.0, 7.0, 0.0, 0.0],
        ])
        .unwrap()
    }

    #[test]
    fn routing_follows_counts() {
        let tw = dense_to_twell(&sample(), TwellConfig::new(4, 1).unwrap()).unwrap();
        let (h, stats) = twell_to_hybrid(&tw, 3, 4, true);
        assert_eq!(h.pattern().routing(), &[false, true, false, false]);
        assert!(!h.overflowed());
        assert_eq!(h.pattern().tail_rows(), &[1]);
        let stats = stats.unwrap();
        assert_eq!(stats.l0, 9.0 / 4.0);
        assert_eq!(stats.l1, 31.0 / 4.0);
        assert_eq!(hybrid_to_dense_matrix(&h).unwrap(), sample());
        assert!(h.validate().is_ok());
    }

    #[test]
    fn boundary_row_goes_dense() {
        let tw = dense_to_twell(&sample(), TwellConfig::new(4, 1).unwrap()).unwrap();
        // Row 3 has exactly 3 entries: width 3 keeps it sparse, width 2 routes it.
        let (h, _) = twell_to_hybrid(&tw, 2, 4, false);
        assert_eq!(h.pattern().routing(), &[false, true, false, true]);
        let (h, _) = twell_to_hybrid(&tw, 4, 4, false);
        assert_eq!(h.pattern().dense_row_count(), 0);
    }

    #[test]
    fn capacity_overflow_flags_and_drops() {
        let tw = dense_to_twell(&sample(), TwellConfig::new(4, 1).unwrap()).unwrap();
        let (h, _) = twell_to_hybrid(&tw, 2, 1, false);
        assert!(h.overflowed());
        assert!(matches!(
            h.check_capacity(),
            Err(Error::DenseCapacityExceeded { needed: 2, capacity: 1 })
        ));
        assert!(h.validate().is_ok());
        let d = hybrid_to_dense_matrix(&h).unwrap();
        assert_eq!(d.row(1), sample().row(1));
        assert!(d.row(3).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_sparse_entry() {
        let mut d = DenseMatrix::<f32>::zeros(3, 4);
        d.set(1, 2, 5.0);
        let h = HybridMatrix::from_dense(&d, HybridCapacity::new(2, 1), PackPredicate::NonZero);
        assert_eq!(h.sparse_row(1), (&[2u32][..], &[5.0f32][..]));
        assert_eq!(hybrid_to_dense_matrix(&h).unwrap(), d);
        let empty = HybridMatrix::<f32>::from_dense(
            &DenseMatrix::zeros(2, 3),
            HybridCapacity::new(1, 1),
            PackPredicate::Positive,
        );
        assert_eq!(hybrid_to_dense_matrix(&empty).unwrap().count_nonzero(), 0);
    }

    #[test]
    fn from_dense_matches_twell_route() {
        let d = sample();
        let tw = dense_to_twell(&d, TwellConfig::new(4, 1).unwrap()).unwrap();
        let (a, _) = twell_to_hybrid(&tw, 2, 2, false);
        let b = HybridMatrix::from_dense(&d, HybridCapacity::new(2, 2), PackPredicate::Positive);
        assert!(a.shares_pattern(&b) || a.pattern().routing() == b.pattern().routing());
        assert_eq!(hybrid_to_dense_matrix(&a).unwrap(), twell_to_dense(&tw).unwrap());
        assert_eq!(hybrid_to_dense_matrix(&b).unwrap(), d);
    }

    #[test]
    fn validation_catches_corruption() {
        let tw = dense_to_twell(&sample(), TwellConfig::new(4, 1).unwrap()).unwrap();
        let (h, _) = twell_to_hybrid(&tw, 3, 4, false);

        let mut p = (**h.pattern()).clone();
        p.routing[1] = false;
        assert!(matches!(
            p.validate(),
            Err(ValidationError::RoutingMismatch { row: 1, .. })
        ));

        let mut p = (**h.pattern()).clone();
        p.tail_rows[0] = 0;
        assert!(matches!(p.validate(), Err(ValidationError::TailMapInconsistent(_))));

        let mut p = (**h.pattern()).clone();
        p.col_idx[0] = 40;
        assert!(matches!(p.validate(), Err(ValidationError::IndexOutOfRange { .. })));

        let mut p = (**h.pattern()).clone();
        p.overflow = true;
        assert!(matches!(p.validate(), Err(ValidationError::TailMapInconsistent(_))));

        let bad = HybridMatrix {
            pattern: Arc::new({
                let mut p = (**h.pattern()).clone();
                p.tail_map[0] = 0;
                p
            }),
            ell_vals: h.ell_vals.clone(),
            tail: h.tail.clone(),
        };
        assert!(hybrid_to_dense_matrix(&bad).is_err());
    }
}
