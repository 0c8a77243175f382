//! Training-path primitives on hybrid matrices: hybrid × dense and
//! pattern-masked dense × dense products, transposition, pattern-aligned
//! elementwise products and L1 gradient injection.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::formats::{HybridCapacity, HybridMatrix, HybridPattern, NO_SLOT};
use crate::probe::{self, Probe};
use crate::tensor::gemm;
use crate::tensor::{transpose_dense, DenseMatrix, Scalar};

/// `densify(H) · B`.
///
/// Sparse rows accumulate `v · B[col,:]` over their stored entries; backup
/// rows go through the dense path; empty rows cost nothing.
pub fn hybrid_to_dense_matmul<T: Scalar>(h: &HybridMatrix<T>, b: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    hybrid_to_dense_matmul_probed(h, b, None)
}

/// [`hybrid_to_dense_matmul`] counting `N_out` MACs per stored sparse entry
/// and `cols · N_out` per backup row.
pub fn hybrid_to_dense_matmul_probed<T: Scalar>(
    h: &HybridMatrix<T>,
    b: &DenseMatrix<T>,
    probe: Option<&Probe>,
) -> Result<DenseMatrix<T>> {
    if h.cols() != b.rows() {
        return Err(Error::dims(
            "hybrid_to_dense_matmul",
            format!("H {:?} times B {:?}", h.shape(), b.shape()),
        ));
    }
    let n_out = b.cols();
    let mut y = DenseMatrix::zeros(h.rows(), n_out);
    if n_out == 0 {
        return Ok(y);
    }
    y.as_mut_slice().par_chunks_mut(n_out).enumerate().for_each(|(r, out)| {
        if let Some(row) = h.tail_row(r) {
            for (c, &v) in row.iter().enumerate() {
                gemm::axpy(v, b.row(c), out);
            }
            probe::add_macs(probe, (row.len() * n_out) as u64);
        } else {
            let (idx, val) = h.sparse_row(r);
            for (&c, &v) in idx.iter().zip(val) {
                gemm::axpy(v, b.row(c as usize), out);
            }
            probe::add_macs(probe, (idx.len() * n_out) as u64);
        }
    });
    Ok(y)
}

/// `(A · B)` sampled on the support of `pattern`, returned on `pattern`'s
/// structure.
///
/// Sparse rows compute one dot product per stored index. Backup rows are
/// computed densely and masked to the non-zeros of `pattern`'s backup row.
pub fn dense_to_hybrid_matmul<T: Scalar>(
    a: &DenseMatrix<T>,
    b: &DenseMatrix<T>,
    pattern: &HybridMatrix<T>,
) -> Result<HybridMatrix<T>> {
    if a.cols() != b.rows() {
        return Err(Error::dims(
            "dense_to_hybrid_matmul",
            format!("A {:?} times B {:?}", a.shape(), b.shape()),
        ));
    }
    dense_to_hybrid_matmul_bt(a, &transpose_dense(b), pattern, None)
}

/// [`dense_to_hybrid_matmul`] with `B` supplied transposed (`N × K`), so
/// `A · W_dᵀ` can be formed from `W_d` without a copy.
///
/// Never allocates an `M × N` buffer: the transient scratch is one row.
pub fn dense_to_hybrid_matmul_bt<T: Scalar>(
    a: &DenseMatrix<T>,
    b_t: &DenseMatrix<T>,
    pattern: &HybridMatrix<T>,
    probe: Option<&Probe>,
) -> Result<HybridMatrix<T>> {
    let k = a.cols();
    if b_t.cols() != k || pattern.shape() != (a.rows(), b_t.rows()) {
        return Err(Error::dims(
            "dense_to_hybrid_matmul",
            format!("A {:?}, Bᵀ {:?}, pattern {:?}", a.shape(), b_t.shape(), pattern.shape()),
        ));
    }
    pattern.validate()?;
    let p = pattern.pattern();
    let (w, n) = (p.capacity().ell_width, p.cols());

    let mut ell = vec![T::zero(); p.rows() * w];
    if w > 0 {
        ell.par_chunks_mut(w).enumerate().for_each(|(r, out)| {
            if p.is_dense_row(r) {
                return;
            }
            let idx = p.sparse_indices(r);
            let ar = a.row(r);
            let mut chunks = idx.chunks_exact(4);
            let mut o = 0;
            for c in &mut chunks {
                let d = gemm::dot4(
                    ar,
                    [
                        b_t.row(c[0] as usize),
                        b_t.row(c[1] as usize),
                        b_t.row(c[2] as usize),
                        b_t.row(c[3] as usize),
                    ],
                );
                out[o..o + 4].copy_from_slice(&d);
                o += 4;
            }
            for &c in chunks.remainder() {
                out[o] = gemm::dot(ar, b_t.row(c as usize));
                o += 1;
            }
            probe::add_macs(probe, (idx.len() * k) as u64);
        });
    }

    let mut tail = vec![T::zero(); p.tail_rows().len() * n];
    if n > 0 {
        tail.par_chunks_mut(n).enumerate().for_each(|(s, out)| {
            let r = p.tail_rows()[s] as usize;
            let ar = a.row(r);
            let mask = pattern.tail_row(r).expect("backup row has a slot");
            probe::note_buffer(probe, n);
            for (c, o) in out.iter_mut().enumerate() {
                let v = gemm::dot(ar, b_t.row(c));
                *o = if mask[c].is_zero() { T::zero() } else { v };
            }
            probe::add_macs(probe, (n * k) as u64);
        });
    }

    // Mirror backup values into the ELL prefix of dense rows, as the
    // converters do, so every value array is laid out identically.
    for (s, &r) in p.tail_rows().iter().enumerate() {
        let r = r as usize;
        let b = r * w;
        let stored = (p.row_nnz()[r] as usize).min(w);
        for z in 0..stored {
            ell[b + z] = tail[s * n + p.col_idx[b + z] as usize];
        }
    }
    HybridMatrix::with_values(Arc::clone(p), ell, tail)
}

/// Stored entries of one row: the ELL prefix of a sparse row or the
/// non-zeros of a backup row. Dropped rows yield nothing.
fn for_each_entry<T: Scalar>(h: &HybridMatrix<T>, r: usize, mut f: impl FnMut(usize, T)) {
    if let Some(row) = h.tail_row(r) {
        for (c, &v) in row.iter().enumerate() {
            if !v.is_zero() {
                f(c, v);
            }
        }
    } else {
        let (idx, val) = h.sparse_row(r);
        for (&c, &v) in idx.iter().zip(val) {
            f(c as usize, v);
        }
    }
}

/// Transpose keeping the source's ELL width and backup capacity.
pub fn hybrid_transpose<T: Scalar>(h: &HybridMatrix<T>) -> HybridMatrix<T> {
    hybrid_transpose_with(h, h.capacity())
}

/// Transpose into a hybrid matrix of capacity `cap`.
///
/// Source rows are visited in ascending order, so each output row receives
/// its entries with increasing column index. A per-output-row counter hands
/// out ELL slots; once a row exceeds `cap.ell_width` it is given a backup
/// row on first demand and later entries go there directly. A fix-up pass
/// then copies the ELL entries of those rows into their backup rows. When
/// the backup is exhausted the row's content is dropped and the overflow
/// flag is set.
pub fn hybrid_transpose_with<T: Scalar>(h: &HybridMatrix<T>, cap: HybridCapacity) -> HybridMatrix<T> {
    let (src_rows, src_cols) = h.shape();
    let (rows, cols) = (src_cols, src_rows);
    let w = cap.ell_width;
    let mut count = vec![0u32; rows];
    let mut col_idx = vec![0u32; rows * w];
    let mut ell = vec![T::zero(); rows * w];
    let mut tail_map = vec![NO_SLOT; rows];
    let mut tail_rows: Vec<u32> = Vec::new();
    let mut tail: Vec<T> = Vec::new();
    let mut overflow = false;

    let get_or_allocate =
        |row: usize, tail_map: &mut [u32], tail_rows: &mut Vec<u32>, tail: &mut Vec<T>| -> Option<usize> {
            match tail_map[row] {
                NO_SLOT if tail_rows.len() < cap.dense_cap => {
                    let s = tail_rows.len();
                    tail_map[row] = s as u32;
                    tail_rows.push(row as u32);
                    tail.resize((s + 1) * cols, T::zero());
                    Some(s)
                }
                NO_SLOT => None,
                s => Some(s as usize),
            }
        };

    for r in 0..src_rows {
        for_each_entry(h, r, |c, v| {
            let z = count[c] as usize;
            count[c] += 1;
            if z < w {
                col_idx[c * w + z] = r as u32;
                ell[c * w + z] = v;
            } else {
                match get_or_allocate(c, &mut tail_map, &mut tail_rows, &mut tail) {
                    Some(s) => tail[s * cols + r] = v,
                    None => overflow = true,
                }
            }
        });
    }

    // Fix-up: rows that overflowed after filling their ELL slots still hold
    // their first `w` entries there.
    for (s, &row) in tail_rows.iter().enumerate() {
        let row = row as usize;
        for z in 0..w {
            let c = col_idx[row * w + z] as usize;
            tail[s * cols + c] = ell[row * w + z];
        }
    }

    let routing: Vec<bool> = count.iter().map(|&c| c as usize > w).collect();
    let pattern = HybridPattern {
        rows,
        cols,
        ell_width: w,
        dense_cap: cap.dense_cap,
        row_nnz: count,
        col_idx,
        routing,
        tail_map,
        tail_rows,
        overflow,
    };
    HybridMatrix {
        pattern: Arc::new(pattern),
        ell_vals: ell,
        tail,
    }
}

fn check_shared<T: Scalar>(op: &str, a: &HybridMatrix<T>, b: &HybridMatrix<T>) -> Result<()> {
    if !a.shares_pattern(b) {
        return Err(Error::PatternMismatch(format!(
            "{op}: operands are laid out on different patterns"
        )));
    }
    Ok(())
}

/// Slot-wise product of two matrices on the same pattern.
pub fn hybrid_elementwise_mul<T: Scalar>(a: &HybridMatrix<T>, b: &HybridMatrix<T>) -> Result<HybridMatrix<T>> {
    check_shared("hybrid_elementwise_mul", a, b)?;
    let mul = |x: &[T], y: &[T]| x.iter().zip(y).map(|(&p, &q)| p * q).collect::<Vec<T>>();
    HybridMatrix::with_values(
        Arc::clone(a.pattern()),
        mul(&a.ell_vals, &b.ell_vals),
        mul(&a.tail, &b.tail),
    )
}

/// `grad + coeff · sign(h)` at every stored position, with `sign(0) = 0`.
pub fn inject_l1_grad<T: Scalar>(grad: &HybridMatrix<T>, h: &HybridMatrix<T>, coeff: T) -> Result<HybridMatrix<T>> {
    check_shared("inject_l1_grad", grad, h)?;
    let sign = |v: T| {
        if v > T::zero() {
            T::one()
        } else if v < T::zero() {
            -T::one()
        } else {
            T::zero()
        }
    };
    let add = |g: &[T], x: &[T]| g.iter().zip(x).map(|(&g, &x)| g + coeff * sign(x)).collect::<Vec<T>>();
    HybridMatrix::with_values(
        Arc::clone(grad.pattern()),
        add(&grad.ell_vals, &h.ell_vals),
        add(&grad.tail, &h.tail),
    )
}

/// Per-row activity summary of a hybrid matrix.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize)]
pub struct SparsityStats {
    /// Mean stored non-zeros per row.
    pub l0_mean: f64,
    /// Mean per-row sum of absolute values.
    pub l1_mean: f64,
    pub max_nnz: usize,
}

/// Mean count, mean absolute sum and maximum count over rows. Counts are the
/// true per-row counts; dropped rows contribute their count but no values.
pub fn sparsity_stats<T: Scalar>(h: &HybridMatrix<T>) -> SparsityStats {
    let rows = h.rows();
    if rows == 0 {
        return SparsityStats::default();
    }
    let p = h.pattern();
    let mut l1 = 0.0f64;
    for r in 0..rows {
        for_each_entry(h, r, |_, v| l1 += v.as_f64().abs());
    }
    SparsityStats {
        l0_mean: p.total_nnz() as f64 / rows as f64,
        l1_mean: l1 / rows as f64,
        max_nnz: p.row_nnz().iter().copied().max().unwrap_or(0) as usize,
    }
}
