//! Blocked dense matmul with a fixed per-element reduction order.
//!
//! Every output element is reduced as `((0 + a0*b0) + a1*b1) + ...` in
//! ascending `k`, with separate multiply and add (never fused). Blocking over
//! `k` reloads the running sum, so the order is the same as the naive triple
//! loop. The result is bit-identical across thread counts and CPU feature
//! levels.

use super::Scalar;

/// Rows per register block.
const MR: usize = 4;
/// Columns per packed panel.
pub(crate) const NR: usize = 16;
/// Depth of one `k` block.
const KC: usize = 256;

/// Right-hand operand repacked into column panels of width [`NR`].
///
/// Columns are grouped in tiles (a tile is one or more panels, the last one
/// zero padded), so a caller can multiply against a single column tile.
pub(crate) struct PackedB<T> {
    k: usize,
    tile: usize,
    panels_per_tile: usize,
    data: Vec<T>,
}

impl<T: Scalar> PackedB<T> {
    /// Packs a row-major `k × n` matrix into tiles of `tile` columns.
    pub(crate) fn pack_tiled(b: &[T], k: usize, n: usize, tile: usize) -> Self {
        assert!(tile > 0 && n.is_multiple_of(tile), "tile must divide n");
        assert_eq!(b.len(), k * n);
        let panels_per_tile = tile.div_ceil(NR);
        let tiles = n / tile;
        let mut data = vec![T::zero(); tiles * panels_per_tile * k * NR];
        for t in 0..tiles {
            for p in 0..panels_per_tile {
                let c0 = t * tile + p * NR;
                let width = NR.min(t * tile + tile - c0);
                let base = (t * panels_per_tile + p) * k * NR;
                for kk in 0..k {
                    let src = &b[kk * n + c0..kk * n + c0 + width];
                    data[base + kk * NR..base + kk * NR + width].copy_from_slice(src);
                }
            }
        }
        PackedB {
            k,
            tile,
            panels_per_tile,
            data,
        }
    }

    pub(crate) fn pack(b: &[T], k: usize, n: usize) -> Self {
        Self::pack_tiled(b, k, n, n.max(1))
    }

    fn panel(&self, tile: usize, p: usize) -> &[T] {
        let base = (tile * self.panels_per_tile + p) * self.k * NR;
        &self.data[base..base + self.k * NR]
    }
}

/// `out[rows × tile_width] = a[rows × k] · B[:, tile]`, overwriting `out`.
///
/// `a` has row stride `lda`, `out` has row stride `ldo`.
pub(crate) fn gemm_tile<T: Scalar>(
    a: &[T],
    lda: usize,
    rows: usize,
    packed: &PackedB<T>,
    tile: usize,
    out: &mut [T],
    ldo: usize,
) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at runtime.
            unsafe { gemm_tile_avx2(a, lda, rows, packed, tile, out, ldo) };
            return;
        }
    }
    gemm_tile_impl(a, lda, rows, packed, tile, out, ldo)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_tile_avx2<T: Scalar>(
    a: &[T],
    lda: usize,
    rows: usize,
    packed: &PackedB<T>,
    tile: usize,
    out: &mut [T],
    ldo: usize,
) {
    gemm_tile_impl(a, lda, rows, packed, tile, out, ldo)
}

#[inline(always)]
fn gemm_tile_impl<T: Scalar>(
    a: &[T],
    lda: usize,
    rows: usize,
    packed: &PackedB<T>,
    tile: usize,
    out: &mut [T],
    ldo: usize,
) {
    let k = packed.k;
    let tw = packed.tile;
    if k == 0 {
        for r in 0..rows {
            out[r * ldo..r * ldo + tw].fill(T::zero());
        }
        return;
    }
    let mut k0 = 0;
    while k0 < k {
        let k1 = (k0 + KC).min(k);
        let first = k0 == 0;
        for p in 0..packed.panels_per_tile {
            let panel = packed.panel(tile, p);
            let c0 = p * NR;
            let width = NR.min(tw - c0);
            let mut r0 = 0;
            while r0 + MR <= rows {
                kernel::<T, MR>(a, lda, r0, k0, k1, panel, out, ldo, c0, width, first);
                r0 += MR;
            }
            match rows - r0 {
                0 => {}
                1 => kernel::<T, 1>(a, lda, r0, k0, k1, panel, out, ldo, c0, width, first),
                2 => kernel::<T, 2>(a, lda, r0, k0, k1, panel, out, ldo, c0, width, first),
                3 => kernel::<T, 3>(a, lda, r0, k0, k1, panel, out, ldo, c0, width, first),
                _ => unreachable!(),
            }
        }
        k0 = k1;
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn kernel<T: Scalar, const R: usize>(
    a: &[T],
    lda: usize,
    r0: usize,
    k0: usize,
    k1: usize,
    panel: &[T],
    out: &mut [T],
    ldo: usize,
    c0: usize,
    width: usize,
    first: bool,
) {
    let mut acc = [[T::zero(); NR]; R];
    if !first {
        for (r, row) in acc.iter_mut().enumerate() {
            let o = (r0 + r) * ldo + c0;
            row[..width].copy_from_slice(&out[o..o + width]);
        }
    }
    let panel = &panel[k0 * NR..k1 * NR];
    for (kk, b) in panel.chunks_exact(NR).enumerate() {
        let kidx = k0 + kk;
        for (r, row) in acc.iter_mut().enumerate() {
            let av = a[(r0 + r) * lda + kidx];
            for j in 0..NR {
                row[j] = row[j] + av * b[j];
            }
        }
    }
    for (r, row) in acc.iter().enumerate() {
        let o = (r0 + r) * ldo + c0;
        out[o..o + width].copy_from_slice(&row[..width]);
    }
}

/// Row-block height used when parallelizing full matmuls.
pub(crate) const MC: usize = 64;

/// Sequential dot products of one vector against four others.
///
/// Each result is reduced left to right exactly like a matmul element; the
/// four chains are interleaved only to overlap their latencies.
#[inline]
pub(crate) fn dot4<T: Scalar>(x: &[T], w: [&[T]; 4]) -> [T; 4] {
    let n = x.len();
    let (w0, w1, w2, w3) = (&w[0][..n], &w[1][..n], &w[2][..n], &w[3][..n]);
    let mut acc = [T::zero(); 4];
    for k in 0..n {
        let xv = x[k];
        acc[0] = acc[0] + xv * w0[k];
        acc[1] = acc[1] + xv * w1[k];
        acc[2] = acc[2] + xv * w2[k];
        acc[3] = acc[3] + xv * w3[k];
    }
    acc
}

/// Sequential left-to-right dot product.
#[inline]
pub(crate) fn dot<T: Scalar>(x: &[T], w: &[T]) -> T {
    let w = &w[..x.len()];
    let mut acc = T::zero();
    for k in 0..x.len() {
        acc = acc + x[k] * w[k];
    }
    acc
}

/// `y += a * x` elementwise.
#[inline]
pub(crate) fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    let x = &x[..y.len()];
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv = *yv + a * xv;
    }
}
