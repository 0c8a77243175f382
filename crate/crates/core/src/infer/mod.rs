//! Inference kernels: gate projection with a TwELL epilogue, the fused
//! up/down projection, the non-gated down projection and tile scheduling.

mod schedule;

use rayon::prelude::*;

pub use schedule::{hilbert_schedule, TileSchedule};

use crate::error::{Error, Result};
use crate::ffn::{FfnWeights, Variant};
use crate::formats::{pack_segment, PackPredicate, TwellConfig, TwellMatrix};
use crate::probe::{self, Probe};
use crate::tensor::gemm::{self, PackedB};
use crate::tensor::{transpose_dense, DenseMatrix, Precision, Scalar};

/// Rows per gate-projection tile.
pub const GATE_TILE_ROWS: usize = 64;

struct TileOut<T> {
    tm: usize,
    tn: usize,
    values: Vec<T>,
    indices: Vec<u32>,
    nnz: Vec<u32>,
    overflow: Option<(usize, usize)>,
}

/// `dense_to_twell(relu(x · W_g))`, computed one `64 × T` output tile at a
/// time and packed in the tile epilogue.
pub fn gate_project_twell<T: Scalar>(
    x: &DenseMatrix<T>,
    w_g: &DenseMatrix<T>,
    cfg: TwellConfig,
) -> Result<TwellMatrix<T>> {
    gate_project_twell_probed(x, w_g, cfg, None)
}

/// [`gate_project_twell`] with instrumentation. The probe sees `M·N·K` MACs
/// and a peak scratch buffer of at most `64 × T` elements.
pub fn gate_project_twell_probed<T: Scalar>(
    x: &DenseMatrix<T>,
    w_g: &DenseMatrix<T>,
    cfg: TwellConfig,
    probe: Option<&Probe>,
) -> Result<TwellMatrix<T>> {
    if x.cols() != w_g.rows() {
        return Err(Error::dims(
            "gate_project_twell",
            format!("x {:?} times W {:?}", x.shape(), w_g.shape()),
        ));
    }
    let (m, k, n) = (x.rows(), x.cols(), w_g.cols());
    cfg.check_width(n)?;
    let mut out = TwellMatrix::empty(m, n, cfg)?;
    if m == 0 || n == 0 {
        return Ok(out);
    }
    let t = cfg.tile_width();
    let s = cfg.slots_per_tile();
    let packed = PackedB::pack_tiled(w_g.as_slice(), k, n, t);
    let grid_m = m.div_ceil(GATE_TILE_ROWS);
    let sched = hilbert_schedule(grid_m, n / t);
    let xs = x.as_slice();

    let tiles: Vec<TileOut<T>> = sched
        .order
        .par_iter()
        .map_init(
            || vec![T::zero(); GATE_TILE_ROWS * t],
            |scratch, &(tm, tn)| {
                let r0 = tm * GATE_TILE_ROWS;
                let rows = GATE_TILE_ROWS.min(m - r0);
                probe::note_buffer(probe, scratch.len());
                probe::add_macs(probe, (rows * t * k) as u64);
                gemm::gemm_tile(&xs[r0 * k..], k, rows, &packed, tn, scratch, t);
                let mut tile = TileOut {
                    tm,
                    tn,
                    values: vec![T::zero(); rows * s],
                    indices: vec![0; rows * s],
                    nnz: vec![0; rows],
                    overflow: None,
                };
                for r in 0..rows {
                    let count = pack_segment(
                        &scratch[r * t..(r + 1) * t],
                        tn * t,
                        PackPredicate::Positive,
                        &mut tile.values[r * s..(r + 1) * s],
                        &mut tile.indices[r * s..(r + 1) * s],
                    );
                    if count > s && tile.overflow.is_none() {
                        tile.overflow = Some((r0 + r, count));
                    }
                    tile.nnz[r] = count.min(s) as u32;
                }
                tile
            },
        )
        .collect();

    // Report the overflow a sequential row-major scan would have hit first.
    if let Some((row, tile, count)) = tiles
        .iter()
        .filter_map(|tl| tl.overflow.map(|(row, count)| (row, tl.tn, count)))
        .min_by_key(|&(row, tile, _)| (row, tile))
    {
        return Err(Error::OverflowTile {
            row,
            tile,
            count,
            capacity: s,
        });
    }

    let nt = out.tiles_per_row();
    let stride = out.row_stride();
    let (values, indices, nnz) = out.parts_mut();
    for tl in tiles {
        let r0 = tl.tm * GATE_TILE_ROWS;
        for (r, &count) in tl.nnz.iter().enumerate() {
            let row = r0 + r;
            let dst = row * stride + tl.tn * s;
            values[dst..dst + s].copy_from_slice(&tl.values[r * s..(r + 1) * s]);
            indices[dst..dst + s].copy_from_slice(&tl.indices[r * s..(r + 1) * s]);
            nnz[row * nt + tl.tn] = count;
        }
    }
    Ok(out)
}

/// `W_u` stored transposed (`N × K`) so each hidden unit's column is a
/// contiguous row.
#[derive(Debug, Clone)]
pub struct UpProjection<T: Scalar = f32> {
    w_u_t: DenseMatrix<T>,
}

impl<T: Scalar> UpProjection<T> {
    pub fn new(w_u: &DenseMatrix<T>) -> Self {
        UpProjection {
            w_u_t: transpose_dense(w_u),
        }
    }

    pub fn model_dim(&self) -> usize {
        self.w_u_t.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_u_t.rows()
    }
}

/// `y[m,:] = Σ h_g[m,n] · (x[m,:] · W_u[:,n]) · W_d[n,:]` over the stored
/// entries of each row, without storing `h_u`.
pub fn fused_up_down<T: Scalar>(
    x: &DenseMatrix<T>,
    h_g: &TwellMatrix<T>,
    w_u: &DenseMatrix<T>,
    w_d: &DenseMatrix<T>,
) -> Result<DenseMatrix<T>> {
    check_fused(x, h_g, w_u.rows(), w_u.cols(), w_d)?;
    fused_up_down_with(x, h_g, &UpProjection::new(w_u), w_d, Precision::F32, None)
}

fn check_fused<T: Scalar>(
    x: &DenseMatrix<T>,
    h_g: &TwellMatrix<T>,
    k: usize,
    n: usize,
    w_d: &DenseMatrix<T>,
) -> Result<()> {
    if x.cols() != k || h_g.rows() != x.rows() || h_g.cols() != n || w_d.shape() != (n, k) {
        return Err(Error::dims(
            "fused_up_down",
            format!(
                "x {:?}, h_g {}x{}, W_u {k}x{n}, W_d {:?}",
                x.shape(),
                h_g.rows(),
                h_g.cols(),
                w_d.shape()
            ),
        ));
    }
    Ok(())
}

/// [`fused_up_down`] on a prepared up projection. Each `h_u` element is
/// rounded per `precision` before it is multiplied by the gate value. The
/// probe counts `2·K` MACs per stored entry.
pub fn fused_up_down_with<T: Scalar>(
    x: &DenseMatrix<T>,
    h_g: &TwellMatrix<T>,
    up: &UpProjection<T>,
    w_d: &DenseMatrix<T>,
    precision: Precision,
    probe: Option<&Probe>,
) -> Result<DenseMatrix<T>> {
    let (k, n) = (up.model_dim(), up.hidden_dim());
    check_fused(x, h_g, k, n, w_d)?;
    let mut y = DenseMatrix::zeros(x.rows(), k);
    if k == 0 {
        return Ok(y);
    }
    let wu = &up.w_u_t;
    y.as_mut_slice().par_chunks_mut(k).enumerate().for_each(|(m, out)| {
        let xr = x.row(m);
        let mut pending: [(usize, T); 4] = [(0, T::zero()); 4];
        let mut np = 0;
        let mut count = 0u64;
        let flush = |pending: &[(usize, T)], out: &mut [T]| {
            if pending.len() == 4 {
                let hu = gemm::dot4(
                    xr,
                    [
                        wu.row(pending[0].0),
                        wu.row(pending[1].0),
                        wu.row(pending[2].0),
                        wu.row(pending[3].0),
                    ],
                );
                for (&(j, v), u) in pending.iter().zip(hu) {
                    gemm::axpy(v * precision.round(u), w_d.row(j), out);
                }
            } else {
                for &(j, v) in pending {
                    let u = gemm::dot(xr, wu.row(j));
                    gemm::axpy(v * precision.round(u), w_d.row(j), out);
                }
            }
        };
        for (j, v) in h_g.row_entries(m) {
            pending[np] = (j, v);
            np += 1;
            count += 1;
            if np == 4 {
                flush(&pending, out);
                np = 0;
            }
        }
        flush(&pending[..np], out);
        probe::add_macs(probe, 2 * k as u64 * count);
    });
    Ok(y)
}

/// `y[m,:] = Σ h[m,n] · W_d[n,:]` over stored entries. Output columns are
/// split into `split` independent blocks; the result does not depend on it.
pub fn down_project_twell<T: Scalar>(h: &TwellMatrix<T>, w_d: &DenseMatrix<T>, split: usize) -> Result<DenseMatrix<T>> {
    down_project_twell_probed(h, w_d, split, None)
}

pub fn down_project_twell_probed<T: Scalar>(
    h: &TwellMatrix<T>,
    w_d: &DenseMatrix<T>,
    split: usize,
    probe: Option<&Probe>,
) -> Result<DenseMatrix<T>> {
    if h.cols() != w_d.rows() {
        return Err(Error::dims(
            "down_project_twell",
            format!("h has {} columns, W_d is {:?}", h.cols(), w_d.shape()),
        ));
    }
    let k = w_d.cols();
    if split == 0 || !k.is_multiple_of(split) {
        return Err(Error::config(
            "split",
            format!("{split} does not divide the output width {k}"),
        ));
    }
    let mut y = DenseMatrix::zeros(h.rows(), k);
    if k == 0 {
        return Ok(y);
    }
    let blk = k / split;
    y.as_mut_slice().par_chunks_mut(blk).enumerate().for_each(|(i, out)| {
        let (m, part) = (i / split, i % split);
        let c0 = part * blk;
        let mut count = 0u64;
        for (j, v) in h.row_entries(m) {
            gemm::axpy(v, &w_d.row(j)[c0..c0 + blk], out);
            count += 1;
        }
        probe::add_macs(probe, blk as u64 * count);
    });
    Ok(y)
}

/// Two-stage sparse inference through one block.
///
/// Gated: TwELL gate projection, then the fused up/down projection.
/// Non-gated: the same TwELL-producing kernel applied to `W_u`, then the
/// down projection.
pub fn ffn_forward_infer<T: Scalar>(
    x: &DenseMatrix<T>,
    weights: &FfnWeights<T>,
    cfg: TwellConfig,
) -> Result<DenseMatrix<T>> {
    ffn_forward_infer_probed(x, weights, cfg, None)
}

pub fn ffn_forward_infer_probed<T: Scalar>(
    x: &DenseMatrix<T>,
    weights: &FfnWeights<T>,
    cfg: TwellConfig,
    probe: Option<&Probe>,
) -> Result<DenseMatrix<T>> {
    weights.check_input("ffn_forward_infer", x)?;
    match weights.variant() {
        Variant::Gated => {
            let w_g = weights.w_g().expect("gated weights carry W_g");
            let h_g = gate_project_twell_probed(x, w_g, cfg, probe)?;
            let up = UpProjection::new(weights.w_u());
            fused_up_down_with(x, &h_g, &up, weights.w_d(), Precision::F32, probe)
        }
        Variant::NonGated => {
            let h = gate_project_twell_probed(x, weights.w_u(), cfg, probe)?;
            down_project_twell_probed(&h, weights.w_d(), 1, probe)
        }
    }
}

/// Dense reference for one block: `(relu(x W_g) ⊙ x W_u) W_d` or
/// `relu(x W_u) W_d`.
pub fn ffn_forward_dense<T: Scalar>(x: &DenseMatrix<T>, weights: &FfnWeights<T>) -> Result<DenseMatrix<T>> {
    use crate::tensor::{hadamard, matmul_dense, relu};
    weights.check_input("ffn_forward_dense", x)?;
    let u = matmul_dense(x, weights.w_u())?;
    let h = match weights.w_g() {
        Some(w_g) => hadamard(&relu(&matmul_dense(x, w_g)?), &u)?,
        None => relu(&u),
    };
    matmul_dense(&h, weights.w_d())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formats::{dense_to_twell, twell_to_dense};
    use crate::tensor::{matmul_dense, randn, rel_error, relu, SeededRng};

    #[test]
    fn gate_all_killed_is_empty() {
        let x = DenseMatrix::filled(3, 2, 1.0f32);
        let w = DenseMatrix::from_fn(2, 8, |_, j| -(j as f32) - 0.5);
        let tw = gate_project_twell(&x, &w, TwellConfig::new(4, 2).unwrap()).unwrap();
        assert_eq!(tw.total_nnz(), 0);
    }

    #[test]
    fn gate_worked_example() {
        let x = DenseMatrix::from_rows(&[[1.0f32, 0.0]]).unwrap();
        let w = DenseMatrix::from_rows(&[[1.0f32, -1.0, 2.0, 0.0], [0.0, 0.0, 0.0, 0.0]]).unwrap();
        let tw = gate_project_twell(&x, &w, TwellConfig::new(4, 2).unwrap()).unwrap();
        assert_eq!(tw.nnz(), &[2]);
        assert_eq!(tw.tile_entries(0, 0), (&[0u32, 2][..], &[1.0f32, 2.0][..]));
    }

    #[test]
    fn gate_matches_pack_of_dense_product() {
        let mut rng = SeededRng::new(3);
        let x = randn::<f32>(150, 24, 1.0, &mut rng);
        let w = randn::<f32>(24, 64, 1.0, &mut rng);
        let cfg = TwellConfig::new(16, 1).unwrap();
        let probe = Probe::new();
        let got = gate_project_twell_probed(&x, &w, cfg, Some(&probe)).unwrap();
        let want = dense_to_twell(&relu(&matmul_dense(&x, &w).unwrap()), cfg).unwrap();
        assert_eq!(twell_to_dense(&got).unwrap(), twell_to_dense(&want).unwrap());
        assert_eq!(got.nnz(), want.nnz());
        assert!(probe.peak_buffer() <= GATE_TILE_ROWS * 16);
        assert_eq!(probe.macs(), 150 * 64 * 24);
    }

    #[test]
    fn gate_overflow_reports_first_tile() {
        let x = DenseMatrix::filled(2, 1, 1.0f32);
        let w = DenseMatrix::filled(1, 8, 1.0f32);
        let err = gate_project_twell(&x, &w, TwellConfig::new(4, 2).unwrap()).unwrap_err();
        assert!(matches!(
            err,
            Error::OverflowTile {
                row: 0,
                tile: 0,
                count: 4,
                capacity: 2
            }
        ));
    }

    #[test]
    fn fused_worked_example() {
        let x = DenseMatrix::from_rows(&[[1.0f32, 2.0]]).unwrap();
        let hg = DenseMatrix::from_rows(&[[1.0f32, 0.0]]).unwrap();
        let hg = dense_to_twell(&hg, TwellConfig::new(2, 1).unwrap()).unwrap();
        let wu = DenseMatrix::from_rows(&[[3.0f32, 0.0], [1.0, 0.0]]).unwrap();
        let wd = DenseMatrix::from_rows(&[[2.0f32, 4.0], [9.0, 9.0]]).unwrap();
        let y = fused_up_down(&x, &hg, &wu, &wd).unwrap();
        assert_eq!(y.as_slice(), &[10.0, 20.0]);
    }

    #[test]
    fn fused_empty_gate_gives_zero() {
        let x = DenseMatrix::filled(2, 3, 1.0f32);
        let hg = TwellMatrix::empty(2, 4, TwellConfig::new(4, 1).unwrap()).unwrap();
        let wu = DenseMatrix::filled(3, 4, 1.0f32);
        let wd = DenseMatrix::filled(4, 3, 1.0f32);
        let probe = Probe::new();
        let up = UpProjection::new(&wu);
        let y = fused_up_down_with(&x, &hg, &up, &wd, Precision::F32, Some(&probe)).unwrap();
        assert_eq!(y.count_nonzero(), 0);
        assert_eq!(probe.macs(), 0);
    }

    #[test]
    fn fused_matches_dense_and_counts_work() {
        let mut rng = SeededRng::new(8);
        let (m, k, n) = (37, 20, 48);
        let w = FfnWeights::<f32>::init(Variant::Gated, k, n, 0.5, &mut rng);
        let x = randn::<f32>(m, k, 1.0, &mut rng);
        let cfg = TwellConfig::new(16, 1).unwrap();
        let hg = gate_project_twell(&x, w.w_g().unwrap(), cfg).unwrap();
        let probe = Probe::new();
        let up = UpProjection::new(w.w_u());
        let y = fused_up_down_with(&x, &hg, &up, w.w_d(), Precision::F32, Some(&probe)).unwrap();
        assert_eq!(probe.macs(), 2 * k as u64 * hg.total_nnz() as u64);
        let want = ffn_forward_dense(&x, &w).unwrap();
        assert!(rel_error(&y, &want) <= 1e-5);
    }

    #[test]
    fn bf16_rounding_of_up_values() {
        let x = DenseMatrix::from_rows(&[[1.0f32]]).unwrap();
        let hg = dense_to_twell(
            &DenseMatrix::from_rows(&[[1.0f32]]).unwrap(),
            TwellConfig::new(1, 1).unwrap(),
        )
        .unwrap();
        let up = UpProjection::new(&DenseMatrix::from_rows(&[[1.0f32 + 1.0 / 1024.0]]).unwrap());
        let wd = DenseMatrix::from_rows(&[[1.0f32]]).unwrap();
        let y = fused_up_down_with(&x, &hg, &up, &wd, Precision::Bf16Emulated, None).unwrap();
        assert_eq!(y.get(0, 0), 1.0);
    }

    #[test]
    fn down_projection_unit_and_split() {
        let mut d = DenseMatrix::<f32>::zeros(2, 8);
        d.set(1, 5, 1.0);
        let h = dense_to_twell(&d, TwellConfig::new(4, 1).unwrap()).unwrap();
        let mut rng = SeededRng::new(1);
        let wd = randn::<f32>(8, 6, 1.0, &mut rng);
        let y = down_project_twell(&h, &wd, 3).unwrap();
        assert_eq!(y.row(1), wd.row(5));
        assert!(y.row(0).iter().all(|&v| v == 0.0));
        assert!(down_project_twell(&h, &wd, 4).is_err());

        let r = relu(&randn::<f32>(9, 8, 1.0, &mut rng));
        let h = dense_to_twell(&r, TwellConfig::new(8, 1).unwrap()).unwrap();
        assert_eq!(
            down_project_twell(&h, &wd, 1).unwrap(),
            down_project_twell(&h, &wd, 2).unwrap()
        );
    }

    #[test]
    fn infer_matches_dense_for_both_variants() {
        let mut rng = SeededRng::new(21);
        let cfg = TwellConfig::new(32, 1).unwrap();
        for variant in [Variant::Gated, Variant::NonGated] {
            let w = FfnWeights::<f32>::init(variant, 16, 64, 0.3, &mut rng);
            let x = randn::<f32>(70, 16, 1.0, &mut rng);
            let y = ffn_forward_infer(&x, &w, cfg).unwrap();
            assert!(rel_error(&y, &ffn_forward_dense(&x, &w).unwrap()) <= 1e-5);
            let z = ffn_forward_infer(&DenseMatrix::zeros(4, 16), &w, cfg).unwrap();
            assert_eq!(z.count_nonzero(), 0);
        }
    }
}
