//! The feedforward block: weights, the sparse training forward pass and its
//! backward pass.
//!
//! Training keeps every hidden-size intermediate in the hybrid format. The
//! gate activations fix the pattern; the up values, their product and all
//! hidden gradients are laid out on that same pattern.

mod weights;

pub use weights::{FfnWeights, Variant};

use crate::error::{Error, Result};
use crate::formats::{twell_to_hybrid, HybridCapacity, HybridMatrix, TwellConfig};
use crate::infer::gate_project_twell_probed;
use crate::probe::Probe;
use crate::tensor::{transpose_dense, DenseMatrix, Scalar};
use crate::train_kernels::{
    dense_to_hybrid_matmul_bt, hybrid_elementwise_mul, hybrid_to_dense_matmul_probed, hybrid_transpose_with,
    inject_l1_grad, sparsity_stats, SparsityStats,
};

/// Activations a backward pass needs, all on one hybrid pattern.
#[derive(Debug, Clone)]
pub struct FfnCache<T: Scalar = f32> {
    pub x: DenseMatrix<T>,
    /// Post-ReLU gate activations (gated variant only).
    pub h_g: Option<HybridMatrix<T>>,
    /// Up-projection values on the gate pattern (gated variant only).
    pub h_u: Option<HybridMatrix<T>>,
    /// Hidden state fed to the down projection.
    pub h: HybridMatrix<T>,
    /// Statistics of `h`.
    pub stats: SparsityStats,
}

impl<T: Scalar> FfnCache<T> {
    /// True when some dense-routed hidden row had no backup slot.
    pub fn overflowed(&self) -> bool {
        self.h.overflowed()
    }

    /// Per hidden unit: whether it fired for any row of the batch.
    pub fn active_columns(&self) -> Vec<bool> {
        let src = self.h_g.as_ref().unwrap_or(&self.h);
        let mut active = vec![false; src.cols()];
        for r in 0..src.rows() {
            if let Some(row) = src.tail_row(r) {
                for (a, v) in active.iter_mut().zip(row) {
                    *a |= *v > T::zero();
                }
            } else {
                let (idx, val) = src.sparse_row(r);
                for (&c, &v) in idx.iter().zip(val) {
                    active[c as usize] |= v > T::zero();
                }
            }
        }
        active
    }
}

/// Gradients of one block; shapes mirror the weights and the input.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnGrads<T: Scalar = f32> {
    pub dw_g: Option<DenseMatrix<T>>,
    pub dw_u: DenseMatrix<T>,
    pub dw_d: DenseMatrix<T>,
    pub dx: DenseMatrix<T>,
}

impl<T: Scalar> FfnGrads<T> {
    /// Weight gradients in the order of [`FfnWeights::params`].
    pub fn params(&self) -> Vec<&DenseMatrix<T>> {
        self.dw_g.iter().chain([&self.dw_u, &self.dw_d]).collect()
    }
}

/// Sparse training forward pass.
///
/// Gated: `h_g` from the TwELL gate projection converted to hybrid,
/// `h_u = x W_u` sampled on `h_g`'s pattern, `h = h_u ⊙ h_g`, `y = h W_d`.
/// Non-gated: `h` from `relu(x W_u)` the same way, `y = h W_d`.
///
/// A backup overflow does not fail the pass; it is visible through
/// [`FfnCache::overflowed`].
pub fn ffn_forward_train<T: Scalar>(
    x: &DenseMatrix<T>,
    weights: &FfnWeights<T>,
    cfg: TwellConfig,
    ell_width: usize,
    dense_cap: usize,
) -> Result<(DenseMatrix<T>, FfnCache<T>)> {
    ffn_forward_train_probed(x, weights, cfg, HybridCapacity::new(ell_width, dense_cap), None)
}

pub fn ffn_forward_train_probed<T: Scalar>(
    x: &DenseMatrix<T>,
    weights: &FfnWeights<T>,
    cfg: TwellConfig,
    cap: HybridCapacity,
    probe: Option<&Probe>,
) -> Result<(DenseMatrix<T>, FfnCache<T>)> {
    weights.check_input("ffn_forward_train", x)?;
    let tw = gate_project_twell_probed(x, weights.pattern_source(), cfg, probe)?;
    let (pattern, _) = twell_to_hybrid(&tw, cap.ell_width, cap.dense_cap, false);
    let (h_g, h_u, h) = match weights.variant() {
        Variant::Gated => {
            let w_u_t = transpose_dense(weights.w_u());
            let h_u = dense_to_hybrid_matmul_bt(x, &w_u_t, &pattern, probe)?;
            let h = hybrid_elementwise_mul(&h_u, &pattern)?;
            (Some(pattern), Some(h_u), h)
        }
        Variant::NonGated => (None, None, pattern),
    };
    let y = hybrid_to_dense_matmul_probed(&h, weights.w_d(), probe)?;
    let stats = sparsity_stats(&h);
    Ok((
        y,
        FfnCache {
            x: x.clone(),
            h_g,
            h_u,
            h,
            stats,
        },
    ))
}

/// Backward pass with transposes sized to never overflow: the forward ELL
/// width and a backup row for every hidden unit, allocated on demand.
pub fn ffn_backward<T: Scalar>(
    cache: &FfnCache<T>,
    dy: &DenseMatrix<T>,
    weights: &FfnWeights<T>,
    effective_l1: T,
) -> Result<FfnGrads<T>> {
    let cap = HybridCapacity::new(cache.h.capacity().ell_width, cache.h.cols());
    ffn_backward_with(cache, dy, weights, effective_l1, cap, None)
}

/// Backward pass.
///
/// `∇h = (dy W_dᵀ)` on the forward pattern plus `effective_l1 · sign(h)`;
/// gated: `∇h_u = ∇h ⊙ h_g`, `∇h_g = ∇h ⊙ h_u`. The ReLU derivative is the
/// restriction to the stored pattern. Weight gradients come from
/// transposed hybrids (`W_u`: `(∇h_uᵀ x)ᵀ`, `W_d`: `hᵀ dy`), and
/// `dx = ∇h_u W_uᵀ + ∇h_g W_gᵀ`.
///
/// The transposes use `t_cap`; if one runs out of backup rows the pass fails
/// with `DenseCapacityExceeded`.
pub fn ffn_backward_with<T: Scalar>(
    cache: &FfnCache<T>,
    dy: &DenseMatrix<T>,
    weights: &FfnWeights<T>,
    effective_l1: T,
    t_cap: HybridCapacity,
    probe: Option<&Probe>,
) -> Result<FfnGrads<T>> {
    let (m, n, k) = (cache.h.rows(), cache.h.cols(), weights.model_dim());
    if dy.shape() != (m, k) || cache.x.shape() != (m, k) || weights.hidden_dim() != n {
        return Err(Error::dims(
            "ffn_backward",
            format!(
                "dy {:?}, cached x {:?}, hidden {:?}, weights {}x{}",
                dy.shape(),
                cache.x.shape(),
                cache.h.shape(),
                k,
                weights.hidden_dim()
            ),
        ));
    }
    let mask = cache.h_g.as_ref().unwrap_or(&cache.h);
    let grad_h = dense_to_hybrid_matmul_bt(dy, weights.w_d(), mask, probe)?;
    let grad_h = inject_l1_grad(&grad_h, &cache.h, effective_l1)?;

    let transpose = |hm: &HybridMatrix<T>| -> Result<HybridMatrix<T>> {
        let t = hybrid_transpose_with(hm, t_cap);
        t.check_capacity()?;
        Ok(t)
    };
    // xᵀ G computed as (Gᵀ x)ᵀ through the transposed hybrid.
    let weight_grad = |g: &HybridMatrix<T>| -> Result<DenseMatrix<T>> {
        Ok(transpose_dense(&hybrid_to_dense_matmul_probed(
            &transpose(g)?,
            &cache.x,
            probe,
        )?))
    };

    let dw_d = hybrid_to_dense_matmul_probed(&transpose(&cache.h)?, dy, probe)?;
    match (weights.variant(), &cache.h_g, &cache.h_u) {
        (Variant::Gated, Some(h_g), Some(h_u)) => {
            let w_g = weights.w_g().expect("gated weights carry W_g");
            let grad_hu = hybrid_elementwise_mul(&grad_h, h_g)?;
            let grad_hg = hybrid_elementwise_mul(&grad_h, h_u)?;
            let dw_u = weight_grad(&grad_hu)?;
            let dw_g = weight_grad(&grad_hg)?;
            let dx_u = hybrid_to_dense_matmul_probed(&grad_hu, &transpose_dense(weights.w_u()), probe)?;
            let dx_g = hybrid_to_dense_matmul_probed(&grad_hg, &transpose_dense(w_g), probe)?;
            Ok(FfnGrads {
                dw_g: Some(dw_g),
                dw_u,
                dw_d,
                dx: dx_u.add(&dx_g)?,
            })
        }
        (Variant::NonGated, None, None) => {
            let dw_u = weight_grad(&grad_h)?;
            let dx = hybrid_to_dense_matmul_probed(&grad_h, &transpose_dense(weights.w_u()), probe)?;
            Ok(FfnGrads {
                dw_g: None,
                dw_u,
                dw_d,
                dx,
            })
        }
        _ => Err(Error::PatternMismatch(
            "cache was produced for a different block variant".into(),
        )),
    }
}
