//! Dense versus sparse inference timing on synthetic blocks with a
//! controlled gate sparsity.
//!
//! Inputs are `N(0, 1)` with coordinate 0 pinned to 1 and gate weights are
//! `N(0, 1/K)`, so the gate pre-activation of unit `j` is
//! `W_g[0,j] + N(0, (K-1)/K)`. Setting `W_g[0,j] = -σ·Φ⁻¹(s)` makes each
//! unit fire with probability `1 - s`. The realized sparsity is measured and
//! reported next to the target.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::ffn::{FfnWeights, Variant};
use crate::formats::{twell_to_hybrid, TwellConfig};
use crate::infer::{ffn_forward_dense, ffn_forward_infer_probed, gate_project_twell};
use crate::probe::Probe;
use crate::tensor::{randn, rel_error, DenseMatrix, SeededRng};

/// Agreement required between the dense and sparse outputs.
pub const AGREEMENT_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// Target fraction of zero gate activations, in `[0, 1]`.
    pub sparsity: f64,
    pub tile_width: usize,
    pub compression: usize,
    pub reps: usize,
    pub seed: u64,
    pub variant: Variant,
    /// When set, the gate activations are also routed into a hybrid matrix
    /// of this ELL width and the number of dense-routed rows is reported.
    pub ell_width: Option<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            m: 256,
            k: 256,
            n: 1024,
            sparsity: 0.99,
            tile_width: 256,
            compression: 4,
            reps: 3,
            seed: 0,
            variant: Variant::Gated,
            ell_width: None,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [("m", self.m), ("k", self.k), ("n", self.n), ("reps", self.reps)] {
            if v == 0 {
                return Err(Error::config(key, "must be at least 1"));
            }
        }
        if self.k < 2 {
            return Err(Error::config(
                "k",
                "must be at least 2 (coordinate 0 is the bias feature)",
            ));
        }
        if !(0.0..=1.0).contains(&self.sparsity) {
            return Err(Error::config(
                "sparsity",
                format!("must lie in [0, 1], got {}", self.sparsity),
            ));
        }
        TwellConfig::new(self.tile_width, self.compression)?.check_width(self.n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub realized_sparsity: f64,
    /// Stored gate non-zeros over the whole batch.
    pub total_nnz: u64,
    /// Median wall-clock over the repetitions.
    pub dense_ms: f64,
    pub sparse_ms: f64,
    /// `dense_ms / sparse_ms`.
    pub speedup: f64,
    /// Every repetition, in run order.
    pub dense_samples_ms: Vec<f64>,
    pub sparse_samples_ms: Vec<f64>,
    pub dense_macs: u64,
    pub gate_macs: u64,
    /// Up and down projection MACs of the sparse path.
    pub up_down_macs: u64,
    pub sparse_macs: u64,
    /// `sparse_macs / dense_macs` as counted.
    pub mac_ratio: f64,
    /// `(MNK + 2K·nnz) / (3MNK)` for gated blocks, `(MNK + K·nnz) / (2MNK)`
    /// for non-gated ones.
    pub theoretical_ratio: f64,
    /// Normwise relative difference between the two outputs.
    pub rel_error: f64,
    pub outputs_agree: bool,
    /// Rows exceeding `ell_width`, when requested.
    pub hybrid_dense_rows: Option<usize>,
}

impl BenchReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Gate bias that makes a `N(shift, sigma²)` pre-activation positive with
/// probability `1 - sparsity`. The quantile is clamped to ±8 standard
/// deviations so the endpoints stay finite.
pub fn gate_shift(sparsity: f64, sigma: f64) -> f64 {
    let q = match sparsity {
        s if s <= 0.0 => -8.0,
        s if s >= 1.0 => 8.0,
        s => Normal::standard().inverse_cdf(s).clamp(-8.0, 8.0),
    };
    -sigma * q
}

/// Input batch and block weights for a benchmark configuration.
pub fn synthesize(cfg: &BenchConfig) -> Result<(DenseMatrix<f32>, FfnWeights<f32>)> {
    cfg.validate()?;
    let (m, k, n) = (cfg.m, cfg.k, cfg.n);
    let mut rng = SeededRng::new(cfg.seed);
    let mut x = randn::<f32>(m, k, 1.0, &mut rng);
    for i in 0..m {
        x.set(i, 0, 1.0);
    }
    let w_sigma = 1.0 / (k as f64).sqrt();
    let shift = gate_shift(cfg.sparsity, ((k - 1) as f64).sqrt() * w_sigma) as f32;
    let mut w_gate = randn::<f32>(k, n, w_sigma, &mut rng);
    for j in 0..n {
        w_gate.set(0, j, shift);
    }
    let w_other = randn::<f32>(k, n, w_sigma, &mut rng);
    let w_d = randn::<f32>(n, k, 1.0 / (n as f64).sqrt(), &mut rng);
    let weights = match cfg.variant {
        Variant::Gated => FfnWeights::gated(w_gate, w_other, w_d)?,
        Variant::NonGated => FfnWeights::non_gated(w_gate, w_d)?,
    };
    Ok((x, weights))
}

/// Median of a non-empty sample.
pub fn median(v: &[f64]) -> f64 {
    let mut v = v.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn time_ms<R>(f: impl FnOnce() -> R) -> (R, f64) {
    let t = Instant::now();
    let r = f();
    (r, t.elapsed().as_secs_f64() * 1e3)
}

/// Runs the dense reference and the sparse pipeline `reps` times each,
/// interleaved, and reports median times, MAC counts and agreement.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    let (x, w) = synthesize(cfg)?;
    let twell = TwellConfig::new(cfg.tile_width, cfg.compression)?;
    let (m, k, n) = (cfg.m as u64, cfg.k as u64, cfg.n as u64);

    // Realized pattern; also surfaces a tile overflow before any timing.
    let gate = gate_project_twell(&x, w.pattern_source(), twell)?;
    let total_nnz = gate.total_nnz() as u64;
    let hybrid_dense_rows = cfg
        .ell_width
        .map(|ell| twell_to_hybrid(&gate, ell, cfg.m, false).0.pattern().dense_row_count());
    drop(gate);

    let (mut dense_t, mut sparse_t) = (Vec::new(), Vec::new());
    let mut outputs = None;
    let mut sparse_macs = 0;
    for _ in 0..cfg.reps {
        let (dense, td) = time_ms(|| ffn_forward_dense(&x, &w));
        let probe = Probe::new();
        let (sparse, ts) = time_ms(|| ffn_forward_infer_probed(&x, &w, twell, Some(&probe)));
        dense_t.push(td);
        sparse_t.push(ts);
        sparse_macs = probe.macs();
        outputs = Some((dense?, sparse?));
    }
    let (dense, sparse) = outputs.expect("reps >= 1");

    let matmuls = match cfg.variant {
        Variant::Gated => 3,
        Variant::NonGated => 2,
    };
    let per_nnz = matmuls - 1;
    let dense_macs = matmuls * m * n * k;
    let gate_macs = m * n * k;
    let theoretical_ratio = (gate_macs + per_nnz * k * total_nnz) as f64 / dense_macs as f64;
    let err = rel_error(&sparse, &dense);
    let (dense_ms, sparse_ms) = (median(&dense_t), median(&sparse_t));
    Ok(BenchReport {
        config: *cfg,
        realized_sparsity: 1.0 - total_nnz as f64 / (m * n) as f64,
        total_nnz,
        dense_ms,
        sparse_ms,
        speedup: dense_ms / sparse_ms,
        dense_samples_ms: dense_t,
        sparse_samples_ms: sparse_t,
        dense_macs,
        gate_macs,
        up_down_macs: sparse_macs.saturating_sub(gate_macs),
        sparse_macs,
        mac_ratio: sparse_macs as f64 / dense_macs as f64,
        theoretical_ratio,
        rel_error: err,
        outputs_agree: err <= AGREEMENT_TOL,
        hybrid_dense_rows,
    })
}
