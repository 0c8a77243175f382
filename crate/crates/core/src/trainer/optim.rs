use crate::error::{Error, Result};
use crate::tensor::{DenseMatrix, Scalar, SeededRng};

use super::TrainConfig;

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
}

impl AdamW {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        AdamW {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            max_grad_norm: Some(cfg.max_grad_norm),
        }
    }
}

/// First and second moments per parameter plus the step counter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new<T: Scalar>(params: &[&DenseMatrix<T>]) -> Self {
        OptimizerState {
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.as_slice().len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.as_slice().len()]).collect(),
        }
    }
}

/// Euclidean norm of all gradients taken together.
pub fn global_norm<T: Scalar>(grads: &[&DenseMatrix<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.as_slice())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Clip coefficient for a global norm: `max / (norm + 1e-6)` when that is
/// below one, else one.
pub fn clip_coefficient(norm: f64, max_norm: f64) -> f64 {
    (max_norm / (norm + 1e-6)).min(1.0)
}

/// One AdamW update. Gradients are first clipped by their global norm; then
/// each parameter is decayed `p ← p·(1 − lr·wd)` and moved by the
/// bias-corrected Adam step. Moments are kept in f64. Returns the
/// pre-clipping gradient norm.
pub fn adamw_step<T: Scalar>(
    params: &mut [&mut DenseMatrix<T>],
    grads: &[&DenseMatrix<T>],
    state: &mut OptimizerState,
    hp: &AdamW,
) -> Result<f64> {
    if params.len() != grads.len()
        || state.m.len() != params.len()
        || params
            .iter()
            .zip(grads)
            .zip(&state.m)
            .any(|((p, g), m)| p.shape() != g.shape() || m.len() != p.as_slice().len())
    {
        return Err(Error::dims("adamw_step", "parameters, gradients and moments disagree"));
    }
    let norm = global_norm(grads);
    let clip = hp.max_grad_norm.map_or(1.0, |max| clip_coefficient(norm, max));
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    let decay = 1.0 - hp.lr * hp.weight_decay;
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, (pv, gv)) in p.as_mut_slice().iter_mut().zip(g.as_slice()).enumerate() {
            let g = gv.as_f64() * clip;
            m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * g;
            v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * g * g;
            let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + hp.eps);
            *pv = T::from_f64_lossy(pv.as_f64() * decay - hp.lr * update);
        }
    }
    Ok(norm)
}

/// L1 coefficient at `step`: zero for the plain warmup, a linear ramp, then
/// the target.
pub fn l1_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    let c = cfg.l1_coefficient;
    if step < cfg.warmup_plain_steps {
        0.0
    } else if step < cfg.warmup_plain_steps + cfg.warmup_ramp_steps {
        c * (step - cfg.warmup_plain_steps) as f64 / cfg.warmup_ramp_steps as f64
    } else {
        c
    }
}

/// `coeff · (1/L) · Σ_l l1_mean_l / N`, where `l1_mean_l` is the per-row
/// mean of `Σ_n |h|` in layer `l`.
pub fn l1_loss(per_layer_l1_means: &[f64], n: usize, coeff: f64) -> f64 {
    if per_layer_l1_means.is_empty() || coeff == 0.0 {
        return 0.0;
    }
    let l = per_layer_l1_means.len() as f64;
    coeff * per_layer_l1_means.iter().map(|s| s / n as f64).sum::<f64>() / l
}

/// Fraction of units never active during the step.
pub fn track_dead_neurons(activity: &[bool]) -> f64 {
    if activity.is_empty() {
        return 0.0;
    }
    activity.iter().filter(|&&a| !a).count() as f64 / activity.len() as f64
}

/// `W[:,j] ← (1−λ)·W[:,j] + λ·N(0, σ²)` for every dead column `j`; noise is
/// drawn column by column, top to bottom. Other columns are untouched.
pub fn reinit_dead_columns<T: Scalar>(
    w: &mut DenseMatrix<T>,
    dead: &[bool],
    lambda: f64,
    sigma: f64,
    rng: &mut SeededRng,
) {
    assert_eq!(dead.len(), w.cols(), "dead mask length");
    if lambda == 0.0 {
        return;
    }
    for (j, _) in dead.iter().enumerate().filter(|(_, &d)| d) {
        for i in 0..w.rows() {
            let noise = sigma * rng.normal();
            let v = (1.0 - lambda) * w.get(i, j).as_f64() + lambda * noise;
            w.set(i, j, T::from_f64_lossy(v));
        }
    }
}
