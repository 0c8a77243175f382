//! Toy-scale sparse training: a residual stack of feedforward blocks fit to
//! a synthetic teacher with MSE plus an L1 penalty on hidden activations,
//! optimized with AdamW.
//!
//! A step that overflows a sparse structure is discarded and repeated with
//! the offending capacity grown: the TwELL compression is halved, or the
//! forward or transpose backup row count doubled. Attempts never touch the
//! parameters, so a repeat always starts from the pre-step state. Grown
//! capacities persist for the rest of the run.

mod config;
mod optim;
mod report;
mod task;

use std::time::Instant;

pub use config::TrainConfig;
pub use optim::{
    adamw_step, clip_coefficient, global_norm, l1_loss, l1_schedule, reinit_dead_columns, track_dead_neurons, AdamW,
    OptimizerState,
};
pub use report::{Capacities, FinalMetrics, StepMetrics, TrainReport};
pub use task::{Batch, RowTag, ToyTask};

use task::{STREAM_DATA, STREAM_INIT, STREAM_REINIT};

use crate::error::{Error, Result};
use crate::ffn::{ffn_backward_with, ffn_forward_train, FfnGrads, FfnWeights, Variant};
use crate::formats::{HybridCapacity, TwellConfig, TwellMatrix};
use crate::infer::{down_project_twell, fused_up_down_with, gate_project_twell, UpProjection};
use crate::statkit::{ActivationLog, LogRecord};
use crate::tensor::{DenseMatrix, Precision, SeededRng};

/// Residual stack `x_{l+1} = x_l + ffn_l(x_l)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub layers: Vec<FfnWeights<f32>>,
}

/// Hidden activity of one layer on a batch, from the inference path.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerActivity {
    pub row_nnz: Vec<u32>,
    pub active: Vec<bool>,
}

impl ToyModel {
    pub fn init(cfg: &TrainConfig) -> Self {
        let mut rng = SeededRng::with_stream(cfg.seed, STREAM_INIT);
        ToyModel {
            layers: (0..cfg.layers)
                .map(|_| FfnWeights::init(cfg.variant, cfg.model_dim, cfg.hidden, cfg.init_sigma, &mut rng))
                .collect(),
        }
    }

    pub fn params(&self) -> Vec<&DenseMatrix<f32>> {
        self.layers.iter().flat_map(|w| w.params()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.is_finite())
    }

    /// Forward pass through the inference kernels (TwELL with the given
    /// configuration), with per-layer hidden activity.
    pub fn infer(&self, x: &DenseMatrix<f32>, cfg: TwellConfig) -> Result<(DenseMatrix<f32>, Vec<LayerActivity>)> {
        let mut x = x.clone();
        let mut acts = Vec::with_capacity(self.layers.len());
        for w in &self.layers {
            let (y, tw) = match w.variant() {
                Variant::Gated => {
                    let h_g = gate_project_twell(&x, w.w_g().expect("gated"), cfg)?;
                    let y = fused_up_down_with(&x, &h_g, &UpProjection::new(w.w_u()), w.w_d(), Precision::F32, None)?;
                    (y, h_g)
                }
                Variant::NonGated => {
                    let h = gate_project_twell(&x, w.w_u(), cfg)?;
                    (down_project_twell(&h, w.w_d(), 1)?, h)
                }
            };
            acts.push(activity(&tw));
            x = x.add(&y)?;
        }
        Ok((x, acts))
    }
}

fn activity(tw: &TwellMatrix<f32>) -> LayerActivity {
    let mut active = vec![false; tw.cols()];
    let row_nnz = (0..tw.rows())
        .map(|r| {
            for (j, _) in tw.row_entries(r) {
                active[j] = true;
            }
            tw.row_nnz(r) as u32
        })
        .collect();
    LayerActivity { row_nnz, active }
}

/// Mean squared error over all entries.
pub fn mse(y: &DenseMatrix<f32>, target: &DenseMatrix<f32>) -> f64 {
    let n = y.as_slice().len() as f64;
    y.as_slice()
        .iter()
        .zip(target.as_slice())
        .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
        .sum::<f64>()
        / n
}

/// Capacity to grow after an overflowing attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Grow {
    Compression,
    DenseCap,
    TransposeDenseCap,
}

struct StepOutcome {
    grads: Vec<FfnGrads<f32>>,
    task_loss: f64,
    l1_means: Vec<f64>,
    mean_nnz: Vec<f64>,
    max_nnz: Vec<usize>,
    active: Vec<Vec<bool>>,
}

/// One forward/backward attempt. Reads the model only.
fn attempt(
    model: &ToyModel,
    batch: &Batch,
    caps: &Capacities,
    tile_width: usize,
    eff_l1: f32,
) -> Result<Result<StepOutcome, Grow>> {
    let twell = TwellConfig::new(tile_width, caps.compression)?;
    let mut x = batch.x.clone();
    let mut caches = Vec::with_capacity(model.layers.len());
    for w in &model.layers {
        let (y, cache) = match ffn_forward_train(&x, w, twell, caps.ell_width, caps.dense_cap) {
            Ok(out) => out,
            Err(Error::OverflowTile { .. }) if caps.compression > 1 => return Ok(Err(Grow::Compression)),
            Err(e) => return Err(e),
        };
        if cache.overflowed() {
            return Ok(Err(Grow::DenseCap));
        }
        x = x.add(&y)?;
        caches.push(cache);
    }
    let task_loss = mse(&x, &batch.target);
    let scale = 2.0 / x.as_slice().len() as f64;
    let mut dy = DenseMatrix::from_fn(x.rows(), x.cols(), |i, j| {
        ((x.get(i, j) as f64 - batch.target.get(i, j) as f64) * scale) as f32
    });
    let t_cap = HybridCapacity::new(caps.t_ell_width, caps.t_dense_cap);
    let mut grads = Vec::with_capacity(model.layers.len());
    for (w, cache) in model.layers.iter().zip(&caches).rev() {
        let g = match ffn_backward_with(cache, &dy, w, eff_l1, t_cap, None) {
            Ok(g) => g,
            Err(Error::DenseCapacityExceeded { .. }) => return Ok(Err(Grow::TransposeDenseCap)),
            Err(e) => return Err(e),
        };
        dy = dy.add(&g.dx)?;
        grads.push(g);
    }
    grads.reverse();
    Ok(Ok(StepOutcome {
        grads,
        task_loss,
        l1_means: caches.iter().map(|c| c.stats.l1_mean).collect(),
        mean_nnz: caches.iter().map(|c| c.stats.l0_mean).collect(),
        max_nnz: caches.iter().map(|c| c.stats.max_nnz).collect(),
        active: caches.iter().map(|c| c.active_columns()).collect(),
    }))
}

/// A finished run: its report plus the trained model and task.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub report: TrainReport,
    pub model: ToyModel,
    pub task: ToyTask,
}

impl TrainRun {
    /// Per-row, per-layer non-zero counts of the trained model on the
    /// evaluation rows, tagged with sequence, position and token.
    pub fn activation_log(&self) -> Result<ActivationLog> {
        let cfg = &self.report.config;
        let (_, acts) = self
            .model
            .infer(&self.task.eval.x, TwellConfig::new(cfg.tile_width, 1)?)?;
        let mut log = ActivationLog::new(acts.len());
        for (i, tag) in self.task.eval.tags.iter().enumerate() {
            log.push(LogRecord {
                seq: tag.seq,
                pos: tag.pos,
                token: Some(tag.token),
                counts: acts.iter().map(|a| a.row_nnz[i]).collect(),
            })?;
        }
        Ok(log)
    }
}

/// Trains on the teacher-student task built from `cfg` and reports.
pub fn train_toy(cfg: &TrainConfig) -> Result<TrainReport> {
    Ok(train_toy_run(cfg)?.report)
}

pub fn train_toy_run(cfg: &TrainConfig) -> Result<TrainRun> {
    cfg.validate()?;
    let task = ToyTask::new(cfg)?;
    train_toy_with(cfg, task)
}

/// Trains on a given task.
pub fn train_toy_with(cfg: &TrainConfig, task: ToyTask) -> Result<TrainRun> {
    cfg.validate()?;
    let started = Instant::now();
    let mut model = ToyModel::init(cfg);
    let mut state = OptimizerState::new(&model.params());
    let hp = AdamW::from_config(cfg);
    let mut data_rng = SeededRng::with_stream(cfg.seed, STREAM_DATA);
    let mut reinit_rng = SeededRng::with_stream(cfg.seed, STREAM_REINIT);
    let mut caps = Capacities {
        compression: cfg.compression,
        ell_width: cfg.ell_width,
        dense_cap: cfg.dense_cap,
        t_ell_width: cfg.t_ell_width,
        t_dense_cap: cfg.t_dense_cap,
    };
    let (l, m, n) = (cfg.layers, cfg.batch, cfg.hidden);
    let seqs_per_batch = m.div_ceil(cfg.seq_len) as u32;
    let mut metrics = StepMetrics::new(l);
    let mut last_good = None;

    for step in 0..cfg.steps {
        let batch = task.sample(&mut data_rng, m, step as u32 * seqs_per_batch)?;
        let coeff = l1_schedule(step, cfg);
        let eff_l1 = (coeff / (l * m * n) as f64) as f32;
        let mut retries = 0;
        let out = loop {
            match attempt(&model, &batch, &caps, cfg.tile_width, eff_l1)? {
                Ok(out) => break out,
                Err(grow) => {
                    retries += 1;
                    if retries > cfg.max_retries {
                        let capacity = match grow {
                            Grow::Compression => cfg.tile_width / caps.compression,
                            Grow::DenseCap => caps.dense_cap,
                            Grow::TransposeDenseCap => caps.t_dense_cap,
                        };
                        return Err(Error::DenseCapacityExceeded {
                            needed: capacity + 1,
                            capacity,
                        });
                    }
                    match grow {
                        Grow::Compression => caps.compression /= 2,
                        Grow::DenseCap => caps.dense_cap *= 2,
                        Grow::TransposeDenseCap => caps.t_dense_cap *= 2,
                    }
                }
            }
        };
        let loss = out.task_loss + l1_loss(&out.l1_means, n, coeff);
        if !loss.is_finite() {
            return Err(Error::NonFinite { step, last_good });
        }

        let grads: Vec<&DenseMatrix<f32>> = out.grads.iter().flat_map(|g| g.params()).collect();
        let mut params: Vec<&mut DenseMatrix<f32>> = model.layers.iter_mut().flat_map(|w| w.params_mut()).collect();
        adamw_step(&mut params, &grads, &mut state, &hp)?;
        if cfg.reinit_lambda > 0.0 {
            for (w, active) in model.layers.iter_mut().zip(&out.active) {
                let dead: Vec<bool> = active.iter().map(|a| !a).collect();
                let target = match w.variant() {
                    Variant::Gated => w.w_g_mut().expect("gated"),
                    Variant::NonGated => w.w_u_mut(),
                };
                reinit_dead_columns(target, &dead, cfg.reinit_lambda, cfg.init_sigma, &mut reinit_rng);
            }
        }

        metrics.step.push(step);
        metrics.loss.push(loss);
        metrics.task_loss.push(out.task_loss);
        metrics.l1_coeff.push(coeff);
        for i in 0..l {
            metrics.mean_nnz[i].push(out.mean_nnz[i]);
            metrics.max_nnz[i].push(out.max_nnz[i]);
            metrics.dead_frac[i].push(track_dead_neurons(&out.active[i]));
        }
        metrics.retries.push(retries);
        last_good = Some(step);
    }

    let (y, acts) = model.infer(&task.eval.x, TwellConfig::new(cfg.tile_width, 1)?)?;
    let eval_loss = mse(&y, &task.eval.target);
    if !eval_loss.is_finite() {
        return Err(Error::NonFinite {
            step: cfg.steps,
            last_good,
        });
    }
    let summary = FinalMetrics {
        eval_loss,
        mean_nnz: acts
            .iter()
            .map(|a| a.row_nnz.iter().map(|&c| c as f64).sum::<f64>() / a.row_nnz.len().max(1) as f64)
            .collect(),
        max_nnz: acts
            .iter()
            .map(|a| a.row_nnz.iter().copied().max().unwrap_or(0) as usize)
            .collect(),
        dead_frac: acts.iter().map(|a| track_dead_neurons(&a.active)).collect(),
        total_retries: metrics.retries.iter().sum(),
        wall_time_s: started.elapsed().as_secs_f64(),
        capacities: caps,
    };
    Ok(TrainRun {
        report: TrainReport {
            config: cfg.clone(),
            metrics,
            summary,
        },
        model,
        task,
    })
}

/// One run per L1 coefficient, otherwise identical.
pub fn train_ladder(cfg: &TrainConfig, coefficients: &[f64]) -> Result<Vec<TrainReport>> {
    coefficients
        .iter()
        .map(|&c| {
            train_toy(&TrainConfig {
                l1_coefficient: c,
                ..cfg.clone()
            })
        })
        .collect()
}
