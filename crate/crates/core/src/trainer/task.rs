use crate::error::Result;
use crate::ffn::FfnWeights;
use crate::infer::ffn_forward_dense;
use crate::tensor::{randn, DenseMatrix, SeededRng};

use super::TrainConfig;

/// RNG stream ids derived from the run seed.
pub(crate) const STREAM_INIT: u64 = 0;
pub(crate) const STREAM_DATA: u64 = 1;
pub(crate) const STREAM_REINIT: u64 = 2;
pub(crate) const STREAM_TASK: u64 = 3;

/// Row provenance for activation logs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowTag {
    pub seq: u32,
    pub pos: u32,
    pub token: u32,
}

/// Inputs, regression targets and provenance of a batch of rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: DenseMatrix<f32>,
    pub target: DenseMatrix<f32>,
    pub tags: Vec<RowTag>,
}

/// Synthetic teacher-student regression.
///
/// A row is a token at a position: its input is `E[token] + P[pos]` with
/// coordinate 0 pinned to 1 (a constant feature, so gate columns can learn a
/// bias and switch themselves off). Tokens are drawn with a skewed
/// distribution, `floor(vocab · u²)`. The target is the input plus the
/// output of a fixed, narrow gated teacher block scaled to unit RMS.
#[derive(Debug, Clone)]
pub struct ToyTask {
    embed: DenseMatrix<f32>,
    pos: DenseMatrix<f32>,
    teacher: FfnWeights<f32>,
    teacher_scale: f32,
    seq_len: usize,
    vocab: usize,
    /// Fixed held-out rows used for the final evaluation and activation logs.
    pub eval: Batch,
}

impl ToyTask {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let k = cfg.model_dim;
        let mut rng = SeededRng::with_stream(cfg.seed, STREAM_TASK);
        let embed = randn(cfg.vocab, k, 0.8, &mut rng);
        let pos = randn(cfg.seq_len, k, 0.6, &mut rng);
        let th = cfg.teacher_hidden;
        let in_sigma = 1.0 / (k as f64).sqrt();
        let teacher = FfnWeights::gated(
            randn(k, th, in_sigma, &mut rng),
            randn(k, th, in_sigma, &mut rng),
            randn(th, k, 1.0 / (th as f64).sqrt(), &mut rng),
        )?;
        let mut task = ToyTask {
            embed,
            pos,
            teacher,
            teacher_scale: 1.0,
            seq_len: cfg.seq_len,
            vocab: cfg.vocab,
            eval: Batch {
                x: DenseMatrix::zeros(0, k),
                target: DenseMatrix::zeros(0, k),
                tags: Vec::new(),
            },
        };
        let probe = task.sample(&mut rng, 4 * cfg.batch, 0)?;
        let out = ffn_forward_dense(&probe.x, &task.teacher)?;
        let ms = out.as_slice().iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / out.as_slice().len() as f64;
        if ms > 0.0 {
            task.teacher_scale = (1.0 / ms.sqrt()) as f32;
        }
        task.eval = task.sample(&mut rng, 4 * cfg.batch, 0)?;
        Ok(task)
    }

    pub fn model_dim(&self) -> usize {
        self.embed.cols()
    }

    /// `rows` fresh rows laid out as consecutive sequences starting at
    /// sequence id `first_seq`.
    pub fn sample(&self, rng: &mut SeededRng, rows: usize, first_seq: u32) -> Result<Batch> {
        let k = self.model_dim();
        let mut x = DenseMatrix::zeros(rows, k);
        let mut tags = Vec::with_capacity(rows);
        for i in 0..rows {
            let u = rng.uniform();
            let token = ((self.vocab as f64 * u * u) as usize).min(self.vocab - 1);
            let p = i % self.seq_len;
            let row = x.row_mut(i);
            for ((o, e), q) in row.iter_mut().zip(self.embed.row(token)).zip(self.pos.row(p)) {
                *o = e + q;
            }
            row[0] = 1.0;
            tags.push(RowTag {
                seq: first_seq + (i / self.seq_len) as u32,
                pos: p as u32,
                token: token as u32,
            });
        }
        let target = self.targets(&x)?;
        Ok(Batch { x, target, tags })
    }

    /// `x + s · teacher(x)`.
    pub fn targets(&self, x: &DenseMatrix<f32>) -> Result<DenseMatrix<f32>> {
        let t = ffn_forward_dense(x, &self.teacher)?;
        x.add(&t.scale(self.teacher_scale))
    }
}
