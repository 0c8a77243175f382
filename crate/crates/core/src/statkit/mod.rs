//! Sparsity statistics over recorded activation counts: per layer, per
//! position and per token, plus Pearson correlation.
//!
//! All statistics are built from mergeable accumulators holding integer
//! sums, so sharded or streamed processing gives exactly the same numbers
//! as a single pass.

mod log;

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use log::{read_log, read_log_bytes, write_alog, write_log_csv, ActivationLog, LogFormat, LogRecord, LogStream};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Bucket {
    /// Sum of counts over all layers of all rows in the bucket.
    sum: u64,
    rows: u64,
}

impl Bucket {
    fn add(&mut self, other: Bucket) {
        self.sum += other.sum;
        self.rows += other.rows;
    }

    fn mean(&self, layers: usize) -> f64 {
        self.sum as f64 / (self.rows as f64 * layers as f64)
    }
}

/// Mergeable running sums over activation-log records.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StatsAccumulator {
    layers: usize,
    rows: u64,
    layer_sum: Vec<u64>,
    layer_max: Vec<u32>,
    positions: BTreeMap<u32, Bucket>,
    tokens: BTreeMap<u32, Bucket>,
    tagged_rows: u64,
}

impl StatsAccumulator {
    pub fn new(layers: usize) -> Self {
        StatsAccumulator {
            layers,
            layer_sum: vec![0; layers],
            layer_max: vec![0; layers],
            ..Default::default()
        }
    }

    pub fn rows(&self) -> u64 {
        self.rows
    }

    pub fn push(&mut self, rec: &LogRecord) -> Result<()> {
        if rec.counts.len() != self.layers {
            return Err(Error::Statistics(format!(
                "record has {} layer counts, log has {} layers",
                rec.counts.len(),
                self.layers
            )));
        }
        self.rows += 1;
        let mut total = 0u64;
        for (l, &c) in rec.counts.iter().enumerate() {
            self.layer_sum[l] += c as u64;
            self.layer_max[l] = self.layer_max[l].max(c);
            total += c as u64;
        }
        let b = Bucket { sum: total, rows: 1 };
        self.positions.entry(rec.pos).or_default().add(b);
        if let Some(t) = rec.token {
            self.tokens.entry(t).or_default().add(b);
            self.tagged_rows += 1;
        }
        Ok(())
    }

    pub fn merge(mut self, other: StatsAccumulator) -> Result<Self> {
        if other.rows == 0 {
            return Ok(self);
        }
        if self.rows == 0 {
            return Ok(other);
        }
        if self.layers != other.layers {
            return Err(Error::Statistics(
                "cannot merge logs with different layer counts".into(),
            ));
        }
        self.rows += other.rows;
        self.tagged_rows += other.tagged_rows;
        for l in 0..self.layers {
            self.layer_sum[l] += other.layer_sum[l];
            self.layer_max[l] = self.layer_max[l].max(other.layer_max[l]);
        }
        for (k, b) in other.positions {
            self.positions.entry(k).or_default().add(b);
        }
        for (k, b) in other.tokens {
            self.tokens.entry(k).or_default().add(b);
        }
        Ok(self)
    }

    /// Accumulates an in-memory log, in parallel over shards.
    pub fn from_log(log: &ActivationLog) -> Result<Self> {
        let layers = log.layers;
        log.records
            .par_chunks(4096)
            .map(|shard| {
                let mut acc = StatsAccumulator::new(layers);
                for r in shard {
                    acc.push(r)?;
                }
                Ok(acc)
            })
            .try_reduce(|| StatsAccumulator::new(layers), |a, b| a.merge(b))
    }

    /// Accumulates a log stream record by record.
    pub fn from_stream(stream: LogStream) -> Result<Self> {
        let mut acc = StatsAccumulator::new(stream.layers());
        for rec in stream {
            acc.push(&rec?)?;
        }
        Ok(acc)
    }

    pub fn layer_stats(&self) -> Result<Vec<LayerStat>> {
        if self.rows == 0 {
            return Err(Error::Statistics("activation log is empty".into()));
        }
        Ok((0..self.layers)
            .map(|l| LayerStat {
                layer: l,
                mean_nnz: self.layer_sum[l] as f64 / self.rows as f64,
                max_nnz: self.layer_max[l],
            })
            .collect())
    }

    pub fn position_stats(&self) -> Vec<PositionStat> {
        self.positions
            .iter()
            .map(|(&position, b)| PositionStat {
                position,
                mean_nnz: b.mean(self.layers),
                rows: b.rows,
            })
            .collect()
    }

    pub fn token_extremes(&self, min_freq: f64, k: usize) -> TokenExtremes {
        let total = self.tagged_rows as f64;
        let mut kept: Vec<TokenStat> = self
            .tokens
            .iter()
            .map(|(&token, b)| TokenStat {
                token,
                frequency: b.rows as f64 / total,
                mean_nnz: b.mean(self.layers),
                rows: b.rows,
            })
            .filter(|t| t.frequency >= min_freq)
            .collect();
        kept.sort_by(|a, b| a.mean_nnz.total_cmp(&b.mean_nnz).then(a.token.cmp(&b.token)));
        let lowest = kept.iter().take(k).cloned().collect();
        let highest = kept.iter().rev().take(k).cloned().collect();
        TokenExtremes { lowest, highest }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerStat {
    pub layer: usize,
    pub mean_nnz: f64,
    pub max_nnz: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositionStat {
    pub position: u32,
    /// Mean per-row count (averaged over layers) at this position.
    pub mean_nnz: f64,
    pub rows: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenStat {
    pub token: u32,
    /// Share of token-tagged rows carrying this token.
    pub frequency: f64,
    /// Mean per-row count (averaged over layers) for this token.
    pub mean_nnz: f64,
    pub rows: u64,
}

/// Lowest and highest tokens by mean count, most extreme first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenExtremes {
    pub lowest: Vec<TokenStat>,
    pub highest: Vec<TokenStat>,
}

/// Mean and max per-row count of each layer. Errors on an empty log.
pub fn layer_stats(log: &ActivationLog) -> Result<Vec<LayerStat>> {
    StatsAccumulator::from_log(log)?.layer_stats()
}

/// Mean count by position, in ascending position order.
pub fn position_stats(log: &ActivationLog) -> Result<Vec<PositionStat>> {
    Ok(StatsAccumulator::from_log(log)?.position_stats())
}

/// The `k` lowest and `k` highest tokens by mean count among tokens whose
/// frequency is at least `min_freq`.
pub fn token_extremes(log: &ActivationLog, min_freq: f64, k: usize) -> Result<TokenExtremes> {
    Ok(StatsAccumulator::from_log(log)?.token_extremes(min_freq, k))
}

/// Pearson correlation coefficient.
pub fn correlate(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Statistics(format!(
            "correlation needs two equal-length series of at least 2 values, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Statistics("correlation undefined for a constant series".into()));
    }
    Ok(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// `layer,mean_nnz,max_nnz,dead_frac`; `dead_frac` is left empty when not
/// supplied for a layer.
pub fn write_layer_csv<W: Write>(out: W, stats: &[LayerStat], dead_frac: Option<&[f64]>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["layer", "mean_nnz", "max_nnz", "dead_frac"])?;
    for s in stats {
        let dead = dead_frac
            .and_then(|d| d.get(s.layer))
            .map(|d| d.to_string())
            .unwrap_or_default();
        w.write_record([s.layer.to_string(), s.mean_nnz.to_string(), s.max_nnz.to_string(), dead])?;
    }
    w.flush()?;
    Ok(())
}

/// `position,mean_nnz`.
pub fn write_position_csv<W: Write>(out: W, stats: &[PositionStat]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["position", "mean_nnz"])?;
    for s in stats {
        w.write_record([s.position.to_string(), s.mean_nnz.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// `kind,rank,token,frequency,mean_nnz` with `kind` in {`lowest`, `highest`}.
pub fn write_token_csv<W: Write>(out: W, ex: &TokenExtremes) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["kind", "rank", "token", "frequency", "mean_nnz"])?;
    for (kind, list) in [("lowest", &ex.lowest), ("highest", &ex.highest)] {
        for (rank, t) in list.iter().enumerate() {
            w.write_record([
                kind.to_string(),
                rank.to_string(),
                t.token.to_string(),
                t.frequency.to_string(),
                t.mean_nnz.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
