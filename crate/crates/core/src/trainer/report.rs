use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

use super::TrainConfig;

/// Per-step metrics as arrays keyed by metric name. Layered metrics are
/// indexed `[layer][step]`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: Vec<usize>,
    /// Task loss plus the L1 term.
    pub loss: Vec<f64>,
    pub task_loss: Vec<f64>,
    pub l1_coeff: Vec<f64>,
    pub mean_nnz: Vec<Vec<f64>>,
    pub max_nnz: Vec<Vec<usize>>,
    pub dead_frac: Vec<Vec<f64>>,
    /// Repeated attempts of the step caused by capacity overflow.
    pub retries: Vec<usize>,
}

impl StepMetrics {
    pub(crate) fn new(layers: usize) -> Self {
        StepMetrics {
            mean_nnz: vec![Vec::new(); layers],
            max_nnz: vec![Vec::new(); layers],
            dead_frac: vec![Vec::new(); layers],
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.step.len()
    }

    pub fn is_empty(&self) -> bool {
        self.step.is_empty()
    }
}

/// Capacities in force at the end of a run, after any growth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capacities {
    pub compression: usize,
    pub ell_width: usize,
    pub dense_cap: usize,
    pub t_ell_width: usize,
    pub t_dense_cap: usize,
}

/// End-of-run metrics measured on the held-out evaluation rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    /// Task loss through the inference kernels.
    pub eval_loss: f64,
    /// Per layer.
    pub mean_nnz: Vec<f64>,
    pub max_nnz: Vec<usize>,
    /// Per layer: share of hidden units inactive on every evaluation row.
    pub dead_frac: Vec<f64>,
    pub total_retries: usize,
    pub wall_time_s: f64,
    pub capacities: Capacities,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub metrics: StepMetrics,
    #[serde(rename = "final")]
    pub summary: FinalMetrics,
}

impl TrainReport {
    /// Final mean non-zeros averaged over layers.
    pub fn final_mean_nnz(&self) -> f64 {
        mean(&self.summary.mean_nnz)
    }

    /// Final dead fraction averaged over layers.
    pub fn final_dead_frac(&self) -> f64 {
        mean(&self.summary.dead_frac)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Per-step CSV: `step,loss,l1_coeff`, then `mean_nnz_layer_i`,
    /// `max_nnz_layer_i` and `dead_frac_layer_i` for every layer, then
    /// `retries`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let m = &self.metrics;
        let layers = m.mean_nnz.len();
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["step".to_string(), "loss".into(), "l1_coeff".into()];
        for name in ["mean_nnz", "max_nnz", "dead_frac"] {
            header.extend((0..layers).map(|l| format!("{name}_layer_{l}")));
        }
        header.push("retries".into());
        w.write_record(&header)?;
        for i in 0..m.len() {
            let mut row = vec![m.step[i].to_string(), m.loss[i].to_string(), m.l1_coeff[i].to_string()];
            row.extend(m.mean_nnz.iter().map(|v| v[i].to_string()));
            row.extend(m.max_nnz.iter().map(|v| v[i].to_string()));
            row.extend(m.dead_frac.iter().map(|v| v[i].to_string()));
            row.push(m.retries[i].to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}
