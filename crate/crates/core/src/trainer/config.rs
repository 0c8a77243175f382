use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ffn::Variant;
use crate::formats::{HybridCapacity, TwellConfig};

/// Hyperparameters of a toy training run.
///
/// Parsed from flat `key = value` text; `#` starts a comment. Every field
/// name below is a valid key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    pub layers: usize,
    /// Rows per batch (`M`).
    pub batch: usize,
    /// Model width (`K`).
    pub model_dim: usize,
    /// Hidden width (`N`).
    pub hidden: usize,
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    pub l1_coefficient: f64,
    pub warmup_plain_steps: usize,
    pub warmup_ramp_steps: usize,
    pub reinit_lambda: f64,
    pub init_sigma: f64,
    /// TwELL tile width and compression of the gate projection.
    pub tile_width: usize,
    pub compression: usize,
    /// Hybrid capacity of the hidden activations.
    pub ell_width: usize,
    pub dense_cap: usize,
    /// Hybrid capacity of the transposed hidden gradients.
    pub t_ell_width: usize,
    pub t_dense_cap: usize,
    /// Attempts per step before giving up on capacity growth.
    pub max_retries: usize,
    pub seed: u64,
    /// Hidden width of the teacher block.
    pub teacher_hidden: usize,
    pub vocab: usize,
    pub seq_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let batch = 128;
        let hidden = 256;
        TrainConfig {
            variant: Variant::Gated,
            layers: 2,
            batch,
            model_dim: 64,
            hidden,
            steps: 2000,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            max_grad_norm: 1.0,
            l1_coefficient: 0.0,
            warmup_plain_steps: 0,
            warmup_ramp_steps: 0,
            reinit_lambda: 0.0,
            init_sigma: 0.02,
            tile_width: 256,
            compression: 1,
            ell_width: 128,
            dense_cap: batch / 8,
            t_ell_width: 128,
            t_dense_cap: hidden / 8,
            max_retries: 32,
            seed: 0,
            teacher_hidden: 16,
            vocab: 256,
            seq_len: 32,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e: T::Err| Error::config(key, format!("cannot parse {value:?}: {e}")))
}

impl TrainConfig {
    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "variant" => self.variant = value.parse()?,
            "layers" => self.layers = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "model_dim" => self.model_dim = parse(key, value)?,
            "hidden" => self.hidden = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "eps" => self.eps = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "max_grad_norm" => self.max_grad_norm = parse(key, value)?,
            "l1_coefficient" => self.l1_coefficient = parse(key, value)?,
            "warmup_plain_steps" => self.warmup_plain_steps = parse(key, value)?,
            "warmup_ramp_steps" => self.warmup_ramp_steps = parse(key, value)?,
            "reinit_lambda" => self.reinit_lambda = parse(key, value)?,
            "init_sigma" => self.init_sigma = parse(key, value)?,
            "tile_width" => self.tile_width = parse(key, value)?,
            "compression" => self.compression = parse(key, value)?,
            "ell_width" => self.ell_width = parse(key, value)?,
            "dense_cap" => self.dense_cap = parse(key, value)?,
            "t_ell_width" => self.t_ell_width = parse(key, value)?,
            "t_dense_cap" => self.t_dense_cap = parse(key, value)?,
            "max_retries" => self.max_retries = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "teacher_hidden" => self.teacher_hidden = parse(key, value)?,
            "vocab" => self.vocab = parse(key, value)?,
            "seq_len" => self.seq_len = parse(key, value)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`, then validates.
    pub fn apply_kv(mut self, text: &str) -> Result<Self> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(line, format!("line {} is not of the form key = value", n + 1)))?;
            self.set(key.trim(), value.trim())?;
        }
        self.validate()?;
        Ok(self)
    }

    /// Defaults overridden by `key = value` lines.
    pub fn from_kv(text: &str) -> Result<Self> {
        Self::default().apply_kv(text)
    }

    /// The configuration as `key = value` lines, parseable by [`from_kv`].
    ///
    /// [`from_kv`]: TrainConfig::from_kv
    pub fn to_kv(&self) -> String {
        let json = serde_json::to_value(self).expect("config serializes");
        let mut out = String::new();
        for (k, v) in json.as_object().expect("config is an object") {
            let v = match v {
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("layers", self.layers),
            ("batch", self.batch),
            ("model_dim", self.model_dim),
            ("hidden", self.hidden),
            ("steps", self.steps),
            ("tile_width", self.tile_width),
            ("compression", self.compression),
            ("ell_width", self.ell_width),
            ("dense_cap", self.dense_cap),
            ("t_ell_width", self.t_ell_width),
            ("t_dense_cap", self.t_dense_cap),
            ("max_retries", self.max_retries),
            ("teacher_hidden", self.teacher_hidden),
            ("vocab", self.vocab),
            ("seq_len", self.seq_len),
        ];
        for (key, v) in counts {
            if v == 0 {
                return Err(Error::config(key, "must be at least 1"));
            }
        }
        let positive = |key: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::config(key, format!("must be positive, got {v}")))
            }
        };
        positive("lr", self.lr)?;
        positive("eps", self.eps)?;
        positive("max_grad_norm", self.max_grad_norm)?;
        positive("init_sigma", self.init_sigma)?;
        for (key, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(key, format!("must lie in [0, 1), got {v}")));
            }
        }
        for (key, v) in [
            ("weight_decay", self.weight_decay),
            ("l1_coefficient", self.l1_coefficient),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(key, format!("must be non-negative, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.reinit_lambda) {
            return Err(Error::config("reinit_lambda", "must lie in [0, 1]"));
        }
        let twell = TwellConfig::new(self.tile_width, self.compression)
            .map_err(|e| Error::config("compression", e.to_string()))?;
        twell
            .check_width(self.hidden)
            .map_err(|_| Error::config("tile_width", format!("must divide hidden = {}", self.hidden)))?;
        Ok(())
    }

    pub fn twell(&self) -> TwellConfig {
        TwellConfig::new(self.tile_width, self.compression).expect("validated config")
    }

    pub fn capacity(&self) -> HybridCapacity {
        HybridCapacity::new(self.ell_width, self.dense_cap)
    }

    pub fn transpose_capacity(&self) -> HybridCapacity {
        HybridCapacity::new(self.t_ell_width, self.t_dense_cap)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!(TrainConfig::from_kv(&c.to_kv()).unwrap(), c);
    }

    #[test]
    fn parses_comments_and_overrides() {
        let c = TrainConfig::from_kv("# toy\nsteps = 5\n\nl1_coefficient=0.5 # strong\nvariant = non_gated\n").unwrap();
        assert_eq!(c.steps, 5);
        assert_eq!(c.l1_coefficient, 0.5);
        assert_eq!(c.variant, Variant::NonGated);
    }

    #[test]
    fn errors_name_the_offending_key() {
        let e = TrainConfig::from_kv("stepz = 4").unwrap_err();
        assert!(matches!(e, Error::InvalidConfig { ref key, .. } if key == "stepz"));
        let e = TrainConfig::from_kv("lr = fast").unwrap_err();
        assert!(matches!(e, Error::InvalidConfig { ref key, .. } if key == "lr"));
        let e = TrainConfig::from_kv("reinit_lambda = 2").unwrap_err();
        assert!(matches!(e, Error::InvalidConfig { ref key, .. } if key == "reinit_lambda"));
        let e = TrainConfig::from_kv("hidden = 100").unwrap_err();
        assert!(matches!(e, Error::InvalidConfig { ref key, .. } if key == "tile_width"));
    }
}
