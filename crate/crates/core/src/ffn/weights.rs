use crate::error::{Error, Result};
use crate::tensor::{randn, DenseMatrix, Scalar, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// `(relu(x W_g) ⊙ x W_u) W_d`.
    #[default]
    Gated,
    /// `relu(x W_u) W_d`.
    NonGated,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Gated => "gated",
            Variant::NonGated => "non_gated",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gated" => Ok(Variant::Gated),
            "non_gated" | "non-gated" | "nongated" => Ok(Variant::NonGated),
            _ => Err(Error::config(
                "variant",
                format!("expected gated or non_gated, got {s:?}"),
            )),
        }
    }
}

/// Projection weights of one feedforward block: `W_g, W_u` are `K × N`,
/// `W_d` is `N × K`.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnWeights<T: Scalar = f32> {
    pub(crate) variant: Variant,
    pub(crate) w_g: Option<DenseMatrix<T>>,
    pub(crate) w_u: DenseMatrix<T>,
    pub(crate) w_d: DenseMatrix<T>,
}

impl<T: Scalar> FfnWeights<T> {
    pub fn gated(w_g: DenseMatrix<T>, w_u: DenseMatrix<T>, w_d: DenseMatrix<T>) -> Result<Self> {
        if w_g.shape() != w_u.shape() {
            return Err(Error::dims(
                "FfnWeights",
                format!("W_g {:?} vs W_u {:?}", w_g.shape(), w_u.shape()),
            ));
        }
        Self::check(&w_u, &w_d)?;
        Ok(FfnWeights {
            variant: Variant::Gated,
            w_g: Some(w_g),
            w_u,
            w_d,
        })
    }

    pub fn non_gated(w_u: DenseMatrix<T>, w_d: DenseMatrix<T>) -> Result<Self> {
        Self::check(&w_u, &w_d)?;
        Ok(FfnWeights {
            variant: Variant::NonGated,
            w_g: None,
            w_u,
            w_d,
        })
    }

    fn check(w_u: &DenseMatrix<T>, w_d: &DenseMatrix<T>) -> Result<()> {
        if w_d.rows() != w_u.cols() || w_d.cols() != w_u.rows() {
            return Err(Error::dims(
                "FfnWeights",
                format!("W_u {:?} vs W_d {:?}", w_u.shape(), w_d.shape()),
            ));
        }
        Ok(())
    }

    /// I.i.d. `N(0, sigma²)` initialization, drawn in the order W_g, W_u, W_d.
    pub fn init(variant: Variant, k: usize, n: usize, sigma: f64, rng: &mut SeededRng) -> Self {
        let w_g = match variant {
            Variant::Gated => Some(randn(k, n, sigma, rng)),
            Variant::NonGated => None,
        };
        FfnWeights {
            variant,
            w_g,
            w_u: randn(k, n, sigma, rng),
            w_d: randn(n, k, sigma, rng),
        }
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    /// Model width `K`.
    pub fn model_dim(&self) -> usize {
        self.w_u.rows()
    }

    /// Hidden width `N`.
    pub fn hidden_dim(&self) -> usize {
        self.w_u.cols()
    }

    pub fn w_g(&self) -> Option<&DenseMatrix<T>> {
        self.w_g.as_ref()
    }

    pub fn w_u(&self) -> &DenseMatrix<T> {
        &self.w_u
    }

    pub fn w_d(&self) -> &DenseMatrix<T> {
        &self.w_d
    }

    pub fn w_g_mut(&mut self) -> Option<&mut DenseMatrix<T>> {
        self.w_g.as_mut()
    }

    pub fn w_u_mut(&mut self) -> &mut DenseMatrix<T> {
        &mut self.w_u
    }

    pub fn w_d_mut(&mut self) -> &mut DenseMatrix<T> {
        &mut self.w_d
    }

    /// The matrix whose ReLU output defines the sparsity pattern.
    pub fn pattern_source(&self) -> &DenseMatrix<T> {
        self.w_g.as_ref().unwrap_or(&self.w_u)
    }

    /// Parameters in a fixed order (W_g if present, W_u, W_d).
    pub fn params(&self) -> Vec<&DenseMatrix<T>> {
        self.w_g.iter().chain([&self.w_u, &self.w_d]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut DenseMatrix<T>> {
        self.w_g.iter_mut().chain([&mut self.w_u, &mut self.w_d]).collect()
    }

    pub(crate) fn check_input(&self, op: &'static str, x: &DenseMatrix<T>) -> Result<()> {
        if x.cols() != self.model_dim() {
            return Err(Error::dims(
                op,
                format!("x has {} columns, weights expect {}", x.cols(), self.model_dim()),
            ));
        }
        Ok(())
    }
}
