//! Sparse activation formats (TwELL, ELL, hybrid ELL + dense backup) and
//! portable reference kernels for sparse feedforward inference and training.

pub mod bench;
pub mod error;
pub mod ffn;
pub mod formats;
pub mod infer;
pub mod probe;
pub mod statkit;
pub mod tensor;
pub mod train_kernels;
pub mod trainer;

pub use error::{Error, Result, ValidationError};
pub use probe::Probe;
pub use tensor::{DenseMatrix, Scalar, SeededRng};
