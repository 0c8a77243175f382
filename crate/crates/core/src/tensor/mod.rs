//! Dense matrices and the reference operations every sparse path is checked
//! against.

pub(crate) mod gemm;
pub(crate) mod io;
mod rng;
mod scalar;

use rayon::prelude::*;

pub use io::{read_dense, read_dense_bytes, write_dense, write_dense_bytes, DenseFile};
pub use rng::SeededRng;
pub use scalar::{round_bf16, DType, Precision, Scalar};

use crate::error::{Error, Result};
use gemm::{PackedB, MC};

/// Row-major `rows × cols` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix<T: Scalar = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> DenseMatrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dims(
                "DenseMatrix::new",
                format!("{} elements for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        DenseMatrix { rows, cols, data }
    }

    /// Builds a matrix from nested rows; all rows must have equal length.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::dims("DenseMatrix::from_rows", "ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> DenseMatrix<U> {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|v| !v.is_zero()).count()
    }

    pub fn count_positive(&self) -> usize {
        self.data.iter().filter(|&&v| v > T::zero()).count()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// Elementwise sum; shapes must match.
    pub fn add(&self, other: &Self) -> Result<Self> {
        check_same_shape("add", self, other)?;
        Ok(DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect(),
        })
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// Copy of rows `r0..r1`.
    pub fn slice_rows(&self, r0: usize, r1: usize) -> Self {
        DenseMatrix {
            rows: r1 - r0,
            cols: self.cols,
            data: self.data[r0 * self.cols..r1 * self.cols].to_vec(),
        }
    }
}

impl DenseMatrix<f32> {
    /// Rounds every element through bf16 storage.
    pub fn round_bf16(&self) -> Self {
        self.map(round_bf16)
    }
}

fn check_same_shape<T: Scalar>(op: &'static str, a: &DenseMatrix<T>, b: &DenseMatrix<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dims(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `C = A·B`.
///
/// Each `C[i,j]` is reduced over `k` in ascending order with separate
/// multiply and add, so the result is bit-identical to the naive triple loop
/// and independent of the number of worker threads.
pub fn matmul_dense<T: Scalar>(a: &DenseMatrix<T>, b: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    if a.cols != b.rows {
        return Err(Error::dims(
            "matmul_dense",
            format!("{}x{} times {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = DenseMatrix::zeros(m, n);
    if m == 0 || n == 0 {
        return Ok(out);
    }
    let packed = PackedB::pack(&b.data, k, n);
    out.data.par_chunks_mut(MC * n).enumerate().for_each(|(blk, chunk)| {
        let r0 = blk * MC;
        let rows = chunk.len() / n;
        gemm::gemm_tile(&a.data[r0 * k..], k, rows, &packed, 0, chunk, n);
    });
    Ok(out)
}

/// `matmul_dense` under a precision mode: in bf16 emulation each output
/// element is the f32 result rounded to bf16.
pub fn matmul_dense_with(a: &DenseMatrix<f32>, b: &DenseMatrix<f32>, precision: Precision) -> Result<DenseMatrix<f32>> {
    let out = matmul_dense(a, b)?;
    Ok(match precision {
        Precision::Bf16Emulated => out.round_bf16(),
        _ => out,
    })
}

pub fn relu<T: Scalar>(a: &DenseMatrix<T>) -> DenseMatrix<T> {
    a.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// `x · sigmoid(x)`.
pub fn silu<T: Scalar>(a: &DenseMatrix<T>) -> DenseMatrix<T> {
    a.map(|v| v / (T::one() + (-v).exp()))
}

pub fn hadamard<T: Scalar>(a: &DenseMatrix<T>, b: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    check_same_shape("hadamard", a, b)?;
    Ok(DenseMatrix {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| x * y).collect(),
    })
}

pub fn transpose_dense<T: Scalar>(a: &DenseMatrix<T>) -> DenseMatrix<T> {
    let (r, c) = a.shape();
    let mut data = vec![T::zero(); r * c];
    // 32x32 blocks keep both sides cache friendly.
    const B: usize = 32;
    for i0 in (0..r).step_by(B) {
        for j0 in (0..c).step_by(B) {
            for i in i0..(i0 + B).min(r) {
                for j in j0..(j0 + B).min(c) {
                    data[j * r + i] = a.data[i * c + j];
                }
            }
        }
    }
    DenseMatrix { rows: c, cols: r, data }
}

/// I.i.d. `N(0, sigma²)` samples in row-major order.
pub fn randn<T: Scalar>(rows: usize, cols: usize, sigma: f64, rng: &mut SeededRng) -> DenseMatrix<T> {
    assert!(sigma >= 0.0, "sigma must be non-negative");
    let data = (0..rows * cols)
        .map(|_| T::from_f64_lossy(sigma * rng.normal()))
        .collect();
    DenseMatrix { rows, cols, data }
}

/// Normwise relative error `max|a-b| / max|b|` (absolute when `b` is all
/// zero). Shapes must match.
pub fn rel_error<T: Scalar>(a: &DenseMatrix<T>, reference: &DenseMatrix<T>) -> f64 {
    assert_eq!(a.shape(), reference.shape(), "rel_error shape mismatch");
    let mut diff = 0.0f64;
    let mut scale = 0.0f64;
    for (&x, &y) in a.data.iter().zip(&reference.data) {
        diff = diff.max((x.as_f64() - y.as_f64()).abs());
        scale = scale.max(y.as_f64().abs());
    }
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}
