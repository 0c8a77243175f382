use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

/// Element encoding used in binary files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum DType {
    F32 = 0x01,
    F64 = 0x02,
    /// 16-bit brain float storage of 32-bit values.
    Bf16 = 0x03,
}

impl DType {
    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0x01 => Some(DType::F32),
            0x02 => Some(DType::F64),
            0x03 => Some(DType::Bf16),
            _ => None,
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::Bf16 => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
            DType::Bf16 => "bf16",
        }
    }
}

/// Floating-point element type of every matrix in the crate.
///
/// Implemented for `f32` (default, and the storage of the bf16 emulation
/// mode) and `f64` (gradient checks).
pub trait Scalar: Float + FromPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static {
    /// Native file encoding.
    const DTYPE: DType;

    fn from_f64_lossy(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// Appends the little-endian encoding in `dtype` (native or bf16).
    fn write_le(self, dtype: DType, out: &mut Vec<u8>);

    /// Decodes one element encoded in `dtype`; `bytes` is exactly `dtype.width()` long.
    fn read_le(dtype: DType, bytes: &[u8]) -> Self;

    /// Whether this type can be stored with `dtype`.
    fn accepts(dtype: DType) -> bool;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, dtype: DType, out: &mut Vec<u8>) {
        match dtype {
            DType::F32 => out.extend_from_slice(&self.to_le_bytes()),
            DType::Bf16 => out.extend_from_slice(&half::bf16::from_f32(self).to_le_bytes()),
            DType::F64 => out.extend_from_slice(&(self as f64).to_le_bytes()),
        }
    }

    fn read_le(dtype: DType, bytes: &[u8]) -> Self {
        match dtype {
            DType::F32 => f32::from_le_bytes(bytes.try_into().expect("4 bytes")),
            DType::Bf16 => half::bf16::from_le_bytes(bytes.try_into().expect("2 bytes")).to_f32(),
            DType::F64 => f64::from_le_bytes(bytes.try_into().expect("8 bytes")) as f32,
        }
    }

    fn accepts(dtype: DType) -> bool {
        matches!(dtype, DType::F32 | DType::Bf16)
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn from_f64_lossy(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn write_le(self, dtype: DType, out: &mut Vec<u8>) {
        match dtype {
            DType::F64 => out.extend_from_slice(&self.to_le_bytes()),
            DType::F32 => out.extend_from_slice(&(self as f32).to_le_bytes()),
            DType::Bf16 => out.extend_from_slice(&half::bf16::from_f64(self).to_le_bytes()),
        }
    }

    fn read_le(dtype: DType, bytes: &[u8]) -> Self {
        match dtype {
            DType::F64 => f64::from_le_bytes(bytes.try_into().expect("8 bytes")),
            DType::F32 => f32::from_le_bytes(bytes.try_into().expect("4 bytes")) as f64,
            DType::Bf16 => half::bf16::from_le_bytes(bytes.try_into().expect("2 bytes")).to_f64(),
        }
    }

    fn accepts(dtype: DType) -> bool {
        dtype == DType::F64
    }
}

/// Rounds to the nearest bf16 value (ties to even) and widens back.
pub fn round_bf16(v: f32) -> f32 {
    half::bf16::from_f32(v).to_f32()
}

/// Element precision of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F32,
    /// Gradient-check mode.
    F64,
    /// bf16 storage with f32 accumulation.
    Bf16Emulated,
}

impl Precision {
    /// Applies the storage rounding of this mode to an f32 result.
    #[inline]
    pub fn store(self, v: f32) -> f32 {
        match self {
            Precision::Bf16Emulated => round_bf16(v),
            _ => v,
        }
    }

    /// [`Precision::store`] for any scalar type; a no-op unless emulating bf16.
    #[inline]
    pub fn round<T: Scalar>(self, v: T) -> T {
        match self {
            Precision::Bf16Emulated => T::from_f64_lossy(round_bf16(v.as_f64() as f32) as f64),
            _ => v,
        }
    }
}
