use std::fmt;

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T, E = Error> = std::result::Result<T, E>;

/// A broken structural invariant of one of the sparse formats.
///
/// Validators report the first violation found, with enough location
/// information to find the offending element.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ValidationError {
    #[error("IndexOutOfTile: row {row}, tile {tile}, slot {slot} holds column {index}")]
    IndexOutOfTile {
        row: usize,
        tile: usize,
        slot: usize,
        index: usize,
    },
    #[error("IndexOutOfRange: row {row}, slot {slot} holds column {index} >= {cols}")]
    IndexOutOfRange {
        row: usize,
        slot: usize,
        index: usize,
        cols: usize,
    },
    #[error("CountExceedsSlots: row {row}, tile {tile} claims {count} non-zeros in {slots} slots")]
    CountExceedsSlots {
        row: usize,
        tile: usize,
        count: usize,
        slots: usize,
    },
    #[error("NonMonotoneIndices: row {row}, slot {slot}")]
    NonMonotoneIndices { row: usize, slot: usize },
    #[error("RoutingMismatch: row {row} has {nnz} non-zeros for ELL width {width} but routing bit is {routed_dense}")]
    RoutingMismatch {
        row: usize,
        nnz: usize,
        width: usize,
        routed_dense: bool,
    },
    #[error("TailMapInconsistent: {0}")]
    TailMapInconsistent(String),
    #[error("ShapeInconsistent: {0}")]
    ShapeInconsistent(String),
}

/// Which capacity a hybrid operation ran out of.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Capacity {
    EllWidth,
    DenseRows,
}

impl fmt::Display for Capacity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Capacity::EllWidth => f.write_str("ell_width"),
            Capacity::DenseRows => f.write_str("dense_cap"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    DimensionMismatch { op: &'static str, detail: String },

    #[error("OverflowTile: row {row}, tile {tile} has {count} non-zeros but only {capacity} slots")]
    OverflowTile {
        row: usize,
        tile: usize,
        count: usize,
        capacity: usize,
    },

    #[error("IndexWidthExceeded: {cols} columns do not fit 16-bit indices")]
    IndexWidthExceeded { cols: usize },

    #[error("DenseCapacityExceeded: {needed} dense rows needed, capacity {capacity}")]
    DenseCapacityExceeded { needed: usize, capacity: usize },

    #[error("PatternMismatch: {0}")]
    PatternMismatch(String),

    #[error(transparent)]
    Validation(#[from] ValidationError),

    #[error("invalid configuration `{key}`: {reason}")]
    InvalidConfig { key: String, reason: String },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("non-finite loss at step {step} (last finite step: {})", last_step(.last_good))]
    NonFinite { step: usize, last_good: Option<usize> },

    #[error("statistics undefined: {0}")]
    Statistics(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn last_step(s: &Option<usize>) -> String {
    s.map_or_else(|| "none".into(), |s| s.to_string())
}

impl Error {
    pub(crate) fn dims(op: &'static str, detail: impl Into<String>) -> Self {
        Error::DimensionMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            key: key.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by a sparse structure running out of room.
    pub fn is_capacity(&self) -> bool {
        matches!(
            self,
            Error::OverflowTile { .. } | Error::IndexWidthExceeded { .. } | Error::DenseCapacityExceeded { .. }
        )
    }
}
