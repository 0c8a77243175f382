//! Sparse storage formats: TwELL, ELLPACK-R and the hybrid ELL + dense
//! backup layout, with conversions, validation and binary files.

mod ell;
mod hybrid;
mod io;
mod packed;
mod twell;

pub use ell::EllMatrix;
pub use hybrid::{
    hybrid_to_dense_matrix, twell_to_hybrid, ConversionStats, HybridCapacity, HybridMatrix, HybridPattern, NO_SLOT,
};
pub use io::{peek_header, read_hybrid_bytes, read_twell_bytes, write_hybrid_bytes, write_twell_bytes, FileKind};
pub use packed::{twell_pack_words, twell_unpack_words, PackedTwell};
pub use twell::{dense_to_twell, dense_to_twell_with, twell_to_dense, PackPredicate, TwellConfig, TwellMatrix};

pub(crate) use twell::pack_segment;
