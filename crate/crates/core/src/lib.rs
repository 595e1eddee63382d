//! Spatial sparse attention over sparse 3D voxel token sets.
//!
//! The crate is organized around a small set of carriers: [`SdfVolume`] /
//! [`SparseVoxelSet`] for signed-distance data, [`BlockPartition`] for
//! coordinate-subgrid grouping, [`HeadTensor`] for per-head token features,
//! and the attention entry points in [`attention`] (dense / tiled oracle)
//! and [`ssa`] (compression + blockwise selection + window, gated together).
//!
//! All numeric code is generic over the scalar type via [`Scalar`]
//! (`f32`/`f64`); tests and oracles run in `f64`.

pub mod attention;
pub mod losses;
pub mod partition;
pub mod scalar;
pub mod ssa;
pub mod svox;
pub mod volume;

pub use attention::{AttentionResult, HeadTensor};
pub use partition::{BlockHierarchy, BlockPartition};
pub use scalar::Scalar;
pub use ssa::SsaConfig;
pub use volume::{SdfVolume, ShapeSpec, SparseVoxelSet};

/// Integer voxel coordinate (i, j, k), each component in `[0, R)`.
pub type Coord = [u32; 3];

/// Concrete aliases for the two supported scalar widths.
pub type SdfVolume32 = SdfVolume<f32>;
pub type SdfVolume64 = SdfVolume<f64>;
pub type SparseVoxelSet32 = SparseVoxelSet<f32>;
pub type SparseVoxelSet64 = SparseVoxelSet<f64>;
pub type HeadTensor32 = HeadTensor<f32>;
pub type HeadTensor64 = HeadTensor<f64>;
