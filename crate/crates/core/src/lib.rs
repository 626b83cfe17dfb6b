//! Core algorithms for dual-task lesion segmentation.
//!
//! The crate implements the full stack needed to train and run a
//! segmentation model that couples a voxel-wise mask head with a signed
//! distance-map regression head: grid primitives, exact signed Euclidean
//! distance transforms, texture-randomizing augmentation, a self-contained
//! reverse-mode-differentiated 3D encoder-decoder, the Adam training loop,
//! coarse-to-fine patch-based inference, surface-distance metrics, a
//! synthetic multi-domain phantom generator, and the binary file formats
//! that tie them together. Everything is deterministic given a seed and a
//! configuration; no GPU or external ML runtime is involved.

pub mod error;
pub mod gradcheck;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod net;
pub mod objective;
pub mod phantom;
pub mod pipeline;
pub mod sampling;
pub mod sdt;
pub mod trainer;
pub mod texaug;

pub use error::{Error, Result};
pub use grid::{BBox, Connectivity, Dims, Mask, SliceLabels, Spacing, Volume};
pub use sdt::DistanceMap;
