//! Policy-driven masked image modeling on 3D volumes.
//!
//! A masked autoencoder learns to reconstruct voxels and HOG descriptors of
//! masked patches, while a shared multi-agent actor-critic decides which
//! patches to mask. Downstream, frozen features feed a linear affinity probe
//! whose output is segmented by watershed plus hierarchical agglomeration and
//! scored with VOI and adapted Rand error.

pub mod error;
pub mod hog;
pub mod metrics;
pub mod mim;
pub mod nn;
pub mod policy;
pub mod seg;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
