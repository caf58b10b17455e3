//! Morton-coded octree holding hierarchical latent features.

pub mod morton;
pub mod snapshot;
mod volume;

pub use morton::{morton_decode, morton_encode, MortonKey};
pub use volume::{
    FeatureQuery, FeatureVector, FeatureVolume, InsertReport, LevelInterp, LevelTable,
    MergeReport, VolumeParams, FEATURE_DIM, FEATURE_INIT_STD, MAX_FEATURE_LEVELS,
};
