//! LiDAR odometry and mapping on a neural signed distance field.
//!
//! The map is a sparse octree whose three finest levels carry latent feature
//! vectors at node corners, addressed through Morton-coded hash tables. A
//! point's features are trilinearly interpolated per level, summed, and
//! decoded by a small MLP into a signed distance. Mapping trains features and
//! decoder online from ray samples; odometry registers each scan against the
//! frozen field with Levenberg-Marquardt.

pub mod decoder;
pub mod error;
pub mod geometry;
pub mod mesh;
pub mod octree;
pub mod odometry;
pub mod pipeline;
pub mod sampler;
pub mod trainer;

pub use crate::decoder::{SdfDecoder, SdfField};
pub use crate::error::{Error, Result};
pub use crate::geometry::{AxisAngle, Frame, PointCloud, RigidTransform};
pub use crate::octree::{FeatureVolume, MortonKey, VolumeParams};
