//! Analytic scenes and a ray-cast spinning LiDAR for synthetic sequences.

use std::f64::consts::PI;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud, RigidTransform};

use super::io::ScanSource;

/// Hits closer than this to the ray origin are ignored.
const MIN_HIT: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    /// Infinite plane `normal . p = offset`, `normal` unit length.
    Plane { normal: Vector3<f64>, offset: f64 },
    /// Axis-aligned box. Seen from inside it acts as a room, from outside as
    /// a solid block.
    Box { min: Point3, max: Point3 },
    Sphere { center: Point3, radius: f64 },
}

impl Primitive {
    /// Smallest ray parameter `t > 0` at which `origin + t dir` meets the
    /// surface. `dir` must be unit length.
    pub fn intersect(&self, origin: &Point3, dir: &Vector3<f64>) -> Option<f64> {
        match *self {
            Primitive::Plane { normal, offset } => {
                let denom = normal.dot(dir);
                if denom.abs() < 1e-15 {
                    return None;
                }
                let t = (offset - normal.dot(origin)) / denom;
                (t > MIN_HIT).then_some(t)
            }
            Primitive::Box { min, max } => {
                let mut near = f64::NEG_INFINITY;
                let mut far = f64::INFINITY;
                for k in 0..3 {
                    if dir[k].abs() < 1e-15 {
                        if origin[k] < min[k] || origin[k] > max[k] {
                            return None;
                        }
                        continue;
                    }
                    let a = (min[k] - origin[k]) / dir[k];
                    let b = (max[k] - origin[k]) / dir[k];
                    near = near.max(a.min(b));
                    far = far.min(a.max(b));
                }
                if near > far {
                    None
                } else if near > MIN_HIT {
                    Some(near)
                } else if far > MIN_HIT {
                    Some(far)
                } else {
                    None
                }
            }
            Primitive::Sphere { center, radius } => {
                let oc = origin - center;
                let b = oc.dot(dir);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                [-b - s, -b + s].into_iter().find(|t| *t > MIN_HIT)
            }
        }
    }

    /// Unsigned distance from `p` to the surface.
    pub fn distance(&self, p: &Point3) -> f64 {
        match *self {
            Primitive::Plane { normal, offset } => (normal.dot(p) - offset).abs(),
            Primitive::Box { min, max } => {
                let outside = Vector3::from_fn(|k, _| (min[k] - p[k]).max(p[k] - max[k]).max(0.0));
                if outside.iter().any(|v| *v > 0.0) {
                    outside.norm()
                } else {
                    (0..3)
                        .map(|k| (p[k] - min[k]).min(max[k] - p[k]))
                        .fold(f64::INFINITY, f64::min)
                }
            }
            Primitive::Sphere { center, radius } => ((p - center).norm() - radius).abs(),
        }
    }
}

/// Unsigned distance to the nearest primitive surface.
pub fn scene_distance(scene: &[Primitive], p: &Point3) -> f64 {
    scene.iter().map(|s| s.distance(p)).fold(f64::INFINITY, f64::min)
}

/// Nearest hit of a unit ray against the scene.
pub fn cast_ray(scene: &[Primitive], origin: &Point3, dir: &Vector3<f64>) -> Option<f64> {
    scene
        .iter()
        .filter_map(|s| s.intersect(origin, dir))
        .min_by(f64::total_cmp)
}

/// Spinning multi-beam LiDAR model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarModel {
    pub channels: usize,
    pub azimuth_steps: usize,
    /// Elevation of the lowest and highest beam, radians.
    pub min_elevation: f64,
    pub max_elevation: f64,
    pub max_range: f64,
}

impl Default for LidarModel {
    fn default() -> Self {
        Self {
            channels: 32,
            azimuth_steps: 512,
            min_elevation: (-25f64).to_radians(),
            max_elevation: 15f64.to_radians(),
            max_range: 30.0,
        }
    }
}

impl LidarModel {
    /// Unit beam directions in the sensor frame, channel-major.
    pub fn directions(&self) -> Vec<Vector3<f64>> {
        let mut out = Vec::with_capacity(self.channels * self.azimuth_steps);
        for c in 0..self.channels {
            let el = if self.channels == 1 {
                0.5 * (self.min_elevation + self.max_elevation)
            } else {
                self.min_elevation + (self.max_elevation - self.min_elevation) * c as f64 / (self.channels - 1) as f64
            };
            for a in 0..self.azimuth_steps {
                let az = 2.0 * PI * a as f64 / self.azimuth_steps as f64;
                out.push(Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()));
            }
        }
        out
    }
}

/// Casts every beam from `pose` and returns the hits in the sensor frame.
/// Misses and hits beyond the maximum range are omitted.
pub fn synth_scan(scene: &[Primitive], pose: &RigidTransform, lidar: &LidarModel) -> PointCloud {
    let origin = pose.translation;
    let points = lidar
        .directions()
        .into_iter()
        .filter_map(|d| {
            let t = cast_ray(scene, &origin, &(pose.rotation * d))?;
            (t <= lidar.max_range).then(|| d * t)
        })
        .collect();
    PointCloud::sensor(points)
}

/// Rectangular hall with floor and ceiling, four pillars, a low block and a
/// sphere. Spans x in [-15, 15], y in [-8, 8], z in [0, 6].
pub fn room_scene() -> Vec<Primitive> {
    let b = |min: [f64; 3], max: [f64; 3]| Primitive::Box {
        min: Vector3::from(min),
        max: Vector3::from(max),
    };
    vec![
        b([-15.0, -8.0, 0.0], [15.0, 8.0, 6.0]),
        b([-8.0, 3.0, 0.0], [-7.4, 3.6, 6.0]),
        b([-1.0, -4.5, 0.0], [-0.2, -3.7, 6.0]),
        b([5.0, 2.5, 0.0], [5.6, 3.3, 6.0]),
        b([10.0, -3.5, 0.0], [10.5, -3.0, 6.0]),
        b([2.0, 4.5, 0.0], [4.0, 6.5, 1.2]),
        Primitive::Sphere {
            center: Vector3::new(-4.0, -3.0, 1.0),
            radius: 1.0,
        },
    ]
}

/// Ground-truth poses of a sensor driving along +x at 1.5 m height with
/// 0.2 m per frame, swaying in y and yaw.
pub fn room_trajectory(frames: usize) -> Vec<RigidTransform> {
    (0..frames)
        .map(|i| {
            let s = i as f64;
            let x = -9.0 + 0.2 * s;
            let y = 0.8 * (2.0 * PI * s / 120.0).sin();
            let yaw = 0.25 * (2.0 * PI * s / 60.0).sin();
            RigidTransform::from_yaw(yaw, Vector3::new(x, y, 1.5))
        })
        .collect()
}

/// Scans rendered on demand along a scripted trajectory.
#[derive(Debug, Clone)]
pub struct SyntheticSource {
    pub scene: Vec<Primitive>,
    pub poses: Vec<RigidTransform>,
    pub lidar: LidarModel,
}

impl SyntheticSource {
    /// The room scene driven along [`room_trajectory`].
    pub fn room(frames: usize) -> Self {
        Self {
            scene: room_scene(),
            poses: room_trajectory(frames),
            lidar: LidarModel::default(),
        }
    }
}

impl ScanSource for SyntheticSource {
    fn len(&self) -> usize {
        self.poses.len()
    }

    fn scan(&mut self, index: usize) -> Result<PointCloud> {
        let pose = self
            .poses
            .get(index)
            .ok_or_else(|| Error::InvalidParameter(format!("scan {index} out of range")))?;
        Ok(synth_scan(&self.scene, pose, &self.lidar))
    }
}
