//! Rigid-body math, point clouds and voxel downsampling.
//!
//! Everything here is double precision. Poses follow the `T_BA` convention:
//! a transform maps points expressed in frame `A` into frame `B`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::ops::Mul;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::octree::morton::morton_encode_unchecked;

pub type Point3 = Vector3<f64>;

/// Rotation vector (axis scaled by angle, radians).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisAngle(pub Vector3<f64>);

impl AxisAngle {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self(Vector3::new(x, y, z))
    }

    pub fn angle(&self) -> f64 {
        self.0.norm()
    }

    pub fn to_rotation(&self) -> Matrix3<f64> {
        axis_angle_to_rotation(&self.0)
    }
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Exponential map from a rotation vector to SO(3) (Rodrigues' formula).
pub fn axis_angle_to_rotation(theta: &Vector3<f64>) -> Matrix3<f64> {
    let angle_sq = theta.norm_squared();
    let k = skew(theta);
    let (a, b) = if angle_sq < 1e-10 {
        // Taylor expansions of sin(x)/x and (1 - cos(x))/x^2.
        (1.0 - angle_sq / 6.0, 0.5 - angle_sq / 24.0)
    } else {
        let angle = angle_sq.sqrt();
        (angle.sin() / angle, (1.0 - angle.cos()) / angle_sq)
    };
    Matrix3::identity() + k * a + k * k * b
}

/// Logarithm map of a rotation matrix, returning a rotation vector with norm in `[0, pi]`.
pub fn rotation_to_axis_angle(r: &Matrix3<f64>) -> Vector3<f64> {
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let vee = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let sin = 0.5 * vee.norm();
    let angle = sin.atan2(cos);
    if angle < 1e-8 {
        return vee * 0.5;
    }
    if PI - angle > 1e-4 {
        return vee * (angle / (2.0 * sin));
    }
    // Near pi the antisymmetric part vanishes; recover the axis from R + I = 2 n n^T (approx).
    let s = (r + Matrix3::identity()) * 0.5;
    let col = (0..3)
        .max_by(|&i, &j| s[(i, i)].total_cmp(&s[(j, j)]))
        .unwrap_or(0);
    let mut axis = s.column(col).into_owned();
    axis /= axis.norm();
    if axis.dot(&vee) < 0.0 {
        axis = -axis;
    }
    axis * angle
}

/// An element of SE(3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::new(Matrix3::identity(), translation)
    }

    pub fn from_axis_angle(theta: &Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self::new(axis_angle_to_rotation(theta), translation)
    }

    /// Rotation of `yaw` radians about +z, followed by a translation.
    pub fn from_yaw(yaw: f64, translation: Vector3<f64>) -> Self {
        Self::from_axis_angle(&Vector3::new(0.0, 0.0, yaw), translation)
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self::new(rt, -(rt * self.translation))
    }

    /// `self * other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Self) -> Self {
        Self::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn rotation_vector(&self) -> Vector3<f64> {
        rotation_to_axis_angle(&self.rotation)
    }

    /// Rotation angle of this transform, in radians.
    pub fn angle(&self) -> f64 {
        self.rotation_vector().norm()
    }

    /// Left-multiplies by the increment `[exp(dtheta) | dt]`.
    pub fn perturbed(&self, dtheta: &Vector3<f64>, dt: &Vector3<f64>) -> Self {
        let delta = Self::from_axis_angle(dtheta, *dt);
        delta.compose(self)
    }

    /// Checks orthonormality and unit determinant within `tol`.
    pub fn is_valid(&self, tol: f64) -> bool {
        let should_be_identity = self.rotation.transpose() * self.rotation;
        let ortho = (should_be_identity - Matrix3::identity()).abs().max() <= tol;
        ortho
            && (self.rotation.determinant() - 1.0).abs() <= tol
            && self.translation.iter().all(|v| v.is_finite())
    }

    /// Projects the rotation back onto SO(3), removing accumulated roundoff.
    pub fn renormalized(&self) -> Self {
        let theta = rotation_to_axis_angle(&self.rotation);
        Self::from_axis_angle(&theta, self.translation)
    }

    /// Row-major 3x4 `[R | t]`.
    pub fn to_row_major_3x4(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
        ]
    }

    pub fn from_row_major_3x4(v: &[f64; 12]) -> Self {
        Self::new(
            Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]),
            Vector3::new(v[3], v[7], v[11]),
        )
    }
}

impl Mul for RigidTransform {
    type Output = RigidTransform;

    fn mul(self, rhs: RigidTransform) -> RigidTransform {
        self.compose(&rhs)
    }
}

impl Mul<&RigidTransform> for &RigidTransform {
    type Output = RigidTransform;

    fn mul(self, rhs: &RigidTransform) -> RigidTransform {
        self.compose(rhs)
    }
}

pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    a.compose(b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Frame {
    Sensor,
    World,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub frame: Frame,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>, frame: Frame) -> Self {
        Self { points, frame }
    }

    pub fn sensor(points: Vec<Point3>) -> Self {
        Self::new(points, Frame::Sensor)
    }

    pub fn world(points: Vec<Point3>) -> Self {
        Self::new(points, Frame::World)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    /// Keeps points whose distance from the frame origin lies in `[min_range, max_range]`.
    pub fn trimmed(&self, min_range: f64, max_range: f64) -> PointCloud {
        let points = self
            .points
            .iter()
            .filter(|p| {
                let r = p.norm();
                r >= min_range && r <= max_range
            })
            .copied()
            .collect();
        PointCloud::new(points, self.frame)
    }
}

/// Maps every point through `transform`. A sensor-frame cloud becomes a world-frame cloud.
pub fn apply_transform(transform: &RigidTransform, cloud: &PointCloud) -> PointCloud {
    PointCloud::new(
        cloud.points.iter().map(|p| transform.apply(p)).collect(),
        Frame::World,
    )
}

/// Replaces the points of each occupied voxel by their centroid.
///
/// Output order follows the Morton key of the voxel index, ties (only possible
/// for clouds spanning more than 2^21 voxels per axis) broken by the raw index.
pub fn voxel_downsample(cloud: &PointCloud, voxel_size: f64) -> Result<PointCloud> {
    if !(voxel_size > 0.0) || !voxel_size.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "voxel size must be positive, got {voxel_size}"
        )));
    }
    const BIAS: i64 = 1 << 20;
    const MASK: i64 = (1 << 21) - 1;

    let mut voxels: BTreeMap<(u64, [i64; 3]), (Vector3<f64>, usize)> = BTreeMap::new();
    for p in &cloud.points {
        let idx = [
            (p.x / voxel_size).floor() as i64,
            (p.y / voxel_size).floor() as i64,
            (p.z / voxel_size).floor() as i64,
        ];
        let code = morton_encode_unchecked(
            ((idx[0] + BIAS) & MASK) as u32,
            ((idx[1] + BIAS) & MASK) as u32,
            ((idx[2] + BIAS) & MASK) as u32,
        );
        let entry = voxels.entry((code, idx)).or_insert((Vector3::zeros(), 0));
        entry.0 += p;
        entry.1 += 1;
    }
    let points = voxels
        .into_values()
        .map(|(sum, n)| if n == 1 { sum } else { sum / n as f64 })
        .collect();
    Ok(PointCloud::new(points, cloud.frame))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn random_transform(rng: &mut ChaCha8Rng) -> RigidTransform {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let theta = axis.normalize() * rng.random_range(0.0..3.0);
        let t = Vector3::new(
            rng.random_range(-10.0..10.0),
            rng.random_range(-10.0..10.0),
            rng.random_range(-10.0..10.0),
        );
        RigidTransform::from_axis_angle(&theta, t)
    }

    #[test]
    fn zero_rotation_vector_is_identity() {
        assert_eq!(axis_angle_to_rotation(&Vector3::zeros()), Matrix3::identity());
    }

    #[test]
    fn quarter_turn_about_z() {
        let r = AxisAngle::new(0.0, 0.0, FRAC_PI_2).to_rotation();
        let v = r * Vector3::x();
        assert!((v - Vector3::y()).abs().max() < 1e-12);
    }

    #[test]
    fn exp_map_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let theta = Vector3::new(
                rng.random_range(-4.0..4.0),
                rng.random_range(-4.0..4.0),
                rng.random_range(-4.0..4.0),
            );
            let t = RigidTransform::from_axis_angle(&theta, Vector3::zeros());
            assert!(t.is_valid(1e-9));
        }
    }

    #[test]
    fn log_map_inverts_exp_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let axis = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
            .normalize();
            let angle = rng.random_range(1e-3..PI - 1e-3);
            let theta = axis * angle;
            let back = rotation_to_axis_angle(&axis_angle_to_rotation(&theta));
            assert!((back - theta).norm() < 1e-8, "{theta:?} -> {back:?}");
        }
    }

    #[test]
    fn apply_transform_cases() {
        let cloud = PointCloud::sensor(vec![Vector3::new(1.0, -2.0, 0.5), Vector3::zeros()]);
        let same = apply_transform(&RigidTransform::identity(), &cloud);
        assert_eq!(same.points, cloud.points);
        assert_eq!(same.frame, Frame::World);

        let shift = RigidTransform::from_translation(Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(shift.apply(&Vector3::zeros()), Vector3::new(1.0, 2.0, 3.0));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = random_transform(&mut rng);
        let back = apply_transform(&t.inverse(), &apply_transform(&t, &cloud));
        for (a, b) in back.points.iter().zip(&cloud.points) {
            assert!((a - b).abs().max() < 1e-10);
        }
    }

    #[test]
    fn compose_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = random_transform(&mut rng);
        assert_eq!(RigidTransform::identity().compose(&t), t);
        let i = t.compose(&t.inverse());
        assert!((i.rotation - Matrix3::identity()).abs().max() < 1e-10);
        assert!(i.translation.abs().max() < 1e-10);

        let deg30 = 30f64.to_radians();
        let a = RigidTransform::from_yaw(deg30, Vector3::zeros());
        let ab = a.compose(&a);
        let expected = RigidTransform::from_yaw(2.0 * deg30, Vector3::zeros());
        assert!((ab.rotation - expected.rotation).abs().max() < 1e-10);
    }

    #[test]
    fn compose_matches_sequential_application() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let a = random_transform(&mut rng);
            let b = random_transform(&mut rng);
            let p = Vector3::new(
                rng.random_range(-20.0..20.0),
                rng.random_range(-20.0..20.0),
                rng.random_range(-20.0..20.0),
            );
            let lhs = (a * b).apply(&p);
            let rhs = a.apply(&b.apply(&p));
            assert!((lhs - rhs).abs().max() < 1e-10);
        }
    }

    #[test]
    fn downsample_cases() {
        let one = PointCloud::sensor(vec![Vector3::new(0.3, 0.3, 0.3)]);
        assert_eq!(voxel_downsample(&one, 0.2).unwrap().points, one.points);

        let pair = PointCloud::sensor(vec![
            Vector3::new(0.05, 0.05, 0.05),
            Vector3::new(0.06, 0.05, 0.05),
        ]);
        let out = voxel_downsample(&pair, 0.2).unwrap();
        assert_eq!(out.len(), 1);
        assert!((out.points[0] - Vector3::new(0.055, 0.05, 0.05)).norm() < 1e-12);

        let grid: Vec<_> = (0..10)
            .flat_map(|i| (0..10).map(move |j| Vector3::new(i as f64 + 0.5, j as f64 + 0.5, 0.1)))
            .collect();
        let out = voxel_downsample(&PointCloud::sensor(grid.clone()), 0.2).unwrap();
        assert_eq!(out.len(), 100);
        let mut a: Vec<_> = out.points.iter().map(|p| (p.x.to_bits(), p.y.to_bits())).collect();
        let mut b: Vec<_> = grid.iter().map(|p| (p.x.to_bits(), p.y.to_bits())).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);

        assert!(matches!(
            voxel_downsample(&one, 0.0),
            Err(Error::InvalidParameter(_))
        ));
        assert!(voxel_downsample(&one, -1.0).is_err());
    }

    #[test]
    fn downsample_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pts: Vec<_> = (0..5000)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect();
        let once = voxel_downsample(&PointCloud::sensor(pts), 0.3).unwrap();
        let twice = voxel_downsample(&once, 0.3).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn renormalize_keeps_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = random_transform(&mut rng);
        let r = t.renormalized();
        assert!((r.rotation - t.rotation).abs().max() < 1e-12);
        assert_eq!(
            RigidTransform::from_row_major_3x4(&t.to_row_major_3x4()),
            t
        );
    }

    proptest::proptest! {
        #[test]
        fn compose_with_inverse_is_identity(
            ax in -1.0..1.0f64, ay in -1.0..1.0f64, az in -1.0..1.0f64, angle in 0.0..3.1f64,
            tx in -100.0..100.0f64, ty in -100.0..100.0f64, tz in -10.0..10.0f64,
            px in -50.0..50.0f64, py in -50.0..50.0f64, pz in -50.0..50.0f64,
        ) {
            let axis = Vector3::new(ax, ay, az);
            proptest::prop_assume!(axis.norm() > 1e-3);
            let t = RigidTransform::from_axis_angle(&(axis.normalize() * angle), Vector3::new(tx, ty, tz));
            let p = Vector3::new(px, py, pz);
            proptest::prop_assert!((t.inverse().apply(&t.apply(&p)) - p).norm() < 1e-9);
            let id = t.compose(&t.inverse());
            proptest::prop_assert!(id.translation.norm() < 1e-9 && id.angle() < 1e-9);
            proptest::prop_assert!(t.is_valid(1e-9));
        }
    }
}
