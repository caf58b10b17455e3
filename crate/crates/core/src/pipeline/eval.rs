//! Trajectory and reconstruction metrics.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rustc_hash::FxHashMap;

use crate::error::{Error, Result};
use crate::geometry::{Point3, RigidTransform};
use crate::mesh::TriangleMesh;

use super::io::TrajectoryRecord;

fn check_pair(est: &[TrajectoryRecord], gt: &[TrajectoryRecord]) -> Result<()> {
    if est.len() != gt.len() {
        return Err(Error::Evaluation(format!("{} estimated poses vs {} reference poses", est.len(), gt.len())));
    }
    if est.is_empty() {
        return Err(Error::Evaluation("empty trajectory".into()));
    }
    for (k, (a, b)) in est.iter().zip(gt).enumerate() {
        if a.index != b.index {
            return Err(Error::Evaluation(format!("record {k}: index {} vs {}", a.index, b.index)));
        }
        if k > 0 && a.index <= est[k - 1].index {
            return Err(Error::Evaluation(format!("indices not strictly increasing at record {k}")));
        }
    }
    Ok(())
}

/// Rigid transform `T` minimizing `sum |dst_i - T src_i|^2` (Umeyama, no
/// scale).
pub fn umeyama_alignment(src: &[Point3], dst: &[Point3]) -> Result<RigidTransform> {
    if src.len() != dst.len() || src.is_empty() {
        return Err(Error::Evaluation("alignment needs equally many, nonzero points".into()));
    }
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vector3<f64>>() / n;
    let cd = dst.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        cov += (d - cd) * (s - cs).transpose();
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let mut fix = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        fix[(2, 2)] = -1.0;
    }
    let r = u * fix * v_t;
    Ok(RigidTransform::new(r, cd - r * cs))
}

/// RMSE of translation residuals after aligning the estimate onto the
/// reference.
pub fn evaluate_ate(est: &[TrajectoryRecord], gt: &[TrajectoryRecord]) -> Result<f64> {
    check_pair(est, gt)?;
    let src: Vec<Point3> = est.iter().map(|r| r.pose.translation).collect();
    let dst: Vec<Point3> = gt.iter().map(|r| r.pose.translation).collect();
    let t = umeyama_alignment(&src, &dst)?;
    let sq: f64 = src.iter().zip(&dst).map(|(s, d)| (t.apply(s) - d).norm_squared()).sum();
    Ok((sq / src.len() as f64).sqrt())
}

/// Mean relative translational error in percent over all segments of the
/// given lengths (meters), KITTI style: for every start frame and length,
/// the first frame at least that far along the reference path closes the
/// segment.
pub fn evaluate_relative_drift(est: &[TrajectoryRecord], gt: &[TrajectoryRecord], lengths: &[f64]) -> Result<f64> {
    check_pair(est, gt)?;
    if lengths.is_empty() || lengths.iter().any(|l| !(*l > 0.0)) {
        return Err(Error::Evaluation("segment lengths must be positive".into()));
    }
    let mut dist = vec![0.0; gt.len()];
    for i in 1..gt.len() {
        dist[i] = dist[i - 1] + (gt[i].pose.translation - gt[i - 1].pose.translation).norm();
    }
    let shortest = lengths.iter().copied().fold(f64::INFINITY, f64::min);
    if dist[dist.len() - 1] < shortest {
        return Err(Error::Evaluation(format!(
            "trajectory length {:.3} m is shorter than the shortest segment {shortest} m",
            dist[dist.len() - 1]
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..gt.len() {
        for &len in lengths {
            let Some(j) = (i..gt.len()).find(|&j| dist[j] - dist[i] >= len) else {
                continue;
            };
            let dg = gt[i].pose.inverse().compose(&gt[j].pose);
            let de = est[i].pose.inverse().compose(&est[j].pose);
            let err = dg.inverse().compose(&de);
            total += err.translation.norm() / len;
            count += 1;
        }
    }
    Ok(100.0 * total / count as f64)
}

/// Closest point to `p` on triangle `abc`.
pub fn closest_point_on_triangle(p: &Point3, a: &Point3, b: &Point3, c: &Point3) -> Point3 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && d4 - d3 >= 0.0 && d5 - d6 >= 0.0 {
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = 1.0 / (va + vb + vc);
    a + ab * (vb * denom) + ac * (vc * denom)
}

/// Point-to-mesh distance queries over a uniform grid of triangle buckets.
pub struct MeshDistance<'a> {
    mesh: &'a TriangleMesh,
    cell: f64,
    buckets: FxHashMap<[i64; 3], Vec<u32>>,
}

impl<'a> MeshDistance<'a> {
    pub fn new(mesh: &'a TriangleMesh, cell: f64) -> Self {
        let mut buckets: FxHashMap<[i64; 3], Vec<u32>> = FxHashMap::default();
        let key = |v: f64| (v / cell).floor() as i64;
        for (i, t) in mesh.triangles.iter().enumerate() {
            let vs = t.map(|k| mesh.vertices[k as usize]);
            let lo = vs[0].inf(&vs[1]).inf(&vs[2]);
            let hi = vs[0].sup(&vs[1]).sup(&vs[2]);
            for x in key(lo.x)..=key(hi.x) {
                for y in key(lo.y)..=key(hi.y) {
                    for z in key(lo.z)..=key(hi.z) {
                        buckets.entry([x, y, z]).or_default().push(i as u32);
                    }
                }
            }
        }
        Self { mesh, cell, buckets }
    }

    /// Distance from `p` to the mesh, or `cap` if nothing lies within it.
    pub fn distance(&self, p: &Point3, cap: f64) -> f64 {
        let c = p.map(|v| (v / self.cell).floor() as i64);
        let max_ring = (cap / self.cell).ceil() as i64 + 1;
        let mut best = cap;
        for r in 0..=max_ring {
            // Everything outside the searched cube is farther than r cells.
            if best <= (r - 1).max(0) as f64 * self.cell {
                break;
            }
            for x in -r..=r {
                for y in -r..=r {
                    for z in -r..=r {
                        if x.abs().max(y.abs()).max(z.abs()) != r {
                            continue;
                        }
                        let Some(list) = self.buckets.get(&[c.x + x, c.y + y, c.z + z]) else {
                            continue;
                        };
                        for &ti in list {
                            let [a, b, cc] = self.mesh.triangles[ti as usize].map(|k| self.mesh.vertices[k as usize]);
                            best = best.min((closest_point_on_triangle(p, &a, &b, &cc) - p).norm());
                        }
                    }
                }
            }
        }
        best
    }
}

/// Area-weighted uniform samples on the mesh surface.
pub fn sample_mesh_surface<R: Rng + ?Sized>(mesh: &TriangleMesh, n: usize, rng: &mut R) -> Vec<Point3> {
    let mut cum = Vec::with_capacity(mesh.triangles.len());
    let mut acc = 0.0;
    for t in &mesh.triangles {
        acc += mesh.triangle_area(t);
        cum.push(acc);
    }
    if acc == 0.0 {
        return Vec::new();
    }
    (0..n)
        .map(|_| {
            let u = rng.random_range(0.0..acc);
            let i = cum.partition_point(|&c| c <= u).min(cum.len() - 1);
            let [a, b, c] = mesh.triangles[i].map(|k| mesh.vertices[k as usize]);
            let (mut s, mut t) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
            if s + t > 1.0 {
                s = 1.0 - s;
                t = 1.0 - t;
            }
            a + (b - a) * s + (c - a) * t
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChamferReport {
    /// Mean distance from mesh samples to the reference surface.
    pub accuracy: f64,
    /// Mean distance from reference points to the mesh.
    pub completeness: f64,
    pub chamfer_l1: f64,
}

/// Symmetric Chamfer-L1 between a mesh and a reference surface given by an
/// unsigned distance function and points sampled on it. Distances are
/// capped at `cap`.
pub fn chamfer_l1<R: Rng + ?Sized>(
    mesh: &TriangleMesh,
    reference_distance: impl Fn(&Point3) -> f64,
    reference_points: &[Point3],
    mesh_samples: usize,
    cap: f64,
    rng: &mut R,
) -> Result<ChamferReport> {
    if mesh.is_empty() || reference_points.is_empty() {
        return Err(Error::Evaluation("Chamfer distance needs a nonempty mesh and reference".into()));
    }
    let samples = sample_mesh_surface(mesh, mesh_samples, rng);
    let accuracy = samples.iter().map(|p| reference_distance(p).min(cap)).sum::<f64>() / samples.len() as f64;
    let md = MeshDistance::new(mesh, cap.max(1e-3));
    let completeness = reference_points.iter().map(|p| md.distance(p, cap)).sum::<f64>() / reference_points.len() as f64;
    Ok(ChamferReport {
        accuracy,
        completeness,
        chamfer_l1: 0.5 * (accuracy + completeness),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::io::records_from_poses;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn path(n: usize) -> Vec<RigidTransform> {
        (0..n)
            .map(|i| {
                let s = i as f64;
                RigidTransform::from_yaw(0.3 * (s * 0.05).sin(), Vector3::new(s * 0.5, (s * 0.1).sin() * 2.0, 0.1 * s.cos()))
            })
            .collect()
    }

    #[test]
    fn identical_and_offset_trajectories() {
        let gt = records_from_poses(&path(200));
        assert!(evaluate_ate(&gt, &gt).unwrap() < 1e-12);
        let offset = RigidTransform::from_axis_angle(&Vector3::new(0.2, -0.5, 1.0), Vector3::new(4.0, -2.0, 7.0));
        let moved: Vec<_> = gt
            .iter()
            .map(|r| TrajectoryRecord {
                pose: offset.compose(&r.pose),
                ..*r
            })
            .collect();
        assert!(evaluate_ate(&moved, &gt).unwrap() < 1e-9);
    }

    #[test]
    fn isotropic_noise_gives_expected_rmse() {
        let gt = records_from_poses(&path(1000));
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = Normal::new(0.0, 0.1).unwrap();
        let noisy: Vec<_> = gt
            .iter()
            .map(|r| {
                let d = Vector3::new(n.sample(&mut rng), n.sample(&mut rng), n.sample(&mut rng));
                TrajectoryRecord {
                    pose: RigidTransform::new(r.pose.rotation, r.pose.translation + d),
                    ..*r
                }
            })
            .collect();
        let rmse = evaluate_ate(&noisy, &gt).unwrap();
        assert!((0.16..=0.19).contains(&rmse), "{rmse}");
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let gt = records_from_poses(&path(10));
        assert!(evaluate_ate(&gt[..9], &gt).is_err());
        let mut rev = gt.clone();
        rev.reverse();
        assert!(evaluate_ate(&rev, &rev).is_err());
        assert!(evaluate_relative_drift(&rev, &rev, &[1.0]).is_err());
    }

    #[test]
    fn drift_of_a_stretched_trajectory() {
        let gt: Vec<_> = (0..300)
            .map(|i| TrajectoryRecord::new(i, RigidTransform::from_yaw(0.1, Vector3::new(0.5 * i as f64, 0.0, 0.0))))
            .collect();
        assert!(evaluate_relative_drift(&gt, &gt, &[10.0, 50.0]).unwrap() < 1e-12);
        let stretched: Vec<_> = gt
            .iter()
            .map(|r| TrajectoryRecord {
                pose: RigidTransform::new(r.pose.rotation, r.pose.translation * 1.01),
                ..*r
            })
            .collect();
        let d = evaluate_relative_drift(&stretched, &gt, &[10.0, 50.0, 100.0]).unwrap();
        assert!((d - 1.0).abs() < 0.05, "{d}");
        assert!(evaluate_relative_drift(&gt[..5], &gt[..5], &[100.0]).is_err());
    }

    #[test]
    fn umeyama_recovers_a_known_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = RigidTransform::from_axis_angle(&Vector3::new(0.3, 2.0, -0.7), Vector3::new(1.0, 2.0, 3.0));
        let src: Vec<Point3> = (0..50)
            .map(|_| Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)))
            .collect();
        let dst: Vec<Point3> = src.iter().map(|p| t.apply(p)).collect();
        let est = umeyama_alignment(&src, &dst).unwrap();
        assert!((est.rotation - t.rotation).abs().max() < 1e-10);
        assert!((est.translation - t.translation).norm() < 1e-9);
    }

    #[test]
    fn closest_point_regions() {
        let a = Vector3::zeros();
        let b = Vector3::x();
        let c = Vector3::y();
        let cp = |p: Vector3<f64>| closest_point_on_triangle(&p, &a, &b, &c);
        assert!((cp(Vector3::new(0.2, 0.2, 1.0)) - Vector3::new(0.2, 0.2, 0.0)).norm() < 1e-12);
        assert_eq!(cp(Vector3::new(-1.0, -1.0, 0.0)), a);
        assert!((cp(Vector3::new(1.0, 1.0, 0.0)) - Vector3::new(0.5, 0.5, 0.0)).norm() < 1e-12);
        assert!((cp(Vector3::new(0.5, -1.0, 0.3)) - Vector3::new(0.5, 0.0, 0.0)).norm() < 1e-12);
        // Brute force against dense samples of the triangle.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let p = Vector3::new(rng.random_range(-1.0..2.0), rng.random_range(-1.0..2.0), rng.random_range(-1.0..1.0));
            let d = (cp(p) - p).norm();
            let mut best = f64::INFINITY;
            for i in 0..=100 {
                for j in 0..=(100 - i) {
                    let q = a + (b - a) * (i as f64 / 100.0) + (c - a) * (j as f64 / 100.0);
                    best = best.min((q - p).norm());
                }
            }
            assert!(d <= best + 1e-12 && d > best - 0.01);
        }
    }

    #[test]
    fn chamfer_of_a_sphere_mesh() {
        use crate::decoder::analytic::SphereField;
        use crate::mesh::{extract_field_mesh, Aabb};
        let sphere = SphereField {
            center: Vector3::zeros(),
            radius: 1.0,
            scale: 1.0,
        };
        let bounds = Aabb {
            min: Vector3::repeat(-1.5),
            max: Vector3::repeat(1.5),
        };
        let mesh = extract_field_mesh(&sphere, &bounds, 0.05, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let refs: Vec<Point3> = (0..2000)
            .map(|_| Vector3::new(normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng)).normalize())
            .collect();
        let r = chamfer_l1(&mesh, |p| (p.norm() - 1.0).abs(), &refs, 5000, 1.0, &mut rng).unwrap();
        assert!(r.chamfer_l1 < 0.005, "{r:?}");
        // Shrinking the mesh shows up in both directions.
        let mut small = mesh.clone();
        for v in &mut small.vertices {
            *v *= 0.9;
        }
        let r = chamfer_l1(&small, |p| (p.norm() - 1.0).abs(), &refs, 5000, 1.0, &mut rng).unwrap();
        assert!((r.accuracy - 0.1).abs() < 0.01 && (r.completeness - 0.1).abs() < 0.01, "{r:?}");
    }
}
