//! Pose prediction and scan-to-implicit-map registration.
//!
//! Residuals are scaled SDF values of the scan points placed by the current
//! pose. Increments `(dtheta, dt)` act on the left, about the field's origin:
//! a world point `p` moves to `exp(dtheta) (p - o) + o + dt`.

use nalgebra::{Matrix6, Vector3, Vector6};

use crate::decoder::SdfField;
use crate::error::{Error, Result};
use crate::geometry::{axis_angle_to_rotation, Point3, RigidTransform};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmConfig {
    pub max_iterations: usize,
    pub initial_lambda: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    /// Stop once the increment norm falls below this.
    pub step_tolerance: f64,
    pub min_inliers: usize,
    /// Damping escalations allowed when the damped system is singular.
    pub max_escalations: usize,
    /// Registration is considered diverged once it moves the initial pose
    /// by more than this (meters, radians).
    pub max_translation: f64,
    pub max_rotation: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            initial_lambda: 1e-4,
            lambda_up: 10.0,
            lambda_down: 0.1,
            step_tolerance: 1e-6,
            min_inliers: 10,
            max_escalations: 5,
            max_translation: 2.0,
            max_rotation: 0.5,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.initial_lambda,
            self.lambda_up,
            self.lambda_down,
            self.step_tolerance,
            self.max_translation,
            self.max_rotation,
        ];
        if self.max_iterations == 0 || positive.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::InvalidParameter(format!("invalid LM config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseEstimate {
    pub pose: RigidTransform,
    pub iterations: usize,
    /// Mean squared residual over inliers, scaled units squared.
    pub mean_sq_residual: f64,
    pub inliers: usize,
    pub converged: bool,
}

/// Constant-motion prediction `T1 (T2^-1 T1)` from the two previous poses.
pub fn predict_initial_pose(prev: &RigidTransform, prev2: &RigidTransform) -> RigidTransform {
    prev.compose(&prev2.inverse().compose(prev)).renormalized()
}

/// Pose of the second scan: no rotation, translated by 1% of the bounding
/// box extent along `direction`.
pub fn second_scan_init(bbox_extent: f64, direction: &Vector3<f64>) -> Result<RigidTransform> {
    if !(bbox_extent > 0.0 && bbox_extent.is_finite()) {
        return Err(Error::InvalidParameter(format!("bounding box extent must be positive, got {bbox_extent}")));
    }
    let n = direction.norm();
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::InvalidParameter("direction must be a nonzero vector".into()));
    }
    Ok(RigidTransform::from_translation(direction / n * (0.01 * bbox_extent)))
}

/// Applies a left increment about `center`.
pub fn apply_increment(pose: &RigidTransform, delta: &Vector6<f64>, center: &Point3) -> RigidTransform {
    let dtheta = Vector3::new(delta[0], delta[1], delta[2]);
    let dt = Vector3::new(delta[3], delta[4], delta[5]);
    let dr = axis_angle_to_rotation(&dtheta);
    RigidTransform::new(dr * pose.rotation, dr * (pose.translation - center) + center + dt).renormalized()
}

/// Residuals and Jacobian rows of the inlier points.
#[derive(Debug, Clone, Default)]
pub struct Linearization {
    pub residuals: Vec<f64>,
    pub jacobian: Vec<[f64; 6]>,
    /// Per input point: did it land inside the map.
    pub inlier_mask: Vec<bool>,
}

impl Linearization {
    pub fn inliers(&self) -> usize {
        self.residuals.len()
    }

    pub fn sum_sq(&self) -> f64 {
        self.residuals.iter().map(|r| r * r).sum()
    }

    pub fn mean_sq(&self) -> f64 {
        self.sum_sq() / self.residuals.len().max(1) as f64
    }
}

/// Places the scan with `pose`, evaluates the field and its Jacobian with
/// respect to a left increment. Points outside the map are masked out.
pub fn residual_and_jacobian<F: SdfField + ?Sized>(
    scan_sensor: &[Point3],
    pose: &RigidTransform,
    field: &F,
    min_inliers: usize,
) -> Result<Linearization> {
    let sigma = field.scale();
    let center = field.origin();
    let mut lin = Linearization {
        residuals: Vec::with_capacity(scan_sensor.len()),
        jacobian: Vec::with_capacity(scan_sensor.len()),
        inlier_mask: Vec::with_capacity(scan_sensor.len()),
    };
    for p in scan_sensor {
        let pw = pose.apply(p);
        match field.evaluate(&pw) {
            Ok((eps, d)) => {
                let ds = d * sigma;
                let rot = (pw - center).cross(&ds);
                lin.residuals.push(eps);
                lin.jacobian.push([rot.x, rot.y, rot.z, ds.x, ds.y, ds.z]);
                lin.inlier_mask.push(true);
            }
            Err(Error::OutsideMap | Error::OutOfBounds) => lin.inlier_mask.push(false),
            Err(e) => return Err(e),
        }
    }
    if lin.inliers() < min_inliers {
        return Err(Error::RegistrationInfeasible {
            inliers: lin.inliers(),
            required: min_inliers,
        });
    }
    Ok(lin)
}

/// Damped Gauss-Newton step `(H + lambda diag(H))^-1 (-J^T r)`.
///
/// Diagonal entries of `H` are floored at `1e-9 * max(diag(H))` inside the
/// damping term so that unobserved directions get a zero step instead of a
/// singular system. On a failed factorization the damping grows by
/// `lambda_up`, at most `max_escalations` times. Returns the step and the
/// damping actually used.
pub fn lm_step(
    jacobian: &[[f64; 6]],
    residuals: &[f64],
    lambda: f64,
    lambda_up: f64,
    max_escalations: usize,
) -> Result<(Vector6<f64>, f64)> {
    let mut h = Matrix6::zeros();
    let mut g = Vector6::zeros();
    for (row, r) in jacobian.iter().zip(residuals) {
        let j = Vector6::from_row_slice(row);
        h += j * j.transpose();
        g -= j * *r;
    }
    let max_diag = h.diagonal().max();
    if max_diag == 0.0 {
        return Ok((Vector6::zeros(), lambda));
    }
    let floor = 1e-9 * max_diag;
    let mut lambda = lambda;
    for _ in 0..=max_escalations {
        let mut a = h;
        for i in 0..6 {
            a[(i, i)] += lambda * h[(i, i)].max(floor);
        }
        if let Some(ch) = a.cholesky() {
            let step = ch.solve(&g);
            if step.iter().all(|v| v.is_finite()) {
                return Ok((step, lambda));
            }
        }
        lambda *= lambda_up;
    }
    Err(Error::StepFailure {
        escalations: max_escalations,
    })
}

/// Levenberg-Marquardt registration of a sensor-frame scan against a frozen
/// field, starting from `init`.
pub fn register_scan<F: SdfField + ?Sized>(
    scan_sensor: &[Point3],
    field: &F,
    init: &RigidTransform,
    cfg: &LmConfig,
) -> Result<PoseEstimate> {
    let center = field.origin();
    let mut pose = *init;
    let mut lin = residual_and_jacobian(scan_sensor, &pose, field, cfg.min_inliers)?;
    let mut cost = lin.sum_sq();
    let mut lambda = cfg.initial_lambda;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        iterations += 1;
        let (step, used) = lm_step(&lin.jacobian, &lin.residuals, lambda, cfg.lambda_up, cfg.max_escalations)?;
        lambda = used;
        if step.norm() < cfg.step_tolerance {
            converged = true;
            break;
        }
        let candidate = apply_increment(&pose, &step, &center);
        let accepted = match residual_and_jacobian(scan_sensor, &candidate, field, cfg.min_inliers) {
            Ok(next) if next.sum_sq() < cost => Some(next),
            Ok(_) | Err(Error::RegistrationInfeasible { .. }) => None,
            Err(e) => return Err(e),
        };
        match accepted {
            Some(next) => {
                let moved = init.inverse().compose(&candidate);
                if moved.translation.norm() > cfg.max_translation || moved.angle() > cfg.max_rotation {
                    return Err(Error::Diverged { last_stable: pose });
                }
                pose = candidate;
                cost = next.sum_sq();
                lin = next;
                lambda *= cfg.lambda_down;
            }
            None => lambda *= cfg.lambda_up,
        }
    }
    Ok(PoseEstimate {
        pose,
        iterations,
        mean_sq_residual: lin.mean_sq(),
        inliers: lin.inliers(),
        converged,
    })
}
