//! Closed-form SDFs with the same interface as the neural field. Used to
//! validate registration and mesh extraction against exact geometry.

use nalgebra::Vector3;

use super::SdfField;
use crate::error::Result;
use crate::geometry::Point3;

/// Signed distance to the plane `normal . p = offset`, positive on the side
/// the normal points to.
#[derive(Debug, Clone, Copy)]
pub struct PlaneField {
    pub normal: Vector3<f64>,
    pub offset: f64,
    pub scale: f64,
    pub origin: Point3,
}

impl SdfField for PlaneField {
    fn scale(&self) -> f64 {
        self.scale
    }

    fn origin(&self) -> Point3 {
        self.origin
    }

    fn evaluate(&self, p: &Point3) -> Result<(f64, Vector3<f64>)> {
        Ok(((self.normal.dot(p) - self.offset) * self.scale, self.normal))
    }
}

/// Positive outside a sphere.
#[derive(Debug, Clone, Copy)]
pub struct SphereField {
    pub center: Point3,
    pub radius: f64,
    pub scale: f64,
}

impl SdfField for SphereField {
    fn scale(&self) -> f64 {
        self.scale
    }

    fn evaluate(&self, p: &Point3) -> Result<(f64, Vector3<f64>)> {
        let d = p - self.center;
        let n = d.norm();
        let g = if n > 0.0 { d / n } else { Vector3::x() };
        Ok(((n - self.radius) * self.scale, g))
    }
}

/// Interior of an axis-aligned box: positive inside, distance to the nearest
/// wall.
#[derive(Debug, Clone, Copy)]
pub struct BoxRoomField {
    pub min: Point3,
    pub max: Point3,
    pub scale: f64,
}

impl SdfField for BoxRoomField {
    fn scale(&self) -> f64 {
        self.scale
    }

    fn evaluate(&self, p: &Point3) -> Result<(f64, Vector3<f64>)> {
        let mut best = f64::INFINITY;
        let mut grad = Vector3::zeros();
        for k in 0..3 {
            for (dist, sign) in [(p[k] - self.min[k], 1.0), (self.max[k] - p[k], -1.0)] {
                if dist < best {
                    best = dist;
                    grad = Vector3::zeros();
                    grad[k] = sign;
                }
            }
        }
        Ok((best * self.scale, grad))
    }
}
