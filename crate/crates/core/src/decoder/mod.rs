//! Neural SDF decoding: the MLP, the logistic map used by the mapping loss,
//! and point queries with analytic gradients.

pub mod analytic;
mod mlp;

use nalgebra::Vector3;

pub use mlp::{Sensitivity, SdfDecoder, Trace, HIDDEN, LAYER_WIDTHS, PARAM_COUNT};

use crate::error::{Error, Result};
use crate::geometry::Point3;
use crate::octree::{FeatureQuery, FeatureVector, FeatureVolume, FEATURE_DIM};

/// `1 / (1 + exp(x / alpha))`. Decreasing in `x`.
pub fn logistic(x: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidParameter(format!("alpha must be positive, got {alpha}")));
    }
    Ok(logistic_unchecked(x, alpha))
}

#[inline]
pub(crate) fn logistic_unchecked(x: f64, alpha: f64) -> f64 {
    let z = x / alpha;
    if z >= 0.0 {
        let e = (-z).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + z.exp())
    }
}

/// A signed distance field sampled in the volume's scaled frame.
///
/// Values are scaled distances (meters times `scale()`), gradients are taken
/// with respect to scaled coordinates, so a metric SDF has unit-norm gradient.
pub trait SdfField {
    /// Meters to scaled units.
    fn scale(&self) -> f64;

    /// World point mapped to the scaled frame's origin.
    fn origin(&self) -> Point3 {
        Point3::zeros()
    }

    /// Scaled SDF value and its gradient at a world point.
    fn evaluate(&self, p_world: &Point3) -> Result<(f64, Vector3<f64>)>;

    fn value(&self, p_world: &Point3) -> Result<f64> {
        self.evaluate(p_world).map(|(v, _)| v)
    }

    /// SDF value in meters.
    fn metric_value(&self, p_world: &Point3) -> Result<f64> {
        Ok(self.value(p_world)? / self.scale())
    }
}

/// The map's SDF: feature volume plus decoder.
#[derive(Clone, Copy)]
pub struct NeuralField<'a> {
    pub volume: &'a FeatureVolume,
    pub decoder: &'a SdfDecoder,
}

impl<'a> NeuralField<'a> {
    pub fn new(volume: &'a FeatureVolume, decoder: &'a SdfDecoder) -> Self {
        Self { volume, decoder }
    }
}

impl SdfField for NeuralField<'_> {
    fn scale(&self) -> f64 {
        self.volume.scale()
    }

    fn origin(&self) -> Point3 {
        *self.volume.origin()
    }

    fn evaluate(&self, p_world: &Point3) -> Result<(f64, Vector3<f64>)> {
        let s = self.volume.scale_to_unit(p_world).map_err(|_| Error::OutsideMap)?;
        let q = self.volume.query_combined_feature(&s)?;
        let trace = self.decoder.forward(&q.combined);
        let sens = self.decoder.sensitivity(&trace);
        let grad = spatial_gradient(self.volume, &q, &sens.input).0;
        Ok((trace.output as f64, grad))
    }

    fn value(&self, p_world: &Point3) -> Result<f64> {
        let s = self.volume.scale_to_unit(p_world).map_err(|_| Error::OutsideMap)?;
        let q = self.volume.query_combined_feature(&s)?;
        Ok(self.decoder.decode(&q.combined) as f64)
    }
}

/// Gradient of the decoded value with respect to the scaled position.
///
/// Also returns each corner's `feature . input_grad` product in query order
/// (level-major, 8 per level), which the loss backward pass reuses.
pub(crate) fn spatial_gradient(
    volume: &FeatureVolume,
    q: &FeatureQuery,
    input_grad: &FeatureVector,
) -> (Vector3<f64>, [[f64; 8]; 3]) {
    let feats = volume.features();
    let mut grad = Vector3::zeros();
    let mut dots = [[0f64; 8]; 3];
    for (l, lv) in q.levels.iter().enumerate() {
        for c in 0..8 {
            let f = &feats[lv.rows[c] as usize];
            let dot: f64 = f
                .iter()
                .zip(input_grad)
                .map(|(a, b)| *a as f64 * *b as f64)
                .sum();
            dots[l][c] = dot;
            let wg = &lv.weight_grads[c];
            grad.x += wg[0] * dot;
            grad.y += wg[1] * dot;
            grad.z += wg[2] * dot;
        }
    }
    (grad, dots)
}

#[derive(Debug, Clone)]
pub struct SdfQueryResult {
    /// Scaled SDF value.
    pub epsilon: f64,
    /// Gradient of `epsilon` with respect to the scaled position.
    pub grad_point: Vector3<f64>,
    /// `d epsilon / d F[row]` for every touched feature row.
    pub feature_grads: Vec<(u32, FeatureVector)>,
    /// `d epsilon / d params` when requested.
    pub param_grads: Option<Vec<f32>>,
}

/// Evaluates the map SDF at a world point together with its gradients.
pub fn sdf_query(
    volume: &FeatureVolume,
    decoder: &SdfDecoder,
    p_world: &Point3,
    with_param_grads: bool,
) -> Result<SdfQueryResult> {
    let s = volume.scale_to_unit(p_world).map_err(|_| Error::OutsideMap)?;
    let q = volume.query_combined_feature(&s)?;
    let trace = decoder.forward(&q.combined);
    let sens = decoder.sensitivity(&trace);
    let (grad_point, _) = spatial_gradient(volume, &q, &sens.input);

    let mut feature_grads = Vec::with_capacity(8 * q.levels.len());
    for lv in &q.levels {
        for c in 0..8 {
            let w = lv.weights[c] as f32;
            let mut g = [0f32; FEATURE_DIM];
            for (gi, si) in g.iter_mut().zip(&sens.input) {
                *gi = w * si;
            }
            feature_grads.push((lv.rows[c], g));
        }
    }
    let param_grads = with_param_grads.then(|| {
        let mut g = vec![0f32; PARAM_COUNT];
        decoder.accumulate_param_grads(&trace, &sens, 1.0, None, &mut g);
        g
    });
    Ok(SdfQueryResult {
        epsilon: trace.output as f64,
        grad_point,
        feature_grads,
        param_grads,
    })
}
