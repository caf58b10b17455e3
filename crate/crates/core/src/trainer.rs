//! Mapping objective and the per-frame Adam loop.
//!
//! Per in-map sample the loss is
//! `BCE(psi(eps_gt), psi(eps_hat)) + l1 * | |d| - 1 | + l2 * angle(d, n)`,
//! with `eps_hat` in meters and `d` the SDF gradient. The first two terms are
//! averaged over the in-map samples, the direction term over the samples that
//! carry a normal.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use rustc_hash::FxHashMap;

use crate::decoder::{logistic_unchecked, spatial_gradient, SdfDecoder, PARAM_COUNT};
use crate::error::{Error, Result};
use crate::octree::{FeatureVector, FeatureVolume, FEATURE_DIM};
use crate::sampler::LabeledSample;

const PROB_CLAMP: f64 = 1e-7;
/// Gradients shorter than this make the direction term undefined.
const MIN_GRAD_NORM: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Eikonal weight.
    pub lambda1: f64,
    /// Normal-direction weight.
    pub lambda2: f64,
    /// Logistic temperature, meters.
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 0.1,
            alpha: 0.08,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !(self.lambda1 >= 0.0) || !(self.lambda2 >= 0.0) {
            return Err(Error::InvalidParameter(format!("invalid loss weights {self:?}")));
        }
        Ok(())
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Binary cross-entropy between `psi(eps_gt)` and `psi(eps_pred)`, both in
/// meters.
pub fn bce_loss(eps_pred: f64, eps_gt: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidParameter(format!("alpha must be positive, got {alpha}")));
    }
    Ok(bce_with_grad(eps_pred, eps_gt, alpha).0)
}

/// Loss and its derivative with respect to `eps_pred`.
fn bce_with_grad(eps_pred: f64, eps_gt: f64, alpha: f64) -> (f64, f64) {
    let y = logistic_unchecked(eps_gt, alpha);
    let raw = logistic_unchecked(eps_pred, alpha);
    let p = clamp_prob(raw);
    let loss = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
    let grad = if p == raw { (y - p) / alpha } else { 0.0 };
    (loss, grad)
}

/// `| |grad| - 1 |`.
pub fn eikonal_loss(grad: &Vector3<f64>) -> f64 {
    (grad.norm() - 1.0).abs()
}

fn eikonal_with_grad(d: &Vector3<f64>) -> (f64, Vector3<f64>) {
    let n = d.norm();
    let g = if n > 0.0 { d / n * (n - 1.0).signum() } else { Vector3::zeros() };
    ((n - 1.0).abs(), g)
}

/// Angle in radians between `grad` and the unit `normal`. `None` when the
/// gradient is too short to have a direction.
pub fn normal_alignment_loss(grad: &Vector3<f64>, normal: &Vector3<f64>) -> Option<f64> {
    let n = grad.norm();
    (n >= MIN_GRAD_NORM).then(|| (grad.dot(normal) / n).clamp(-1.0, 1.0).acos())
}

fn alignment_with_grad(d: &Vector3<f64>, normal: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
    let n = d.norm();
    if n < MIN_GRAD_NORM {
        return None;
    }
    let dhat = d / n;
    let c = dhat.dot(normal).clamp(-1.0, 1.0);
    let s2 = 1.0 - c * c;
    let g = if s2 < 1e-12 {
        Vector3::zeros()
    } else {
        -(normal - dhat * c) / (n * s2.sqrt())
    };
    Some((c.acos(), g))
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    /// Mean BCE.
    pub l1: f64,
    /// Mean Eikonal residual.
    pub l2: f64,
    /// Mean angle over samples with a normal.
    pub l3: f64,
    pub total: f64,
    pub in_map: usize,
    pub with_normal: usize,
    /// Samples whose node is absent from the volume.
    pub outside: usize,
    /// Normal-carrying samples skipped for a vanishing gradient.
    pub degenerate: usize,
}

/// Gradients of the total loss.
#[derive(Debug, Clone)]
pub struct GradientBundle {
    /// Touched feature rows in ascending order.
    pub features: Vec<(u32, FeatureVector)>,
    pub decoder: Vec<f32>,
    /// Per batch entry: did it contribute to the direction term.
    pub l3_mask: Vec<bool>,
}

struct SampleEval {
    eps_m: f64,
    d: Vector3<f64>,
    q: crate::octree::FeatureQuery,
    trace: crate::decoder::Trace,
    sens: crate::decoder::Sensitivity,
}

fn eval_sample(volume: &FeatureVolume, decoder: &SdfDecoder, p: &Vector3<f64>) -> Option<SampleEval> {
    let s = volume.scale_to_unit(p).ok()?;
    let q = volume.query_combined_feature(&s).ok()?;
    let trace = decoder.forward(&q.combined);
    let sens = decoder.sensitivity(&trace);
    let d = spatial_gradient(volume, &q, &sens.input).0;
    Some(SampleEval {
        eps_m: trace.output as f64 / volume.scale(),
        d,
        q,
        trace,
        sens,
    })
}

/// Evaluates the total loss over a batch and, if asked, its gradients.
pub fn total_loss(
    batch: &[LabeledSample],
    volume: &FeatureVolume,
    decoder: &SdfDecoder,
    weights: &LossWeights,
    with_grads: bool,
) -> Result<(LossBreakdown, Option<GradientBundle>)> {
    let sigma = volume.scale();
    let mut evals = Vec::with_capacity(batch.len());
    let mut out = LossBreakdown::default();
    for s in batch {
        let e = eval_sample(volume, decoder, &s.position);
        if e.is_none() {
            out.outside += 1;
        }
        evals.push(e);
    }
    out.in_map = batch.len() - out.outside;
    if out.in_map == 0 {
        return Err(Error::EmptyBatch);
    }

    // First pass: values and per-sample upstream terms.
    // upstream.0 = dL_i/d eps_scaled, upstream.1 = dL_i/dd, before averaging.
    let mut l3_mask = vec![false; batch.len()];
    let mut terms: Vec<Option<(f64, Vector3<f64>, Option<Vector3<f64>>)>> = Vec::with_capacity(batch.len());
    let (mut sum1, mut sum2, mut sum3) = (0.0, 0.0, 0.0);
    for (i, (s, e)) in batch.iter().zip(&evals).enumerate() {
        let Some(e) = e else {
            terms.push(None);
            continue;
        };
        let (l1, g1) = bce_with_grad(e.eps_m, s.gt_sdf, weights.alpha);
        let (l2, g2) = eikonal_with_grad(&e.d);
        sum1 += l1;
        sum2 += l2;
        let mut g3 = None;
        if let Some(n) = s.normal.filter(|_| s.surface_band) {
            match alignment_with_grad(&e.d, &n) {
                Some((l3, g)) => {
                    sum3 += l3;
                    out.with_normal += 1;
                    l3_mask[i] = true;
                    g3 = Some(g);
                }
                None => out.degenerate += 1,
            }
        }
        terms.push(Some((g1 / sigma, g2, g3)));
    }
    let n = out.in_map as f64;
    out.l1 = sum1 / n;
    out.l2 = sum2 / n;
    out.l3 = if out.with_normal > 0 { sum3 / out.with_normal as f64 } else { 0.0 };
    out.total = out.l1 + weights.lambda1 * out.l2 + weights.lambda2 * out.l3;
    if !with_grads {
        return Ok((out, None));
    }

    let w12 = 1.0 / n;
    let w3 = if out.with_normal > 0 {
        weights.lambda2 / out.with_normal as f64
    } else {
        0.0
    };
    let mut decoder_grads = vec![0f32; PARAM_COUNT];
    let mut slots: FxHashMap<u32, usize> = FxHashMap::default();
    let mut feat_grads: Vec<(u32, [f64; FEATURE_DIM])> = Vec::new();
    let feats = volume.features();
    for (t, e) in terms.iter().zip(&evals) {
        let (Some((g1, g2, g3)), Some(e)) = (t, e) else {
            continue;
        };
        let c = g1 * w12;
        let mut u = g2 * (weights.lambda1 * w12);
        if let Some(g3) = g3 {
            u += g3 * w3;
        }
        // beta_lc = u . grad(w_lc); v = sum beta_lc f_lc.
        let mut v = [0f64; FEATURE_DIM];
        let mut betas = [[0f64; 8]; 3];
        for (l, lv) in e.q.levels.iter().enumerate() {
            for k in 0..8 {
                let wg = &lv.weight_grads[k];
                let beta = u.x * wg[0] + u.y * wg[1] + u.z * wg[2];
                betas[l][k] = beta;
                for (vi, fi) in v.iter_mut().zip(&feats[lv.rows[k] as usize]) {
                    *vi += beta * *fi as f64;
                }
            }
        }
        let v32: FeatureVector = v.map(|x| x as f32);
        decoder.accumulate_param_grads(&e.trace, &e.sens, c as f32, Some(&v32), &mut decoder_grads);
        for (l, lv) in e.q.levels.iter().enumerate() {
            for k in 0..8 {
                let coef = c * lv.weights[k] + betas[l][k];
                let row = lv.rows[k];
                let slot = *slots.entry(row).or_insert_with(|| {
                    feat_grads.push((row, [0.0; FEATURE_DIM]));
                    feat_grads.len() - 1
                });
                for (g, gin) in feat_grads[slot].1.iter_mut().zip(&e.sens.input) {
                    *g += coef * *gin as f64;
                }
            }
        }
    }
    feat_grads.sort_unstable_by_key(|(r, _)| *r);
    let features = feat_grads.into_iter().map(|(r, g)| (r, g.map(|x| x as f32))).collect();
    Ok((
        out,
        Some(GradientBundle {
            features,
            decoder: decoder_grads,
            l3_mask,
        }),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for the feature table (dense storage, lazily updated rows)
/// and the decoder (dense).
#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    pub step: u64,
    feat_m: Vec<FeatureVector>,
    feat_v: Vec<FeatureVector>,
    dec_m: Vec<f32>,
    dec_v: Vec<f32>,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        *self = Self::default();
    }

    /// Applies one Adam step. Feature rows absent from `grads` keep their
    /// values and moments.
    pub fn apply(
        &mut self,
        cfg: &AdamConfig,
        grads: &GradientBundle,
        features: &mut [FeatureVector],
        decoder: &mut [f32],
    ) {
        self.step += 1;
        if self.feat_m.len() < features.len() {
            self.feat_m.resize(features.len(), [0.0; FEATURE_DIM]);
            self.feat_v.resize(features.len(), [0.0; FEATURE_DIM]);
        }
        if self.dec_m.len() != decoder.len() {
            self.dec_m = vec![0.0; decoder.len()];
            self.dec_v = vec![0.0; decoder.len()];
        }
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let update = |p: &mut f32, m: &mut f32, v: &mut f32, g: f32| {
            let g = g as f64;
            let mn = cfg.beta1 * *m as f64 + (1.0 - cfg.beta1) * g;
            let vn = cfg.beta2 * *v as f64 + (1.0 - cfg.beta2) * g * g;
            *m = mn as f32;
            *v = vn as f32;
            let step = cfg.lr * (mn / bc1) / ((vn / bc2).sqrt() + cfg.eps);
            *p = (*p as f64 - step) as f32;
        };
        for (row, g) in &grads.features {
            let r = *row as usize;
            for k in 0..FEATURE_DIM {
                update(&mut features[r][k], &mut self.feat_m[r][k], &mut self.feat_v[r][k], g[k]);
            }
        }
        for (i, g) in grads.decoder.iter().enumerate() {
            update(&mut decoder[i], &mut self.dec_m[i], &mut self.dec_v[i], *g);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub loss: LossBreakdown,
}

/// Runs `iterations` Adam steps on features and decoder. `next_batch(i)`
/// supplies the batch for iteration `i`. Returns the loss before each step.
pub fn train_frame<F>(
    volume: &mut FeatureVolume,
    decoder: &mut SdfDecoder,
    state: &mut OptimizerState,
    weights: &LossWeights,
    adam: &AdamConfig,
    iterations: usize,
    mut next_batch: F,
) -> Result<Vec<LossRecord>>
where
    F: FnMut(usize) -> Vec<LabeledSample>,
{
    let mut trace = Vec::with_capacity(iterations);
    for it in 0..iterations {
        let batch = next_batch(it);
        let (loss, grads) = total_loss(&batch, volume, decoder, weights, true)?;
        if !loss.total.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: it });
        }
        trace.push(LossRecord { iteration: it, loss });
        if adam.lr == 0.0 {
            continue;
        }
        let grads = grads.expect("gradients requested");
        state.apply(adam, &grads, volume.features_mut(), decoder.params_mut());
    }
    Ok(trace)
}

/// CSV with header `frame,iteration,l1,l2,l3,total`.
pub fn loss_trace_csv(rows: &[(usize, LossRecord)]) -> String {
    let mut s = String::from("frame,iteration,l1,l2,l3,total\n");
    for (frame, r) in rows {
        let l = &r.loss;
        let _ = writeln!(s, "{frame},{},{},{},{},{}", r.iteration, l.l1, l.l2, l.l3, l.total);
    }
    s
}

pub fn write_loss_trace(path: &Path, rows: &[(usize, LossRecord)]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(loss_trace_csv(rows).as_bytes())?;
    Ok(())
}
