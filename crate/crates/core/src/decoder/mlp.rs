//! The 12 -> 32 -> 32 -> 1 ReLU decoder with hand-written backpropagation.
//!
//! Parameters live in one flat `f32` buffer so the optimizer can treat them as
//! a single slice. Layout (row-major weights, `out x in`):
//!
//! | block | offset | len  |
//! |-------|--------|------|
//! | W1    | 0      | 384  |
//! | b1    | 384    | 32   |
//! | W2    | 416    | 1024 |
//! | b2    | 1440   | 32   |
//! | w3    | 1472   | 32   |
//! | b3    | 1504   | 1    |

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::octree::{FeatureVector, FEATURE_DIM};

pub const HIDDEN: usize = 32;
pub const LAYER_WIDTHS: [usize; 4] = [FEATURE_DIM, HIDDEN, HIDDEN, 1];

const W1: usize = 0;
const B1: usize = W1 + HIDDEN * FEATURE_DIM;
const W2: usize = B1 + HIDDEN;
const B2: usize = W2 + HIDDEN * HIDDEN;
const W3: usize = B2 + HIDDEN;
const B3: usize = W3 + HIDDEN;
pub const PARAM_COUNT: usize = B3 + 1;

#[derive(Debug, Clone, PartialEq)]
pub struct SdfDecoder {
    params: Vec<f32>,
}

/// Activations kept from a forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    pub input: FeatureVector,
    pub a1: [f32; HIDDEN],
    pub a2: [f32; HIDDEN],
    pub output: f32,
}

/// Backpropagated sensitivities of the output with respect to the hidden
/// pre-activations (`hidden1`, `hidden2`) and the input (`input`).
#[derive(Debug, Clone)]
pub struct Sensitivity {
    pub input: FeatureVector,
    pub hidden1: [f32; HIDDEN],
    pub hidden2: [f32; HIDDEN],
}

impl SdfDecoder {
    /// Kaiming-normal hidden layers, zero biases, zero output layer.
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0f32; PARAM_COUNT];
        let n1 = Normal::new(0.0f32, (2.0 / FEATURE_DIM as f32).sqrt()).expect("valid std");
        for w in &mut params[W1..B1] {
            *w = n1.sample(&mut rng);
        }
        let n2 = Normal::new(0.0f32, (2.0 / HIDDEN as f32).sqrt()).expect("valid std");
        for w in &mut params[W2..B2] {
            *w = n2.sample(&mut rng);
        }
        Self { params }
    }

    pub fn zeros() -> Self {
        Self {
            params: vec![0.0; PARAM_COUNT],
        }
    }

    pub fn from_params(params: Vec<f32>) -> Result<Self> {
        if params.len() != PARAM_COUNT {
            return Err(Error::InvalidParameter(format!(
                "decoder expects {PARAM_COUNT} parameters, got {}",
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("decoder parameters must be finite".into()));
        }
        Ok(Self { params })
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    /// Weight matrix (row-major) and bias of layer `i` (0-based).
    pub fn layer(&self, i: usize) -> (&[f32], &[f32]) {
        let (w, b, end) = match i {
            0 => (W1, B1, W2),
            1 => (W2, B2, W3),
            2 => (W3, B3, PARAM_COUNT),
            _ => panic!("decoder has 3 layers"),
        };
        (&self.params[w..b], &self.params[b..end])
    }

    pub fn decode(&self, x: &FeatureVector) -> f32 {
        self.forward(x).output
    }

    pub fn forward(&self, x: &FeatureVector) -> Trace {
        let p = &self.params;
        let mut a1 = [0f32; HIDDEN];
        for (j, a) in a1.iter_mut().enumerate() {
            let row = &p[W1 + j * FEATURE_DIM..W1 + (j + 1) * FEATURE_DIM];
            let z = p[B1 + j] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f32>();
            *a = z.max(0.0);
        }
        let mut a2 = [0f32; HIDDEN];
        for (j, a) in a2.iter_mut().enumerate() {
            let row = &p[W2 + j * HIDDEN..W2 + (j + 1) * HIDDEN];
            let z = p[B2 + j] + row.iter().zip(&a1).map(|(w, v)| w * v).sum::<f32>();
            *a = z.max(0.0);
        }
        let output = p[B3] + p[W3..B3].iter().zip(&a2).map(|(w, v)| w * v).sum::<f32>();
        Trace {
            input: *x,
            a1,
            a2,
            output,
        }
    }

    /// Derivative of the output with respect to the input and hidden layers.
    /// Inactive ReLU units (zero activation) pass no gradient.
    pub fn sensitivity(&self, trace: &Trace) -> Sensitivity {
        let p = &self.params;
        let mut hidden2 = [0f32; HIDDEN];
        for j in 0..HIDDEN {
            if trace.a2[j] > 0.0 {
                hidden2[j] = p[W3 + j];
            }
        }
        let mut hidden1 = [0f32; HIDDEN];
        for (k, h) in hidden1.iter_mut().enumerate() {
            if trace.a1[k] > 0.0 {
                *h = (0..HIDDEN).map(|j| p[W2 + j * HIDDEN + k] * hidden2[j]).sum();
            }
        }
        let mut input = [0f32; FEATURE_DIM];
        for (i, g) in input.iter_mut().enumerate() {
            *g = (0..HIDDEN).map(|k| p[W1 + k * FEATURE_DIM + i] * hidden1[k]).sum();
        }
        Sensitivity {
            input,
            hidden1,
            hidden2,
        }
    }

    /// Accumulates into `grads` the parameter gradient of
    /// `upstream * output + direction . d(output)/d(input)`.
    ///
    /// The second term is what losses on the spatial SDF gradient need: with
    /// the ReLU masks fixed, `d(output)/d(input)` is linear in the weights, so
    /// its derivative follows from one forward tangent pass along `direction`.
    pub fn accumulate_param_grads(
        &self,
        trace: &Trace,
        sens: &Sensitivity,
        upstream: f32,
        direction: Option<&FeatureVector>,
        grads: &mut [f32],
    ) {
        debug_assert_eq!(grads.len(), PARAM_COUNT);
        let p = &self.params;

        // Tangent activations along `direction` (zero when absent).
        let mut t1 = [0f32; HIDDEN];
        let mut t2 = [0f32; HIDDEN];
        if let Some(v) = direction {
            for (j, t) in t1.iter_mut().enumerate() {
                if trace.a1[j] > 0.0 {
                    let row = &p[W1 + j * FEATURE_DIM..W1 + (j + 1) * FEATURE_DIM];
                    *t = row.iter().zip(v).map(|(w, x)| w * x).sum();
                }
            }
            for (j, t) in t2.iter_mut().enumerate() {
                if trace.a2[j] > 0.0 {
                    let row = &p[W2 + j * HIDDEN..W2 + (j + 1) * HIDDEN];
                    *t = row.iter().zip(&t1).map(|(w, x)| w * x).sum();
                }
            }
        }

        for k in 0..HIDDEN {
            let s = sens.hidden1[k];
            if s == 0.0 {
                continue;
            }
            let row = &mut grads[W1 + k * FEATURE_DIM..W1 + (k + 1) * FEATURE_DIM];
            match direction {
                Some(v) => {
                    for i in 0..FEATURE_DIM {
                        row[i] += s * (upstream * trace.input[i] + v[i]);
                    }
                }
                None => {
                    for i in 0..FEATURE_DIM {
                        row[i] += s * upstream * trace.input[i];
                    }
                }
            }
            grads[B1 + k] += upstream * s;
        }
        for j in 0..HIDDEN {
            let s = sens.hidden2[j];
            if s == 0.0 {
                continue;
            }
            let row = &mut grads[W2 + j * HIDDEN..W2 + (j + 1) * HIDDEN];
            for k in 0..HIDDEN {
                row[k] += s * (upstream * trace.a1[k] + t1[k]);
            }
            grads[B2 + j] += upstream * s;
        }
        for j in 0..HIDDEN {
            grads[W3 + j] += upstream * trace.a2[j] + t2[j];
        }
        grads[B3] += upstream;
    }

    /// Product of the layers' Frobenius norms; bounds `|output - b3|` by this
    /// times the input norm when hidden biases are zero, and in general
    /// `|output| <= |b3| + ||w3|| (||b2|| + ||W2|| (||b1|| + ||W1|| ||x||))`.
    pub fn output_bound(&self, x: &FeatureVector) -> f64 {
        let norm = |s: &[f32]| s.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        let xn = norm(x);
        let p = &self.params;
        let h1 = norm(&p[B1..W2]) + norm(&p[W1..B1]) * xn;
        let h2 = norm(&p[B2..W3]) + norm(&p[W2..B2]) * h1;
        (p[B3] as f64).abs() + norm(&p[W3..B3]) * h2
    }
}
