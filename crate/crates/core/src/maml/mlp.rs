//! Fully connected base model with hand-written forward, backward and
//! Hessian-vector passes.
//!
//! Layout of the flat parameter vector, layer by layer: the weight matrix
//! (`fan_out x fan_in`, row-major) followed by the bias vector. Hidden layers
//! use ReLU, the single output unit uses a sigmoid, and dropout (inverted
//! scaling) follows the first hidden layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{MamlError, Result};
use crate::dataset::Matrix;
use crate::gbdt::sigmoid;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]`.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpArchitecture {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub dropout_rate: f64,
}

/// Position of one dense layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSlot {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: usize,
    pub bias: usize,
}

impl MlpArchitecture {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, dropout_rate: f64) -> Result<Self> {
        let arch = Self { input_dim, hidden_dims, dropout_rate };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(MamlError::InvalidArchitecture(format!(
                "layer widths must be positive: input {} hidden {:?}",
                self.input_dim, self.hidden_dims
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(MamlError::InvalidArchitecture(format!(
                "dropout rate {} must lie in [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// `[input, hidden..., 1]`.
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut d = Vec::with_capacity(self.hidden_dims.len() + 2);
        d.push(self.input_dim);
        d.extend_from_slice(&self.hidden_dims);
        d.push(1);
        d
    }

    pub fn layers(&self) -> Vec<LayerSlot> {
        let dims = self.layer_dims();
        let mut off = 0;
        dims.windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let slot = LayerSlot { fan_in, fan_out, weights: off, bias: off + fan_in * fan_out };
                off += (fan_in + 1) * fan_out;
                slot
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    fn dropout_width(&self) -> Option<usize> {
        (self.dropout_rate > 0.0).then(|| self.hidden_dims.first().copied()).flatten()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub architecture: MlpArchitecture,
    pub values: Vec<f64>,
}

impl ModelParams {
    pub fn new(architecture: MlpArchitecture, values: Vec<f64>) -> Result<Self> {
        architecture.validate()?;
        if values.len() != architecture.param_count() {
            return Err(MamlError::LengthMismatch { expected: architecture.param_count(), found: values.len() });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(MamlError::NonFinite("parameters"));
        }
        Ok(Self { architecture, values })
    }

    pub fn zeros(architecture: MlpArchitecture) -> Self {
        let n = architecture.param_count();
        Self { architecture, values: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Glorot-uniform weights with bound `sqrt(6 / (fan_in + fan_out))`, zero biases.
pub fn init_params(arch: &MlpArchitecture, seed: u64) -> Result<ModelParams> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0.0; arch.param_count()];
    for slot in arch.layers() {
        let bound = (6.0 / (slot.fan_in + slot.fan_out) as f64).sqrt();
        for w in &mut values[slot.weights..slot.bias] {
            *w = rng.random_range(-bound..=bound);
        }
    }
    Ok(ModelParams { architecture: arch.clone(), values })
}

/// Per-unit multipliers for the first hidden layer: 0 for dropped units,
/// `1 / (1 - rate)` for kept ones.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    pub rows: usize,
    pub width: usize,
    pub scale: Vec<f64>,
}

impl DropoutMask {
    /// `None` when the architecture has no active dropout.
    pub fn sample(arch: &MlpArchitecture, rows: usize, seed: u64) -> Option<Self> {
        let width = arch.dropout_width()?;
        let keep = 1.0 - arch.dropout_rate;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = (0..rows * width)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        Some(Self { rows, width, scale })
    }

    /// Mask for a forward pass: sampled in training mode, absent otherwise.
    pub fn for_pass(arch: &MlpArchitecture, rows: usize, training: bool, seed: u64) -> Option<Self> {
        if training { Self::sample(arch, rows, seed) } else { None }
    }
}

/// Activations of a forward pass over a batch.
struct Trace {
    /// Input to each layer, flat `rows x fan_in`.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each layer, flat `rows x fan_out`.
    pre: Vec<Vec<f64>>,
}

impl Trace {
    fn logits(&self) -> &[f64] {
        self.pre.last().expect("at least one layer")
    }
}

fn check_input(params: &ModelParams, x: &Matrix) -> Result<()> {
    if x.cols() != params.architecture.input_dim {
        return Err(MamlError::DimensionMismatch { expected: params.architecture.input_dim, found: x.cols() });
    }
    Ok(())
}

fn check_mask(mask: Option<&DropoutMask>, rows: usize) -> Result<()> {
    match mask {
        Some(m) if m.rows != rows => Err(MamlError::LengthMismatch { expected: rows, found: m.rows }),
        _ => Ok(()),
    }
}

/// `out[r, o] = b[o] + sum_i w[o, i] * a[r, i]`
fn dense(a: &[f64], rows: usize, w: &[f64], b: Option<&[f64]>, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * fan_out];
    for r in 0..rows {
        let ar = &a[r * fan_in..(r + 1) * fan_in];
        for o in 0..fan_out {
            let wo = &w[o * fan_in..(o + 1) * fan_in];
            let dot: f64 = wo.iter().zip(ar).map(|(x, y)| x * y).sum();
            out[r * fan_out + o] = dot + b.map_or(0.0, |b| b[o]);
        }
    }
    out
}

/// `out[r, i] = sum_o w[o, i] * d[r, o]`
fn dense_transpose(d: &[f64], rows: usize, w: &[f64], fan_in: usize, fan_out: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * fan_in];
    for r in 0..rows {
        let outr = &mut out[r * fan_in..(r + 1) * fan_in];
        for o in 0..fan_out {
            let dro = d[r * fan_out + o];
            if dro == 0.0 {
                continue;
            }
            for (acc, wi) in outr.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                *acc += wi * dro;
            }
        }
    }
    out
}

/// Derivative of the post-activation (ReLU times dropout) w.r.t. the
/// pre-activation of hidden layer `layer`.
fn activation_gate(z: &[f64], layer: usize, mask: Option<&DropoutMask>) -> Vec<f64> {
    z.iter()
        .enumerate()
        .map(|(i, &v)| {
            let relu = if v > 0.0 { 1.0 } else { 0.0 };
            match (layer, mask) {
                (0, Some(m)) => relu * m.scale[i],
                _ => relu,
            }
        })
        .collect()
}

fn trace(params: &ModelParams, x: &Matrix, mask: Option<&DropoutMask>) -> Trace {
    let layers = params.architecture.layers();
    let rows = x.rows();
    let mut inputs = Vec::with_capacity(layers.len());
    let mut pre = Vec::with_capacity(layers.len());
    let mut a = x.as_slice().to_vec();
    for (k, s) in layers.iter().enumerate() {
        let w = &params.values[s.weights..s.bias];
        let b = &params.values[s.bias..s.bias + s.fan_out];
        let z = dense(&a, rows, w, Some(b), s.fan_in, s.fan_out);
        let next = if k + 1 < layers.len() {
            let gate = activation_gate(&z, k, mask);
            Some(z.iter().zip(&gate).map(|(v, g)| v.max(0.0) * g).collect::<Vec<_>>())
        } else {
            None
        };
        inputs.push(a);
        pre.push(z);
        match next {
            Some(n) => a = n,
            None => break,
        }
    }
    Trace { inputs, pre }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Per-row probabilities with an explicit dropout mask (or none).
pub fn forward_with_mask(params: &ModelParams, x: &Matrix, mask: Option<&DropoutMask>) -> Result<Vec<f64>> {
    check_input(params, x)?;
    check_mask(mask, x.rows())?;
    Ok(trace(params, x, mask).logits().iter().map(|&z| clamp_prob(sigmoid(z))).collect())
}

/// Per-row probabilities. Dropout is sampled from `dropout_seed` only when
/// `training` is set; inference is deterministic.
pub fn forward(params: &ModelParams, x: &Matrix, training: bool, dropout_seed: u64) -> Result<Vec<f64>> {
    let mask = DropoutMask::for_pass(&params.architecture, x.rows(), training, dropout_seed);
    forward_with_mask(params, x, mask.as_ref())
}

/// Mean binary cross-entropy with probabilities clamped to
/// `[PROB_EPS, 1 - PROB_EPS]`.
pub fn bce_loss(probs: &[f64], labels: &[u8]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(MamlError::LengthMismatch { expected: labels.len(), found: probs.len() });
    }
    if probs.is_empty() {
        return Err(MamlError::LengthMismatch { expected: 1, found: 0 });
    }
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &l)| {
            let p = clamp_prob(p);
            if l == 1 { -p.ln() } else { -(1.0 - p).ln() }
        })
        .sum();
    Ok(total / probs.len() as f64)
}

/// Loss, gradient and probabilities of one batch.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Gradient of mean BCE through the network. The output-unit delta is
/// `sigmoid(z) - label`, which is the gradient of the clamped loss wherever
/// the clamp is inactive and stays informative where it is not.
pub fn loss_and_gradient(
    params: &ModelParams,
    x: &Matrix,
    labels: &[u8],
    mask: Option<&DropoutMask>,
) -> Result<LossGrad> {
    check_input(params, x)?;
    check_mask(mask, x.rows())?;
    if labels.len() != x.rows() {
        return Err(MamlError::LengthMismatch { expected: x.rows(), found: labels.len() });
    }
    let rows = x.rows();
    let layers = params.architecture.layers();
    let tr = trace(params, x, mask);
    let raw: Vec<f64> = tr.logits().iter().map(|&z| sigmoid(z)).collect();
    let probs: Vec<f64> = raw.iter().map(|&p| clamp_prob(p)).collect();
    let loss = bce_loss(&probs, labels)?;

    let n = rows as f64;
    let mut delta: Vec<f64> = raw.iter().zip(labels).map(|(&p, &l)| (p - f64::from(l)) / n).collect();
    let mut grad = vec![0.0; params.len()];
    for k in (0..layers.len()).rev() {
        let s = layers[k];
        let a = &tr.inputs[k];
        accumulate_layer_grad(&mut grad, s, &delta, a, rows);
        if k > 0 {
            let w = &params.values[s.weights..s.bias];
            let back = dense_transpose(&delta, rows, w, s.fan_in, s.fan_out);
            let gate = activation_gate(&tr.pre[k - 1], k - 1, mask);
            delta = back.iter().zip(&gate).map(|(b, g)| b * g).collect();
        }
    }
    Ok(LossGrad { loss, grad, probs })
}

fn accumulate_layer_grad(grad: &mut [f64], s: LayerSlot, delta: &[f64], a: &[f64], rows: usize) {
    for r in 0..rows {
        let ar = &a[r * s.fan_in..(r + 1) * s.fan_in];
        for o in 0..s.fan_out {
            let d = delta[r * s.fan_out + o];
            if d == 0.0 {
                continue;
            }
            let gw = &mut grad[s.weights + o * s.fan_in..s.weights + (o + 1) * s.fan_in];
            for (g, ai) in gw.iter_mut().zip(ar) {
                *g += d * ai;
            }
            grad[s.bias + o] += d;
        }
    }
}

/// Gradient of mean BCE w.r.t. every parameter, in the flat layout.
pub fn backward(params: &ModelParams, x: &Matrix, labels: &[u8], mask: Option<&DropoutMask>) -> Result<Vec<f64>> {
    Ok(loss_and_gradient(params, x, labels, mask)?.grad)
}

/// Exact Hessian-vector product `H v` of mean BCE (R-operator pass). ReLU
/// second derivatives are zero almost everywhere.
pub fn hessian_vector_product(
    params: &ModelParams,
    x: &Matrix,
    labels: &[u8],
    mask: Option<&DropoutMask>,
    v: &[f64],
) -> Result<Vec<f64>> {
    check_input(params, x)?;
    check_mask(mask, x.rows())?;
    if labels.len() != x.rows() {
        return Err(MamlError::LengthMismatch { expected: x.rows(), found: labels.len() });
    }
    if v.len() != params.len() {
        return Err(MamlError::LengthMismatch { expected: params.len(), found: v.len() });
    }
    let rows = x.rows();
    let layers = params.architecture.layers();
    let tr = trace(params, x, mask);

    // forward R-pass: directional derivatives of each layer's input and pre-activation
    let mut r_inputs: Vec<Vec<f64>> = Vec::with_capacity(layers.len());
    let mut r_pre: Vec<Vec<f64>> = Vec::with_capacity(layers.len());
    let mut ra = vec![0.0; rows * params.architecture.input_dim];
    for (k, s) in layers.iter().enumerate() {
        let w = &params.values[s.weights..s.bias];
        let vw = &v[s.weights..s.bias];
        let vb = &v[s.bias..s.bias + s.fan_out];
        let from_w = dense(&tr.inputs[k], rows, vw, Some(vb), s.fan_in, s.fan_out);
        let from_a = dense(&ra, rows, w, None, s.fan_in, s.fan_out);
        let rz: Vec<f64> = from_w.iter().zip(&from_a).map(|(a, b)| a + b).collect();
        r_inputs.push(ra);
        if k + 1 < layers.len() {
            let gate = activation_gate(&tr.pre[k], k, mask);
            ra = rz.iter().zip(&gate).map(|(r, g)| r * g).collect();
        } else {
            ra = Vec::new();
        }
        r_pre.push(rz);
    }

    let n = rows as f64;
    let p: Vec<f64> = tr.logits().iter().map(|&z| sigmoid(z)).collect();
    let mut delta: Vec<f64> = p.iter().zip(labels).map(|(&p, &l)| (p - f64::from(l)) / n).collect();
    let last = r_pre.last().expect("at least one layer");
    let mut r_delta: Vec<f64> = p.iter().zip(last).map(|(&p, &rz)| p * (1.0 - p) * rz / n).collect();

    let mut hv = vec![0.0; params.len()];
    for k in (0..layers.len()).rev() {
        let s = layers[k];
        accumulate_layer_grad(&mut hv, s, &r_delta, &tr.inputs[k], rows);
        // delta * R(a) contributes to the weight part only
        for r in 0..rows {
            let ra = &r_inputs[k][r * s.fan_in..(r + 1) * s.fan_in];
            for o in 0..s.fan_out {
                let d = delta[r * s.fan_out + o];
                let gw = &mut hv[s.weights + o * s.fan_in..s.weights + (o + 1) * s.fan_in];
                for (g, x) in gw.iter_mut().zip(ra) {
                    *g += d * x;
                }
            }
        }
        if k > 0 {
            let w = &params.values[s.weights..s.bias];
            let vw = &v[s.weights..s.bias];
            let gate = activation_gate(&tr.pre[k - 1], k - 1, mask);
            let back = dense_transpose(&delta, rows, w, s.fan_in, s.fan_out);
            let r_back_v = dense_transpose(&delta, rows, vw, s.fan_in, s.fan_out);
            let r_back_d = dense_transpose(&r_delta, rows, w, s.fan_in, s.fan_out);
            r_delta = r_back_v.iter().zip(&r_back_d).zip(&gate).map(|((a, b), g)| (a + b) * g).collect();
            delta = back.iter().zip(&gate).map(|(b, g)| b * g).collect();
        }
    }
    Ok(hv)
}
