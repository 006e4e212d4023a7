//! Dense feedforward networks with tanh activations, hand-written
//! reverse-mode gradients, parameter flattening, and the Adam optimizer.

use crate::error::{Result, SigflowError};
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;

/// Parameters of a multilayer perceptron. Layout per layer: weight matrix
/// (out x in, row-major) then bias vector. Hidden layers use tanh; the final
/// affine layer optionally applies tanh too.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub sizes: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub final_tanh: bool,
}

impl MlpParams {
    pub fn zeros(sizes: &[usize], final_tanh: bool) -> Self {
        assert!(sizes.len() >= 2);
        let weights = sizes
            .windows(2)
            .map(|w| vec![0.0; w[0] * w[1]])
            .collect();
        let biases = sizes[1..].iter().map(|&n| vec![0.0; n]).collect();
        MlpParams {
            sizes: sizes.to_vec(),
            weights,
            biases,
            final_tanh,
        }
    }

    pub fn input_size(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    /// Layer-major flattening: (w, b) per layer, in order.
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
    }

    pub fn unflatten_from(&mut self, flat: &[f64], cursor: &mut usize) {
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let wn = w.len();
            w.copy_from_slice(&flat[*cursor..*cursor + wn]);
            *cursor += wn;
            let bn = b.len();
            b.copy_from_slice(&flat[*cursor..*cursor + bn]);
            *cursor += bn;
        }
    }
}

/// Weights ~ Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)), biases zero,
/// fully determined by the seed.
pub fn init_params(sizes: &[usize], final_tanh: bool, seed: u64) -> MlpParams {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut p = MlpParams::zeros(sizes, final_tanh);
    for (layer, w) in p.weights.iter_mut().enumerate() {
        let bound = 1.0 / (sizes[layer] as f64).sqrt();
        for x in w.iter_mut() {
            *x = rng.gen_range(-bound..bound);
        }
    }
    p
}

/// Per-layer records needed by the backward pass: the input to each layer
/// and each layer's post-activation output.
#[derive(Debug, Clone)]
pub struct MlpTape {
    /// activations[0] is the network input; activations[i] the output of
    /// layer i-1 (post-tanh where applicable).
    pub activations: Vec<Vec<f64>>,
}

impl MlpTape {
    pub fn byte_size(&self) -> usize {
        self.activations.iter().map(|a| a.len() * 8).sum()
    }
}

pub fn mlp_forward(p: &MlpParams, input: &[f64]) -> Result<(Vec<f64>, MlpTape)> {
    if input.len() != p.input_size() {
        return Err(SigflowError::Shape(format!(
            "mlp input length {} != {}",
            input.len(),
            p.input_size()
        )));
    }
    let n_layers = p.weights.len();
    let mut activations = Vec::with_capacity(n_layers + 1);
    activations.push(input.to_vec());
    let mut cur = input.to_vec();
    for l in 0..n_layers {
        let (n_in, n_out) = (p.sizes[l], p.sizes[l + 1]);
        let w = &p.weights[l];
        let mut next = p.biases[l].clone();
        for o in 0..n_out {
            let row = &w[o * n_in..(o + 1) * n_in];
            let mut acc = 0.0;
            for (x, wv) in cur.iter().zip(row) {
                acc += x * wv;
            }
            next[o] += acc;
        }
        let is_last = l == n_layers - 1;
        if !is_last || p.final_tanh {
            for v in next.iter_mut() {
                *v = v.tanh();
            }
        }
        activations.push(next.clone());
        cur = next;
    }
    let out = cur;
    Ok((out, MlpTape { activations }))
}

/// Exact reverse-mode gradients of `mlp_forward`. Returns the cotangent on
/// the input and the gradient accumulated into `param_grad` (same layout as
/// the flattened parameters of `p`, length `p.param_count()`).
pub fn mlp_backward(
    p: &MlpParams,
    tape: &MlpTape,
    output_cotangent: &[f64],
    param_grad: &mut [f64],
) -> Result<Vec<f64>> {
    let n_layers = p.weights.len();
    if tape.activations.len() != n_layers + 1 {
        return Err(SigflowError::Shape("tape does not match network".into()));
    }
    if output_cotangent.len() != p.output_size() || param_grad.len() != p.param_count() {
        return Err(SigflowError::Shape("cotangent/gradient length mismatch".into()));
    }
    // offsets of each layer's (w, b) in the flat gradient
    let mut offsets = Vec::with_capacity(n_layers);
    let mut off = 0;
    for l in 0..n_layers {
        offsets.push(off);
        off += p.sizes[l] * p.sizes[l + 1] + p.sizes[l + 1];
    }

    let mut delta = output_cotangent.to_vec();
    for l in (0..n_layers).rev() {
        let (n_in, n_out) = (p.sizes[l], p.sizes[l + 1]);
        let is_last = l == n_layers - 1;
        let out_act = &tape.activations[l + 1];
        if !is_last || p.final_tanh {
            // activations store tanh(pre); d tanh = 1 - tanh^2
            for (dv, &a) in delta.iter_mut().zip(out_act) {
                *dv *= 1.0 - a * a;
            }
        }
        let input = &tape.activations[l];
        let w_off = offsets[l];
        let b_off = w_off + n_in * n_out;
        let w = &p.weights[l];
        let mut dinput = vec![0.0f64; n_in];
        for o in 0..n_out {
            let g = delta[o];
            param_grad[b_off + o] += g;
            let row = &w[o * n_in..(o + 1) * n_in];
            let grow = &mut param_grad[w_off + o * n_in..w_off + (o + 1) * n_in];
            for i in 0..n_in {
                grow[i] += g * input[i];
                dinput[i] += g * row[i];
            }
        }
        delta = dinput;
    }
    Ok(delta)
}

/// Bias-corrected Adam state over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(n_params: usize, learning_rate: f64) -> Self {
        AdamState {
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

pub fn adam_step(state: &mut AdamState, params: &mut [f64], grad: &[f64]) -> Result<()> {
    if params.len() != grad.len() || params.len() != state.m.len() {
        return Err(SigflowError::Shape("adam length mismatch".into()));
    }
    if !grad.iter().all(|g| g.is_finite()) {
        return Err(SigflowError::Numerical("non-finite gradient in adam step".into()));
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    for i in 0..params.len() {
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grad[i];
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grad[i] * grad[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    Ok(())
}
