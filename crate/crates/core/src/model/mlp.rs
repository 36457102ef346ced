//! Minimal dense multi-layer perceptron with explicit forward traces and
//! hand-written backprop. ReLU on hidden layers, linear output, He-uniform
//! initialization. All math in f64; parameters live in flat row-major
//! vectors so optimizers and serializers can treat them uniformly.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// One dense layer: out = act(W·x + b), W row-major (out_dim × in_dim).
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
    pub relu: bool,
}

impl Layer {
    fn zeros(in_dim: usize, out_dim: usize, relu: bool) -> Self {
        Layer {
            w: vec![0.0; in_dim * out_dim],
            b: vec![0.0; out_dim],
            in_dim,
            out_dim,
            relu,
        }
    }

    fn he_uniform(in_dim: usize, out_dim: usize, relu: bool, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / in_dim as f64).sqrt();
        let w = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Layer {
            w,
            b: vec![0.0; out_dim],
            in_dim,
            out_dim,
            relu,
        }
    }
}

/// Feed-forward network; hidden layers use ReLU, the last layer is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Per-layer inputs and pre-activations captured during a forward pass.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    /// inputs[l] is the input vector of layer l.
    pub inputs: Vec<Vec<f64>>,
    /// preacts[l] is W·x + b of layer l, before the activation.
    pub preacts: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

impl MlpTrace {
    /// Post-activation output of layer `l` (equals the input of layer l+1).
    pub fn hidden(&self, l: usize) -> &[f64] {
        if l + 1 < self.inputs.len() {
            &self.inputs[l + 1]
        } else {
            &self.output
        }
    }

    /// Smallest |pre-activation| across ReLU layers; finite-difference
    /// gradient checks are invalid when this is within the probe step of a
    /// kink, so tests use it to resample such configurations.
    pub fn min_abs_relu_preact(&self, mlp: &Mlp) -> f64 {
        let mut min = f64::INFINITY;
        for (layer, preact) in mlp.layers.iter().zip(&self.preacts) {
            if layer.relu {
                for &z in preact {
                    min = min.min(z.abs());
                }
            }
        }
        min
    }
}

/// Gradient accumulator matching an [`Mlp`]'s shape.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrad {
    /// Per layer: (dL/dW, dL/db).
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl MlpGrad {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        MlpGrad {
            layers: mlp
                .layers
                .iter()
                .map(|l| (vec![0.0; l.w.len()], vec![0.0; l.b.len()]))
                .collect(),
        }
    }
}

impl Mlp {
    /// Builds a network mapping `input_dim` through the widths in `dims`;
    /// ReLU everywhere except the final layer.
    pub fn he_uniform(input_dim: usize, dims: &[usize], rng: &mut ChaCha8Rng) -> Result<Self> {
        Self::build(input_dim, dims, |i, o, relu| Layer::he_uniform(i, o, relu, rng))
    }

    /// All-zero parameters (useful for symmetry tests).
    pub fn zeros(input_dim: usize, dims: &[usize]) -> Result<Self> {
        Self::build(input_dim, dims, Layer::zeros)
    }

    fn build(
        input_dim: usize,
        dims: &[usize],
        mut make: impl FnMut(usize, usize, bool) -> Layer,
    ) -> Result<Self> {
        if input_dim == 0 || dims.is_empty() || dims.contains(&0) {
            return Err(Error::Config(format!(
                "invalid layer plan: input {input_dim}, widths {dims:?}"
            )));
        }
        let mut layers = Vec::with_capacity(dims.len());
        let mut in_dim = input_dim;
        for (idx, &out_dim) in dims.iter().enumerate() {
            let relu = idx + 1 < dims.len();
            layers.push(make(in_dim, out_dim, relu));
            in_dim = out_dim;
        }
        Ok(Mlp { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut current = x.to_vec();
        for layer in &self.layers {
            current = layer_forward(layer, &current);
        }
        current
    }

    pub fn forward_trace(&self, x: &[f64]) -> MlpTrace {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut preacts = Vec::with_capacity(self.layers.len());
        let mut current = x.to_vec();
        for layer in &self.layers {
            inputs.push(current.clone());
            let preact = affine(layer, &current);
            current = if layer.relu {
                preact.iter().map(|&z| z.max(0.0)).collect()
            } else {
                preact.clone()
            };
            preacts.push(preact);
        }
        MlpTrace {
            inputs,
            preacts,
            output: current,
        }
    }

    /// Accumulates parameter gradients (scaled by `scale`) into `grads` and
    /// returns dL/d(input), also scaled. `dl_dlast_hidden`, when given, is an
    /// extra gradient injected at the input of the final layer — used when a
    /// downstream consumer reads the last hidden layer directly.
    pub fn backward_into(
        &self,
        trace: &MlpTrace,
        dl_dout: &[f64],
        dl_dlast_hidden: Option<&[f64]>,
        grads: &mut MlpGrad,
        scale: f64,
    ) -> Vec<f64> {
        let mut upstream = dl_dout.to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            // ReLU derivative: pass where the pre-activation was positive.
            let g: Vec<f64> = if layer.relu {
                upstream
                    .iter()
                    .zip(&trace.preacts[l])
                    .map(|(&u, &z)| if z > 0.0 { u } else { 0.0 })
                    .collect()
            } else {
                upstream.clone()
            };
            let input = &trace.inputs[l];
            let (dw, db) = &mut grads.layers[l];
            let mut dl_dinput = vec![0.0; layer.in_dim];
            for o in 0..layer.out_dim {
                let go = g[o];
                db[o] += scale * go;
                let row = &layer.w[o * layer.in_dim..(o + 1) * layer.in_dim];
                let drow = &mut dw[o * layer.in_dim..(o + 1) * layer.in_dim];
                for i in 0..layer.in_dim {
                    drow[i] += scale * go * input[i];
                    dl_dinput[i] += go * row[i];
                }
            }
            upstream = dl_dinput;
            if l > 0 {
                if let (Some(extra), true) = (dl_dlast_hidden, l == self.layers.len() - 1) {
                    for (u, &e) in upstream.iter_mut().zip(extra) {
                        *u += e;
                    }
                }
            }
        }
        for u in upstream.iter_mut() {
            *u *= scale;
        }
        upstream
    }

    /// Flat views over every parameter array, in serialization order.
    pub fn param_arrays(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.push(layer.w.as_slice());
            out.push(layer.b.as_slice());
        }
        out
    }

    pub fn param_arrays_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            out.push(&mut layer.w);
            out.push(&mut layer.b);
        }
        out
    }
}

impl MlpGrad {
    pub fn arrays(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            out.push(w.as_slice());
            out.push(b.as_slice());
        }
        out
    }
}

fn affine(layer: &Layer, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(x.len(), layer.in_dim);
    let mut out = layer.b.clone();
    for o in 0..layer.out_dim {
        let row = &layer.w[o * layer.in_dim..(o + 1) * layer.in_dim];
        let mut acc = 0.0;
        for i in 0..layer.in_dim {
            acc += row[i] * x[i];
        }
        out[o] += acc;
    }
    out
}

fn layer_forward(layer: &Layer, x: &[f64]) -> Vec<f64> {
    let mut out = affine(layer, x);
    if layer.relu {
        for z in out.iter_mut() {
            *z = z.max(0.0);
        }
    }
    out
}
