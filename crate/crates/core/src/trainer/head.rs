//! MLP trunk plus a one-layer projection head.
//!
//! ```text
//! x ─ L1 ─ act ─ L2 ─ act ─ … ─ Ln ─▶ rep ─ P ─▶ proj
//! ```
//!
//! `rep` (the trunk output, no activation) is the representation used for
//! retrieval; `proj` only feeds the contrastive loss.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainError};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Affine layer `y = W x + b`, `W` stored row-major as `output × input`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub input: usize,
    pub output: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            input,
            output,
            weight: vec![0.0; input * output],
            bias: vec![0.0; output],
        }
    }

    fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.weight
                .chunks_exact(self.input)
                .zip(&self.bias)
                .map(|(row, &b)| {
                    row.iter()
                        .zip(x)
                        .map(|(&w, &xi)| f64::from(w) * xi)
                        .sum::<f64>()
                        + f64::from(b)
                }),
        );
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn is_finite(&self) -> bool {
        self.weight.iter().chain(&self.bias).all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub trunk: Vec<Dense>,
    pub projection: Dense,
    pub activation: Activation,
}

/// Per-layer inputs and pre-activations kept for backpropagation.
#[derive(Debug, Clone, Default)]
pub(crate) struct Trace {
    /// `inputs[l]` is the input of trunk layer `l`.
    pub inputs: Vec<Vec<f64>>,
    /// `pre[l]` is the affine output of trunk layer `l`.
    pub pre: Vec<Vec<f64>>,
    pub proj: Vec<f64>,
}

impl Trace {
    pub fn rep(&self) -> &[f64] {
        self.pre.last().expect("trunk has at least one layer")
    }
}

/// Builds a freshly initialised head: Gaussian weights with variance
/// `gain / fan_in` (gain 2 for ReLU, 1 otherwise) and zero biases.
pub fn init_head(config: &TrainConfig, input_dim: usize) -> Result<HeadParams, TrainError> {
    let dims = config.layer_dims(input_dim)?;
    let mut rng = seed::rng(seed::derive(config.seed, "init"));
    let gain = match config.activation {
        Activation::Relu => 2.0,
        Activation::Identity => 1.0,
    };
    let mut layer = |input: usize, output: usize, gain: f64| {
        let std = (gain / input as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite positive std");
        let mut d = Dense::zeros(input, output);
        for w in d.weight.iter_mut() {
            *w = normal.sample(&mut rng) as f32;
        }
        d
    };
    let trunk: Vec<Dense> = dims.windows(2).map(|w| layer(w[0], w[1], gain)).collect();
    let projection = layer(config.representation_dim, config.projection_dim, 1.0);
    let head = HeadParams {
        trunk,
        projection,
        activation: config.activation,
    };
    head.check_shapes()?;
    Ok(head)
}

impl HeadParams {
    pub fn input_dim(&self) -> usize {
        self.trunk[0].input
    }

    pub fn representation_dim(&self) -> usize {
        self.trunk.last().map(|l| l.output).unwrap_or(0)
    }

    pub fn projection_dim(&self) -> usize {
        self.projection.output
    }

    pub fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.trunk.iter().chain(std::iter::once(&self.projection))
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.trunk
            .iter_mut()
            .chain(std::iter::once(&mut self.projection))
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(Dense::param_count).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers().all(Dense::is_finite)
    }

    pub fn check_shapes(&self) -> Result<(), TrainError> {
        if self.trunk.is_empty() {
            return Err(TrainError::InvalidShape(
                "trunk needs at least one layer".into(),
            ));
        }
        let mut prev = self.trunk[0].input;
        for (i, l) in self.layers().enumerate() {
            if l.input != prev || l.input == 0 || l.output == 0 {
                return Err(TrainError::InvalidShape(format!(
                    "layer {i} is {}→{} after width {prev}",
                    l.input, l.output
                )));
            }
            if l.weight.len() != l.input * l.output || l.bias.len() != l.output {
                return Err(TrainError::InvalidShape(format!(
                    "layer {i} buffers do not match its shape"
                )));
            }
            prev = l.output;
        }
        Ok(())
    }

    fn check_input(&self, x: &[f32]) -> Result<(), TrainError> {
        if x.len() != self.input_dim() {
            return Err(TrainError::DimensionMismatch {
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    pub(crate) fn trace(&self, x: &[f32]) -> Trace {
        let mut t = Trace::default();
        let mut a: Vec<f64> = x.iter().map(|&v| f64::from(v)).collect();
        let last = self.trunk.len() - 1;
        for (l, layer) in self.trunk.iter().enumerate() {
            let mut z = Vec::with_capacity(layer.output);
            layer.forward(&a, &mut z);
            let next = if l < last {
                z.iter().map(|&v| self.activation.apply(v)).collect()
            } else {
                Vec::new()
            };
            t.inputs.push(std::mem::replace(&mut a, next));
            t.pre.push(z);
        }
        let mut proj = Vec::with_capacity(self.projection.output);
        self.projection.forward(t.rep(), &mut proj);
        t.proj = proj;
        t
    }

    /// Representation and projection of `x`.
    pub fn forward(&self, x: &[f32]) -> Result<(Vec<f32>, Vec<f32>), TrainError> {
        self.check_input(x)?;
        let t = self.trace(x);
        Ok((
            t.rep().iter().map(|&v| v as f32).collect(),
            t.proj.iter().map(|&v| v as f32).collect(),
        ))
    }

    /// Trunk output only; the projection layer is not evaluated.
    pub fn embed(&self, x: &[f32]) -> Result<Vec<f32>, TrainError> {
        self.check_input(x)?;
        let mut a: Vec<f64> = x.iter().map(|&v| f64::from(v)).collect();
        let mut z = Vec::new();
        let last = self.trunk.len() - 1;
        for (l, layer) in self.trunk.iter().enumerate() {
            layer.forward(&a, &mut z);
            if l < last {
                a.clear();
                a.extend(z.iter().map(|&v| self.activation.apply(v)));
            }
        }
        Ok(z.iter().map(|&v| v as f32).collect())
    }

    /// Accumulates the gradient of one sample into `grads`, given the loss
    /// gradient with respect to its projection.
    pub(crate) fn backward(&self, trace: &Trace, d_proj: &[f64], grads: &mut HeadGradients) {
        let p = &self.projection;
        let gp = &mut grads.projection;
        let rep = trace.rep();
        let mut d_rep = vec![0.0f64; p.input];
        for (o, &g) in d_proj.iter().enumerate() {
            gp.bias[o] += g;
            let row = &p.weight[o * p.input..(o + 1) * p.input];
            let grow = &mut gp.weight[o * p.input..(o + 1) * p.input];
            for i in 0..p.input {
                grow[i] += g * rep[i];
                d_rep[i] += f64::from(row[i]) * g;
            }
        }
        let mut dz = d_rep;
        for l in (0..self.trunk.len()).rev() {
            let layer = &self.trunk[l];
            let gl = &mut grads.trunk[l];
            let input = &trace.inputs[l];
            let mut d_in = vec![0.0f64; layer.input];
            for (o, &g) in dz.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                gl.bias[o] += g;
                let row = &layer.weight[o * layer.input..(o + 1) * layer.input];
                let grow = &mut gl.weight[o * layer.input..(o + 1) * layer.input];
                for i in 0..layer.input {
                    grow[i] += g * input[i];
                    d_in[i] += f64::from(row[i]) * g;
                }
            }
            if l > 0 {
                let pre = &trace.pre[l - 1];
                for (d, &z) in d_in.iter_mut().zip(pre) {
                    *d *= self.activation.derivative(z);
                }
            }
            dz = d_in;
        }
    }

    /// `w ← w − lr · g` for every parameter.
    pub(crate) fn apply_step(&mut self, grads: &HeadGradients, lr: f64) {
        for (layer, g) in self.layers_mut().zip(grads.layers()) {
            for (w, &gw) in layer.weight.iter_mut().zip(&g.weight) {
                *w = (f64::from(*w) - lr * gw) as f32;
            }
            for (b, &gb) in layer.bias.iter_mut().zip(&g.bias) {
                *b = (f64::from(*b) - lr * gb) as f32;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradients {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Gradients mirroring the layout of [`HeadParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradients {
    pub trunk: Vec<LayerGradients>,
    pub projection: LayerGradients,
}

impl HeadGradients {
    pub fn zeros_like(head: &HeadParams) -> Self {
        let z = |l: &Dense| LayerGradients {
            weight: vec![0.0; l.weight.len()],
            bias: vec![0.0; l.bias.len()],
        };
        Self {
            trunk: head.trunk.iter().map(z).collect(),
            projection: z(&head.projection),
        }
    }

    pub fn layers(&self) -> impl Iterator<Item = &LayerGradients> {
        self.trunk.iter().chain(std::iter::once(&self.projection))
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut LayerGradients> {
        self.trunk
            .iter_mut()
            .chain(std::iter::once(&mut self.projection))
    }

    /// All entries flattened in checkpoint order (per layer: weights, then biases).
    pub fn flatten(&self) -> Vec<f64> {
        self.layers()
            .flat_map(|l| l.weight.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn scale(&mut self, s: f64) {
        for l in self.layers_mut() {
            l.weight
                .iter_mut()
                .chain(l.bias.iter_mut())
                .for_each(|x| *x *= s);
        }
    }

    /// `self += s · other`.
    pub fn add_scaled(&mut self, other: &Self, s: f64) {
        for (a, b) in self.layers_mut().zip(other.layers()) {
            a.weight
                .iter_mut()
                .zip(&b.weight)
                .for_each(|(x, y)| *x += s * y);
            a.bias
                .iter_mut()
                .zip(&b.bias)
                .for_each(|(x, y)| *x += s * y);
        }
    }

    pub fn norm(&self) -> f64 {
        self.flatten().iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.layers()
            .all(|l| l.weight.iter().chain(&l.bias).all(|x| x.is_finite()))
    }
}
