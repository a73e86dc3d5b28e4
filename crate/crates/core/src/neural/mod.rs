//! Dense feedforward networks with hand-written backpropagation.
//!
//! Hidden layers use SiLU (`z · sigmoid(z)`), the output layer is affine. A
//! corrector's scalar output is clamped from below at [`RESIDUAL_FLOOR`] so
//! that `1 + r` stays positive.

mod adam;
mod checkpoint;
mod models;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{gemm, Mat64, MatRef, Rng, Vec64};

pub use adam::{adam_step, AdamState, DEFAULT_LEARNING_RATE};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RunMeta, CHECKPOINT_VERSION};
pub use models::{
    Corrector, Denoiser, EpsilonModel, Preconditioner, ResidualModel, HIDDEN_WIDTH,
};

pub const RESIDUAL_FLOOR: f64 = -0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Denoiser,
    Corrector,
}

impl Role {
    pub fn code(self) -> u8 {
        match self {
            Role::Denoiser => 0,
            Role::Corrector => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Role::Denoiser),
            1 => Some(Role::Corrector),
            _ => None,
        }
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[inline]
fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

#[inline]
fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

/// Affine layer: `weight` is `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Mat64,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Mat64::zeros(output, input),
            bias: vec![0.0; output],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Parameter-shaped container: network weights, gradients and Adam moments
/// all use it.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn zeros_like(net: &MlpNet) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| Layer::zeros(l.input_dim(), l.output_dim()))
                .collect(),
        }
    }

    pub fn tensors(&self) -> impl Iterator<Item = &[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors_mut().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors().flat_map(|t| t.iter().copied()).collect()
    }

    pub fn is_zero(&self) -> bool {
        self.tensors().all(|t| t.iter().all(|&v| v == 0.0))
    }
}

/// Activations saved by [`MlpNet::forward_cached`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Mat64>,
    pre_activations: Vec<Mat64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpNet {
    role: Role,
    layers: Vec<Layer>,
}

impl MlpNet {
    fn check_dims(role: Role, dims: &[usize]) -> Result<()> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::ShapeMismatch(format!("invalid layer dims {dims:?}")));
        }
        let (input, output) = (dims[0], dims[dims.len() - 1]);
        let ok = match role {
            Role::Denoiser => output + 1 == input,
            Role::Corrector => output == 1,
        };
        if !ok {
            return Err(Error::ShapeMismatch(format!(
                "{role:?} net cannot have dims {dims:?}"
            )));
        }
        Ok(())
    }

    pub fn zeros(role: Role, dims: &[usize]) -> Result<Self> {
        Self::check_dims(role, dims)?;
        let layers = dims.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect();
        Ok(Self { role, layers })
    }

    /// Uniform `U(-1/√fan_in, 1/√fan_in)` for weights and biases, drawn
    /// layer by layer (weights row-major, then biases).
    pub fn init(role: Role, dims: &[usize], rng: &mut Rng) -> Result<Self> {
        let mut net = Self::zeros(role, dims)?;
        for layer in &mut net.layers {
            let bound = 1.0 / (layer.input_dim() as f64).sqrt();
            for w in layer.weight.as_mut_slice() {
                *w = rng.uniform_range(-bound, bound);
            }
            for b in &mut layer.bias {
                *b = rng.uniform_range(-bound, bound);
            }
        }
        Ok(net)
    }

    pub fn from_layers(role: Role, layers: Vec<Layer>) -> Result<Self> {
        let mut dims: Vec<usize> = layers.iter().map(Layer::input_dim).collect();
        dims.push(layers.last().map_or(0, Layer::output_dim));
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.output_dim() || (i > 0 && layers[i - 1].output_dim() != l.input_dim()) {
                return Err(Error::ShapeMismatch(format!("layer {i} is inconsistent")));
            }
        }
        Self::check_dims(role, &dims)?;
        Ok(Self { role, layers })
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims: Vec<usize> = self.layers.iter().map(Layer::input_dim).collect();
        dims.push(self.output_dim());
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.len())
            .sum()
    }

    pub fn tensors(&self) -> impl Iterator<Item = &[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
    }

    fn clamps_output(&self) -> bool {
        self.role == Role::Corrector
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec64> {
        let x = Mat64::from_vec(1, input.len(), input.to_vec())?;
        Ok(Vec64::from(self.forward_batch(&x)?.into_vec()))
    }

    /// Row-wise forward pass over a `batch × input_dim` matrix.
    pub fn forward_batch(&self, x: &Mat64) -> Result<Mat64> {
        Ok(self.forward_cached(x.clone())?.0)
    }

    pub fn forward_cached(&self, x: Mat64) -> Result<(Mat64, ForwardCache)> {
        if x.cols() != self.input_dim() {
            return Err(Error::DimMismatch {
                expected: self.input_dim(),
                actual: x.cols(),
            });
        }
        let batch = x.rows();
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut current = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = Mat64::zeros(batch, layer.output_dim());
            for r in 0..batch {
                z.row_mut(r).copy_from_slice(&layer.bias);
            }
            gemm(
                1.0,
                MatRef::normal(&current),
                MatRef::transposed(&layer.weight),
                1.0,
                &mut z,
            );
            let mut a = z.clone();
            if i < last {
                a.as_mut_slice().iter_mut().for_each(|v| *v = silu(*v));
            } else if self.clamps_output() {
                a.as_mut_slice()
                    .iter_mut()
                    .for_each(|v| *v = v.max(RESIDUAL_FLOOR));
            }
            inputs.push(current);
            pre_activations.push(z);
            current = a;
        }
        Ok((
            current,
            ForwardCache {
                inputs,
                pre_activations,
            },
        ))
    }

    /// Gradients of `Σ_rows ⟨upstream_row, output_row⟩` with respect to every
    /// parameter.
    pub fn backward_cached(&self, cache: &ForwardCache, upstream: &Mat64) -> Result<Gradients> {
        let last = self.layers.len() - 1;
        let out_z = &cache.pre_activations[last];
        if upstream.shape() != out_z.shape() {
            return Err(Error::DimMismatch {
                expected: out_z.as_slice().len(),
                actual: upstream.as_slice().len(),
            });
        }
        let mut grads = Gradients::zeros_like(self);
        let mut delta = upstream.clone();
        if self.clamps_output() {
            for (d, z) in delta.as_mut_slice().iter_mut().zip(out_z.as_slice()) {
                if *z < RESIDUAL_FLOOR {
                    *d = 0.0;
                }
            }
        }
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let g = &mut grads.layers[i];
            gemm(
                1.0,
                MatRef::transposed(&delta),
                MatRef::normal(&cache.inputs[i]),
                0.0,
                &mut g.weight,
            );
            for r in 0..delta.rows() {
                for (b, d) in g.bias.iter_mut().zip(delta.row(r)) {
                    *b += d;
                }
            }
            if i == 0 {
                break;
            }
            let mut prev = Mat64::zeros(delta.rows(), layer.input_dim());
            gemm(
                1.0,
                MatRef::normal(&delta),
                MatRef::normal(&layer.weight),
                0.0,
                &mut prev,
            );
            for (p, z) in prev
                .as_mut_slice()
                .iter_mut()
                .zip(cache.pre_activations[i - 1].as_slice())
            {
                *p *= silu_grad(*z);
            }
            delta = prev;
        }
        Ok(grads)
    }

    pub fn backward(&self, input: &[f64], upstream_grad: &[f64]) -> Result<Gradients> {
        let x = Mat64::from_vec(1, input.len(), input.to_vec())?;
        let (_, cache) = self.forward_cached(x)?;
        if upstream_grad.len() != self.output_dim() {
            return Err(Error::DimMismatch {
                expected: self.output_dim(),
                actual: upstream_grad.len(),
            });
        }
        let up = Mat64::from_vec(1, upstream_grad.len(), upstream_grad.to_vec())?;
        self.backward_cached(&cache, &up)
    }
}
