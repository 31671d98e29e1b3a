//! Minimal layer kit on top of `candle-core`: a named parameter store,
//! convolutions with causal time padding, normalization, recurrent and
//! attention layers, and an Adam optimizer.
//!
//! Activations use the layout `[batch, channels, time, freq]` for 2-D layers
//! and `[batch, time, features]` for sequence layers.

mod fused;
mod im2col;
mod layers;
mod optim;

pub use im2col::{conv2d_im2col, Im2Col};
pub use layers::*;
pub use optim::{clip_grad_norm, Adam};

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{PseError, Result};

/// Whether normalization layers use batch statistics (and update their
/// running estimates) or frozen running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

/// Named trainable parameters plus non-trainable buffers, in creation order.
pub struct VarStore {
    params: Vec<(String, Var)>,
    buffers: Vec<(String, Var)>,
    rng: ChaCha8Rng,
    device: Device,
}

impl VarStore {
    pub fn new(seed: u64) -> Self {
        Self { params: Vec::new(), buffers: Vec::new(), rng: ChaCha8Rng::seed_from_u64(seed), device: Device::Cpu }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = if bound > 0.0 {
            let dist = Uniform::new_inclusive(-bound, bound).map_err(|e| PseError::Config(e.to_string()))?;
            (0..n).map(|_| dist.sample(&mut self.rng) as f32).collect()
        } else {
            vec![0.0; n]
        };
        self.param_from(name, data, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f32) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.param_from(name, vec![value; n], shape)
    }

    fn param_from(&mut self, name: &str, data: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        let var = Var::from_tensor(&Tensor::from_vec(data, shape, &self.device)?)?;
        let t = var.as_tensor().clone();
        self.params.push((name.to_string(), var));
        Ok(t)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f32) -> Result<Var> {
        let var = Var::from_tensor(&Tensor::full(value, shape, &self.device)?)?;
        self.buffers.push((name.to_string(), var.clone()));
        Ok(var)
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn buffers(&self) -> &[(String, Var)] {
        &self.buffers
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Flattened copies of every parameter and buffer, keyed by name.
    pub fn export(&self) -> Result<Vec<NamedArray>> {
        self.params
            .iter()
            .chain(&self.buffers)
            .map(|(name, v)| {
                Ok(NamedArray {
                    name: name.clone(),
                    shape: v.dims().to_vec(),
                    data: v.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?,
                })
            })
            .collect()
    }

    /// Overwrites parameters and buffers from `arrays`; every name must be
    /// present with a matching shape.
    pub fn import(&self, arrays: &[NamedArray]) -> Result<()> {
        let lookup: std::collections::HashMap<&str, &NamedArray> = arrays.iter().map(|a| (a.name.as_str(), a)).collect();
        for (name, var) in self.params.iter().chain(&self.buffers) {
            let arr = lookup
                .get(name.as_str())
                .ok_or_else(|| PseError::Checkpoint(format!("missing tensor {name}")))?;
            if arr.shape != var.dims() {
                return Err(PseError::Checkpoint(format!("tensor {name}: shape {:?} vs {:?}", arr.shape, var.dims())));
            }
            var.set(&Tensor::from_vec(arr.data.clone(), arr.shape.as_slice(), &self.device)?)?;
        }
        if lookup.len() != self.params.len() + self.buffers.len() {
            return Err(PseError::Checkpoint("checkpoint holds tensors the model does not define".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[cfg(test)]
mod tests;
