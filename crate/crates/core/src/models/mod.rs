//! Causal, d-vector conditioned complex ratio mask estimators.

mod pdcattunet;
mod pdccrn;

pub use pdcattunet::{BottleneckBlock, AttentionConvBlock, BlockKind, Pdcattunet, PdcattunetConfig};
pub use pdccrn::{complex_lstm, Pdccrn, PdccrnConfig};

use std::sync::Mutex;

use candle_core::{Tensor, Var};
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dsp::{apply_complex_mask, istft, stft, ComplexMask, ComplexSpectrogram, FeatureNorm, StftConfig, Waveform};
use crate::embedding::DVector;
use crate::error::{PseError, Result};
use crate::nn::{Mode, VarStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    Pdccrn(PdccrnConfig),
    Pdcattunet(PdcattunetConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Layer sizes as published.
    Paper,
    /// Quartered filters and two fewer encoder/decoder stages, for fast runs.
    Small,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Pdccrn,
    Pdcattunet,
}

impl ModelConfig {
    pub fn preset(kind: ModelKind, preset: Preset) -> Self {
        match (kind, preset) {
            (ModelKind::Pdccrn, Preset::Paper) => ModelConfig::Pdccrn(PdccrnConfig::default()),
            (ModelKind::Pdccrn, Preset::Small) => ModelConfig::Pdccrn(PdccrnConfig::small()),
            (ModelKind::Pdcattunet, Preset::Paper) => ModelConfig::Pdcattunet(PdcattunetConfig::default()),
            (ModelKind::Pdcattunet, Preset::Small) => ModelConfig::Pdcattunet(PdcattunetConfig::small()),
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            ModelConfig::Pdccrn(_) => ModelKind::Pdccrn,
            ModelConfig::Pdcattunet(_) => ModelKind::Pdcattunet,
        }
    }

    pub fn dvector_dim(&self) -> usize {
        match self {
            ModelConfig::Pdccrn(c) => c.dvector_dim,
            ModelConfig::Pdcattunet(c) => c.dvector_dim,
        }
    }

    pub fn bins(&self) -> usize {
        match self {
            ModelConfig::Pdccrn(c) => c.bins,
            ModelConfig::Pdcattunet(c) => c.bins,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelConfig::Pdccrn(c) => c.validate(),
            ModelConfig::Pdcattunet(c) => c.validate(),
        }
    }
}

/// Anything that maps a noisy spectrogram and a d-vector to a complex mask.
pub trait PseModel {
    fn predict_mask(&self, noisy: &ComplexSpectrogram, d: &DVector) -> Result<ComplexMask>;
}

/// A mask head pinned to a constant; `1 + 0j` makes enhancement a pure
/// STFT round trip.
#[derive(Debug, Clone, Copy)]
pub struct ConstantMask(pub Complex64);

impl ConstantMask {
    pub fn identity() -> Self {
        Self(Complex64::new(1.0, 0.0))
    }
}

impl PseModel for ConstantMask {
    fn predict_mask(&self, noisy: &ComplexSpectrogram, _d: &DVector) -> Result<ComplexMask> {
        Ok(ComplexMask::constant(noisy.frames, noisy.bins, self.0))
    }
}

enum Network {
    Pdccrn(Pdccrn),
    Pdcattunet(Pdcattunet),
}

/// A trainable mask estimator together with its parameters, the running
/// statistics of its input normalization and the STFT it expects.
pub struct PseNetwork {
    pub config: ModelConfig,
    pub stft: StftConfig,
    vs: VarStore,
    input_norm: Mutex<FeatureNorm>,
    net: Network,
}

impl PseNetwork {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let stft = StftConfig::default();
        if stft.num_bins() != config.bins() {
            return Err(PseError::Config(format!(
                "model expects {} bins but the STFT yields {}",
                config.bins(),
                stft.num_bins()
            )));
        }
        let mut vs = VarStore::new(seed);
        let net = match config {
            ModelConfig::Pdccrn(c) => Network::Pdccrn(Pdccrn::new(&mut vs, c)?),
            ModelConfig::Pdcattunet(c) => Network::Pdcattunet(Pdcattunet::new(&mut vs, c)?),
        };
        Ok(Self { config: config.clone(), stft, vs, input_norm: Mutex::new(FeatureNorm::new(config.bins())), net })
    }

    pub fn var_store(&self) -> &VarStore {
        &self.vs
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        self.vs.params().iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.vs.num_parameters()
    }

    pub fn input_norm(&self) -> FeatureNorm {
        self.input_norm.lock().expect("input norm lock").clone()
    }

    pub fn set_input_norm(&self, norm: FeatureNorm) {
        *self.input_norm.lock().expect("input norm lock") = norm;
    }

    /// Runs the network on a batch of equally long spectrograms. Returns the
    /// raw noisy spectrogram and the mask, both `[B, 2, T, F]` (real, imag).
    pub fn forward_batch(&self, noisy: &[&ComplexSpectrogram], dvecs: &[&DVector], mode: Mode) -> Result<(Tensor, Tensor)> {
        let b = noisy.len();
        if b == 0 || dvecs.len() != b {
            return Err(PseError::Shape(format!("{b} spectrograms vs {} d-vectors", dvecs.len())));
        }
        let (t, f) = noisy[0].shape();
        if noisy.iter().any(|s| s.shape() != (t, f)) {
            return Err(PseError::Shape("batch spectrograms differ in shape".into()));
        }
        if f != self.config.bins() {
            return Err(PseError::Shape(format!("model expects {} bins, got {f}", self.config.bins())));
        }
        let d_dim = self.config.dvector_dim();
        if let Some(bad) = dvecs.iter().find(|d| d.dim() != d_dim) {
            return Err(PseError::Shape(format!("d-vector of dimension {} for a model expecting {d_dim}", bad.dim())));
        }

        let normalized = match mode {
            Mode::Inference => {
                let norm = self.input_norm.lock().expect("input norm lock");
                noisy.iter().map(|s| norm.normalize(s)).collect::<Result<Vec<_>>>()?
            }
            Mode::Train => self.input_norm.lock().expect("input norm lock").normalize_train(noisy)?,
        };
        let device = self.vs.device();
        let mut feat = Vec::with_capacity(b * 2 * t * f);
        for n in &normalized {
            for c in 0..2 {
                for tt in 0..t {
                    feat.extend(n[tt * 2 * f + c * f..tt * 2 * f + (c + 1) * f].iter().map(|&v| v as f32));
                }
            }
        }
        let features = Tensor::from_vec(feat, (b, 2, t, f), device)?;
        let raw = spectrogram_batch_tensor(noisy)?;
        let dv: Vec<f32> = dvecs.iter().flat_map(|d| d.values.iter().map(|&v| v as f32)).collect();
        let dv = Tensor::from_vec(dv, (b, d_dim), device)?;
        let mask = match &self.net {
            Network::Pdccrn(n) => n.forward(&features, &dv, mode)?,
            Network::Pdcattunet(n) => n.forward(&features, &dv, mode)?,
        };
        Ok((raw, mask))
    }
}

impl PseModel for PseNetwork {
    fn predict_mask(&self, noisy: &ComplexSpectrogram, d: &DVector) -> Result<ComplexMask> {
        let (_, mask) = self.forward_batch(&[noisy], &[d], Mode::Inference)?;
        let v = mask.squeeze(0)?.to_vec3::<f32>()?;
        let (t, f) = noisy.shape();
        let mut data = Vec::with_capacity(t * f);
        for tt in 0..t {
            for ff in 0..f {
                data.push(Complex64::new(v[0][tt][ff] as f64, v[1][tt][ff] as f64));
            }
        }
        Ok(ComplexMask { frames: t, bins: f, data })
    }
}

/// `[B, 2, T, F]` tensor of real and imaginary parts.
pub fn spectrogram_batch_tensor(specs: &[&ComplexSpectrogram]) -> Result<Tensor> {
    let (t, f) = specs[0].shape();
    let mut raw = Vec::with_capacity(specs.len() * 2 * t * f);
    for s in specs {
        raw.extend(s.data.iter().map(|c| c.re as f32));
        raw.extend(s.data.iter().map(|c| c.im as f32));
    }
    Ok(Tensor::from_vec(raw, (specs.len(), 2, t, f), &candle_core::Device::Cpu)?)
}

/// Complex product of `[B, 2, T, F]` tensors.
pub fn complex_mul(x: &Tensor, m: &Tensor) -> Result<Tensor> {
    let (xr, xi) = (x.narrow(1, 0, 1)?, x.narrow(1, 1, 1)?);
    let (mr, mi) = (m.narrow(1, 0, 1)?, m.narrow(1, 1, 1)?);
    let re = ((&xr * &mr)? - (&xi * &mi)?)?;
    let im = ((&xr * &mi)? + (&xi * &mr)?)?;
    Ok(Tensor::cat(&[&re, &im], 1)?)
}

/// STFT, mask estimation, masking and inverse STFT; the output has exactly
/// the input's length.
pub fn enhance(model: &dyn PseModel, stft_cfg: &StftConfig, noisy: &Waveform, d: &DVector) -> Result<Waveform> {
    // pad to a whole number of hops so the inverse covers every input sample
    let hop = stft_cfg.hop_size;
    let mut padded = noisy.clone();
    padded.samples.resize(noisy.len().div_ceil(hop) * hop, 0.0);
    let spec = stft(&padded, stft_cfg)?;
    let mask = model.predict_mask(&spec, d)?;
    let enhanced = apply_complex_mask(&spec, &mask)?;
    let mut out = istft(&enhanced)?;
    out.samples.resize(noisy.len(), 0.0);
    Ok(out)
}

#[cfg(test)]
mod tests;
