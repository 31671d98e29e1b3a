//! Target-speaker over-suppression (TSOS) flags and aggregates, plus SI-SDR.

use serde::{Deserialize, Serialize};

use crate::dsp::{ComplexSpectrogram, Waveform};
use crate::error::{PseError, Result};
use crate::losses::{bin_terms, DEFAULT_P};

pub const DEFAULT_GAMMA: f64 = 0.1;
pub const SI_SDR_CAP_DB: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricParams {
    pub gamma: f64,
    pub p: f64,
}

impl Default for MetricParams {
    fn default() -> Self {
        Self { gamma: DEFAULT_GAMMA, p: DEFAULT_P }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsosFlags {
    pub flags: Vec<bool>,
    pub frame_rate_hz: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TsosReport {
    pub percent_os_frames: f64,
    pub total_os_duration: f64,
    pub max_os_duration: f64,
    pub gamma: f64,
    pub p: f64,
}

/// A frame is over-suppressed when `sum_f L_OS(t, f) > gamma * sum_f |S(t, f)|^p`.
/// Frames whose reference is silent are never flagged.
pub fn tsos_frames(reference: &ComplexSpectrogram, estimate: &ComplexSpectrogram, params: &MetricParams) -> Result<TsosFlags> {
    if reference.shape() != estimate.shape() || reference.data.len() != estimate.data.len() {
        return Err(PseError::Shape(format!("reference {:?} vs estimate {:?}", reference.shape(), estimate.shape())));
    }
    if !(params.gamma > 0.0) || !(params.p > 0.0) {
        return Err(PseError::InvalidInput("gamma and p must be positive".into()));
    }
    let flags = (0..reference.frames)
        .map(|t| {
            let (os, energy) = reference.frame(t).iter().zip(estimate.frame(t)).fold((0.0, 0.0), |(os, en), (&s, &e)| {
                (os + bin_terms(s, e, params.p).over_suppression, en + s.norm().powf(params.p))
            });
            energy > 0.0 && os > params.gamma * energy
        })
        .collect();
    Ok(TsosFlags { flags, frame_rate_hz: reference.frame_rate_hz() })
}

pub fn tsos_report(flags: &TsosFlags, params: &MetricParams) -> Result<TsosReport> {
    if flags.flags.is_empty() {
        return Err(PseError::InvalidInput("no frames to summarize".into()));
    }
    let hop = 1.0 / flags.frame_rate_hz;
    let count = flags.flags.iter().filter(|&&f| f).count();
    let mut longest = 0usize;
    let mut run = 0usize;
    for &f in &flags.flags {
        run = if f { run + 1 } else { 0 };
        longest = longest.max(run);
    }
    Ok(TsosReport {
        percent_os_frames: 100.0 * count as f64 / flags.flags.len() as f64,
        total_os_duration: count as f64 * hop,
        max_os_duration: longest as f64 * hop,
        gamma: params.gamma,
        p: params.p,
    })
}

/// Scale-invariant signal-to-distortion ratio in dB, capped at 60 dB.
pub fn si_sdr(reference: &Waveform, estimate: &Waveform) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(PseError::Shape(format!("reference {} vs estimate {} samples", reference.len(), estimate.len())));
    }
    let ref_energy = reference.energy();
    if ref_energy <= 0.0 {
        return Err(PseError::InvalidInput("silent reference".into()));
    }
    let dot: f64 = reference.samples.iter().zip(&estimate.samples).map(|(r, e)| r * e).sum();
    let scale = dot / ref_energy;
    let (target, noise) = reference.samples.iter().zip(&estimate.samples).fold((0.0, 0.0), |(t, n), (r, e)| {
        let proj = scale * r;
        (t + proj * proj, n + (e - proj) * (e - proj))
    });
    if noise <= 0.0 {
        return Ok(SI_SDR_CAP_DB);
    }
    if target <= 0.0 {
        return Ok(-SI_SDR_CAP_DB);
    }
    Ok((10.0 * (target / noise).log10()).clamp(-SI_SDR_CAP_DB, SI_SDR_CAP_DB))
}
