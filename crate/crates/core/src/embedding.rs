//! Speaker embeddings (d-vectors) behind a pluggable provider interface.
//!
//! [`SpectralStatsProvider`] is a training-free stand-in for a pretrained
//! speaker-ID network: band-energy statistics of a mel spectrogram, projected
//! with a fixed seeded matrix.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dsp::{stft, StftConfig, Waveform};
use crate::error::{PseError, Result};

pub const DVECTOR_DIM: usize = 128;
pub const EMBEDDING_CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DVector {
    pub values: Vec<f64>,
    pub source_id: String,
}

impl DVector {
    /// L2-normalizes `values`; fails on a zero or non-finite vector.
    pub fn new(values: Vec<f64>, source_id: impl Into<String>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(PseError::NonFinite("d-vector component".into()));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(PseError::InvalidInput("cannot normalize a zero d-vector".into()));
        }
        Ok(Self { values: values.into_iter().map(|v| v / norm).collect(), source_id: source_id.into() })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn cosine(&self, other: &DVector) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub trait EmbeddingProvider: Send + Sync {
    fn dimension(&self) -> usize;

    /// Minimum total enrollment duration in seconds.
    fn min_duration_s(&self) -> f64;

    /// Unnormalized embedding of one utterance, or `None` if it carries no
    /// usable signal energy.
    fn embed_utterance(&self, w: &Waveform) -> Result<Option<Vec<f64>>>;
}

/// Normalized mean of the per-utterance unit vectors.
pub fn extract_dvector(provider: &dyn EmbeddingProvider, enrollment: &[Waveform]) -> Result<DVector> {
    extract_dvector_tagged(provider, enrollment, "enrollment")
}

pub fn extract_dvector_tagged(provider: &dyn EmbeddingProvider, enrollment: &[Waveform], source_id: &str) -> Result<DVector> {
    if enrollment.is_empty() {
        return Err(PseError::InvalidInput("empty enrollment list".into()));
    }
    let total: f64 = enrollment.iter().map(Waveform::duration_s).sum();
    if total < provider.min_duration_s() {
        return Err(PseError::InvalidInput(format!(
            "enrollment audio is {total:.2} s, provider needs at least {:.2} s",
            provider.min_duration_s()
        )));
    }
    let mut acc = vec![0.0; provider.dimension()];
    let mut used = 0usize;
    for w in enrollment {
        if let Some(v) = provider.embed_utterance(w)? {
            let unit = DVector::new(v, source_id)?;
            acc.iter_mut().zip(&unit.values).for_each(|(a, b)| *a += b);
            used += 1;
        }
    }
    if used == 0 {
        return Err(PseError::InvalidInput("enrollment audio is silent".into()));
    }
    DVector::new(acc, source_id)
}

/// Embedding of a single (possibly noisy) utterance, as used when no clean
/// enrollment exists.
pub fn extract_dvector_from_noisy(provider: &dyn EmbeddingProvider, utterance: &Waveform) -> Result<DVector> {
    extract_dvector_tagged(provider, std::slice::from_ref(utterance), "noisy-utterance")
}

/// Log mel band-energy statistics projected to `dim` dimensions.
#[derive(Debug, Clone)]
pub struct SpectralStatsProvider {
    dim: usize,
    stft: StftConfig,
    /// Row-major `bands x (fft/2 + 1)` triangular filters.
    filters: Vec<Vec<f64>>,
    /// Row-major `dim x 2*bands`.
    projection: Vec<f64>,
    bias: Vec<f64>,
}

pub const MEL_BANDS: usize = 64;

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

fn mel_filterbank(bands: usize, fft_size: usize, sample_rate: f64) -> Vec<Vec<f64>> {
    let bins = fft_size / 2 + 1;
    let top = hz_to_mel(sample_rate / 2.0);
    let edges: Vec<f64> = (0..bands + 2).map(|i| mel_to_hz(top * i as f64 / (bands + 1) as f64)).collect();
    let bin_hz = sample_rate / fft_size as f64;
    (0..bands)
        .map(|b| {
            let (lo, mid, hi) = (edges[b], edges[b + 1], edges[b + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect()
}

impl SpectralStatsProvider {
    pub fn new(dim: usize, seed: u64) -> Self {
        let stft = StftConfig::full_band();
        let filters = mel_filterbank(MEL_BANDS, stft.fft_size, crate::dsp::SAMPLE_RATE as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let features = 2 * MEL_BANDS;
        let normal = Normal::new(0.0, (1.0 / features as f64).sqrt()).expect("finite std");
        let projection = (0..dim * features).map(|_| normal.sample(&mut rng)).collect();
        let bias = (0..dim).map(|_| 0.01 * normal.sample(&mut rng)).collect();
        Self { dim, stft, filters, projection, bias }
    }

    /// Per-band mean and standard deviation over active frames of the
    /// frame-energy-normalized log mel spectrum, each half centered across
    /// bands. Invariant to positive gain.
    pub fn band_statistics(&self, w: &Waveform) -> Result<Option<Vec<f64>>> {
        if w.is_empty() {
            return Ok(None);
        }
        let spec = stft(w, &self.stft)?;
        let frame_bands: Vec<Vec<f64>> = (0..spec.frames)
            .map(|t| {
                let power: Vec<f64> = spec.frame(t).iter().map(|c| c.norm_sqr()).collect();
                self.filters.iter().map(|filt| filt.iter().zip(&power).map(|(a, b)| a * b).sum()).collect()
            })
            .collect();
        let energies: Vec<f64> = frame_bands.iter().map(|b| b.iter().sum()).collect();
        let max_energy = energies.iter().cloned().fold(0.0, f64::max);
        if max_energy <= 0.0 {
            return Ok(None);
        }
        let active: Vec<Vec<f64>> = frame_bands
            .iter()
            .zip(&energies)
            .filter(|(_, &e)| e > 1e-4 * max_energy)
            .map(|(bands, &e)| bands.iter().map(|b| (b / e + 1e-8).ln()).collect())
            .collect();
        let n = active.len() as f64;
        let mut mean = vec![0.0; MEL_BANDS];
        for frame in &active {
            mean.iter_mut().zip(frame).for_each(|(m, v)| *m += v / n);
        }
        let mut std = vec![0.0; MEL_BANDS];
        for frame in &active {
            std.iter_mut().zip(frame.iter().zip(&mean)).for_each(|(s, (v, m))| *s += (v - m).powi(2) / n);
        }
        std.iter_mut().for_each(|s| *s = s.sqrt());
        let center = |v: &mut Vec<f64>| {
            let avg = v.iter().sum::<f64>() / v.len() as f64;
            v.iter_mut().for_each(|x| *x -= avg);
        };
        center(&mut mean);
        center(&mut std);
        mean.extend(std);
        Ok(Some(mean))
    }
}

impl EmbeddingProvider for SpectralStatsProvider {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn min_duration_s(&self) -> f64 {
        1.0
    }

    fn embed_utterance(&self, w: &Waveform) -> Result<Option<Vec<f64>>> {
        let Some(features) = self.band_statistics(w)? else {
            return Ok(None);
        };
        let cols = features.len();
        Ok(Some(
            (0..self.dim)
                .map(|d| {
                    let row = &self.projection[d * cols..(d + 1) * cols];
                    self.bias[d] + row.iter().zip(&features).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect(),
        ))
    }
}

/// One line of the enrollment manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnrollmentRecord {
    pub speaker_id: String,
    pub wavs: Vec<PathBuf>,
}

pub fn read_enrollment_manifest(path: impl AsRef<Path>) -> Result<Vec<EnrollmentRecord>> {
    let file = std::fs::File::open(path)?;
    std::io::BufReader::new(file)
        .lines()
        .filter(|l| l.as_ref().map(|s| !s.trim().is_empty()).unwrap_or(true))
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}

pub fn write_enrollment_manifest(path: impl AsRef<Path>, records: &[EnrollmentRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Cached d-vectors keyed by speaker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingCache {
    pub format_version: u32,
    pub dimension: usize,
    pub embeddings: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingCache {
    pub fn new(dimension: usize) -> Self {
        Self { format_version: EMBEDDING_CACHE_VERSION, dimension, embeddings: BTreeMap::new() }
    }

    pub fn insert(&mut self, speaker_id: &str, d: &DVector) {
        self.embeddings.insert(speaker_id.to_string(), d.values.clone());
    }

    pub fn get(&self, speaker_id: &str) -> Result<DVector> {
        let v = self.embeddings.get(speaker_id).ok_or_else(|| PseError::MissingEnrollment(speaker_id.to_string()))?;
        DVector::new(v.clone(), speaker_id)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cache: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        if cache.format_version != EMBEDDING_CACHE_VERSION {
            return Err(PseError::Config(format!("unsupported embedding cache version {}", cache.format_version)));
        }
        if cache.embeddings.values().any(|v| v.len() != cache.dimension) {
            return Err(PseError::Shape("cached embedding with wrong dimension".into()));
        }
        Ok(cache)
    }
}

/// Extracts one d-vector per manifest record.
pub fn enroll(provider: &dyn EmbeddingProvider, records: &[EnrollmentRecord], root: &Path) -> Result<EmbeddingCache> {
    let mut cache = EmbeddingCache::new(provider.dimension());
    for rec in records {
        let wavs = rec
            .wavs
            .iter()
            .map(|p| crate::audio::read_wav(root.join(p)))
            .collect::<Result<Vec<_>>>()?;
        let d = extract_dvector_tagged(provider, &wavs, &rec.speaker_id)?;
        cache.insert(&rec.speaker_id, &d);
    }
    Ok(cache)
}
