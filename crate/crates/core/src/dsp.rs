//! Signal-processing kernels: STFT/iSTFT, power-law compression, complex
//! ratio masking and input feature normalization.
//!
//! Spectrograms are stored frame-major (`T x F`) in double precision. The
//! neural models convert to `f32` tensors at their own boundary.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{PseError, Result};

/// Sample rate used by every stage of the pipeline.
pub const SAMPLE_RATE: u32 = 16_000;

/// Variance floor for feature normalization.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(PseError::InvalidInput("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(PseError::NonFinite(format!("waveform sample {i}")));
        }
        Ok(Self { samples, sample_rate_hz })
    }

    pub fn silence(len: usize) -> Self {
        Self { samples: vec![0.0; len], sample_rate_hz: SAMPLE_RATE }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum()
    }

    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            0.0
        } else {
            self.energy() / self.samples.len() as f64
        }
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0f64, |m, s| m.max(s.abs()))
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|s| s * gain).collect(),
            sample_rate_hz: self.sample_rate_hz,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    /// Periodic Hann.
    Hann,
    Rectangular,
}

impl WindowKind {
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        match self {
            WindowKind::Hann => (0..len)
                .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
                .collect(),
            WindowKind::Rectangular => vec![1.0; len],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftConfig {
    pub fft_size: usize,
    pub window_size: usize,
    pub hop_size: usize,
    pub window: WindowKind,
    pub drop_dc: bool,
}

impl Default for StftConfig {
    /// 512-point Hann analysis at 50 % overlap with the DC bin removed, giving
    /// 256 bins that survive six frequency halvings.
    fn default() -> Self {
        Self { fft_size: 512, window_size: 512, hop_size: 256, window: WindowKind::Hann, drop_dc: true }
    }
}

impl StftConfig {
    /// Same framing as the default but keeping the DC bin (257 bins).
    pub fn full_band() -> Self {
        Self { drop_dc: false, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hop_size == 0 || self.hop_size > self.window_size || self.window_size > self.fft_size {
            return Err(PseError::Config(format!(
                "stft sizes must satisfy 0 < hop ({}) <= window ({}) <= fft ({})",
                self.hop_size, self.window_size, self.fft_size
            )));
        }
        if self.fft_size % 2 != 0 {
            return Err(PseError::Config("fft_size must be even".into()));
        }
        let w = self.window.coefficients(self.window_size);
        let sums: Vec<f64> = (0..self.hop_size)
            .map(|n| w.iter().skip(n).step_by(self.hop_size).sum())
            .collect();
        let reference = sums[0];
        if reference <= 0.0 || sums.iter().any(|s| (s - reference).abs() > 1e-9 * reference.max(1.0)) {
            return Err(PseError::Config(format!(
                "{:?} window of {} samples is not constant-overlap-add at hop {}",
                self.window, self.window_size, self.hop_size
            )));
        }
        Ok(())
    }

    pub fn num_bins(&self) -> usize {
        if self.drop_dc {
            self.fft_size / 2
        } else {
            self.fft_size / 2 + 1
        }
    }

    pub fn num_frames(&self, num_samples: usize) -> usize {
        num_samples / self.hop_size + 1
    }

    /// Index into the one-sided FFT output of the first stored bin.
    fn first_bin(&self) -> usize {
        usize::from(self.drop_dc)
    }

    /// Window zero-padded and centered inside an FFT frame.
    fn padded_window(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.fft_size];
        let offset = (self.fft_size - self.window_size) / 2;
        out[offset..offset + self.window_size].copy_from_slice(&self.window.coefficients(self.window_size));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    pub frames: usize,
    pub bins: usize,
    /// Row-major `frames x bins`.
    pub data: Vec<Complex64>,
    pub config: StftConfig,
    pub sample_rate_hz: u32,
}

impl ComplexSpectrogram {
    pub fn zeros(frames: usize, config: StftConfig, sample_rate_hz: u32) -> Self {
        let bins = config.num_bins();
        Self { frames, bins, data: vec![Complex64::new(0.0, 0.0); frames * bins], config, sample_rate_hz }
    }

    pub fn from_data(frames: usize, data: Vec<Complex64>, config: StftConfig, sample_rate_hz: u32) -> Result<Self> {
        let bins = config.num_bins();
        if data.len() != frames * bins {
            return Err(PseError::Shape(format!("{} values for {frames}x{bins} spectrogram", data.len())));
        }
        if data.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(PseError::NonFinite("spectrogram value".into()));
        }
        Ok(Self { frames, bins, data, config, sample_rate_hz })
    }

    #[inline]
    pub fn at(&self, t: usize, f: usize) -> Complex64 {
        self.data[t * self.bins + f]
    }

    pub fn frame(&self, t: usize) -> &[Complex64] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn frame_rate_hz(&self) -> f64 {
        self.sample_rate_hz as f64 / self.config.hop_size as f64
    }

    pub fn hop_duration_s(&self) -> f64 {
        self.config.hop_size as f64 / self.sample_rate_hz as f64
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.frames, self.bins)
    }

    pub fn with_data(&self, data: Vec<Complex64>) -> Result<Self> {
        Self::from_data(self.frames, data, self.config, self.sample_rate_hz)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexMask {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<Complex64>,
}

impl ComplexMask {
    pub fn constant(frames: usize, bins: usize, value: Complex64) -> Self {
        Self { frames, bins, data: vec![value; frames * bins] }
    }

    pub fn identity(frames: usize, bins: usize) -> Self {
        Self::constant(frames, bins, Complex64::new(1.0, 0.0))
    }
}

thread_local! {
    static PLANS: RefCell<(FftPlanner<f64>, HashMap<(usize, bool), Arc<dyn Fft<f64>>>)> =
        RefCell::new((FftPlanner::new(), HashMap::new()));
}

fn plan(size: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANS.with(|cell| {
        let mut guard = cell.borrow_mut();
        let (planner, cache) = &mut *guard;
        cache
            .entry((size, inverse))
            .or_insert_with(|| if inverse { planner.plan_fft_inverse(size) } else { planner.plan_fft_forward(size) })
            .clone()
    })
}

/// Centered short-time Fourier transform (zero padding of `fft_size / 2`
/// samples on both ends).
pub fn stft(w: &Waveform, cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    if w.is_empty() {
        return Err(PseError::InvalidInput("cannot transform an empty waveform".into()));
    }
    cfg.validate()?;
    let n = cfg.fft_size;
    let pad = n / 2;
    let frames = cfg.num_frames(w.len());
    let bins = cfg.num_bins();
    let first = cfg.first_bin();
    let window = cfg.padded_window();
    let fft = plan(n, false);

    let mut data = Vec::with_capacity(frames * bins);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for t in 0..frames {
        let start = (t * cfg.hop_size) as isize - pad as isize;
        for (i, slot) in buf.iter_mut().enumerate() {
            let idx = start + i as isize;
            let x = if idx >= 0 && (idx as usize) < w.len() { w.samples[idx as usize] } else { 0.0 };
            *slot = Complex64::new(x * window[i], 0.0);
        }
        fft.process(&mut buf);
        data.extend_from_slice(&buf[first..first + bins]);
    }
    Ok(ComplexSpectrogram { frames, bins, data, config: *cfg, sample_rate_hz: w.sample_rate_hz })
}

/// Weighted overlap-add inverse of [`stft`]. A dropped DC bin is restored as
/// zero. Output length is `(T - 1) * hop`.
pub fn istft(spec: &ComplexSpectrogram) -> Result<Waveform> {
    let cfg = &spec.config;
    cfg.validate()?;
    if spec.bins != cfg.num_bins() || spec.data.len() != spec.frames * spec.bins {
        return Err(PseError::Shape(format!(
            "spectrogram of {}x{} does not match its stft config ({} bins)",
            spec.frames,
            spec.bins,
            cfg.num_bins()
        )));
    }
    if !spec.is_finite() {
        return Err(PseError::NonFinite("spectrogram passed to istft".into()));
    }
    let n = cfg.fft_size;
    let hop = cfg.hop_size;
    let first = cfg.first_bin();
    let window = cfg.padded_window();
    let ifft = plan(n, true);
    let total = spec.frames.saturating_sub(1) * hop + n;
    let mut acc = vec![0.0; total];
    let mut env = vec![0.0; total];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];

    for t in 0..spec.frames {
        buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        for (f, &v) in spec.frame(t).iter().enumerate() {
            buf[first + f] = v;
        }
        // Hermitian completion; DC and Nyquist must be real.
        buf[0].im = 0.0;
        buf[n / 2].im = 0.0;
        for k in 1..n / 2 {
            buf[n - k] = buf[k].conj();
        }
        ifft.process(&mut buf);
        let start = t * hop;
        for i in 0..n {
            acc[start + i] += buf[i].re / n as f64 * window[i];
            env[start + i] += window[i] * window[i];
        }
    }
    let pad = n / 2;
    let len = spec.frames.saturating_sub(1) * hop;
    let samples = (pad..pad + len)
        .map(|i| if env[i] > 1e-10 { acc[i] / env[i] } else { 0.0 })
        .collect();
    Ok(Waveform { samples, sample_rate_hz: spec.sample_rate_hz })
}

/// Bin-wise complex product `noisy * mask`.
pub fn apply_complex_mask(noisy: &ComplexSpectrogram, mask: &ComplexMask) -> Result<ComplexSpectrogram> {
    if (noisy.frames, noisy.bins) != (mask.frames, mask.bins) || mask.data.len() != noisy.data.len() {
        return Err(PseError::Shape(format!(
            "mask {}x{} vs spectrogram {}x{}",
            mask.frames, mask.bins, noisy.frames, noisy.bins
        )));
    }
    if mask.data.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
        return Err(PseError::NonFinite("complex mask".into()));
    }
    let data = noisy.data.iter().zip(&mask.data).map(|(x, m)| x * m).collect();
    Ok(ComplexSpectrogram { data, ..noisy.clone() })
}

/// Phase with the convention `arg(0) = 0`.
#[inline]
pub fn phase(c: Complex64) -> f64 {
    if c.re == 0.0 && c.im == 0.0 {
        0.0
    } else {
        c.im.atan2(c.re)
    }
}

/// Returns `(|S|^p, arg S)` for every bin, frame-major.
pub fn power_compress(spec: &ComplexSpectrogram, p: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(p > 0.0) {
        return Err(PseError::InvalidInput(format!("compression exponent must be positive, got {p}")));
    }
    let mags = spec.data.iter().map(|c| c.norm().powf(p)).collect();
    let phases = spec.data.iter().map(|&c| phase(c)).collect();
    Ok((mags, phases))
}

/// Per-bin running statistics for the real and imaginary input channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean_re: Vec<f64>,
    pub var_re: Vec<f64>,
    pub mean_im: Vec<f64>,
    pub var_im: Vec<f64>,
}

impl FeatureStats {
    pub fn identity(bins: usize) -> Self {
        Self { mean_re: vec![0.0; bins], var_re: vec![1.0; bins], mean_im: vec![0.0; bins], var_im: vec![1.0; bins] }
    }

    pub fn bins(&self) -> usize {
        self.mean_re.len()
    }

    fn check(&self, bins: usize) -> Result<()> {
        let lens = [self.mean_re.len(), self.var_re.len(), self.mean_im.len(), self.var_im.len()];
        if lens.iter().any(|&l| l != bins) {
            return Err(PseError::Shape(format!("feature stats {lens:?} for {bins} bins")));
        }
        let all = self.mean_re.iter().chain(&self.var_re).chain(&self.mean_im).chain(&self.var_im);
        if all.clone().any(|v| !v.is_finite()) {
            return Err(PseError::NonFinite("feature statistics".into()));
        }
        Ok(())
    }

    /// Batch statistics over every frame of every spectrogram.
    pub fn from_batch(batch: &[&ComplexSpectrogram]) -> Result<Self> {
        let bins = batch.first().map(|s| s.bins).ok_or_else(|| PseError::InvalidInput("empty batch".into()))?;
        let mut out = Self { mean_re: vec![0.0; bins], var_re: vec![0.0; bins], mean_im: vec![0.0; bins], var_im: vec![0.0; bins] };
        let mut count = 0usize;
        for spec in batch {
            if spec.bins != bins {
                return Err(PseError::Shape("batch spectrograms differ in bin count".into()));
            }
            for t in 0..spec.frames {
                for (f, c) in spec.frame(t).iter().enumerate() {
                    out.mean_re[f] += c.re;
                    out.mean_im[f] += c.im;
                }
            }
            count += spec.frames;
        }
        let n = count.max(1) as f64;
        out.mean_re.iter_mut().chain(out.mean_im.iter_mut()).for_each(|m| *m /= n);
        for spec in batch {
            for t in 0..spec.frames {
                for (f, c) in spec.frame(t).iter().enumerate() {
                    out.var_re[f] += (c.re - out.mean_re[f]).powi(2);
                    out.var_im[f] += (c.im - out.mean_im[f]).powi(2);
                }
            }
        }
        out.var_re.iter_mut().chain(out.var_im.iter_mut()).for_each(|v| *v /= n);
        Ok(out)
    }

    /// Exponential moving update `running = (1 - momentum) * running + momentum * batch`.
    pub fn update(&mut self, batch: &FeatureStats, momentum: f64) {
        let blend = |r: &mut Vec<f64>, b: &Vec<f64>| {
            r.iter_mut().zip(b).for_each(|(r, b)| *r = (1.0 - momentum) * *r + momentum * b);
        };
        blend(&mut self.mean_re, &batch.mean_re);
        blend(&mut self.var_re, &batch.var_re);
        blend(&mut self.mean_im, &batch.mean_im);
        blend(&mut self.var_im, &batch.var_im);
    }
}

/// Normalizes real and imaginary channels per bin with the given statistics.
/// Output is `T x 2 x F` (channel 0 real, channel 1 imaginary), frame-major.
pub fn input_feature_norm(spec: &ComplexSpectrogram, stats: &FeatureStats) -> Result<Vec<f64>> {
    stats.check(spec.bins)?;
    let f_n = spec.bins;
    let scale_re: Vec<f64> = stats.var_re.iter().map(|v| 1.0 / (v.max(0.0) + NORM_EPS).sqrt()).collect();
    let scale_im: Vec<f64> = stats.var_im.iter().map(|v| 1.0 / (v.max(0.0) + NORM_EPS).sqrt()).collect();
    let mut out = vec![0.0; spec.frames * 2 * f_n];
    for t in 0..spec.frames {
        let row = &mut out[t * 2 * f_n..(t + 1) * 2 * f_n];
        for (f, c) in spec.frame(t).iter().enumerate() {
            row[f] = (c.re - stats.mean_re[f]) * scale_re[f];
            row[f_n + f] = (c.im - stats.mean_im[f]) * scale_im[f];
        }
    }
    Ok(out)
}

/// Running-statistics normalizer with explicit training and inference paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub stats: FeatureStats,
    pub momentum: f64,
}

impl FeatureNorm {
    pub fn new(bins: usize) -> Self {
        Self { stats: FeatureStats::identity(bins), momentum: 0.1 }
    }

    /// Frozen running statistics only: frame `t` of the output depends on
    /// frame `t` of the input alone.
    pub fn normalize(&self, spec: &ComplexSpectrogram) -> Result<Vec<f64>> {
        input_feature_norm(spec, &self.stats)
    }

    /// Normalizes with batch statistics and folds them into the running ones.
    pub fn normalize_train(&mut self, batch: &[&ComplexSpectrogram]) -> Result<Vec<Vec<f64>>> {
        let batch_stats = FeatureStats::from_batch(batch)?;
        let out = batch.iter().map(|s| input_feature_norm(s, &batch_stats)).collect::<Result<Vec<_>>>()?;
        self.stats.update(&batch_stats, self.momentum);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..len).map(|_| rng.random_range(-1.0..1.0)).collect(), SAMPLE_RATE).unwrap()
    }

    fn snr_db(reference: &[f64], estimate: &[f64]) -> f64 {
        let sig: f64 = reference.iter().map(|x| x * x).sum();
        let err: f64 = reference.iter().zip(estimate).map(|(a, b)| (a - b).powi(2)).sum();
        10.0 * (sig / err.max(1e-300)).log10()
    }

    #[test]
    fn zero_input_framing() {
        let spec = stft(&Waveform::silence(4096), &StftConfig::default()).unwrap();
        assert_eq!(spec.shape(), (17, 256));
        assert!(spec.data.iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn stft_is_deterministic() {
        let w = noise(3000, 1);
        let a = stft(&w, &StftConfig::default()).unwrap();
        let b = stft(&w, &StftConfig::default()).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn empty_waveform_rejected() {
        assert!(stft(&Waveform::silence(0), &StftConfig::default()).is_err());
    }

    #[test]
    fn non_cola_window_rejected() {
        let cfg = StftConfig { hop_size: 200, ..StftConfig::default() };
        assert!(matches!(cfg.validate(), Err(PseError::Config(_))));
        let rect = StftConfig { window: WindowKind::Rectangular, hop_size: 512, ..StftConfig::default() };
        rect.validate().unwrap();
        let bad = StftConfig { hop_size: 600, ..StftConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn bin_centered_exponential_concentrates_energy() {
        let cfg = StftConfig::default();
        let k = 20usize;
        let n = 8192;
        let w: Vec<f64> = (0..n).map(|i| (2.0 * PI * k as f64 * i as f64 / cfg.fft_size as f64).cos()).collect();
        let spec = stft(&Waveform::new(w.clone(), SAMPLE_RATE).unwrap(), &cfg).unwrap();
        let window = WindowKind::Hann.coefficients(cfg.fft_size);
        for t in 2..spec.frames - 2 {
            let total: f64 = spec.frame(t).iter().map(|c| c.norm_sqr()).sum();
            // bin index shifts by one when DC is dropped
            let peak = spec.at(t, k - 1).norm_sqr();
            // Hann main lobe spans the neighbours, so compare the lobe energy
            let lobe: f64 = (k - 2..=k).map(|f| spec.at(t, f).norm_sqr()).sum();
            assert!(lobe / total >= 0.99, "frame {t}: {}", lobe / total);
            assert!(peak >= spec.at(t, k - 2).norm_sqr());
            // direct DFT oracle on the frame
            let start = t * cfg.hop_size - cfg.fft_size / 2;
            let mut dft = Complex64::new(0.0, 0.0);
            for i in 0..cfg.fft_size {
                let ang = -2.0 * PI * (k * i) as f64 / cfg.fft_size as f64;
                dft += Complex64::from_polar(w[start + i] * window[i], ang);
            }
            assert!((dft - spec.at(t, k - 1)).norm() < 1e-8 * dft.norm().max(1.0));
        }
    }

    #[test]
    fn bin_centered_exponential_rectangular_single_bin() {
        let cfg = StftConfig { window: WindowKind::Rectangular, hop_size: 512, ..StftConfig::default() };
        let k = 37usize;
        let w: Vec<f64> = (0..8192).map(|i| (2.0 * PI * k as f64 * i as f64 / 512.0).cos()).collect();
        let spec = stft(&Waveform::new(w, SAMPLE_RATE).unwrap(), &cfg).unwrap();
        for t in 1..spec.frames - 1 {
            let total: f64 = spec.frame(t).iter().map(|c| c.norm_sqr()).sum();
            assert!(spec.at(t, k - 1).norm_sqr() / total >= 0.99);
        }
    }

    #[test]
    fn round_trip_white_noise_full_band() {
        let w = noise(16000, 7);
        let spec = stft(&w, &StftConfig::full_band()).unwrap();
        let back = istft(&spec).unwrap();
        assert_eq!(back.len(), (spec.frames - 1) * 256);
        let interior = 512..back.len() - 512;
        assert!(snr_db(&w.samples[interior.clone()], &back.samples[interior]) > 50.0);
    }

    #[test]
    fn istft_zero_and_determinism() {
        let z = ComplexSpectrogram::zeros(10, StftConfig::default(), SAMPLE_RATE);
        assert!(istft(&z).unwrap().samples.iter().all(|&s| s == 0.0));
        let spec = stft(&noise(5000, 3), &StftConfig::default()).unwrap();
        assert_eq!(istft(&spec).unwrap(), istft(&spec).unwrap());
    }

    #[test]
    fn istft_rejects_config_mismatch() {
        let mut spec = stft(&noise(2048, 3), &StftConfig::default()).unwrap();
        spec.config.drop_dc = false;
        assert!(matches!(istft(&spec), Err(PseError::Shape(_))));
    }

    #[test]
    fn mask_identity_zero_and_products() {
        let spec = stft(&noise(1024, 9), &StftConfig::default()).unwrap();
        let id = apply_complex_mask(&spec, &ComplexMask::identity(spec.frames, spec.bins)).unwrap();
        assert_eq!(id.data, spec.data);
        let zero = apply_complex_mask(&spec, &ComplexMask::constant(spec.frames, spec.bins, Complex64::new(0.0, 0.0))).unwrap();
        assert!(zero.data.iter().all(|c| c.norm() == 0.0));

        let cfg = StftConfig { fft_size: 8, window_size: 8, hop_size: 4, window: WindowKind::Hann, drop_dc: true };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut rc = || Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let noisy = ComplexSpectrogram::from_data(3, (0..12).map(|_| rc()).collect(), cfg, SAMPLE_RATE).unwrap();
        let mask = ComplexMask { frames: 3, bins: 4, data: (0..12).map(|_| rc()).collect() };
        let out = apply_complex_mask(&noisy, &mask).unwrap();
        for i in 0..12 {
            let (a, b) = (noisy.data[i], mask.data[i]);
            let re = a.re * b.re - a.im * b.im;
            let im = a.re * b.im + a.im * b.re;
            assert_eq!(out.data[i], Complex64::new(re, im));
        }
    }

    #[test]
    fn mask_errors() {
        let spec = stft(&noise(1024, 9), &StftConfig::default()).unwrap();
        assert!(apply_complex_mask(&spec, &ComplexMask::identity(spec.frames + 1, spec.bins)).is_err());
        let nan = ComplexMask::constant(spec.frames, spec.bins, Complex64::new(f64::NAN, 0.0));
        assert!(matches!(apply_complex_mask(&spec, &nan), Err(PseError::NonFinite(_))));
    }

    #[test]
    fn power_compress_examples() {
        let cfg = StftConfig { fft_size: 8, window_size: 8, hop_size: 4, window: WindowKind::Hann, drop_dc: true };
        let vals = vec![
            Complex64::new(4.0, 0.0),
            Complex64::new(0.0, 0.0),
            Complex64::from_polar(1.0, 1.2),
            Complex64::new(0.0, -1.0),
        ];
        let spec = ComplexSpectrogram::from_data(1, vals, cfg, SAMPLE_RATE).unwrap();
        let (m, ph) = power_compress(&spec, 0.5).unwrap();
        assert_eq!((m[0], ph[0]), (2.0, 0.0));
        assert_eq!((m[1], ph[1]), (0.0, 0.0));
        assert!((m[2] - 1.0).abs() < 1e-15 && (ph[2] - 1.2).abs() < 1e-12);
        assert_eq!(m[3], 1.0);
        assert!(power_compress(&spec, 0.0).is_err());
        assert!(power_compress(&spec, -0.3).is_err());
    }

    #[test]
    fn feature_norm_examples() {
        let spec = stft(&noise(2048, 5), &StftConfig::default()).unwrap();
        let id = input_feature_norm(&spec, &FeatureStats::identity(spec.bins)).unwrap();
        let scale = 1.0 / (1.0 + NORM_EPS).sqrt();
        for t in 0..spec.frames {
            for f in 0..spec.bins {
                assert!((id[t * 512 + f] - spec.at(t, f).re * scale).abs() < 1e-12);
                assert!((id[t * 512 + 256 + f] - spec.at(t, f).im * scale).abs() < 1e-12);
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let stats = FeatureStats {
            mean_re: (0..256).map(|_| rng.random_range(-1.0..1.0)).collect(),
            var_re: (0..256).map(|_| rng.random_range(0.1..3.0)).collect(),
            mean_im: (0..256).map(|_| rng.random_range(-1.0..1.0)).collect(),
            var_im: (0..256).map(|_| rng.random_range(0.1..3.0)).collect(),
        };
        let out = input_feature_norm(&spec, &stats).unwrap();
        for t in 0..spec.frames {
            for f in 0..256 {
                let c = spec.at(t, f);
                let re = (c.re - stats.mean_re[f]) / (stats.var_re[f] + 1e-5).sqrt();
                let im = (c.im - stats.mean_im[f]) / (stats.var_im[f] + 1e-5).sqrt();
                assert!((out[t * 512 + f] - re).abs() < 1e-12);
                assert!((out[t * 512 + 256 + f] - im).abs() < 1e-12);
            }
        }

        // constant input equal to the running mean
        let c = Complex64::new(0.3, -0.2);
        let flat = ComplexSpectrogram::from_data(4, vec![c; 4 * 256], StftConfig::default(), SAMPLE_RATE).unwrap();
        let st = FeatureStats { mean_re: vec![0.3; 256], var_re: vec![2.0; 256], mean_im: vec![-0.2; 256], var_im: vec![0.5; 256] };
        assert!(input_feature_norm(&flat, &st).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn feature_norm_train_updates_running_stats_only_in_training() {
        let a = stft(&noise(4096, 1), &StftConfig::default()).unwrap();
        let mut norm = FeatureNorm::new(256);
        let before = norm.stats.clone();
        norm.normalize(&a).unwrap();
        assert_eq!(norm.stats, before);
        norm.normalize_train(&[&a]).unwrap();
        assert_ne!(norm.stats, before);
    }
}
