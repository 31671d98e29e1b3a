//! Power-law compressed phase-aware losses, the asymmetric over-suppression
//! penalty, and a feature-matching loss through a frozen back-end.
//!
//! Every loss reports its value together with the gradient with respect to
//! the estimated spectrogram, as a complex number `dL/dRe + i dL/dIm` per bin.
//! `S` is always the clean reference and `Ŝ` the estimate.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dsp::ComplexSpectrogram;
use crate::error::{PseError, Result};

pub const DEFAULT_P: f64 = 0.3;
pub const PLCPA_ALPHA: f64 = 0.5;
pub const PLCPA_ASYM_ALPHA: f64 = 0.9;
pub const DEFAULT_BETA: f64 = 1.0;
pub const DEFAULT_LAMBDA_MT: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParams {
    pub p: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lambda_mt: f64,
}

impl LossParams {
    pub fn plcpa() -> Self {
        Self { p: DEFAULT_P, alpha: PLCPA_ALPHA, beta: 0.0, lambda_mt: 0.0 }
    }

    pub fn plcpa_asym() -> Self {
        Self { p: DEFAULT_P, alpha: PLCPA_ASYM_ALPHA, beta: DEFAULT_BETA, lambda_mt: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0) {
            return Err(PseError::Config(format!("p must be positive, got {}", self.p)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(PseError::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.beta >= 0.0) || !(self.lambda_mt >= 0.0) {
            return Err(PseError::Config("beta and lambda_mt must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Plcpa,
    PlcpaAsym,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MtConfig {
    pub enabled: bool,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
}

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA_MT
}

impl Default for MtConfig {
    fn default() -> Self {
        Self { enabled: false, lambda: DEFAULT_LAMBDA_MT }
    }
}

/// The `loss` block of a training configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub loss: LossKind,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default = "default_p")]
    pub p: f64,
    #[serde(default)]
    pub mt: MtConfig,
}

fn default_p() -> f64 {
    DEFAULT_P
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::new(LossKind::Plcpa, false)
    }
}

impl LossConfig {
    pub fn new(kind: LossKind, mt: bool) -> Self {
        Self { loss: kind, alpha: None, beta: None, p: DEFAULT_P, mt: MtConfig { enabled: mt, lambda: DEFAULT_LAMBDA_MT } }
    }

    /// Resolves unset fields to the per-kind defaults (alpha 0.5 / 0.9, beta 1.0).
    pub fn params(&self) -> LossParams {
        let (alpha, beta) = match self.loss {
            LossKind::Plcpa => (self.alpha.unwrap_or(PLCPA_ALPHA), 0.0),
            LossKind::PlcpaAsym => (self.alpha.unwrap_or(PLCPA_ASYM_ALPHA), self.beta.unwrap_or(DEFAULT_BETA)),
        };
        let lambda_mt = if self.mt.enabled { self.mt.lambda } else { 0.0 };
        LossParams { p: self.p, alpha, beta, lambda_mt }
    }

    pub fn label(&self) -> String {
        let base = match self.loss {
            LossKind::Plcpa => "PLCPA",
            LossKind::PlcpaAsym => "PLCPA-ASYM",
        };
        if self.mt.enabled {
            format!("{base}+MT")
        } else {
            base.to_string()
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub amplitude_term: f64,
    pub phase_term: f64,
    pub os_term: f64,
    pub mt_term: f64,
    pub total: f64,
}

/// Per-bin loss terms for one `(S, Ŝ)` pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinTerms {
    pub amplitude: f64,
    pub phase: f64,
    pub over_suppression: f64,
}

#[inline]
fn compressed(c: Complex64, p: f64) -> (f64, Complex64) {
    let m = c.norm();
    if m == 0.0 {
        (0.0, Complex64::new(0.0, 0.0))
    } else {
        let mp = m.powf(p);
        (mp, c * (mp / m))
    }
}

/// `L_a`, `L_p` and `L_OS` for a single bin.
#[inline]
pub fn bin_terms(s: Complex64, s_hat: Complex64, p: f64) -> BinTerms {
    let (a, sc) = compressed(s, p);
    let (b, shc) = compressed(s_hat, p);
    let under = (a - b).max(0.0);
    BinTerms { amplitude: (a - b).powi(2), phase: (sc - shc).norm_sqr(), over_suppression: under * under }
}

/// Gradients of the three per-bin terms with respect to `Ŝ`; zero at `Ŝ = 0`.
#[inline]
fn bin_grads(s: Complex64, s_hat: Complex64, p: f64) -> (Complex64, Complex64, Complex64) {
    let zero = Complex64::new(0.0, 0.0);
    let b_mag = s_hat.norm();
    if b_mag == 0.0 {
        return (zero, zero, zero);
    }
    let (a, sc) = compressed(s, p);
    let b = b_mag.powf(p);
    // d|Ŝ|^p / dŜ = p |Ŝ|^(p-2) Ŝ
    let db = s_hat * (p * b / (b_mag * b_mag));
    let g_a = db * (-2.0 * (a - b));
    let g_os = if a > b { db * (-2.0 * (a - b)) } else { zero };
    // L_p = A^2 - 2 Re(conj(Sc) Ŝ) |Ŝ|^(p-1) + |Ŝ|^(2p)
    let re_u = sc.re * s_hat.re + sc.im * s_hat.im;
    let bm1 = b / b_mag;
    let g_quad = s_hat * (2.0 * p * b * b / (b_mag * b_mag));
    let g_cross = sc * bm1 + s_hat * ((p - 1.0) * re_u * bm1 / (b_mag * b_mag));
    let g_p = g_quad - g_cross * 2.0;
    (g_a, g_p, g_os)
}

fn check_pair(reference: &ComplexSpectrogram, estimate: &ComplexSpectrogram) -> Result<()> {
    if reference.shape() != estimate.shape() || reference.data.len() != estimate.data.len() {
        return Err(PseError::Shape(format!(
            "reference {:?} vs estimate {:?}",
            reference.shape(),
            estimate.shape()
        )));
    }
    if reference.data.is_empty() {
        return Err(PseError::InvalidInput("empty spectrogram".into()));
    }
    if !reference.is_finite() || !estimate.is_finite() {
        return Err(PseError::NonFinite("loss input".into()));
    }
    Ok(())
}

fn spectral_loss(
    reference: &ComplexSpectrogram,
    estimate: &ComplexSpectrogram,
    params: &LossParams,
    asymmetric: bool,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<Vec<Complex64>>)> {
    check_pair(reference, estimate)?;
    params.validate()?;
    let n = reference.data.len() as f64;
    let beta = if asymmetric { params.beta } else { 0.0 };
    let (mut la, mut lp, mut los) = (0.0, 0.0, 0.0);
    let mut grad = want_grad.then(|| Vec::with_capacity(reference.data.len()));
    for (&s, &e) in reference.data.iter().zip(&estimate.data) {
        let terms = bin_terms(s, e, params.p);
        la += terms.amplitude;
        lp += terms.phase;
        los += terms.over_suppression;
        if let Some(g) = grad.as_mut() {
            let (ga, gp, gos) = bin_grads(s, e, params.p);
            g.push((ga * params.alpha + gp * (1.0 - params.alpha) + gos * beta) / n);
        }
    }
    let amplitude_term = la / n;
    let phase_term = lp / n;
    let os_term = if asymmetric { los / n } else { 0.0 };
    let total = params.alpha * amplitude_term + (1.0 - params.alpha) * phase_term + beta * os_term;
    Ok((LossBreakdown { amplitude_term, phase_term, os_term, mt_term: 0.0, total }, grad))
}

/// Power-law compressed phase-aware loss.
pub fn plcpa(reference: &ComplexSpectrogram, estimate: &ComplexSpectrogram, params: &LossParams) -> Result<LossBreakdown> {
    Ok(spectral_loss(reference, estimate, params, false, false)?.0)
}

/// PLCPA plus `beta` times the mean squared positive part of the compressed
/// magnitude shortfall `|S|^p - |Ŝ|^p`.
pub fn plcpa_asym(reference: &ComplexSpectrogram, estimate: &ComplexSpectrogram, params: &LossParams) -> Result<LossBreakdown> {
    Ok(spectral_loss(reference, estimate, params, true, false)?.0)
}

pub fn plcpa_with_grad(
    reference: &ComplexSpectrogram,
    estimate: &ComplexSpectrogram,
    params: &LossParams,
) -> Result<(LossBreakdown, Vec<Complex64>)> {
    let (b, g) = spectral_loss(reference, estimate, params, false, true)?;
    Ok((b, g.unwrap_or_default()))
}

pub fn plcpa_asym_with_grad(
    reference: &ComplexSpectrogram,
    estimate: &ComplexSpectrogram,
    params: &LossParams,
) -> Result<(LossBreakdown, Vec<Complex64>)> {
    let (b, g) = spectral_loss(reference, estimate, params, true, true)?;
    Ok((b, g.unwrap_or_default()))
}

/// Feature sequence emitted by a back-end: `frames x dim`, frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSeq {
    pub frames: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

/// An immutable downstream model. Gradients flow through it to the
/// spectrogram but it exposes no way to update its own parameters.
pub trait FrozenBackend: Send + Sync {
    fn feature_dim(&self) -> usize;

    fn features(&self, spec: &ComplexSpectrogram) -> Result<FeatureSeq>;

    /// Vector-Jacobian product: given `dL/dfeatures`, returns `dL/dspec`.
    fn backprop(&self, spec: &ComplexSpectrogram, d_features: &FeatureSeq) -> Result<Vec<Complex64>>;

    /// Flat copy of all parameters, for auditing that nothing changed.
    fn parameter_snapshot(&self) -> Vec<f64>;
}

/// Mean squared distance between back-end features of the enhanced and the
/// clean spectrogram, with its gradient with respect to the enhanced one.
pub fn mt_loss_with_grad(
    backend: &dyn FrozenBackend,
    enhanced: &ComplexSpectrogram,
    clean: &ComplexSpectrogram,
) -> Result<(f64, Vec<Complex64>)> {
    check_pair(clean, enhanced)?;
    let fe = backend.features(enhanced)?;
    let fc = backend.features(clean)?;
    if (fe.frames, fe.dim) != (fc.frames, fc.dim) || fe.data.len() != fc.data.len() {
        return Err(PseError::Shape(format!(
            "back-end produced {}x{} vs {}x{} features",
            fe.frames, fe.dim, fc.frames, fc.dim
        )));
    }
    let n = fe.data.len().max(1) as f64;
    let diff: Vec<f64> = fe.data.iter().zip(&fc.data).map(|(a, b)| a - b).collect();
    let value = diff.iter().map(|d| d * d).sum::<f64>() / n;
    let d_feat = FeatureSeq { frames: fe.frames, dim: fe.dim, data: diff.iter().map(|d| 2.0 * d / n).collect() };
    let grad = backend.backprop(enhanced, &d_feat)?;
    Ok((value, grad))
}

pub fn mt_loss(backend: &dyn FrozenBackend, enhanced: &ComplexSpectrogram, clean: &ComplexSpectrogram) -> Result<f64> {
    Ok(mt_loss_with_grad(backend, enhanced, clean)?.0)
}

/// Full objective: PLCPA or PLCPA-ASYM plus `lambda_mt` times the MT term
/// when a back-end is supplied. Returns the per-bin gradient as well.
pub fn combined_loss_with_grad(
    reference: &ComplexSpectrogram,
    estimate: &ComplexSpectrogram,
    kind: LossKind,
    params: &LossParams,
    backend: Option<&dyn FrozenBackend>,
) -> Result<(LossBreakdown, Vec<Complex64>)> {
    let (mut breakdown, mut grad) = match kind {
        LossKind::Plcpa => plcpa_with_grad(reference, estimate, params)?,
        LossKind::PlcpaAsym => plcpa_asym_with_grad(reference, estimate, params)?,
    };
    if let Some(backend) = backend {
        if params.lambda_mt > 0.0 {
            let (mt, g_mt) = mt_loss_with_grad(backend, estimate, reference)?;
            breakdown.mt_term = mt;
            breakdown.total += params.lambda_mt * mt;
            grad.iter_mut().zip(&g_mt).for_each(|(g, m)| *g += m * params.lambda_mt);
        }
    }
    Ok((breakdown, grad))
}

pub fn combined_loss(
    reference: &ComplexSpectrogram,
    estimate: &ComplexSpectrogram,
    kind: LossKind,
    params: &LossParams,
    backend: Option<&dyn FrozenBackend>,
) -> Result<LossBreakdown> {
    Ok(combined_loss_with_grad(reference, estimate, kind, params, backend)?.0)
}

/// Linear map of per-bin magnitudes: `features[t] = W |X[t]|`.
#[derive(Debug, Clone)]
pub struct LinearBackend {
    pub dim: usize,
    pub bins: usize,
    /// Row-major `dim x bins`.
    pub weights: Vec<f64>,
}

impl FrozenBackend for LinearBackend {
    fn feature_dim(&self) -> usize {
        self.dim
    }

    fn features(&self, spec: &ComplexSpectrogram) -> Result<FeatureSeq> {
        if spec.bins != self.bins {
            return Err(PseError::Shape(format!("backend expects {} bins, got {}", self.bins, spec.bins)));
        }
        let mut data = Vec::with_capacity(spec.frames * self.dim);
        for t in 0..spec.frames {
            let frame = spec.frame(t);
            for d in 0..self.dim {
                let row = &self.weights[d * self.bins..(d + 1) * self.bins];
                data.push(row.iter().zip(frame).map(|(w, c)| w * c.norm()).sum());
            }
        }
        Ok(FeatureSeq { frames: spec.frames, dim: self.dim, data })
    }

    fn backprop(&self, spec: &ComplexSpectrogram, d_features: &FeatureSeq) -> Result<Vec<Complex64>> {
        let mut out = vec![Complex64::new(0.0, 0.0); spec.data.len()];
        for t in 0..spec.frames {
            for f in 0..self.bins {
                let c = spec.at(t, f);
                let m = c.norm();
                if m == 0.0 {
                    continue;
                }
                let dm: f64 = (0..self.dim).map(|d| self.weights[d * self.bins + f] * d_features.data[t * self.dim + d]).sum();
                out[t * self.bins + f] = c * (dm / m);
            }
        }
        Ok(out)
    }

    fn parameter_snapshot(&self) -> Vec<f64> {
        self.weights.clone()
    }
}

/// Seeded two-layer causal convolutional feature extractor over
/// `ln(1 + |X|)`, standing in for a recognizer's acoustic encoder.
///
/// `h[t] = tanh(b1 + sum_k W1[k] m[t-k])`, `y[t] = b2 + sum_k W2[k] h[t-k]`.
#[derive(Debug, Clone)]
pub struct ConvBackend {
    bins: usize,
    hidden: usize,
    dim: usize,
    kernel: usize,
    /// `[k][c][f]`
    w1: Vec<f64>,
    b1: Vec<f64>,
    /// `[k][d][c]`
    w2: Vec<f64>,
    b2: Vec<f64>,
}

impl ConvBackend {
    pub fn new(bins: usize, seed: u64) -> Self {
        Self::with_sizes(bins, 32, 16, 3, seed)
    }

    pub fn with_sizes(bins: usize, hidden: usize, dim: usize, kernel: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std1 = (1.0 / (bins * kernel) as f64).sqrt();
        let std2 = (1.0 / (hidden * kernel) as f64).sqrt();
        let n1 = Normal::new(0.0, std1).expect("finite std");
        let n2 = Normal::new(0.0, std2).expect("finite std");
        let w1 = (0..kernel * hidden * bins).map(|_| n1.sample(&mut rng)).collect();
        let b1 = (0..hidden).map(|_| n1.sample(&mut rng)).collect();
        let w2 = (0..kernel * dim * hidden).map(|_| n2.sample(&mut rng)).collect();
        let b2 = (0..dim).map(|_| n2.sample(&mut rng)).collect();
        Self { bins, hidden, dim, kernel, w1, b1, w2, b2 }
    }

    fn log_mag(spec: &ComplexSpectrogram) -> Vec<f64> {
        spec.data.iter().map(|c| c.norm().ln_1p()).collect()
    }

    fn hidden_layer(&self, m: &[f64], frames: usize) -> Vec<f64> {
        let (h_n, f_n) = (self.hidden, self.bins);
        let mut h = vec![0.0; frames * h_n];
        for t in 0..frames {
            for c in 0..h_n {
                let mut acc = self.b1[c];
                for k in 0..self.kernel.min(t + 1) {
                    let w = &self.w1[(k * h_n + c) * f_n..(k * h_n + c + 1) * f_n];
                    let x = &m[(t - k) * f_n..(t - k + 1) * f_n];
                    acc += w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                }
                h[t * h_n + c] = acc.tanh();
            }
        }
        h
    }
}

impl FrozenBackend for ConvBackend {
    fn feature_dim(&self) -> usize {
        self.dim
    }

    fn features(&self, spec: &ComplexSpectrogram) -> Result<FeatureSeq> {
        if spec.bins != self.bins {
            return Err(PseError::Shape(format!("backend expects {} bins, got {}", self.bins, spec.bins)));
        }
        let frames = spec.frames;
        let h = self.hidden_layer(&Self::log_mag(spec), frames);
        let (h_n, d_n) = (self.hidden, self.dim);
        let mut y = vec![0.0; frames * d_n];
        for t in 0..frames {
            for d in 0..d_n {
                let mut acc = self.b2[d];
                for k in 0..self.kernel.min(t + 1) {
                    let w = &self.w2[(k * d_n + d) * h_n..(k * d_n + d + 1) * h_n];
                    acc += w.iter().zip(&h[(t - k) * h_n..(t - k + 1) * h_n]).map(|(a, b)| a * b).sum::<f64>();
                }
                y[t * d_n + d] = acc;
            }
        }
        Ok(FeatureSeq { frames, dim: d_n, data: y })
    }

    fn backprop(&self, spec: &ComplexSpectrogram, d_features: &FeatureSeq) -> Result<Vec<Complex64>> {
        if spec.bins != self.bins || d_features.data.len() != spec.frames * self.dim {
            return Err(PseError::Shape("backprop input does not match back-end".into()));
        }
        let frames = spec.frames;
        let (h_n, d_n, f_n) = (self.hidden, self.dim, self.bins);
        let h = self.hidden_layer(&Self::log_mag(spec), frames);
        let mut d_h = vec![0.0; frames * h_n];
        for t in 0..frames {
            for d in 0..d_n {
                let g = d_features.data[t * d_n + d];
                if g == 0.0 {
                    continue;
                }
                for k in 0..self.kernel.min(t + 1) {
                    let w = &self.w2[(k * d_n + d) * h_n..(k * d_n + d + 1) * h_n];
                    for (c, wc) in w.iter().enumerate() {
                        d_h[(t - k) * h_n + c] += wc * g;
                    }
                }
            }
        }
        let mut d_m = vec![0.0; frames * f_n];
        for t in 0..frames {
            for c in 0..h_n {
                let hv = h[t * h_n + c];
                let g = d_h[t * h_n + c] * (1.0 - hv * hv);
                if g == 0.0 {
                    continue;
                }
                for k in 0..self.kernel.min(t + 1) {
                    let w = &self.w1[(k * h_n + c) * f_n..(k * h_n + c + 1) * f_n];
                    let row = &mut d_m[(t - k) * f_n..(t - k + 1) * f_n];
                    row.iter_mut().zip(w).for_each(|(r, wv)| *r += wv * g);
                }
            }
        }
        Ok(spec
            .data
            .iter()
            .zip(&d_m)
            .map(|(&c, &g)| {
                let m = c.norm();
                if m == 0.0 {
                    Complex64::new(0.0, 0.0)
                } else {
                    c * (g / (m * (1.0 + m)))
                }
            })
            .collect())
    }

    fn parameter_snapshot(&self) -> Vec<f64> {
        self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2).copied().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{StftConfig, WindowKind, SAMPLE_RATE};
    use rand::Rng;

    fn cfg(bins: usize) -> StftConfig {
        StftConfig { fft_size: bins * 2, window_size: bins * 2, hop_size: bins, window: WindowKind::Hann, drop_dc: true }
    }

    fn spec(frames: usize, bins: usize, data: Vec<Complex64>) -> ComplexSpectrogram {
        ComplexSpectrogram::from_data(frames, data, cfg(bins), SAMPLE_RATE).unwrap()
    }

    fn random_spec(frames: usize, bins: usize, rng: &mut ChaCha8Rng) -> ComplexSpectrogram {
        let data = (0..frames * bins)
            .map(|_| Complex64::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)))
            .collect();
        spec(frames, bins, data)
    }

    #[test]
    fn identical_inputs_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_spec(4, 4, &mut rng);
        assert_eq!(plcpa(&s, &s, &LossParams::plcpa()).unwrap().total, 0.0);
        assert_eq!(plcpa_asym(&s, &s, &LossParams::plcpa_asym()).unwrap().total, 0.0);
    }

    #[test]
    fn opposite_phase_single_bin() {
        let s = spec(1, 1, vec![Complex64::new(1.0, 0.0)]);
        let e = spec(1, 1, vec![Complex64::new(-1.0, 0.0)]);
        let b = plcpa(&s, &e, &LossParams::plcpa()).unwrap();
        assert!(b.amplitude_term.abs() < 1e-12);
        assert!((b.phase_term - 4.0).abs() < 1e-12);
        assert!((b.total - 2.0).abs() < 1e-12);
    }

    #[test]
    fn asym_term_examples() {
        let s = spec(1, 1, vec![Complex64::new(1.0, 0.0)]);
        let e = spec(1, 1, vec![Complex64::new(0.0, 0.0)]);
        let params = LossParams::plcpa_asym();
        let a = plcpa_asym(&s, &e, &params).unwrap();
        let p = plcpa(&s, &e, &params).unwrap();
        assert!((a.os_term - 1.0).abs() < 1e-12);
        assert!((a.total - p.total - 1.0).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = random_spec(4, 4, &mut rng);
        let louder = r.with_data(r.data.iter().map(|c| c * 1.5).collect()).unwrap();
        let a = plcpa_asym(&r, &louder, &params).unwrap();
        assert_eq!(a.os_term, 0.0);
        assert_eq!(a.total, plcpa(&r, &louder, &params).unwrap().total);
    }

    #[test]
    fn input_errors() {
        let a = spec(2, 2, vec![Complex64::new(1.0, 0.0); 4]);
        let b = spec(1, 2, vec![Complex64::new(1.0, 0.0); 2]);
        assert!(matches!(plcpa(&a, &b, &LossParams::plcpa()), Err(PseError::Shape(_))));
        let mut bad = a.clone();
        bad.data[0] = Complex64::new(f64::NAN, 0.0);
        assert!(matches!(plcpa(&a, &bad, &LossParams::plcpa()), Err(PseError::NonFinite(_))));
    }

    #[test]
    fn os_term_is_asymmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_spec(4, 4, &mut rng);
        let b = random_spec(4, 4, &mut rng);
        let p = LossParams::plcpa_asym();
        let ab = plcpa_asym(&a, &b, &p).unwrap();
        let ba = plcpa_asym(&b, &a, &p).unwrap();
        assert!((ab.amplitude_term - ba.amplitude_term).abs() < 1e-12);
        assert!((ab.phase_term - ba.phase_term).abs() < 1e-12);
        assert_ne!(ab.os_term, ba.os_term);
    }

    #[test]
    fn linear_backend_hand_computed() {
        // 2 frames x 3 bins, one feature: f = 1*|x0| + 2*|x1| - 1*|x2|
        let backend = LinearBackend { dim: 1, bins: 3, weights: vec![1.0, 2.0, -1.0] };
        let clean = spec(2, 3, vec![
            Complex64::new(3.0, 4.0), Complex64::new(1.0, 0.0), Complex64::new(0.0, 2.0),
            Complex64::new(0.0, 0.0), Complex64::new(0.0, -1.0), Complex64::new(1.0, 0.0),
        ]);
        let enh = spec(2, 3, vec![
            Complex64::new(0.0, 5.0), Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0),
            Complex64::new(2.0, 0.0), Complex64::new(0.0, -1.0), Complex64::new(1.0, 0.0),
        ]);
        // clean features: [5+2-2, 0+2-1] = [5, 1]; enhanced: [5, 2+2-1] = [5, 3]
        // mean squared distance = (0 + 4) / 2 = 2
        assert!((mt_loss(&backend, &enh, &clean).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(mt_loss(&backend, &clean, &clean).unwrap(), 0.0);
    }

    #[test]
    fn backend_untouched_by_loss_evaluation() {
        let backend = ConvBackend::new(8, 5);
        let before = backend.parameter_snapshot();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_spec(6, 8, &mut rng);
        let b = random_spec(6, 8, &mut rng);
        let _ = mt_loss_with_grad(&backend, &a, &b).unwrap();
        assert_eq!(before, backend.parameter_snapshot());
    }

    #[test]
    fn combined_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_spec(5, 8, &mut rng);
        let b = random_spec(5, 8, &mut rng);
        let backend = ConvBackend::new(8, 1);
        let mut params = LossParams::plcpa();
        let c = combined_loss(&a, &b, LossKind::Plcpa, &params, Some(&backend)).unwrap();
        assert_eq!(c, plcpa(&a, &b, &params).unwrap());
        params = LossParams::plcpa_asym();
        let c = combined_loss(&a, &b, LossKind::PlcpaAsym, &params, Some(&backend)).unwrap();
        assert_eq!(c, plcpa_asym(&a, &b, &params).unwrap());

        params.lambda_mt = 0.7;
        let c = combined_loss(&a, &b, LossKind::PlcpaAsym, &params, Some(&backend)).unwrap();
        let spectral = plcpa_asym(&a, &b, &params).unwrap().total;
        let mt = mt_loss(&backend, &b, &a).unwrap();
        assert!((c.total - (spectral + 0.7 * mt)).abs() < 1e-12);
    }

    fn fd_check(kind: LossKind, params: LossParams, backend: Option<&dyn FrozenBackend>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_spec(4, 8, &mut rng);
        let e = random_spec(4, 8, &mut rng);
        let (_, grad) = combined_loss_with_grad(&s, &e, kind, &params, backend).unwrap();
        let h = 1e-6;
        for i in 0..e.data.len() {
            for (dir, analytic) in [(Complex64::new(h, 0.0), grad[i].re), (Complex64::new(0.0, h), grad[i].im)] {
                let mut plus = e.clone();
                plus.data[i] += dir;
                let mut minus = e.clone();
                minus.data[i] -= dir;
                let fp = combined_loss(&s, &plus, kind, &params, backend).unwrap().total;
                let fm = combined_loss(&s, &minus, kind, &params, backend).unwrap().total;
                let numeric = (fp - fm) / (2.0 * h);
                let err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
                assert!(err < 1e-4, "bin {i}: analytic {analytic} numeric {numeric}");
            }
        }
    }

    #[test]
    fn mt_gradient_matches_finite_differences() {
        let backend = ConvBackend::with_sizes(8, 6, 4, 3, 2);
        let mut params = LossParams::plcpa();
        params.lambda_mt = 1.0;
        fd_check(LossKind::Plcpa, params, Some(&backend), 21);
    }

    #[test]
    fn spectral_gradients_match_finite_differences() {
        fd_check(LossKind::Plcpa, LossParams::plcpa(), None, 31);
        fd_check(LossKind::PlcpaAsym, LossParams::plcpa_asym(), None, 32);
    }

    #[test]
    fn loss_config_defaults() {
        let c: LossConfig = serde_json::from_str(r#"{"loss":"plcpa_asym"}"#).unwrap();
        assert_eq!(c.params(), LossParams::plcpa_asym());
        let c: LossConfig = serde_json::from_str(r#"{"loss":"plcpa","mt":{"enabled":true}}"#).unwrap();
        assert_eq!(c.params().lambda_mt, 1.0);
        assert_eq!(c.label(), "PLCPA+MT");
        assert!(serde_json::from_str::<LossConfig>(r#"{"loss":"plcpa","gamma":1}"#).is_err());
    }
}
