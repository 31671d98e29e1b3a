//! Synthetic stand-ins for clean speech and noise corpora.
//!
//! A speaker is a glottal-pulse-like harmonic source with its own pitch range,
//! formant scaling and spectral tilt. Utterances are sequences of voiced
//! syllables (random vowels with a pitch contour) and short fricative bursts,
//! separated by pauses, so frame-level metrics see both speech and silence.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dsp::{Waveform, SAMPLE_RATE};
use crate::error::{PseError, Result};

/// RMS level of generated utterances, about -26 dBFS.
pub const SPEECH_RMS: f64 = 0.05;

/// Vowel formant centres (F1, F2, F3) in Hz for an average adult voice.
const VOWELS: [[f64; 3]; 5] = [[730.0, 1090.0, 2440.0], [270.0, 2290.0, 3010.0], [300.0, 870.0, 2240.0], [530.0, 1840.0, 2480.0], [570.0, 840.0, 2410.0]];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpeaker {
    pub id: String,
    /// Mean fundamental frequency in Hz.
    pub f0_hz: f64,
    /// Multiplier on every formant frequency (vocal tract length).
    pub formant_scale: f64,
    /// Spectral tilt in dB per octave above 500 Hz (negative).
    pub tilt_db_per_octave: f64,
    /// Relative breathiness, the level of aspiration noise.
    pub breathiness: f64,
}

impl SyntheticSpeaker {
    /// Draws a voice from `seed`: f0 log-uniform in [85, 255] Hz.
    pub fn random(id: impl Into<String>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f0_hz = (85f64.ln() + rng.random::<f64>() * (255f64.ln() - 85f64.ln())).exp();
        Self {
            id: id.into(),
            f0_hz,
            formant_scale: rng.random_range(0.85..1.2),
            tilt_db_per_octave: rng.random_range(-14.0..-8.0),
            breathiness: rng.random_range(0.01..0.08),
        }
    }

    /// A speech-like utterance of `duration_s` seconds at [`SPEECH_RMS`].
    pub fn utterance(&self, duration_s: f64, seed: u64) -> Result<Waveform> {
        if !(duration_s > 0.0) {
            return Err(PseError::InvalidInput(format!("utterance duration {duration_s}")));
        }
        let fs = SAMPLE_RATE as f64;
        let n = (duration_s * fs).round() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = vec![0.0; n];
        // leading pause so utterances do not all start on a syllable onset
        let mut pos = (rng.random_range(0.02..0.15) * fs) as usize;
        while pos < n {
            let voiced = rng.random::<f64>() < 0.8;
            let len = if voiced { rng.random_range(0.12..0.32) } else { rng.random_range(0.05..0.12) };
            let len = ((len * fs) as usize).min(n - pos);
            if voiced {
                self.syllable(&mut out[pos..pos + len], &mut rng);
            } else {
                fricative(&mut out[pos..pos + len], &mut rng);
            }
            pos += len;
            // pauses: mostly short gaps, sometimes phrase breaks
            let gap = if rng.random::<f64>() < 0.15 { rng.random_range(0.25..0.5) } else { rng.random_range(0.03..0.12) };
            pos += (gap * fs) as usize;
        }
        let rms = (out.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
        if rms > 0.0 {
            out.iter_mut().for_each(|v| *v *= SPEECH_RMS / rms);
        }
        Waveform::new(out, SAMPLE_RATE)
    }

    fn syllable(&self, out: &mut [f64], rng: &mut ChaCha8Rng) {
        let fs = SAMPLE_RATE as f64;
        let n = out.len();
        let formants = VOWELS[rng.random_range(0..VOWELS.len())].map(|f| f * self.formant_scale);
        let bandwidths = [80.0, 110.0, 160.0];
        // rising or falling pitch contour around the speaker mean
        let start = self.f0_hz * rng.random_range(0.9..1.12);
        let end = self.f0_hz * rng.random_range(0.85..1.1);
        let gain = rng.random_range(0.6..1.0);
        let noise = Normal::new(0.0, 1.0).expect("unit normal");
        let max_harmonics = (7600.0 / (self.f0_hz * 0.85)).floor() as usize;
        let amp = |f: f64| -> f64 {
            let resonance: f64 = formants
                .iter()
                .zip(bandwidths)
                .map(|(&fc, bw)| 1.0 / (1.0 + ((f - fc) / (bw / 2.0)).powi(2)))
                .sum();
            let tilt = if f > 500.0 { 10f64.powf(self.tilt_db_per_octave * (f / 500.0).log2() / 20.0) } else { 1.0 };
            (0.05 + resonance) * tilt
        };
        let mut phase = 0.0;
        for (i, o) in out.iter_mut().enumerate() {
            let x = i as f64 / n.max(1) as f64;
            let f0 = start + (end - start) * x;
            phase += 2.0 * PI * f0 / fs;
            let mut s = 0.0;
            for k in 1..=max_harmonics {
                let fk = k as f64 * f0;
                if fk > 7600.0 {
                    break;
                }
                s += amp(fk) * (k as f64 * phase).sin();
            }
            s += self.breathiness * noise.sample(rng);
            *o += gain * envelope(x) * s;
        }
    }
}

/// Raised-cosine attack and release over the first and last 20%.
fn envelope(x: f64) -> f64 {
    let edge = 0.2;
    if x < edge {
        0.5 - 0.5 * (PI * x / edge).cos()
    } else if x > 1.0 - edge {
        0.5 - 0.5 * (PI * (1.0 - x) / edge).cos()
    } else {
        1.0
    }
}

/// High-passed noise burst.
fn fricative(out: &mut [f64], rng: &mut ChaCha8Rng) {
    let n = out.len();
    let noise = Normal::new(0.0, 0.15).expect("normal");
    let mut prev = 0.0;
    for (i, o) in out.iter_mut().enumerate() {
        let w = noise.sample(rng);
        *o += envelope(i as f64 / n.max(1) as f64) * (w - 0.9 * prev);
        prev = w;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    White,
    Pink,
    Brown,
    /// Low-passed noise with a few tonal components, like a fan or engine.
    Machine,
    /// Several overlapping synthetic voices.
    Babble,
    /// Noise bursts with random on/off gating.
    Transient,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 6] =
        [NoiseKind::White, NoiseKind::Pink, NoiseKind::Brown, NoiseKind::Machine, NoiseKind::Babble, NoiseKind::Transient];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSource {
    pub id: String,
    pub kind: NoiseKind,
    pub seed: u64,
}

impl NoiseSource {
    /// `duration_s` seconds at unit-less RMS [`SPEECH_RMS`].
    pub fn render(&self, duration_s: f64) -> Result<Waveform> {
        let n = (duration_s * SAMPLE_RATE as f64).round() as usize;
        if n == 0 {
            return Err(PseError::InvalidInput("zero-length noise".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut out = match self.kind {
            NoiseKind::White => white(n, &mut rng),
            NoiseKind::Pink => shaped(n, &mut rng, |f| 1.0 / f.max(20.0).sqrt()),
            NoiseKind::Brown => shaped(n, &mut rng, |f| 1.0 / f.max(20.0)),
            NoiseKind::Machine => {
                let mut x = shaped(n, &mut rng, |f| 1.0 / (1.0 + (f / 400.0).powi(2)));
                let rms = rms(&x);
                let base = rng.random_range(40.0..160.0);
                for k in 1..=4 {
                    let a = rms * rng.random_range(0.3..1.0) / k as f64;
                    let ph = rng.random_range(0.0..2.0 * PI);
                    for (i, v) in x.iter_mut().enumerate() {
                        *v += a * (2.0 * PI * base * k as f64 * i as f64 / SAMPLE_RATE as f64 + ph).sin();
                    }
                }
                x
            }
            NoiseKind::Babble => {
                let mut x = vec![0.0; n];
                for v in 0..5u64 {
                    let voice = SyntheticSpeaker::random(format!("babble{v}"), self.seed.wrapping_mul(31).wrapping_add(v));
                    let u = voice.utterance(duration_s, self.seed ^ (v + 1))?;
                    x.iter_mut().zip(&u.samples).for_each(|(a, b)| *a += b);
                }
                x
            }
            NoiseKind::Transient => {
                let mut x = white(n, &mut rng);
                let mut on = true;
                let mut i = 0;
                while i < n {
                    let len = (rng.random_range(0.03..0.3) * SAMPLE_RATE as f64) as usize;
                    if !on {
                        x[i..(i + len).min(n)].iter_mut().for_each(|v| *v *= 0.05);
                    }
                    on = !on;
                    i += len;
                }
                x
            }
        };
        let r = rms(&out);
        if r > 0.0 {
            out.iter_mut().for_each(|v| *v *= SPEECH_RMS / r);
        }
        Waveform::new(out, SAMPLE_RATE)
    }
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

fn white(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..n).map(|_| normal.sample(rng)).collect()
}

/// White noise with magnitude response `gain(f_hz)` applied in the frequency domain.
fn shaped(n: usize, rng: &mut ChaCha8Rng, gain: impl Fn(f64) -> f64) -> Vec<f64> {
    let mut buf: Vec<Complex64> = white(n, rng).into_iter().map(|v| Complex64::new(v, 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, c) in buf.iter_mut().enumerate() {
        let bin = k.min(n - k);
        *c *= gain(bin as f64 * SAMPLE_RATE as f64 / n as f64);
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| c.re / n as f64).collect()
}
