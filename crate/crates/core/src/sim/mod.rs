//! Reverberant mixture simulation: shoebox impulse responses by the image
//! method, distance-constrained placement, SNR-controlled mixing, and the
//! TS1/TS2/TS3 dataset builders.

mod dataset;
mod voices;

pub use dataset::*;
pub use voices::{NoiseKind, NoiseSource, SyntheticSpeaker, SPEECH_RMS};

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dsp::{Waveform, SAMPLE_RATE};
use crate::error::{PseError, Result};

pub const SPEED_OF_SOUND: f64 = 343.0;
pub const DEFAULT_REFLECTION_ORDER: usize = 6;
/// Target distance range from the microphone, in metres.
pub const TARGET_DISTANCE: (f64, f64) = (0.1, 1.3);
/// Interferers are placed strictly further than this from the microphone.
pub const INTERFERER_MIN_DISTANCE: f64 = 2.0;
/// Every source and the microphone keep this distance from all walls.
pub const WALL_MARGIN: f64 = 0.3;
pub const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;
/// Peak level of every normalized mixture.
pub const MIXTURE_PEAK: f64 = 0.5;

pub type Point = [f64; 3];

fn distance(a: Point, b: Point) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    /// Length, width, height in metres.
    pub dimensions: [f64; 3],
    /// Energy absorption per wall in (0, 1], ordered x=0, x=L, y=0, y=W, z=0, z=H.
    pub absorption: [f64; 6],
    pub max_reflection_order: usize,
    pub speed_of_sound: f64,
    pub sample_rate_hz: u32,
}

impl RoomSpec {
    pub fn new(dimensions: [f64; 3], absorption: f64) -> Self {
        Self {
            dimensions,
            absorption: [absorption; 6],
            max_reflection_order: DEFAULT_REFLECTION_ORDER,
            speed_of_sound: SPEED_OF_SOUND,
            sample_rate_hz: SAMPLE_RATE,
        }
    }

    /// Uniform L, W in [3, 8] m, H in [2.5, 4] m, absorption per wall in [0.2, 0.8].
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dimensions = [rng.random_range(3.0..8.0), rng.random_range(3.0..8.0), rng.random_range(2.5..4.0)];
        let mut absorption = [0.0; 6];
        absorption.iter_mut().for_each(|a| *a = rng.random_range(0.2..0.8));
        Self { absorption, ..Self::new(dimensions, 0.5) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dimensions.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(PseError::Geometry(format!("room dimensions {:?}", self.dimensions)));
        }
        if self.absorption.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            return Err(PseError::Geometry(format!("absorption {:?} outside (0, 1]", self.absorption)));
        }
        if !(self.speed_of_sound > 0.0) || self.sample_rate_hz == 0 {
            return Err(PseError::Geometry("speed of sound and sample rate must be positive".into()));
        }
        Ok(())
    }

    pub fn contains(&self, p: Point) -> bool {
        p.iter().zip(&self.dimensions).all(|(x, d)| *x > 0.0 && x < d)
    }

    /// Pressure reflection coefficients `sqrt(1 - absorption)`.
    pub fn reflection(&self) -> [f64; 6] {
        self.absorption.map(|a| (1.0 - a).max(0.0).sqrt())
    }

    /// Delay in samples of a path of `d` metres, rounded to the nearest sample.
    pub fn delay_samples(&self, d: f64) -> usize {
        (d * self.sample_rate_hz as f64 / self.speed_of_sound).round() as usize
    }
}

/// One image source: position and the number of reflections off each wall.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageSource {
    pub position: Point,
    pub hits: [u32; 6],
}

impl ImageSource {
    pub fn order(&self) -> u32 {
        self.hits.iter().sum()
    }
}

/// All image sources of reflection order at most `room.max_reflection_order`.
/// Along each axis an image is indexed by `(n, q)` with coordinate
/// `2nL + (1 - 2q)x`; it has met the near wall `|n - q|` times and the far
/// wall `|n|` times.
pub fn image_sources(room: &RoomSpec, source: Point) -> Vec<ImageSource> {
    let order = room.max_reflection_order as i64;
    let axis = |k: usize| {
        let mut out = Vec::new();
        for n in -order..=order {
            for q in 0..2i64 {
                let near = (n - q).unsigned_abs() as u32;
                let far = n.unsigned_abs() as u32;
                if (near + far) as i64 <= order {
                    let c = 2.0 * n as f64 * room.dimensions[k] + (1 - 2 * q) as f64 * source[k];
                    out.push((c, near, far));
                }
            }
        }
        out
    };
    let (xs, ys, zs) = (axis(0), axis(1), axis(2));
    let mut images = Vec::new();
    for &(x, x0, x1) in &xs {
        for &(y, y0, y1) in &ys {
            for &(z, z0, z1) in &zs {
                let hits = [x0, x1, y0, y1, z0, z1];
                if hits.iter().sum::<u32>() as i64 <= order {
                    images.push(ImageSource { position: [x, y, z], hits });
                }
            }
        }
    }
    images
}

/// Shoebox room impulse response. Each image contributes
/// `prod(beta^hits) / (4 pi d)` at the nearest sample to its delay.
pub fn image_method_rir(room: &RoomSpec, source: Point, mic: Point) -> Result<Waveform> {
    room.validate()?;
    for (name, p) in [("source", source), ("microphone", mic)] {
        if !room.contains(p) {
            return Err(PseError::Geometry(format!("{name} {p:?} outside room {:?}", room.dimensions)));
        }
    }
    let direct = distance(source, mic);
    if direct <= TARGET_DISTANCE.0 {
        return Err(PseError::Geometry(format!("source and microphone {direct:.3} m apart, need more than 0.1 m")));
    }
    let beta = room.reflection();
    let mut taps: Vec<(usize, f64)> = Vec::new();
    for img in image_sources(room, source) {
        let gain: f64 = img.hits.iter().zip(&beta).map(|(&h, b)| b.powi(h as i32)).product();
        if gain == 0.0 {
            continue;
        }
        let d = distance(img.position, mic);
        taps.push((room.delay_samples(d), gain / (4.0 * PI * d)));
    }
    let len = taps.iter().map(|t| t.0).max().unwrap_or(0) + 1;
    let mut h = vec![0.0; len];
    for (i, a) in taps {
        h[i] += a;
    }
    Waveform::new(h, room.sample_rate_hz)
}

/// Linear convolution truncated to `x.len()` samples, via FFT.
pub fn convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    if x.is_empty() || h.is_empty() {
        return vec![0.0; x.len()];
    }
    let n = (x.len() + h.len() - 1).next_power_of_two();
    let mut a: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let mut b: Vec<Complex64> = h.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    a.resize(n, Complex64::new(0.0, 0.0));
    b.resize(n, Complex64::new(0.0, 0.0));
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    fwd.process(&mut a);
    fwd.process(&mut b);
    a.iter_mut().zip(&b).for_each(|(p, q)| *p *= q);
    planner.plan_fft_inverse(n).process(&mut a);
    a.iter().take(x.len()).map(|c| c.re / n as f64).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub mic: Point,
    pub target: Point,
    pub interferer: Point,
    pub noise: Point,
}

impl Placement {
    pub fn target_distance(&self) -> f64 {
        distance(self.target, self.mic)
    }

    pub fn interferer_distance(&self) -> f64 {
        distance(self.interferer, self.mic)
    }
}

fn inner_box(room: &RoomSpec) -> Result<[(f64, f64); 3]> {
    let b = room.dimensions.map(|d| (WALL_MARGIN, d - WALL_MARGIN));
    if b.iter().any(|(lo, hi)| hi <= lo) {
        return Err(PseError::Geometry(format!("room {:?} has no space away from the walls", room.dimensions)));
    }
    Ok(b)
}

fn uniform_point(rng: &mut ChaCha8Rng, b: &[(f64, f64); 3]) -> Point {
    [rng.random_range(b[0].0..b[0].1), rng.random_range(b[1].0..b[1].1), rng.random_range(b[2].0..b[2].1)]
}

fn inside(b: &[(f64, f64); 3], p: Point) -> bool {
    p.iter().zip(b).all(|(x, (lo, hi))| x >= lo && x <= hi)
}

/// Microphone, target, interferer and noise positions, all at least
/// [`WALL_MARGIN`] from every wall. The target distance is uniform on
/// [`TARGET_DISTANCE`]; the interferer is uniform over the region further than
/// [`INTERFERER_MIN_DISTANCE`] from the microphone; the noise source is
/// uniform over the region at least 0.5 m away.
pub fn place_speakers(room: &RoomSpec, seed: u64) -> Result<Placement> {
    room.validate()?;
    let b = inner_box(room)?;
    let diag = b.iter().map(|(lo, hi)| (hi - lo) * (hi - lo)).sum::<f64>().sqrt();
    if diag <= INTERFERER_MIN_DISTANCE {
        return Err(PseError::Geometry(format!(
            "room {:?} cannot hold an interferer more than {INTERFERER_MIN_DISTANCE} m from the microphone",
            room.dimensions
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(TARGET_DISTANCE.0..=TARGET_DISTANCE.1);
    let (mic, target) = (0..MAX_PLACEMENT_ATTEMPTS)
        .find_map(|_| {
            let mic = uniform_point(&mut rng, &b);
            let dir = random_direction(&mut rng);
            let target = [mic[0] + d * dir[0], mic[1] + d * dir[1], mic[2] + d * dir[2]];
            inside(&b, target).then_some((mic, target))
        })
        .ok_or_else(|| PseError::Geometry(format!("no room for a target {d:.2} m from the microphone")))?;
    let mut far_from_mic = |min: f64, what: &str| {
        (0..MAX_PLACEMENT_ATTEMPTS)
            .map(|_| uniform_point(&mut rng, &b))
            .find(|p| distance(*p, mic) > min)
            .ok_or_else(|| PseError::Geometry(format!("no {what} position more than {min} m from the microphone")))
    };
    let interferer = far_from_mic(INTERFERER_MIN_DISTANCE, "interferer")?;
    let noise = far_from_mic(0.5, "noise")?;
    Ok(Placement { mic, target, interferer, noise })
}

fn random_direction(rng: &mut ChaCha8Rng) -> Point {
    let z: f64 = rng.random_range(-1.0..=1.0);
    let phi: f64 = rng.random_range(0.0..2.0 * PI);
    let r = (1.0 - z * z).sqrt();
    [r * phi.cos(), r * phi.sin(), z]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Scenario {
    /// Target, interfering speaker and noise.
    TS1,
    /// Target and noise.
    TS2,
    /// Target only.
    TS3,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::TS1, Scenario::TS2, Scenario::TS3];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::TS1 => "TS1",
            Scenario::TS2 => "TS2",
            Scenario::TS3 => "TS3",
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub scenario: Scenario,
    pub target_speaker_id: String,
    pub interferer_id: Option<String>,
    pub noise_id: Option<String>,
    /// Target-to-noise ratio in dB.
    pub snr_db: Option<f64>,
    /// Target-to-interferer ratio in dB.
    pub sir_db: Option<f64>,
    pub seed: u64,
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        let (interferer, noise) = match self.scenario {
            Scenario::TS1 => (true, true),
            Scenario::TS2 => (false, true),
            Scenario::TS3 => (false, false),
        };
        let check = |present: bool, id: &Option<String>, level: Option<f64>, what: &str| {
            if present != id.is_some() || present != level.is_some() {
                return Err(PseError::InvalidInput(format!("{} mixture with inconsistent {what} fields", self.scenario)));
            }
            match level {
                Some(l) if !l.is_finite() => Err(PseError::InvalidInput(format!("{what} level {l}"))),
                _ => Ok(()),
            }
        };
        check(interferer, &self.interferer_id, self.sir_db, "interferer")?;
        check(noise, &self.noise_id, self.snr_db, "noise")
    }
}

/// Dry source signals for one mixture.
#[derive(Debug, Clone)]
pub struct MixtureSources {
    pub target: Waveform,
    pub interferer: Option<Waveform>,
    pub noise: Option<Waveform>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureMetadata {
    pub spec: MixtureSpec,
    pub room: RoomSpec,
    pub positions: Placement,
    /// Gain applied to every component by peak normalization.
    pub gain: f64,
}

#[derive(Debug, Clone)]
pub struct MixtureSample {
    pub mixture: Waveform,
    /// Reverberant target after normalization; the training reference.
    pub target_reverberant: Waveform,
    pub interferer_reverberant: Option<Waveform>,
    pub noise_reverberant: Option<Waveform>,
    pub metadata: MixtureMetadata,
}

/// Trims or loops `w` to exactly `len` samples.
pub fn fit_length(w: &Waveform, len: usize) -> Result<Waveform> {
    if w.is_empty() {
        return Err(PseError::InvalidInput("empty source".into()));
    }
    let samples = w.samples.iter().cycle().take(len).copied().collect();
    Waveform::new(samples, w.sample_rate_hz)
}

/// Convolves `dry` with the RIR from `source` to the microphone.
pub fn reverberate(room: &RoomSpec, source: Point, mic: Point, dry: &Waveform) -> Result<Waveform> {
    let h = image_method_rir(room, source, mic)?;
    Waveform::new(convolve(&dry.samples, &h.samples), dry.sample_rate_hz)
}

/// Gain that puts `component` at `ratio_db` below `reference` in power.
pub fn gain_for_ratio(reference: &Waveform, component: &Waveform, ratio_db: f64) -> Result<f64> {
    let (pr, pc) = (reference.power(), component.power());
    if !(pc > 0.0) || !(pr > 0.0) {
        return Err(PseError::InvalidInput("cannot set a level ratio against a silent signal".into()));
    }
    Ok((pr / (pc * 10f64.powf(ratio_db / 10.0))).sqrt())
}

/// Sums components in order; the mixture is exactly this sum.
pub fn sum_components(parts: &[&Waveform]) -> Result<Waveform> {
    let mut out = vec![0.0; parts[0].len()];
    for p in parts {
        if p.len() != out.len() {
            return Err(PseError::Shape("component lengths differ".into()));
        }
        out.iter_mut().zip(&p.samples).for_each(|(o, s)| *o += s);
    }
    Waveform::new(out, parts[0].sample_rate_hz)
}

/// Reverberates every source, sets the interferer and noise levels against
/// the reverberant target, sums, and normalizes the peak to [`MIXTURE_PEAK`].
/// All sources are first fitted to `segment_len` samples.
pub fn synthesize_mixture(
    spec: &MixtureSpec,
    sources: &MixtureSources,
    room: &RoomSpec,
    positions: &Placement,
    segment_len: usize,
) -> Result<MixtureSample> {
    spec.validate()?;
    if segment_len == 0 {
        return Err(PseError::InvalidInput("zero segment length".into()));
    }
    if sources.interferer.is_some() != spec.interferer_id.is_some() || sources.noise.is_some() != spec.noise_id.is_some() {
        return Err(PseError::InvalidInput(format!("sources do not match the {} spec", spec.scenario)));
    }
    let prepare = |w: &Waveform, pos: Point, what: &str| -> Result<Waveform> {
        if w.energy() == 0.0 {
            return Err(PseError::InvalidInput(format!("{what} source is silent")));
        }
        reverberate(room, pos, positions.mic, &fit_length(w, segment_len)?)
    };
    let target = prepare(&sources.target, positions.target, "target")?;
    let interferer = match (&sources.interferer, spec.sir_db) {
        (Some(w), Some(sir)) => {
            let r = prepare(w, positions.interferer, "interferer")?;
            Some(r.scaled(gain_for_ratio(&target, &r, sir)?))
        }
        _ => None,
    };
    let noise = match (&sources.noise, spec.snr_db) {
        (Some(w), Some(snr)) => {
            let r = prepare(w, positions.noise, "noise")?;
            Some(r.scaled(gain_for_ratio(&target, &r, snr)?))
        }
        _ => None,
    };
    let mut parts = vec![&target];
    parts.extend(interferer.iter());
    parts.extend(noise.iter());
    let peak = sum_components(&parts)?.peak();
    if !(peak > 0.0) {
        return Err(PseError::InvalidInput("mixture is silent".into()));
    }
    let gain = MIXTURE_PEAK / peak;
    let target = target.scaled(gain);
    let interferer = interferer.map(|w| w.scaled(gain));
    let noise = noise.map(|w| w.scaled(gain));
    let mut parts = vec![&target];
    parts.extend(interferer.iter());
    parts.extend(noise.iter());
    let mixture = sum_components(&parts)?;
    assert!(mixture.peak() <= 1.0, "normalized mixture clips");
    Ok(MixtureSample {
        mixture,
        target_reverberant: target,
        interferer_reverberant: interferer,
        noise_reverberant: noise,
        metadata: MixtureMetadata { spec: spec.clone(), room: room.clone(), positions: *positions, gain },
    })
}
