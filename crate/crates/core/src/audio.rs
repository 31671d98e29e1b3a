//! 16-bit PCM mono WAV input/output.

use std::path::Path;

use crate::dsp::{Waveform, SAMPLE_RATE};
use crate::error::{PseError, Result};

pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(PseError::InvalidInput(format!("{}: expected mono, got {} channels", path.display(), spec.channels)));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(PseError::InvalidInput(format!(
            "{}: expected {SAMPLE_RATE} Hz, got {} Hz",
            path.display(),
            spec.sample_rate
        )));
    }
    let samples = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>()?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<Vec<_>, _>>()?,
        (fmt, bits) => {
            return Err(PseError::InvalidInput(format!("{}: unsupported sample format {fmt:?}/{bits}", path.display())))
        }
    };
    Waveform::new(samples, spec.sample_rate)
}

/// Quantizes to 16-bit PCM, clamping to [-1, 1).
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    if let Some(parent) = path.as_ref().parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in &w.samples {
        writer.write_sample(quantize(s))?;
    }
    writer.finalize()?;
    Ok(())
}

pub fn quantize(s: f64) -> i16 {
    (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// The waveform exactly as it would read back after a 16-bit round trip.
pub fn quantized(w: &Waveform) -> Waveform {
    Waveform {
        samples: w.samples.iter().map(|&s| quantize(s) as f64 / 32768.0).collect(),
        sample_rate_hz: w.sample_rate_hz,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pcm_round_trip_matches_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let w = Waveform::new((0..1000).map(|i| (i as f64 * 0.01).sin() * 0.7).collect(), SAMPLE_RATE).unwrap();
        write_wav(&path, &w).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back, quantized(&w));
    }

    #[test]
    fn wrong_rate_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.wav");
        write_wav(&path, &Waveform { samples: vec![0.0; 10], sample_rate_hz: 8000 }).unwrap();
        assert!(read_wav(&path).is_err());
    }
}
