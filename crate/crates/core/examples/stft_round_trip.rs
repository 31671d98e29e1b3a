//! Analysis/synthesis round trip with the default and full-band STFTs.

use pse::dsp::{istft, stft, StftConfig, Waveform, SAMPLE_RATE};

fn snr_db(reference: &[f64], estimate: &[f64]) -> f64 {
    let signal: f64 = reference.iter().map(|v| v * v).sum();
    let error: f64 = reference.iter().zip(estimate).map(|(a, b)| (a - b).powi(2)).sum();
    10.0 * (signal / error.max(1e-300)).log10()
}

fn main() -> pse::Result<()> {
    // a chirp plus two tones, all well above DC
    let n = SAMPLE_RATE as usize;
    let samples: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / SAMPLE_RATE as f64;
            0.3 * (2.0 * std::f64::consts::PI * (200.0 + 900.0 * t) * t).sin()
                + 0.1 * (2.0 * std::f64::consts::PI * 440.0 * t).sin()
                + 0.05 * (2.0 * std::f64::consts::PI * 3150.0 * t).cos()
        })
        .collect();
    let w = Waveform::new(samples, SAMPLE_RATE)?;

    for (name, cfg) in [("default", StftConfig::default()), ("full band", StftConfig::full_band())] {
        let spec = stft(&w, &cfg)?;
        let back = istft(&spec)?;
        println!(
            "{name:>9}: {} frames x {} bins at {:.1} frames/s, round trip {:.1} dB",
            spec.frames,
            spec.bins,
            spec.frame_rate_hz(),
            snr_db(&w.samples, &back.samples)
        );
    }
    Ok(())
}
