//! Frame-level target-speaker over-suppression on an estimate with muted
//! stretches.

use pse::dsp::{stft, StftConfig, Waveform};
use pse::metrics::{si_sdr, tsos_frames, tsos_report, MetricParams};
use pse::sim::SyntheticSpeaker;

fn main() -> pse::Result<()> {
    let cfg = StftConfig::default();
    let params = MetricParams::default();
    let target = SyntheticSpeaker::random("spk", 8).utterance(4.0, 2)?;
    let reference = stft(&target, &cfg)?;

    let attenuate = |from: f64, to: f64, gain: f64| -> pse::Result<Waveform> {
        let fs = target.sample_rate_hz as f64;
        let s = target
            .samples
            .iter()
            .enumerate()
            .map(|(i, v)| if (from * fs..to * fs).contains(&(i as f64)) { v * gain } else { *v })
            .collect();
        Waveform::new(s, target.sample_rate_hz)
    };

    for (label, est) in [
        ("untouched", target.clone()),
        ("-3 dB over 1.0-2.0 s", attenuate(1.0, 2.0, 0.7)?),
        ("muted 1.0-1.5 s", attenuate(1.0, 1.5, 0.0)?),
        ("muted 0.5-2.5 s", attenuate(0.5, 2.5, 0.0)?),
    ] {
        let flags = tsos_frames(&reference, &stft(&est, &cfg)?, &params)?;
        let r = tsos_report(&flags, &params)?;
        println!(
            "{label:>22}: TSOS {:5.1}% total {:.2} s longest {:.2} s SI-SDR {:6.1} dB",
            r.percent_os_frames,
            r.total_os_duration,
            r.max_os_duration,
            si_sdr(&target, &est)?
        );
    }
    Ok(())
}
