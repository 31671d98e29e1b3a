//! Build both conditioned networks, check causality and enhance a clip.

use pse::dsp::{stft, StftConfig, Waveform, SAMPLE_RATE};
use pse::embedding::{extract_dvector, SpectralStatsProvider, DVECTOR_DIM};
use pse::models::{enhance, ModelConfig, ModelKind, Preset, PseModel, PseNetwork};
use pse::sim::SyntheticSpeaker;

fn main() -> pse::Result<()> {
    let speaker = SyntheticSpeaker::random("spk", 5);
    let d = extract_dvector(&SpectralStatsProvider::new(DVECTOR_DIM, 11), &[speaker.utterance(3.0, 1)?])?;
    let clip = speaker.utterance(1.0, 2)?;
    let cfg = StftConfig::default();

    for kind in [ModelKind::Pdccrn, ModelKind::Pdcattunet] {
        for preset in [Preset::Paper, Preset::Small] {
            let net = PseNetwork::build(&ModelConfig::preset(kind, preset), 0)?;
            println!("{kind:?} {preset:?}: {} parameters", net.num_parameters());
        }
        let net = PseNetwork::build(&ModelConfig::preset(kind, Preset::Small), 0)?;

        // change the input after frame 30; the mask up to frame 30 must not move
        let mut late = clip.samples.clone();
        for v in late.iter_mut().skip(31 * cfg.hop_size) {
            *v = -*v * 3.0;
        }
        let a = net.predict_mask(&stft(&clip, &cfg)?, &d)?;
        let b = net.predict_mask(&stft(&Waveform::new(late, SAMPLE_RATE)?, &cfg)?, &d)?;
        let prefix = 30 * a.bins;
        let diff = a.data[..prefix].iter().zip(&b.data[..prefix]).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
        println!("  largest mask change on the unchanged prefix: {diff:e}");

        let out = enhance(&net, &cfg, &clip, &d)?;
        println!("  enhanced {} samples (untrained network)", out.len());
    }
    Ok(())
}
