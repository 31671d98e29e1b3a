//! Image-method room responses and TS1/TS2/TS3 mixtures written to WAV.

use pse::audio::write_wav;
use pse::sim::{
    image_method_rir, place_speakers, synthesize_mixture, MixtureSources, MixtureSpec, NoiseKind, NoiseSource, RoomSpec,
    Scenario, SyntheticSpeaker,
};

fn main() -> pse::Result<()> {
    let out = std::env::temp_dir().join("pse_room_mixtures");
    std::fs::create_dir_all(&out)?;

    let room = RoomSpec::random(3);
    let pos = place_speakers(&room, 3)?;
    println!("room {:?} m, absorption {:?}", room.dimensions, room.absorption.map(|a| (a * 100.0).round() / 100.0));
    println!("target {:.2} m, interferer {:.2} m from the mic", pos.target_distance(), pos.interferer_distance());

    let rir = image_method_rir(&room, pos.target, pos.mic)?;
    let first = rir.samples.iter().position(|v| *v != 0.0).unwrap_or(0);
    let energy: f64 = rir.samples.iter().map(|v| v * v).sum();
    let tail: f64 = rir.samples.iter().skip(first + 800).map(|v| v * v).sum();
    println!("direct path at sample {first}; {:.1}% of energy arrives after 50 ms", 100.0 * tail / energy);

    let secs = 4.0;
    let sources = MixtureSources {
        target: SyntheticSpeaker::random("alice", 1).utterance(secs, 10)?,
        interferer: Some(SyntheticSpeaker::random("bob", 2).utterance(secs, 11)?),
        noise: Some(NoiseSource { id: "hum".into(), kind: NoiseKind::Machine, seed: 4 }.render(secs)?),
    };
    for scenario in Scenario::ALL {
        let spec = MixtureSpec {
            scenario,
            target_speaker_id: "alice".into(),
            interferer_id: (scenario == Scenario::TS1).then(|| "bob".into()),
            noise_id: (scenario != Scenario::TS3).then(|| "hum".into()),
            snr_db: (scenario != Scenario::TS3).then_some(5.0),
            sir_db: (scenario == Scenario::TS1).then_some(0.0),
            seed: 7,
        };
        let sources = MixtureSources {
            target: sources.target.clone(),
            interferer: sources.interferer.clone().filter(|_| spec.interferer_id.is_some()),
            noise: sources.noise.clone().filter(|_| spec.noise_id.is_some()),
        };
        let sample = synthesize_mixture(&spec, &sources, &room, &pos, (secs * 16000.0) as usize)?;
        let mix = out.join(format!("{}_mix.wav", scenario.name().to_lowercase()));
        write_wav(&mix, &sample.mixture)?;
        write_wav(out.join(format!("{}_ref.wav", scenario.name().to_lowercase())), &sample.target_reverberant)?;
        println!("{scenario}: peak {:.3}, wrote {}", sample.mixture.peak(), mix.display());
    }
    Ok(())
}
