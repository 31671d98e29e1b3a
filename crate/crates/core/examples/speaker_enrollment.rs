//! Enroll synthetic speakers and compare their d-vectors.

use pse::embedding::{extract_dvector, extract_dvector_from_noisy, EmbeddingCache, SpectralStatsProvider, DVECTOR_DIM};
use pse::sim::{NoiseKind, NoiseSource, SyntheticSpeaker};

fn main() -> pse::Result<()> {
    let provider = SpectralStatsProvider::new(DVECTOR_DIM, 11);
    let speakers: Vec<SyntheticSpeaker> = (0..4).map(|i| SyntheticSpeaker::random(&format!("spk{i}"), 40 + i)).collect();

    let mut cache = EmbeddingCache::new(DVECTOR_DIM);
    for s in &speakers {
        let clips = [s.utterance(2.0, 1)?, s.utterance(2.0, 2)?];
        cache.insert(&s.id, &extract_dvector(&provider, &clips)?);
        println!("{}: f0 {:.0} Hz, formant scale {:.2}", s.id, s.f0_hz, s.formant_scale);
    }

    println!("\ncosine similarity, enrollment vs a fresh utterance:");
    for a in &speakers {
        let probe = extract_dvector(&provider, &[a.utterance(3.0, 99)?])?;
        let row: Vec<String> = speakers.iter().map(|b| format!("{:6.3}", probe.cosine(&cache.get(&b.id).unwrap()))).collect();
        println!("  {} {}", a.id, row.join(" "));
    }

    // noisy-utterance d-vectors drift away from the clean enrollment
    let clean = speakers[0].utterance(3.0, 7)?;
    let noise = NoiseSource { id: "n".into(), kind: NoiseKind::Babble, seed: 3 }.render(3.0)?;
    for gain in [0.0, 0.5, 1.0, 2.0] {
        let noisy = pse::dsp::Waveform::new(clean.samples.iter().zip(&noise.samples).map(|(s, n)| s + gain * n).collect(), clean.sample_rate_hz)?;
        let d = extract_dvector_from_noisy(&provider, &noisy)?;
        println!("noise gain {gain:.1}: cosine to enrollment {:.3}", d.cosine(&cache.get("spk0")?));
    }

    let path = std::env::temp_dir().join("pse_embeddings.json");
    cache.save(&path)?;
    println!("\nsaved {} embeddings to {}", cache.embeddings.len(), path.display());
    Ok(())
}
