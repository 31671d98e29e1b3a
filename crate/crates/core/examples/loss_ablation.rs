//! Train the four loss variants on one corpus and compare them.
//!
//! `cargo run --release --example loss_ablation -- [steps]`

use pse::dsp::{StftConfig, SAMPLE_RATE};
use pse::embedding::{enroll, read_enrollment_manifest, SpectralStatsProvider, DVECTOR_DIM};
use pse::eval::{evaluate, Candidate};
use pse::metrics::MetricParams;
use pse::models::{ModelConfig, ModelKind, Preset};
use pse::sim::{layout, read_eval_items, simulate, Scenario, SimConfig};
use pse::train::{ablation_matrix, load_examples, DvectorSource, TrainConfig};

fn main() -> pse::Result<()> {
    let steps = std::env::args().nth(1).map(|s| s.parse().expect("steps")).unwrap_or(40);
    let root = std::env::temp_dir().join("pse_loss_ablation");
    let sim = SimConfig {
        train_speakers: 4,
        test_speakers: 2,
        utterances_per_speaker: 5,
        utterance_s: 3.0,
        train_samples: 16,
        valid_samples: 4,
        test_samples: 4,
        segment_s: 2.0,
        long_form: false,
        ..SimConfig::default()
    };
    simulate(&root, &sim, 2)?;

    let provider = SpectralStatsProvider::new(DVECTOR_DIM, 11);
    let enrolled = enroll(&provider, &read_enrollment_manifest(root.join(layout::ENROLLMENT))?, &root)?;
    let base = TrainConfig {
        model: ModelConfig::preset(ModelKind::Pdccrn, Preset::Small),
        segment_s: 1.0,
        max_steps: steps,
        validation_interval: 10,
        ..TrainConfig::default()
    };
    let stft = StftConfig::default();
    let train_items = read_eval_items(root.join(layout::TRAIN))?;
    let valid_items = read_eval_items(root.join(layout::VALID))?;

    let variants = ablation_matrix(&base, |cfg| {
        // multi-task variants condition on d-vectors of the noisy utterance
        let source = if cfg.loss.mt.enabled { DvectorSource::Noisy(&provider) } else { DvectorSource::Enrollment(&enrolled) };
        let len = cfg.segment_len(SAMPLE_RATE);
        Ok((
            load_examples(&train_items, &root, len, &source, &stft)?,
            load_examples(&valid_items, &root, len, &source, &stft)?,
        ))
    })?;

    let mut items = Vec::new();
    for name in layout::TEST {
        items.extend(read_eval_items(root.join(name))?);
    }
    let candidates: Vec<Candidate<'_>> =
        variants.iter().map(|(cfg, out)| Candidate::model(cfg.loss.label(), &out.network)).collect();
    let (report, _) = evaluate(&candidates, &items, &root, &enrolled, &MetricParams::default())?;
    print!("{}", report.render());

    let mut order: Vec<(String, f64)> = report
        .rows
        .iter()
        .filter(|r| r.scenario == Scenario::TS1)
        .map(|r| (r.model.clone(), r.tsos_percent))
        .collect();
    order.sort_by(|a, b| a.1.total_cmp(&b.1));
    println!("\nTS1 TSOS, lowest first:");
    for (model, tsos) in order {
        println!("  {tsos:6.2}%  {model}");
    }
    Ok(())
}
