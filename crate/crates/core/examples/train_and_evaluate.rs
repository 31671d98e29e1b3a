//! Simulate a small corpus, train a small pDCCRN, keep the best checkpoint
//! and score it on the three test scenarios.
//!
//! `cargo run --release --example train_and_evaluate -- [steps]`

use pse::checkpoint::Checkpoint;
use pse::dsp::{StftConfig, SAMPLE_RATE};
use pse::embedding::{enroll, read_enrollment_manifest, SpectralStatsProvider, DVECTOR_DIM};
use pse::eval::{evaluate, Candidate};
use pse::metrics::MetricParams;
use pse::models::{ModelConfig, ModelKind, Preset};
use pse::sim::{layout, read_eval_items, simulate, SimConfig};
use pse::train::{load_examples, train, write_log, DvectorSource, TrainConfig};

fn main() -> pse::Result<()> {
    let steps = std::env::args().nth(1).map(|s| s.parse().expect("steps")).unwrap_or(60);
    let root = std::env::temp_dir().join("pse_train_and_evaluate");
    let sim = SimConfig {
        train_speakers: 4,
        test_speakers: 2,
        utterances_per_speaker: 5,
        utterance_s: 3.0,
        train_samples: 24,
        valid_samples: 4,
        test_samples: 4,
        segment_s: 2.0,
        long_form: false,
        ..SimConfig::default()
    };
    simulate(&root, &sim, 1)?;

    let provider = SpectralStatsProvider::new(DVECTOR_DIM, 11);
    let enrolled = enroll(&provider, &read_enrollment_manifest(root.join(layout::ENROLLMENT))?, &root)?;
    let cfg = TrainConfig {
        model: ModelConfig::preset(ModelKind::Pdccrn, Preset::Small),
        segment_s: 1.0,
        max_steps: steps,
        validation_interval: 20,
        ..TrainConfig::default()
    };
    let source = DvectorSource::Enrollment(&enrolled);
    let len = cfg.segment_len(SAMPLE_RATE);
    let stft = StftConfig::default();
    let train_set = load_examples(&read_eval_items(root.join(layout::TRAIN))?, &root, len, &source, &stft)?;
    let valid_set = load_examples(&read_eval_items(root.join(layout::VALID))?, &root, len, &source, &stft)?;

    let outcome = train(&cfg, &train_set, &valid_set)?;
    for r in outcome.log.iter().filter(|r| r.valid_loss.is_some()) {
        println!("step {:4} train {:.4} valid {:.4}", r.step, r.loss, r.valid_loss.unwrap_or_default());
    }
    println!("best checkpoint: step {} ({:.4})", outcome.best_step, outcome.best_valid_loss);
    let ckpt_path = root.join("checkpoint.pse");
    outcome.checkpoint(&cfg)?.save(&ckpt_path)?;
    write_log(root.join("train_log.jsonl"), &outcome.log)?;

    let net = Checkpoint::load(&ckpt_path)?.to_network()?;
    let mut items = Vec::new();
    for name in layout::TEST {
        items.extend(read_eval_items(root.join(name))?);
    }
    let model = [Candidate::model("pDCCRN-small PLCPA", &net)];
    let (report, _) = evaluate(&model, &items, &root, &enrolled, &MetricParams::default())?;
    print!("\n{}", report.render());
    Ok(())
}
