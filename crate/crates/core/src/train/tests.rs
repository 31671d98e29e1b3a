use super::*;
use crate::embedding::SpectralStatsProvider;
use crate::sim::{place_speakers, synthesize_mixture, MixtureSources, MixtureSpec, NoiseKind, NoiseSource, RoomSpec, Scenario, SyntheticSpeaker};

/// Short target-plus-noise examples, each from its own synthetic voice.
fn examples(n: usize, seed: u64) -> Vec<Example> {
    let provider = SpectralStatsProvider::new(128, 0);
    let room = RoomSpec::random(seed);
    (0..n as u64)
        .map(|i| {
            let spec = MixtureSpec {
                scenario: Scenario::TS2,
                target_speaker_id: "a".into(),
                interferer_id: None,
                noise_id: Some("n".into()),
                snr_db: Some(5.0),
                sir_db: None,
                seed: i,
            };
            let sources = MixtureSources {
                target: SyntheticSpeaker::random("a", seed + i).utterance(0.6, i).unwrap(),
                interferer: None,
                noise: Some(NoiseSource { id: "n".into(), kind: NoiseKind::White, seed: i }.render(0.6).unwrap()),
            };
            let s = synthesize_mixture(&spec, &sources, &room, &place_speakers(&room, i).unwrap(), 4096).unwrap();
            let enrollment = SyntheticSpeaker::random("a", seed + i).utterance(1.2, 99).unwrap();
            let d = crate::embedding::extract_dvector(&provider, &[enrollment]).unwrap();
            Example::new(&format!("ex{i}"), &s.mixture, &s.target_reverberant, d, &StftConfig::default()).unwrap()
        })
        .collect()
}

fn tiny_cfg() -> TrainConfig {
    TrainConfig {
        model: ModelConfig::preset(ModelKind::Pdccrn, Preset::Small),
        batch_size: 2,
        max_steps: 6,
        validation_interval: 2,
        ..TrainConfig::default()
    }
}

#[test]
fn training_is_deterministic() {
    let (tr, va) = (examples(3, 1), examples(2, 9));
    let a = train(&tiny_cfg(), &tr, &va).unwrap();
    let b = train(&tiny_cfg(), &tr, &va).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.network.var_store().export().unwrap(), b.network.var_store().export().unwrap());
    let bytes = |o: &TrainOutcome| o.checkpoint(&tiny_cfg()).unwrap().to_bytes().unwrap();
    assert_eq!(bytes(&a), bytes(&b));
    let other = train(&TrainConfig { seed: 1, ..tiny_cfg() }, &tr, &va).unwrap();
    assert_ne!(other.log, a.log);
}

#[test]
fn best_checkpoint_has_the_lowest_validation_loss() {
    let (tr, va) = (examples(3, 2), examples(2, 8));
    let cfg = TrainConfig { max_steps: 7, optimizer: OptimizerConfig { learning_rate: 1e-2, ..Default::default() }, ..tiny_cfg() };
    let out = train(&cfg, &tr, &va).unwrap();
    let logged: Vec<(usize, f64)> = out.log.iter().filter_map(|r| r.valid_loss.map(|v| (r.step, v))).collect();
    assert_eq!(logged.iter().map(|l| l.0).collect::<Vec<_>>(), vec![2, 4, 6, 7]);
    assert!(logged.iter().all(|(_, v)| out.best_valid_loss <= *v));
    assert!(logged.contains(&(out.best_step, out.best_valid_loss)));
    // the returned network reproduces the selected validation loss
    let again = validation_loss(&out.network, &va, &cfg.loss, None, cfg.batch_size).unwrap();
    assert_eq!(again, out.best_valid_loss);
}

#[test]
fn multi_task_leaves_the_backend_frozen() {
    let (tr, va) = (examples(2, 3), examples(2, 7));
    let cfg = TrainConfig { loss: LossConfig::new(LossKind::PlcpaAsym, true), max_steps: 3, ..tiny_cfg() };
    let out = train(&cfg, &tr, &va).unwrap();
    assert!(out.backend_unchanged);
    assert!(out.log.iter().all(|r| r.mt > 0.0 && r.over_suppression >= 0.0));
}

#[test]
fn asym_with_zero_beta_matches_plain_loss() {
    let (tr, va) = (examples(2, 4), examples(2, 6));
    let plain = TrainConfig { loss: LossConfig { alpha: Some(0.5), ..LossConfig::new(LossKind::Plcpa, false) }, max_steps: 4, ..tiny_cfg() };
    let asym = TrainConfig {
        loss: LossConfig {
            loss: LossKind::PlcpaAsym,
            alpha: Some(0.5),
            beta: Some(0.0),
            p: plain.loss.p,
            mt: MtConfig { enabled: true, lambda: 0.0 },
        },
        ..plain.clone()
    };
    let a = train(&plain, &tr, &va).unwrap();
    let b = train(&asym, &tr, &va).unwrap();
    for (x, y) in a.log.iter().zip(&b.log) {
        assert_eq!((x.loss, x.grad_norm, x.valid_loss), (y.loss, y.grad_norm, y.valid_loss));
    }
    assert_eq!(a.network.var_store().export().unwrap(), b.network.var_store().export().unwrap());
}

#[test]
fn runaway_learning_rate_is_reported_as_divergence() {
    let (tr, va) = (examples(2, 5), examples(2, 5));
    let cfg = TrainConfig { optimizer: OptimizerConfig { learning_rate: 1e30, ..Default::default() }, max_steps: 5, ..tiny_cfg() };
    match train(&cfg, &tr, &va) {
        Err(PseError::Diverged { step, .. }) => assert!(step >= 2),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("training with lr 1e30 should diverge"),
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let (tr, va) = (examples(2, 5), examples(1, 5));
    for cfg in [
        TrainConfig { batch_size: 0, ..tiny_cfg() },
        TrainConfig { max_steps: 0, ..tiny_cfg() },
        TrainConfig { optimizer: OptimizerConfig { learning_rate: -1.0, ..Default::default() }, ..tiny_cfg() },
        TrainConfig { segment_s: 0.0, ..tiny_cfg() },
    ] {
        assert!(matches!(train(&cfg, &tr, &va), Err(PseError::Config(_))));
    }
    assert!(train(&tiny_cfg(), &tr, &[]).is_err());
}

#[test]
fn step_schedule_decays() {
    let o = OptimizerConfig { schedule: Schedule::Step { every_steps: 10, factor: 0.5 }, ..Default::default() };
    assert_eq!(o.learning_rate_at(0), 1e-3);
    assert_eq!(o.learning_rate_at(9), 1e-3);
    assert_eq!(o.learning_rate_at(10), 5e-4);
    assert_eq!(o.learning_rate_at(25), 2.5e-4);
}

#[test]
fn ablation_variants_differ_only_in_loss() {
    let mut base = TrainConfig::default();
    base.loss.beta = Some(2.0);
    base.max_steps = 3;
    let variants = ablation_configs(&base);
    let labels: Vec<String> = variants.iter().map(|c| c.loss.label()).collect();
    assert_eq!(labels.len(), 4);
    let mut uniq = labels.clone();
    uniq.sort();
    uniq.dedup();
    assert_eq!(uniq.len(), 4);
    for v in &variants {
        let mut same = v.clone();
        same.loss = base.loss.clone();
        assert_eq!(same, base);
        assert_eq!(v.loss.beta, Some(2.0));
    }
}
