//! PLCPA, PLCPA-ASYM and the multi-task term on over- and under-suppressed
//! estimates of the same clean spectrogram.

use pse::dsp::{stft, StftConfig};
use pse::losses::{combined_loss, ConvBackend, LossKind, LossParams};
use pse::sim::SyntheticSpeaker;

fn main() -> pse::Result<()> {
    let clean = stft(&SyntheticSpeaker::random("spk", 3).utterance(1.0, 4)?, &StftConfig::default())?;
    let scaled = |g: f64| clean.with_data(clean.data.iter().map(|c| c * g).collect());
    let backend = ConvBackend::new(clean.bins, 7);

    let mut asym_mt = LossParams::plcpa_asym();
    asym_mt.lambda_mt = 1.0;
    let objectives = [
        ("PLCPA", LossKind::Plcpa, LossParams::plcpa()),
        ("PLCPA-ASYM", LossKind::PlcpaAsym, LossParams::plcpa_asym()),
        ("PLCPA-ASYM+MT", LossKind::PlcpaAsym, asym_mt),
    ];
    println!("{:>6} {:>14} {:>14} {:>14}", "gain", objectives[0].0, objectives[1].0, objectives[2].0);
    // the same compressed-magnitude error below and above the reference
    for gain in [0.5, 0.8, 1.0, 0.8f64.powf(-1.0), 2.0] {
        let est = scaled(gain)?;
        let mut row = format!("{gain:6.2}");
        for (_, kind, params) in &objectives {
            let l = combined_loss(&clean, &est, *kind, params, Some(&backend))?;
            row.push_str(&format!(" {:14.5}", l.total));
        }
        println!("{row}");
    }

    let est = scaled(0.5)?;
    let b = combined_loss(&clean, &est, LossKind::PlcpaAsym, &asym_mt, Some(&backend))?;
    println!("\nbreakdown at gain 0.5: {b:#?}");
    Ok(())
}
