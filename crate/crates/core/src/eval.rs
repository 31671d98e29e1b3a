//! Scenario-stratified evaluation: per-utterance TSOS and SI-SDR records,
//! per-scenario aggregates, and a plain-text table with one column group per
//! test scenario.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dsp::{stft, StftConfig, Waveform};
use crate::embedding::EmbeddingCache;
use crate::error::{PseError, Result};
use crate::metrics::{si_sdr, tsos_frames, tsos_report, MetricParams};
use crate::models::{enhance, PseModel};
use crate::sim::{EvalItem, Scenario};

pub const PASSTHROUGH_LABEL: &str = "No Enhancement";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub model: String,
    pub utterance_id: String,
    pub scenario: Scenario,
    pub target_speaker_id: String,
    pub frames: usize,
    pub os_frames: usize,
    pub tsos_percent: f64,
    pub tsos_total_s: f64,
    pub tsos_max_s: f64,
    pub si_sdr_db: f64,
    /// SI-SDR of the unprocessed mixture.
    pub si_sdr_input_db: f64,
}

/// Aggregates of one model on one scenario. External metrics are left empty
/// unless an outside scorer fills them in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRow {
    pub model: String,
    pub scenario: Scenario,
    pub utterances: usize,
    /// Mean per-utterance percentage of over-suppressed frames.
    pub tsos_percent: f64,
    /// Mean per-utterance total over-suppressed duration in seconds.
    pub tsos_total_s: f64,
    /// Longest over-suppressed run over all utterances, in seconds.
    pub tsos_max_s: f64,
    pub si_sdr_db: f64,
    pub wer: Option<f64>,
    pub del: Option<f64>,
    pub dnsmos: Option<f64>,
    pub stoi: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub gamma: f64,
    pub p: f64,
    pub rows: Vec<ScenarioRow>,
}

/// One row per (model, scenario), in first-seen model order.
pub fn aggregate(records: &[UtteranceRecord]) -> Vec<ScenarioRow> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<(usize, Scenario), Vec<&UtteranceRecord>> = BTreeMap::new();
    for r in records {
        let idx = order.iter().position(|m| *m == r.model).unwrap_or_else(|| {
            order.push(&r.model);
            order.len() - 1
        });
        groups.entry((idx, r.scenario)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((idx, scenario), rs)| {
            let n = rs.len() as f64;
            let mean = |f: fn(&UtteranceRecord) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
            ScenarioRow {
                model: order[idx].to_string(),
                scenario,
                utterances: rs.len(),
                tsos_percent: mean(|r| r.tsos_percent),
                tsos_total_s: mean(|r| r.tsos_total_s),
                tsos_max_s: rs.iter().map(|r| r.tsos_max_s).fold(0.0, f64::max),
                si_sdr_db: mean(|r| r.si_sdr_db),
                wer: None,
                del: None,
                dnsmos: None,
                stoi: None,
            }
        })
        .collect()
}

/// Scores an estimate of one manifest item.
pub fn score(
    model: &str,
    item: &EvalItem,
    mixture: &Waveform,
    reference: &Waveform,
    estimate: &Waveform,
    params: &MetricParams,
) -> Result<UtteranceRecord> {
    let cfg = StftConfig::default();
    let flags = tsos_frames(&stft(reference, &cfg)?, &stft(estimate, &cfg)?, params)?;
    let rep = tsos_report(&flags, params)?;
    Ok(UtteranceRecord {
        model: model.to_string(),
        utterance_id: item.sample_id.clone(),
        scenario: item.scenario,
        target_speaker_id: item.target_speaker_id.clone(),
        frames: flags.flags.len(),
        os_frames: flags.flags.iter().filter(|&&f| f).count(),
        tsos_percent: rep.percent_os_frames,
        tsos_total_s: rep.total_os_duration,
        tsos_max_s: rep.max_os_duration,
        si_sdr_db: si_sdr(reference, estimate)?,
        si_sdr_input_db: si_sdr(reference, mixture)?,
    })
}

/// A model to evaluate; `None` scores the unprocessed mixture.
pub struct Candidate<'a> {
    pub label: String,
    pub model: Option<&'a dyn PseModel>,
}

impl<'a> Candidate<'a> {
    pub fn passthrough() -> Self {
        Self { label: PASSTHROUGH_LABEL.to_string(), model: None }
    }

    pub fn model(label: impl Into<String>, model: &'a dyn PseModel) -> Self {
        Self { label: label.into(), model: Some(model) }
    }
}

/// Enhances every item with every candidate, conditioning on the target
/// speaker's enrollment d-vector. A passthrough row is always included.
pub fn evaluate(
    candidates: &[Candidate<'_>],
    items: &[EvalItem],
    root: &Path,
    enrollment: &EmbeddingCache,
    params: &MetricParams,
) -> Result<(EvalReport, Vec<UtteranceRecord>)> {
    if items.is_empty() {
        return Err(PseError::InvalidInput("nothing to evaluate".into()));
    }
    let passthrough = Candidate::passthrough();
    let mut all: Vec<&Candidate<'_>> = Vec::new();
    if !candidates.iter().any(|c| c.model.is_none()) {
        all.push(&passthrough);
    }
    all.extend(candidates);
    // fail before any enhancement if a speaker has no enrollment
    for item in items {
        enrollment.get(&item.target_speaker_id)?;
    }
    let stft_cfg = StftConfig::default();
    let mut records = Vec::with_capacity(items.len() * all.len());
    for c in &all {
        for item in items {
            let (mixture, reference) = item.load(root)?;
            let estimate = match c.model {
                None => mixture.clone(),
                Some(m) => enhance(m, &stft_cfg, &mixture, &enrollment.get(&item.target_speaker_id)?)?,
            };
            records.push(score(&c.label, item, &mixture, &reference, &estimate, params)?);
        }
    }
    let report = EvalReport { gamma: params.gamma, p: params.p, rows: aggregate(&records) };
    Ok((report, records))
}

fn cell(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into())
}

impl EvalReport {
    /// Models in row order.
    pub fn models(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.model.as_str()) {
                out.push(&r.model);
            }
        }
        out
    }

    pub fn row(&self, model: &str, scenario: Scenario) -> Option<&ScenarioRow> {
        self.rows.iter().find(|r| r.model == model && r.scenario == scenario)
    }

    /// Appends the rows of `other` (same metric parameters).
    pub fn merge(&mut self, other: EvalReport) -> Result<()> {
        if (other.gamma, other.p) != (self.gamma, self.p) {
            return Err(PseError::InvalidInput("reports use different metric parameters".into()));
        }
        for r in other.rows {
            if self.row(&r.model, r.scenario).is_none() {
                self.rows.push(r);
            }
        }
        Ok(())
    }

    /// One line per model; TS1 and TS2 show WER, DEL, DNSMOS, STOI, TSOS
    /// and SI-SDR, TS3 shows DEL, TSOS and SI-SDR.
    pub fn render(&self) -> String {
        let scenarios: Vec<Scenario> = Scenario::ALL.into_iter().filter(|s| self.rows.iter().any(|r| r.scenario == *s)).collect();
        let columns = |s: Scenario| -> &'static [&'static str] {
            match s {
                Scenario::TS3 => &["DEL", "TSOS(%)", "SI-SDR"],
                _ => &["WER", "DEL", "DNSMOS", "STOI(%)", "TSOS(%)", "SI-SDR"],
            }
        };
        let width = self.models().iter().map(|m| m.len()).max().unwrap_or(5).max(5);
        let mut out = String::new();
        let _ = write!(out, "{:width$}", "");
        for &s in &scenarios {
            let w = columns(s).len() * 9;
            let _ = write!(out, " | {:^w$}", s.name());
        }
        out.push('\n');
        let _ = write!(out, "{:width$}", "Model");
        for &s in &scenarios {
            out.push_str(" | ");
            for c in columns(s) {
                let _ = write!(out, "{c:>9}");
            }
        }
        out.push('\n');
        out.push_str(&"-".repeat(out.lines().last().map(str::len).unwrap_or(0)));
        out.push('\n');
        for m in self.models() {
            let _ = write!(out, "{m:width$}");
            for &s in &scenarios {
                out.push_str(" | ");
                let r = self.row(m, s);
                for c in columns(s) {
                    let v = r.and_then(|r| match *c {
                        "WER" => r.wer,
                        "DEL" => r.del,
                        "DNSMOS" => r.dnsmos,
                        "STOI(%)" => r.stoi,
                        "TSOS(%)" => Some(r.tsos_percent),
                        _ => Some(r.si_sdr_db),
                    });
                    let _ = write!(out, "{:>9}", cell(v));
                }
            }
            out.push('\n');
        }
        let _ = writeln!(out, "gamma = {}, p = {}", self.gamma, self.p);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::write_wav;
    use crate::dsp::SAMPLE_RATE;
    use crate::embedding::DVector;
    use crate::models::ConstantMask;
    use rustfft::num_complex::Complex64;
    use std::path::PathBuf;

    fn record(model: &str, scenario: Scenario, pct: f64, total: f64, max: f64, sdr: f64) -> UtteranceRecord {
        UtteranceRecord {
            model: model.into(),
            utterance_id: "x".into(),
            scenario,
            target_speaker_id: "s".into(),
            frames: 100,
            os_frames: pct as usize,
            tsos_percent: pct,
            tsos_total_s: total,
            tsos_max_s: max,
            si_sdr_db: sdr,
            si_sdr_input_db: 0.0,
        }
    }

    #[test]
    fn aggregates_match_recomputation() {
        let recs = vec![
            record("b", Scenario::TS2, 10.0, 0.5, 0.2, 3.0),
            record("a", Scenario::TS1, 0.0, 0.0, 0.0, 1.0),
            record("b", Scenario::TS2, 20.0, 1.5, 0.4, 5.0),
            record("b", Scenario::TS1, 4.0, 0.1, 0.1, 2.0),
        ];
        let rows = aggregate(&recs);
        assert_eq!(rows.len(), 3);
        assert_eq!((rows[0].model.as_str(), rows[0].scenario), ("b", Scenario::TS1));
        let ts2 = rows.iter().find(|r| r.model == "b" && r.scenario == Scenario::TS2).unwrap();
        assert_eq!(ts2.utterances, 2);
        assert_eq!(ts2.tsos_percent, 15.0);
        assert_eq!(ts2.tsos_total_s, 1.0);
        assert_eq!(ts2.tsos_max_s, 0.4);
        assert_eq!(ts2.si_sdr_db, 4.0);
        assert!(ts2.wer.is_none() && ts2.stoi.is_none());
    }

    fn items(dir: &Path) -> Vec<EvalItem> {
        let mut out = Vec::new();
        for (i, scenario) in [Scenario::TS2, Scenario::TS3].into_iter().enumerate() {
            let reference: Vec<f64> = (0..8000).map(|n| 0.3 * (n as f64 * 0.05 * (i + 1) as f64).sin()).collect();
            let mix: Vec<f64> = reference.iter().enumerate().map(|(n, r)| r + if i == 0 { 0.05 * ((n * 7919) % 13) as f64 / 13.0 } else { 0.0 }).collect();
            let (m, r) = (PathBuf::from(format!("m{i}.wav")), PathBuf::from(format!("r{i}.wav")));
            write_wav(dir.join(&m), &Waveform::new(mix, SAMPLE_RATE).unwrap()).unwrap();
            write_wav(dir.join(&r), &Waveform::new(reference, SAMPLE_RATE).unwrap()).unwrap();
            out.push(EvalItem { sample_id: format!("u{i}"), scenario, mixture_path: m, reference_path: r, target_speaker_id: "spk".into() });
        }
        out
    }

    fn cache() -> EmbeddingCache {
        let mut c = EmbeddingCache::new(4);
        c.insert("spk", &DVector::new(vec![1.0, 0.0, 0.0, 0.0], "spk").unwrap());
        c
    }

    #[test]
    fn passthrough_row_is_always_present_and_reports_repeat() {
        let dir = tempfile::tempdir().unwrap();
        let items = items(dir.path());
        let silence = ConstantMask(Complex64::new(0.0, 0.0));
        let cands = [Candidate::model("mute", &silence)];
        let (report, records) = evaluate(&cands, &items, dir.path(), &cache(), &MetricParams::default()).unwrap();
        assert_eq!(report.models(), vec![PASSTHROUGH_LABEL, "mute"]);
        assert_eq!(records.len(), 4);
        assert_eq!(report.rows, aggregate(&records));
        assert!(report.row(PASSTHROUGH_LABEL, Scenario::TS3).unwrap().tsos_percent < 0.5);
        // a muted output over-suppresses every voiced frame
        assert!(report.row("mute", Scenario::TS2).unwrap().tsos_percent > 90.0);
        let again = evaluate(&cands, &items, dir.path(), &cache(), &MetricParams::default()).unwrap();
        assert_eq!(serde_json::to_string(&again.0).unwrap(), serde_json::to_string(&report).unwrap());
        let table = report.render();
        assert!(table.contains("TS2") && table.contains("TS3") && table.contains("mute"));
        assert!(table.lines().count() >= 5);
    }

    #[test]
    fn missing_enrollment_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let items = items(dir.path());
        let err = evaluate(&[], &items, dir.path(), &EmbeddingCache::new(4), &MetricParams::default()).unwrap_err();
        assert!(matches!(err, PseError::MissingEnrollment(_)));
    }
}
