//! The `pse` command line: simulate, enroll, train, enhance, evaluate, report.
//!
//! Every command resolves a [`PipelineConfig`] and writes it to
//! `resolved_config.json` in its output directory; passing that file back
//! with `--config` replays the run. Failures print one JSON object to stderr
//! and exit with 2 for configuration errors, 1 otherwise.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::audio::{read_wav, write_wav};
use crate::checkpoint::Checkpoint;
use crate::config::PipelineConfig;
use crate::dsp::StftConfig;
use crate::embedding::{enroll, read_enrollment_manifest, DVector, EmbeddingCache, SpectralStatsProvider};
use crate::error::{PseError, Result};
use crate::eval::{evaluate, Candidate, EvalReport};
use crate::models::{enhance, ConstantMask, ModelKind, Preset, PseModel};
use crate::sim::{layout, read_eval_items, read_jsonl, simulate, write_jsonl, EvalItem};
use crate::train::{load_examples, train, write_log, DvectorSource};

pub const DATA_ROOT_ENV: &str = "PSE_DATA_ROOT";
pub const DEFAULT_DATA_ROOT: &str = "pse_data";
pub const SNAPSHOT_FILE: &str = "resolved_config.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.pse";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";
pub const UTTERANCES_FILE: &str = "utterances.jsonl";

#[derive(Debug, Parser)]
#[command(name = "pse", version, about = "Personalized speech enhancement toolkit")]
struct Cli {
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for simulation and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory of the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// `dotted.key=value`, applied after the config file.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, global = true, value_enum, default_value_t = PresetArg::Small)]
    preset: PresetArg,
    /// Corpus directory; defaults to $PSE_DATA_ROOT, then ./pse_data.
    #[arg(long, global = true)]
    data_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PresetArg {
    Paper,
    Small,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the clean corpus, mixtures and manifests.
    Simulate,
    /// Extract d-vectors for every enrolled speaker.
    Enroll,
    /// Train a model and keep the best validation checkpoint.
    Train,
    /// Enhance one WAV file for an enrolled speaker.
    Enhance {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        speaker: String,
        /// Embedding cache; computed from the enrollment manifest if absent.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Debug: bypass the network with a unit mask.
        #[arg(long)]
        identity_mask: bool,
    },
    /// Score checkpoints on the TS1/TS2/TS3 test sets.
    Evaluate {
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Use the concatenated long-form test sets.
        #[arg(long)]
        long_form: bool,
    },
    /// Combine evaluation reports into one table.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
}

struct Context {
    cfg: PipelineConfig,
    root: PathBuf,
    out: PathBuf,
}

impl Context {
    fn write_snapshot(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out)?;
        std::fs::write(self.out.join(SNAPSHOT_FILE), serde_json::to_vec_pretty(&self.cfg)?)?;
        Ok(())
    }

    fn provider(&self) -> SpectralStatsProvider {
        SpectralStatsProvider::new(self.cfg.enroll.dimension, self.cfg.enroll.seed)
    }

    fn embeddings(&self, path: Option<&Path>) -> Result<EmbeddingCache> {
        match path {
            Some(p) => EmbeddingCache::load(p),
            None => {
                let records = read_enrollment_manifest(self.root.join(layout::ENROLLMENT))?;
                enroll(&self.provider(), &records, &self.root)
            }
        }
    }
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => return fail("usage", &e.to_string(), 2),
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) if e.is_config_error() => fail("config", &e.to_string(), 2),
        Err(e) => fail("runtime", &e.to_string(), 1),
    }
}

fn fail(kind: &str, message: &str, code: i32) -> i32 {
    eprintln!("{}", json!({ "error": { "kind": kind, "message": message.trim(), "exit_code": code } }));
    code
}

fn execute(cli: Cli) -> Result<()> {
    let preset = match cli.preset {
        PresetArg::Paper => Preset::Paper,
        PresetArg::Small => Preset::Small,
    };
    let mut overrides = Vec::new();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
        overrides.push(format!("train.seed={seed}"));
    }
    overrides.extend(cli.overrides);
    let cfg = PipelineConfig::resolve(preset, cli.config.as_deref(), &overrides)?;
    let root = cli
        .data_root
        .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_ROOT));
    let default_out = match &cli.command {
        Command::Simulate | Command::Enroll => root.clone(),
        Command::Train => root.join("runs").join("train"),
        Command::Enhance { .. } => root.join("enhanced"),
        Command::Evaluate { .. } => root.join("eval"),
        Command::Report { .. } => root.join("report"),
    };
    let ctx = Context { cfg, root, out: cli.out.unwrap_or(default_out) };
    ctx.write_snapshot()?;
    match cli.command {
        Command::Simulate => cmd_simulate(&ctx),
        Command::Enroll => cmd_enroll(&ctx),
        Command::Train => cmd_train(&ctx),
        Command::Enhance { checkpoint, input, speaker, embeddings, identity_mask } => {
            cmd_enhance(&ctx, checkpoint.as_deref(), &input, &speaker, embeddings.as_deref(), identity_mask)
        }
        Command::Evaluate { checkpoints, embeddings, long_form } => cmd_evaluate(&ctx, &checkpoints, embeddings.as_deref(), long_form),
        Command::Report { reports } => cmd_report(&ctx, &reports),
    }
}

fn cmd_simulate(ctx: &Context) -> Result<()> {
    let out = simulate(&ctx.out, &ctx.cfg.sim, ctx.cfg.seed)?;
    println!(
        "{}",
        json!({
            "root": ctx.out,
            "train": out.train.len(),
            "valid": out.valid.len(),
            "test": [out.test.ts1.len(), out.test.ts2.len(), out.test.ts3.len()],
            "enrolled_speakers": out.test.enrollment.len(),
        })
    );
    Ok(())
}

fn cmd_enroll(ctx: &Context) -> Result<()> {
    let cache = ctx.embeddings(None)?;
    let path = ctx.out.join(EMBEDDINGS_FILE);
    cache.save(&path)?;
    println!("{}", json!({ "embeddings": path, "speakers": cache.embeddings.len() }));
    Ok(())
}

fn manifest_items(path: &Path) -> Result<Vec<EvalItem>> {
    if !path.exists() {
        return Err(PseError::InvalidInput(format!("missing manifest {}; run `pse simulate` first", path.display())));
    }
    read_eval_items(path)
}

fn cmd_train(ctx: &Context) -> Result<()> {
    let cfg = &ctx.cfg.train;
    let train_items = manifest_items(&ctx.root.join(layout::TRAIN))?;
    let valid_items = manifest_items(&ctx.root.join(layout::VALID))?;
    let provider = ctx.provider();
    let cache;
    let source = if cfg.loss.mt.enabled {
        DvectorSource::Noisy(&provider)
    } else {
        cache = ctx.embeddings(None)?;
        DvectorSource::Enrollment(&cache)
    };
    let stft_cfg = StftConfig::default();
    let segment = cfg.segment_len(crate::dsp::SAMPLE_RATE);
    let train_set = load_examples(&train_items, &ctx.root, segment, &source, &stft_cfg)?;
    let valid_set = load_examples(&valid_items, &ctx.root, segment, &source, &stft_cfg)?;
    let outcome = train(cfg, &train_set, &valid_set)?;
    let ckpt = ctx.out.join(CHECKPOINT_FILE);
    outcome.checkpoint(cfg)?.save(&ckpt)?;
    write_log(ctx.out.join(TRAIN_LOG_FILE), &outcome.log)?;
    println!(
        "{}",
        json!({
            "checkpoint": ckpt,
            "best_step": outcome.best_step,
            "best_valid_loss": outcome.best_valid_loss,
            "final_loss": outcome.log.last().map(|r| r.loss),
        })
    );
    Ok(())
}

fn cmd_enhance(
    ctx: &Context,
    checkpoint: Option<&Path>,
    input: &Path,
    speaker: &str,
    embeddings: Option<&Path>,
    identity_mask: bool,
) -> Result<()> {
    let noisy = read_wav(input)?;
    let stft_cfg = StftConfig::default();
    let enhanced = if identity_mask {
        // the mask ignores the embedding; any valid one will do
        let mut unit = vec![0.0; ctx.cfg.enroll.dimension];
        unit[0] = 1.0;
        let d = DVector::new(unit, speaker)?;
        enhance(&ConstantMask::identity(), &stft_cfg, &noisy, &d)?
    } else {
        let path = checkpoint.ok_or_else(|| PseError::Config("enhance needs --checkpoint or --identity-mask".into()))?;
        let net = Checkpoint::load(path)?.to_network()?;
        let d = ctx.embeddings(embeddings)?.get(speaker)?;
        enhance(&net, &stft_cfg, &noisy, &d)?
    };
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("input");
    let path = ctx.out.join(format!("{stem}_enhanced.wav"));
    write_wav(&path, &enhanced)?;
    println!("{}", json!({ "output": path, "samples": enhanced.len() }));
    Ok(())
}

fn model_name(kind: ModelKind) -> &'static str {
    match kind {
        ModelKind::Pdccrn => "pDCCRN",
        ModelKind::Pdcattunet => "pDCATTUNET",
    }
}

fn cmd_evaluate(ctx: &Context, checkpoints: &[PathBuf], embeddings: Option<&Path>, long_form: bool) -> Result<()> {
    let names = if long_form { layout::TEST_LONG } else { layout::TEST };
    let mut items = Vec::new();
    for name in names {
        let path = ctx.root.join(name);
        if path.exists() {
            items.extend(read_eval_items(&path)?);
        }
    }
    if items.is_empty() {
        return Err(PseError::InvalidInput(format!("no test manifests under {}", ctx.root.display())));
    }
    let cache = ctx.embeddings(embeddings)?;
    let mut nets = Vec::new();
    for path in checkpoints {
        let ck = Checkpoint::load(path).map_err(|e| PseError::InvalidInput(format!("{}: {e}", path.display())))?;
        let mut label = format!("{} {}", model_name(ck.header.model.kind()), ck.header.loss_label);
        if nets.iter().any(|(l, _)| *l == label) {
            label = format!("{label} ({})", path.display());
        }
        nets.push((label, ck.to_network()?));
    }
    let candidates: Vec<Candidate<'_>> = nets.iter().map(|(l, n)| Candidate::model(l.clone(), n as &dyn PseModel)).collect();
    let (report, records) = evaluate(&candidates, &items, &ctx.root, &cache, &ctx.cfg.eval)?;
    write_report(&ctx.out, &report)?;
    write_jsonl(ctx.out.join(UTTERANCES_FILE), &records)?;
    print!("{}", report.render());
    Ok(())
}

fn write_report(out: &Path, report: &EvalReport) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join(REPORT_JSON), serde_json::to_vec_pretty(report)?)?;
    std::fs::write(out.join(REPORT_TEXT), report.render())?;
    Ok(())
}

fn cmd_report(ctx: &Context, reports: &[PathBuf]) -> Result<()> {
    let mut merged: Option<EvalReport> = None;
    for path in reports {
        let r: EvalReport = serde_json::from_slice(&std::fs::read(path)?)
            .map_err(|e| PseError::InvalidInput(format!("{}: {e}", path.display())))?;
        match merged.as_mut() {
            None => merged = Some(r),
            Some(m) => m.merge(r)?,
        }
    }
    let merged = merged.ok_or_else(|| PseError::Config("no reports given".into()))?;
    write_report(&ctx.out, &merged)?;
    print!("{}", merged.render());
    Ok(())
}

/// Reads an utterance-record file written by `evaluate`.
pub fn read_utterances(path: impl AsRef<Path>) -> Result<Vec<crate::eval::UtteranceRecord>> {
    read_jsonl(path)
}
