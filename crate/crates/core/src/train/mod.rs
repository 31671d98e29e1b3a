//! Training with validation-based checkpoint selection.
//!
//! The network runs in `f32` on candle; the loss and its gradient with
//! respect to the enhanced spectrogram are computed on the host in `f64` and
//! pushed back through the graph as `sum(estimate * gradient)`.

use std::io::Write;
use std::path::Path;

use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dsp::{stft, ComplexSpectrogram, StftConfig, Waveform};
use crate::embedding::{extract_dvector_from_noisy, DVector, EmbeddingCache, EmbeddingProvider};
use crate::error::{PseError, Result};
use crate::losses::{combined_loss_with_grad, ConvBackend, FrozenBackend, LossBreakdown, LossConfig, LossKind, MtConfig};
use crate::models::{complex_mul, ModelConfig, ModelKind, Preset, PseNetwork};
use crate::nn::{clip_grad_norm, Adam, Mode, NamedArray};
use crate::sim::{derive_seed, EvalItem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    Constant,
    /// Multiply the learning rate by `factor` every `every_steps` steps.
    Step { every_steps: usize, factor: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub name: OptimizerKind,
    pub learning_rate: f64,
    pub schedule: Schedule,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { name: OptimizerKind::Adam, learning_rate: 1e-3, schedule: Schedule::Constant, grad_clip: 5.0 }
    }
}

impl OptimizerConfig {
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.learning_rate,
            Schedule::Step { every_steps, factor } => self.learning_rate * factor.powi((step / every_steps.max(1)) as i32),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    /// Training clip length in seconds; longer clips are cut, shorter ones zero-padded.
    pub segment_s: f64,
    pub max_steps: usize,
    /// Validate every this many steps (and after the last step).
    pub validation_interval: usize,
    pub seed: u64,
    /// Seed of the frozen back-end used by the multi-task term.
    pub backend_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::preset(ModelKind::Pdcattunet, Preset::Small),
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::default(),
            batch_size: 4,
            segment_s: 10.0,
            max_steps: 1000,
            validation_interval: 50,
            seed: 0,
            backend_seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.params().validate()?;
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0) || !(o.grad_clip > 0.0) {
            return Err(PseError::Config("learning_rate and grad_clip must be positive".into()));
        }
        if let Schedule::Step { every_steps, factor } = o.schedule {
            if every_steps == 0 || !(factor > 0.0) {
                return Err(PseError::Config("step schedule needs every_steps > 0 and factor > 0".into()));
            }
        }
        if self.batch_size == 0 || self.max_steps == 0 || self.validation_interval == 0 {
            return Err(PseError::Config("batch_size, max_steps and validation_interval must be positive".into()));
        }
        if !(self.segment_s > 0.0) {
            return Err(PseError::Config(format!("segment_s {}", self.segment_s)));
        }
        Ok(())
    }

    pub fn segment_len(&self, sample_rate_hz: u32) -> usize {
        (self.segment_s * sample_rate_hz as f64).round() as usize
    }

    /// The frozen back-end for the multi-task term, if enabled.
    pub fn backend(&self) -> Option<ConvBackend> {
        self.loss.mt.enabled.then(|| ConvBackend::new(self.model.bins(), self.backend_seed))
    }
}

/// One training or validation example in the STFT domain.
#[derive(Debug, Clone)]
pub struct Example {
    pub id: String,
    pub noisy: ComplexSpectrogram,
    pub reference: ComplexSpectrogram,
    pub dvector: DVector,
}

/// Where conditioning d-vectors come from.
pub enum DvectorSource<'a> {
    /// The target speaker's enrollment embedding.
    Enrollment(&'a EmbeddingCache),
    /// An embedding of the noisy mixture itself.
    Noisy(&'a dyn EmbeddingProvider),
}

/// Cuts or zero-pads to `len` samples.
pub fn crop(w: &Waveform, len: usize) -> Waveform {
    let mut samples = w.samples.clone();
    samples.resize(len, 0.0);
    Waveform { samples, sample_rate_hz: w.sample_rate_hz }
}

impl Example {
    pub fn new(id: &str, mixture: &Waveform, reference: &Waveform, dvector: DVector, stft_cfg: &StftConfig) -> Result<Self> {
        if mixture.len() != reference.len() {
            return Err(PseError::Shape(format!("{id}: mixture and reference lengths differ")));
        }
        Ok(Self { id: id.to_string(), noisy: stft(mixture, stft_cfg)?, reference: stft(reference, stft_cfg)?, dvector })
    }
}

/// Loads manifest items below `root` as fixed-length examples.
pub fn load_examples(
    items: &[EvalItem],
    root: &Path,
    segment_len: usize,
    dvectors: &DvectorSource<'_>,
    stft_cfg: &StftConfig,
) -> Result<Vec<Example>> {
    items
        .iter()
        .map(|item| {
            let (mix, reference) = item.load(root)?;
            let (mix, reference) = (crop(&mix, segment_len), crop(&reference, segment_len));
            let d = match dvectors {
                DvectorSource::Enrollment(cache) => cache.get(&item.target_speaker_id)?,
                DvectorSource::Noisy(provider) => extract_dvector_from_noisy(*provider, &mix)?,
            };
            Example::new(&item.sample_id, &mix, &reference, d, stft_cfg)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss: f64,
    pub amplitude: f64,
    pub phase: f64,
    pub over_suppression: f64,
    pub mt: f64,
    pub grad_norm: f64,
    pub learning_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub valid_loss: Option<f64>,
}

pub struct TrainOutcome {
    /// The network with the best-validation parameters loaded.
    pub network: PseNetwork,
    pub best_step: usize,
    pub best_valid_loss: f64,
    pub log: Vec<LogRecord>,
    /// Whether the frozen back-end's parameters were unchanged by training.
    pub backend_unchanged: bool,
}

impl TrainOutcome {
    pub fn checkpoint(&self, cfg: &TrainConfig) -> Result<Checkpoint> {
        Checkpoint::from_network(&self.network, self.best_step, Some(self.best_valid_loss), &cfg.loss.label())
    }
}

pub fn write_log(path: impl AsRef<Path>, log: &[LogRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in log {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Losses of a batch of estimates `[B, 2, T, F]`, and the gradient of their
/// mean with respect to the estimates.
fn batch_loss(
    est: &Tensor,
    batch: &[&Example],
    cfg: &LossConfig,
    backend: Option<&dyn FrozenBackend>,
    want_grad: bool,
) -> Result<(Vec<LossBreakdown>, Option<Tensor>)> {
    let (b, _, t, f) = est.dims4()?;
    let host = est.flatten_all()?.to_vec1::<f32>()?;
    let params = cfg.params();
    let mut grad = want_grad.then(|| vec![0f32; host.len()]);
    let mut losses = Vec::with_capacity(b);
    for (i, ex) in batch.iter().enumerate() {
        let base = i * 2 * t * f;
        let data: Vec<Complex64> =
            (0..t * f).map(|k| Complex64::new(host[base + k] as f64, host[base + t * f + k] as f64)).collect();
        let estimate = ex.reference.with_data(data)?;
        let (breakdown, g) = combined_loss_with_grad(&ex.reference, &estimate, cfg.loss, &params, backend)?;
        if let Some(grad) = grad.as_mut() {
            for (k, gk) in g.iter().enumerate() {
                grad[base + k] = (gk.re / b as f64) as f32;
                grad[base + t * f + k] = (gk.im / b as f64) as f32;
            }
        }
        losses.push(breakdown);
    }
    let grad = grad.map(|g| Tensor::from_vec(g, (b, 2, t, f), est.device())).transpose()?;
    Ok((losses, grad))
}

/// Mean loss over `examples` in inference mode.
pub fn validation_loss(
    net: &PseNetwork,
    examples: &[Example],
    cfg: &LossConfig,
    backend: Option<&dyn FrozenBackend>,
    batch_size: usize,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(PseError::InvalidInput("empty validation set".into()));
    }
    let mut total = 0.0;
    for chunk in examples.chunks(batch_size.max(1)) {
        let batch: Vec<&Example> = chunk.iter().collect();
        let noisy: Vec<_> = batch.iter().map(|e| &e.noisy).collect();
        let dv: Vec<_> = batch.iter().map(|e| &e.dvector).collect();
        let (raw, mask) = net.forward_batch(&noisy, &dv, Mode::Inference)?;
        let (losses, _) = batch_loss(&complex_mul(&raw, &mask)?, &batch, cfg, backend, false)?;
        total += losses.iter().map(|l| l.total).sum::<f64>();
    }
    Ok(total / examples.len() as f64)
}

fn check_batchable(examples: &[Example], what: &str) -> Result<()> {
    let Some(first) = examples.first() else {
        return Err(PseError::InvalidInput(format!("empty {what} set")));
    };
    if examples.iter().any(|e| e.noisy.shape() != first.noisy.shape()) {
        return Err(PseError::Shape(format!("{what} examples differ in length")));
    }
    Ok(())
}

/// Trains `cfg.model` and returns it with the parameters that scored the
/// lowest validation loss. Fully determined by `cfg` and the examples.
pub fn train(cfg: &TrainConfig, train_set: &[Example], valid_set: &[Example]) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_batchable(train_set, "training")?;
    check_batchable(valid_set, "validation")?;
    let backend = cfg.backend();
    let backend_ref = backend.as_ref().map(|b| b as &dyn FrozenBackend);
    let backend_before = backend.as_ref().map(|b| b.parameter_snapshot());

    let net = PseNetwork::build(&cfg.model, cfg.seed)?;
    let vars = net.trainable_vars();
    let mut opt = Adam::new(vars.clone(), cfg.optimizer.learning_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "batches", 0));
    let batch_size = cfg.batch_size.min(train_set.len());
    let mut order: Vec<usize> = Vec::new();

    let mut log = Vec::with_capacity(cfg.max_steps);
    let mut best: Option<(f64, usize, Vec<NamedArray>, crate::dsp::FeatureNorm)> = None;
    for step in 1..=cfg.max_steps {
        if order.len() < batch_size {
            let mut fresh: Vec<usize> = (0..train_set.len()).collect();
            fresh.shuffle(&mut rng);
            order.extend(fresh);
        }
        let batch: Vec<&Example> = order.drain(..batch_size).map(|i| &train_set[i]).collect();
        let noisy: Vec<_> = batch.iter().map(|e| &e.noisy).collect();
        let dv: Vec<_> = batch.iter().map(|e| &e.dvector).collect();
        let (raw, mask) = net.forward_batch(&noisy, &dv, Mode::Train)?;
        let est = complex_mul(&raw, &mask)?;
        let (losses, grad) = batch_loss(&est, &batch, &cfg.loss, backend_ref, true).map_err(|e| match e {
            PseError::NonFinite(detail) => PseError::Diverged { step, detail },
            e => e,
        })?;
        let n = losses.len() as f64;
        let mean = |f: fn(&LossBreakdown) -> f64| losses.iter().map(f).sum::<f64>() / n;
        let loss = mean(|l| l.total);
        if !loss.is_finite() {
            return Err(PseError::Diverged { step, detail: format!("training loss {loss}") });
        }
        let mut grads = (est * grad.expect("gradient requested"))?.sum_all()?.backward()?;
        let grad_norm = clip_grad_norm(&vars, &mut grads, cfg.optimizer.grad_clip)?;
        if !grad_norm.is_finite() {
            return Err(PseError::Diverged { step, detail: format!("gradient norm {grad_norm}") });
        }
        let lr = cfg.optimizer.learning_rate_at(step - 1);
        opt.lr = lr;
        opt.step(&grads)?;

        let valid_loss = if step % cfg.validation_interval == 0 || step == cfg.max_steps {
            let v = validation_loss(&net, valid_set, &cfg.loss, backend_ref, cfg.batch_size).map_err(|e| match e {
                PseError::NonFinite(detail) => PseError::Diverged { step, detail },
                e => e,
            })?;
            if !v.is_finite() {
                return Err(PseError::Diverged { step, detail: format!("validation loss {v}") });
            }
            if best.as_ref().is_none_or(|b| v < b.0) {
                best = Some((v, step, net.var_store().export()?, net.input_norm()));
            }
            Some(v)
        } else {
            None
        };
        log.push(LogRecord {
            step,
            loss,
            amplitude: mean(|l| l.amplitude_term),
            phase: mean(|l| l.phase_term),
            over_suppression: mean(|l| l.os_term),
            mt: mean(|l| l.mt_term),
            grad_norm,
            learning_rate: lr,
            valid_loss,
        });
    }
    let (best_valid_loss, best_step, params, norm) = best.expect("the last step always validates");
    net.var_store().import(&params)?;
    net.set_input_norm(norm);
    let backend_unchanged = match (&backend, &backend_before) {
        (Some(b), Some(before)) => &b.parameter_snapshot() == before,
        _ => true,
    };
    Ok(TrainOutcome { network: net, best_step, best_valid_loss, log, backend_unchanged })
}

#[cfg(test)]
mod tests;

/// The four loss variants of the ablation: plain and asymmetric PLCPA, each
/// with and without the multi-task term. Everything but the loss block is
/// copied from `base`; alpha falls back to each kind's default.
pub fn ablation_configs(base: &TrainConfig) -> Vec<TrainConfig> {
    let mut out = Vec::with_capacity(4);
    for mt in [false, true] {
        for kind in [LossKind::Plcpa, LossKind::PlcpaAsym] {
            let mut cfg = base.clone();
            cfg.loss = LossConfig {
                loss: kind,
                alpha: None,
                beta: base.loss.beta,
                p: base.loss.p,
                mt: MtConfig { enabled: mt, lambda: base.loss.mt.lambda },
            };
            out.push(cfg);
        }
    }
    out
}

/// Trains every ablation variant. `data` supplies the training and
/// validation examples for a variant, since multi-task variants condition on
/// noisy-utterance d-vectors.
pub fn ablation_matrix<F>(base: &TrainConfig, mut data: F) -> Result<Vec<(TrainConfig, TrainOutcome)>>
where
    F: FnMut(&TrainConfig) -> Result<(Vec<Example>, Vec<Example>)>,
{
    ablation_configs(base)
        .into_iter()
        .map(|cfg| {
            let (train_set, valid_set) = data(&cfg)?;
            let outcome = train(&cfg, &train_set, &valid_set)?;
            Ok((cfg, outcome))
        })
        .collect()
}
