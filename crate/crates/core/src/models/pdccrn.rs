//! Complex convolutional recurrent network conditioned at the recurrent
//! bottleneck: the d-vector is appended to both the real and the imaginary
//! per-frame encoder outputs before the complex LSTM.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::embedding::DVECTOR_DIM;
use crate::error::{PseError, Result};
use crate::nn::{BatchNorm, ComplexConv2d, ComplexConvTranspose2d, Linear, Lstm, Mode, PRelu, VarStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdccrnConfig {
    /// Total channels per encoder stage (half real, half imaginary).
    pub encoder_filters: Vec<usize>,
    /// `(freq, time)`.
    pub kernel: (usize, usize),
    /// `(freq, time)`.
    pub stride: (usize, usize),
    pub lstm_hidden: usize,
    pub dvector_dim: usize,
    pub bins: usize,
}

impl Default for PdccrnConfig {
    fn default() -> Self {
        Self {
            encoder_filters: vec![16, 32, 64, 128, 128, 128],
            kernel: (5, 2),
            stride: (2, 1),
            lstm_hidden: 128,
            dvector_dim: DVECTOR_DIM,
            bins: 256,
        }
    }
}

impl PdccrnConfig {
    pub fn small() -> Self {
        Self { encoder_filters: vec![4, 8, 16, 32], ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_filters.is_empty() || self.encoder_filters.iter().any(|&c| c == 0 || c % 2 != 0) {
            return Err(PseError::Config("pdccrn encoder filters must be non-empty and even".into()));
        }
        if self.stride.1 != 1 || self.kernel.1 == 0 {
            return Err(PseError::Config("pdccrn time stride must be 1 and the time kernel non-zero".into()));
        }
        if self.stride.0 == 0 || self.kernel.0 % 2 == 0 {
            return Err(PseError::Config("pdccrn frequency kernel must be odd and stride positive".into()));
        }
        let total = self.stride.0.pow(self.encoder_filters.len() as u32);
        if self.bins % total != 0 {
            return Err(PseError::Config(format!(
                "{} bins not divisible by {total} ({} stages of stride {})",
                self.bins,
                self.encoder_filters.len(),
                self.stride.0
            )));
        }
        Ok(())
    }

    fn bottom_bins(&self) -> usize {
        self.bins / self.stride.0.pow(self.encoder_filters.len() as u32)
    }
}

/// Complex recurrence from two real LSTMs:
/// `y_r = L_r(x_r) - L_i(x_i)`, `y_i = L_r(x_i) + L_i(x_r)`. Inputs `[B, T, H]`.
pub fn complex_lstm(l_re: &Lstm, l_im: &Lstm, x_re: &Tensor, x_im: &Tensor) -> Result<(Tensor, Tensor)> {
    let b = x_re.dim(0)?;
    if x_re.dims() != x_im.dims() {
        return Err(PseError::Shape(format!("complex lstm: {:?} vs {:?}", x_re.dims(), x_im.dims())));
    }
    // both components through each recurrence in one batched pass
    let r = l_re.forward(&Tensor::cat(&[x_re, x_im], 0)?)?;
    let i = l_im.forward(&Tensor::cat(&[x_im, x_re], 0)?)?;
    let y_re = (r.narrow(0, 0, b)? - i.narrow(0, 0, b)?)?;
    let y_im = (r.narrow(0, b, b)? + i.narrow(0, b, b)?)?;
    Ok((y_re, y_im))
}

struct EncoderStage {
    conv: ComplexConv2d,
    bn: BatchNorm,
    act: PRelu,
}

struct DecoderStage {
    conv: ComplexConvTranspose2d,
    post: Option<(BatchNorm, PRelu)>,
}

pub struct Pdccrn {
    cfg: PdccrnConfig,
    encoder: Vec<EncoderStage>,
    lstm_re: Lstm,
    lstm_im: Lstm,
    dense_re: Linear,
    dense_im: Linear,
    decoder: Vec<DecoderStage>,
}

/// Concatenates real halves and imaginary halves separately.
fn complex_cat(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ca, cb) = (a.dim(1)? / 2, b.dim(1)? / 2);
    Ok(Tensor::cat(&[&a.narrow(1, 0, ca)?, &b.narrow(1, 0, cb)?, &a.narrow(1, ca, ca)?, &b.narrow(1, cb, cb)?], 1)?)
}

impl Pdccrn {
    pub fn new(vs: &mut VarStore, cfg: &PdccrnConfig) -> Result<Self> {
        cfg.validate()?;
        let mut chans = vec![2usize];
        chans.extend(&cfg.encoder_filters);
        let encoder = chans
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                Ok(EncoderStage {
                    conv: ComplexConv2d::new(vs, &format!("enc{i}.conv"), w[0], w[1], cfg.kernel, cfg.stride.0)?,
                    bn: BatchNorm::new(vs, &format!("enc{i}.bn"), w[1])?,
                    act: PRelu::new(vs, &format!("enc{i}.act"), w[1])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let last = *cfg.encoder_filters.last().expect("validated non-empty");
        let flat = last / 2 * cfg.bottom_bins();
        let lstm_re = Lstm::new(vs, "lstm.re", flat + cfg.dvector_dim, cfg.lstm_hidden)?;
        let lstm_im = Lstm::new(vs, "lstm.im", flat + cfg.dvector_dim, cfg.lstm_hidden)?;
        let dense_re = Linear::new(vs, "dense.re", cfg.lstm_hidden, flat)?;
        let dense_im = Linear::new(vs, "dense.im", cfg.lstm_hidden, flat)?;

        let n = chans.len() - 1;
        let decoder = (1..=n)
            .rev()
            .map(|i| {
                let (c_in, c_out) = (chans[i] * 2, chans[i - 1]);
                let name = format!("dec{}", n - i);
                let post = if i > 1 {
                    Some((BatchNorm::new(vs, &format!("{name}.bn"), c_out)?, PRelu::new(vs, &format!("{name}.act"), c_out)?))
                } else {
                    None
                };
                Ok(DecoderStage {
                    conv: ComplexConvTranspose2d::new(vs, &format!("{name}.conv"), c_in, c_out, cfg.kernel, cfg.stride.0)?,
                    post,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { cfg: cfg.clone(), encoder, lstm_re, lstm_im, dense_re, dense_im, decoder })
    }

    /// `features [B, 2, T, F]`, `dvec [B, D]` -> mask `[B, 2, T, F]`.
    pub fn forward(&self, features: &Tensor, dvec: &Tensor, mode: Mode) -> Result<Tensor> {
        let (b, _, t, _) = features.dims4()?;
        let mut x = features.clone();
        let mut skips = Vec::with_capacity(self.encoder.len());
        for stage in &self.encoder {
            x = stage.conv.forward(&x)?;
            x = stage.bn.forward(&x, mode)?;
            x = stage.act.forward(&x, 1)?;
            skips.push(x.clone());
        }

        let (_, c, _, f) = x.dims4()?;
        let half = c / 2;
        let per_frame = |part: Tensor| -> Result<Tensor> { Ok(part.permute((0, 2, 1, 3))?.reshape((b, t, half * f))?) };
        let x_re = per_frame(x.narrow(1, 0, half)?)?;
        let x_im = per_frame(x.narrow(1, half, half)?)?;
        let d = dvec.unsqueeze(1)?.broadcast_as((b, t, self.cfg.dvector_dim))?.contiguous()?;
        let x_re = Tensor::cat(&[&x_re, &d], 2)?;
        let x_im = Tensor::cat(&[&x_im, &d], 2)?;

        let (h_re, h_im) = complex_lstm(&self.lstm_re, &self.lstm_im, &x_re, &x_im)?;
        let y_re = (self.dense_re.forward(&h_re)? - self.dense_im.forward(&h_im)?)?;
        let y_im = (self.dense_re.forward(&h_im)? + self.dense_im.forward(&h_re)?)?;
        let back = |y: Tensor| -> Result<Tensor> { Ok(y.reshape((b, t, half, f))?.permute((0, 2, 1, 3))?) };
        x = Tensor::cat(&[&back(y_re)?, &back(y_im)?], 1)?;

        for (stage, skip) in self.decoder.iter().zip(skips.iter().rev()) {
            x = stage.conv.forward(&complex_cat(&x, skip)?)?;
            if let Some((bn, act)) = &stage.post {
                x = bn.forward(&x, mode)?;
                x = act.forward(&x, 1)?;
            }
        }
        Ok(x)
    }
}
