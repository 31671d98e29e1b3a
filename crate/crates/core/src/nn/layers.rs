use candle_core::{DType, Device, Tensor, Var, D};

use super::fused::{channel_stats, BatchNormTrain, ChannelAffine, PReluOp};
use super::im2col::{conv2d_im2col, Im2Col};
use super::{Mode, VarStore};
use crate::error::{PseError, Result};

fn fan_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

/// Zero-pads `[B, C, T, F]` on the left of time (causal) and symmetrically in
/// frequency.
pub fn pad_causal_2d(x: &Tensor, time_left: usize, freq: usize) -> Result<Tensor> {
    let mut x = x.clone();
    if time_left > 0 {
        x = x.pad_with_zeros(2, time_left, 0)?;
    }
    if freq > 0 {
        x = x.pad_with_zeros(3, freq, freq)?;
    }
    Ok(x)
}

/// 2-D convolution, stride 1, causal in time and "same" in frequency.
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    kernel_time: usize,
    freq_pad: usize,
}

impl Conv2d {
    /// `kernel` is `(freq, time)`; the frequency size must be odd.
    pub fn new(vs: &mut VarStore, name: &str, c_in: usize, c_out: usize, kernel: (usize, usize)) -> Result<Self> {
        let (kf, kt) = kernel;
        if kf % 2 == 0 {
            return Err(PseError::Config(format!("{name}: frequency kernel must be odd, got {kf}")));
        }
        let bound = fan_bound(c_in * kf * kt);
        let weight = vs.uniform(&format!("{name}.weight"), &[c_out, c_in, kt, kf], bound)?;
        let bias = vs.uniform(&format!("{name}.bias"), &[c_out], bound)?;
        Ok(Self { weight, bias, kernel_time: kt, freq_pad: kf / 2 })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let op = Im2Col {
            kt: self.kernel_time,
            kf: self.freq_pad * 2 + 1,
            time_left: self.kernel_time - 1,
            freq_pad: self.freq_pad,
            freq_stride: 1,
            ones: true,
        };
        Ok(conv2d_im2col(x, &self.weight, Some(&self.bias), op)?)
    }
}

/// Complex convolution on tensors whose first channel half is the real part
/// and second half the imaginary part:
/// `y_r = x_r * W_r - x_i * W_i`, `y_i = x_r * W_i + x_i * W_r`.
pub fn complex_conv2d(
    x_re: &Tensor,
    x_im: &Tensor,
    w_re: &Tensor,
    w_im: &Tensor,
    time_left: usize,
    freq_pad: usize,
) -> Result<(Tensor, Tensor)> {
    let (_, c_in, _, _) = x_re.dims4()?;
    let (c_out, c_in_w, _, _) = w_re.dims4()?;
    if c_in != c_in_w || x_im.dims() != x_re.dims() || w_im.dims() != w_re.dims() {
        return Err(PseError::Shape(format!(
            "complex conv: input {:?}/{:?} vs weights {:?}/{:?}",
            x_re.dims(),
            x_im.dims(),
            w_re.dims(),
            w_im.dims()
        )));
    }
    let (_, _, kt, kf) = w_re.dims4()?;
    let op = Im2Col { kt, kf, time_left, freq_pad, freq_stride: 1, ones: false };
    let y = conv2d_im2col(&Tensor::cat(&[x_re, x_im], 1)?, &block_kernel(w_re, w_im)?, None, op)?;
    Ok((y.narrow(1, 0, c_out)?, y.narrow(1, c_out, c_out)?))
}

/// `[[W_r, -W_i], [W_i, W_r]]` stacked so one real convolution computes both parts.
fn block_kernel(w_re: &Tensor, w_im: &Tensor) -> Result<Tensor> {
    let top = Tensor::cat(&[w_re, &w_im.neg()?], 1)?;
    let bottom = Tensor::cat(&[w_im, w_re], 1)?;
    Ok(Tensor::cat(&[&top, &bottom], 0)?)
}

/// Complex 2-D convolution layer. Channel counts are totals (half real,
/// half imaginary). `freq_stride` 2 halves the frequency axis.
pub struct ComplexConv2d {
    pub w_re: Tensor,
    pub w_im: Tensor,
    b_re: Tensor,
    b_im: Tensor,
    kernel_time: usize,
    freq_pad: usize,
    freq_stride: usize,
}

impl ComplexConv2d {
    pub fn new(
        vs: &mut VarStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        freq_stride: usize,
    ) -> Result<Self> {
        let (kf, kt) = kernel;
        if c_in % 2 != 0 || c_out % 2 != 0 {
            return Err(PseError::Config(format!("{name}: complex channel counts must be even ({c_in} -> {c_out})")));
        }
        let (ci, co) = (c_in / 2, c_out / 2);
        let bound = fan_bound(c_in * kf * kt);
        let w_re = vs.uniform(&format!("{name}.weight_re"), &[co, ci, kt, kf], bound)?;
        let w_im = vs.uniform(&format!("{name}.weight_im"), &[co, ci, kt, kf], bound)?;
        let b_re = vs.uniform(&format!("{name}.bias_re"), &[co], bound)?;
        let b_im = vs.uniform(&format!("{name}.bias_im"), &[co], bound)?;
        Ok(Self { w_re, w_im, b_re, b_im, kernel_time: kt, freq_pad: kf / 2, freq_stride })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.dim(1)? != 2 * self.w_re.dim(1)? {
            return Err(PseError::Shape(format!("complex conv: {} input channels for kernel {:?}", x.dim(1)?, self.w_re.dims())));
        }
        let op = Im2Col {
            kt: self.kernel_time,
            kf: self.freq_pad * 2 + 1,
            time_left: self.kernel_time - 1,
            freq_pad: self.freq_pad,
            freq_stride: self.freq_stride,
            ones: true,
        };
        let bias = Tensor::cat(&[&self.b_re, &self.b_im], 0)?;
        Ok(conv2d_im2col(x, &block_kernel(&self.w_re, &self.w_im)?, Some(&bias), op)?)
    }
}

/// Keeps every `stride`-th frequency bin starting at 0.
pub fn subsample_freq(x: &Tensor, stride: usize) -> Result<Tensor> {
    if stride == 1 {
        return Ok(x.clone());
    }
    let (b, c, t, f) = x.dims4()?;
    if f % stride != 0 {
        return Err(PseError::Shape(format!("frequency size {f} not divisible by stride {stride}")));
    }
    Ok(x.reshape((b, c, t, f / stride, stride))?.narrow(4, 0, 1)?.squeeze(4)?)
}

/// Inserts `factor - 1` zeros after every frequency bin.
pub fn zero_stuff_freq(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 1 {
        return Ok(x.clone());
    }
    let (b, c, t, f) = x.dims4()?;
    let x = x.unsqueeze(4)?.pad_with_zeros(4, 0, factor - 1)?;
    Ok(x.reshape((b, c, t, f * factor))?)
}

/// Nearest-neighbour upsampling along frequency only.
pub fn upsample_freq(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (b, c, t, f) = x.dims4()?;
    Ok(x.unsqueeze(4)?.broadcast_as((b, c, t, f, factor))?.reshape((b, c, t, f * factor))?)
}

/// Max pooling along frequency only.
pub fn max_pool_freq(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (b, c, t, f) = x.dims4()?;
    if f % factor != 0 {
        return Err(PseError::Shape(format!("frequency size {f} not divisible by pool factor {factor}")));
    }
    Ok(x.reshape((b, c, t, f / factor, factor))?.max(4)?)
}

/// Complex transposed convolution with frequency stride, realized as
/// zero-stuffing followed by a causal complex convolution.
pub struct ComplexConvTranspose2d {
    inner: ComplexConv2d,
    freq_stride: usize,
}

impl ComplexConvTranspose2d {
    pub fn new(
        vs: &mut VarStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        freq_stride: usize,
    ) -> Result<Self> {
        Ok(Self { inner: ComplexConv2d::new(vs, name, c_in, c_out, kernel, 1)?, freq_stride })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.inner.forward(&zero_stuff_freq(x, self.freq_stride)?)
    }
}

/// 1-D convolution over time with left padding; input `[B, C, T]`.
pub struct CausalConv1d {
    weight: Tensor,
    bias: Tensor,
    kernel: usize,
}

impl CausalConv1d {
    pub fn new(vs: &mut VarStore, name: &str, c_in: usize, c_out: usize, kernel: usize) -> Result<Self> {
        let bound = fan_bound(c_in * kernel);
        let weight = vs.uniform(&format!("{name}.weight"), &[c_out, c_in, kernel], bound)?;
        let bias = vs.uniform(&format!("{name}.bias"), &[c_out], bound)?;
        Ok(Self { weight, bias, kernel })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let op = Im2Col { kt: self.kernel, kf: 1, time_left: self.kernel - 1, freq_pad: 0, freq_stride: 1, ones: true };
        let y = conv2d_im2col(&x.unsqueeze(3)?, &self.weight.unsqueeze(3)?, Some(&self.bias), op)?;
        Ok(y.squeeze(3)?)
    }
}

pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(vs: &mut VarStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = fan_bound(d_in);
        let weight = vs.uniform(&format!("{name}.weight"), &[d_out, d_in], bound)?;
        let bias = vs.uniform(&format!("{name}.bias"), &[d_out], bound)?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.weight.t()?;
        let y = match x.rank() {
            2 => x.matmul(&w)?,
            _ => x.broadcast_matmul(&w)?,
        };
        Ok(y.broadcast_add(&self.bias)?)
    }
}

/// Parametric ReLU with one slope per channel.
pub struct PRelu {
    alpha: Tensor,
}

impl PRelu {
    pub fn new(vs: &mut VarStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self { alpha: vs.constant(&format!("{name}.alpha"), &[channels], 0.25)? })
    }

    /// `channel_dim` indexes the axis the slopes apply to.
    pub fn forward(&self, x: &Tensor, channel_dim: usize) -> Result<Tensor> {
        Ok(x.contiguous()?.apply_op2(&self.alpha, PReluOp { channel_dim })?)
    }
}

/// Batch normalization over axis 1 of `[B, C, ...]`.
pub struct BatchNorm {
    weight: Tensor,
    bias: Tensor,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm {
    pub fn new(vs: &mut VarStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: vs.constant(&format!("{name}.weight"), &[channels], 1.0)?,
            bias: vs.constant(&format!("{name}.bias"), &[channels], 0.0)?,
            running_mean: vs.buffer(&format!("{name}.running_mean"), &[channels], 0.0)?,
            running_var: vs.buffer(&format!("{name}.running_var"), &[channels], 1.0)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let x = x.contiguous()?;
        match mode {
            Mode::Train => {
                let (mean, var) = channel_stats(&x.flatten_all()?.to_vec1::<f32>()?, x.dims());
                let blend = |running: &Var, batch: &[f64]| -> Result<()> {
                    let old = running.as_tensor().to_vec1::<f32>()?;
                    let new: Vec<f32> =
                        old.iter().zip(batch).map(|(&o, &b)| ((1.0 - self.momentum) * o as f64 + self.momentum * b) as f32).collect();
                    running.set(&Tensor::from_vec(new, old.len(), x.device())?)?;
                    Ok(())
                };
                blend(&self.running_mean, &mean)?;
                blend(&self.running_var, &var)?;
                Ok(x.apply_op3(&self.weight, &self.bias, BatchNormTrain { eps: self.eps })?)
            }
            Mode::Inference => {
                let mean = self.running_mean.as_detached_tensor();
                let var = self.running_var.as_detached_tensor();
                let scale = ((var + self.eps)?.sqrt()?.recip()? * &self.weight)?;
                let shift = (&self.bias - (mean * &scale)?)?;
                Ok(x.apply_op3(&scale, &shift, ChannelAffine)?)
            }
        }
    }
}

/// Layer normalization over the last axis.
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(vs: &mut VarStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: vs.constant(&format!("{name}.weight"), &[dim], 1.0)?,
            bias: vs.constant(&format!("{name}.bias"), &[dim], 0.0)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? * 0.5)?.affine(1.0, 0.5)?)
}

/// Unidirectional LSTM with zero initial state; gate order `i, f, g, o`.
pub struct Lstm {
    pub w_ih: Tensor,
    pub w_hh: Tensor,
    pub bias: Tensor,
    hidden: usize,
}

impl Lstm {
    pub fn new(vs: &mut VarStore, name: &str, d_in: usize, hidden: usize) -> Result<Self> {
        let bound = fan_bound(hidden);
        Ok(Self {
            w_ih: vs.uniform(&format!("{name}.w_ih"), &[4 * hidden, d_in], bound)?,
            w_hh: vs.uniform(&format!("{name}.w_hh"), &[4 * hidden, hidden], bound)?,
            bias: vs.uniform(&format!("{name}.bias"), &[4 * hidden], bound)?,
            hidden,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// `[B, T, d_in] -> [B, T, hidden]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t_n, _) = x.dims3()?;
        let h_n = self.hidden;
        let xw = x.broadcast_matmul(&self.w_ih.t()?)?.broadcast_add(&self.bias)?;
        let w_hh_t = self.w_hh.t()?;
        let mut h = Tensor::zeros((b, h_n), x.dtype(), x.device())?;
        let mut c = h.clone();
        let mut outs = Vec::with_capacity(t_n);
        for t in 0..t_n {
            let gates = (xw.narrow(1, t, 1)?.squeeze(1)? + h.matmul(&w_hh_t)?)?;
            let i = sigmoid(&gates.narrow(1, 0, h_n)?)?;
            let f = sigmoid(&gates.narrow(1, h_n, h_n)?)?;
            let g = gates.narrow(1, 2 * h_n, h_n)?.tanh()?;
            let o = sigmoid(&gates.narrow(1, 3 * h_n, h_n)?)?;
            c = ((f * &c)? + (i * g)?)?;
            h = (o * c.tanh()?)?;
            outs.push(h.unsqueeze(1)?);
        }
        Ok(Tensor::cat(&outs, 1)?)
    }
}

/// Additive mask with `-inf` strictly above the diagonal.
pub fn causal_mask(t: usize, device: &Device) -> Result<Tensor> {
    let data: Vec<f32> = (0..t * t).map(|i| if i % t > i / t { f32::NEG_INFINITY } else { 0.0 }).collect();
    Ok(Tensor::from_vec(data, (t, t), device)?)
}

/// Row-wise softmax over the last axis.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// `softmax(Q K^T / sqrt(d) + mask) V` for `[B, H, T, d]` inputs. Returns the
/// output and the attention weights.
pub fn causal_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    let t = q.dim(2)?;
    let d = q.dim(3)?;
    let scores = (q.matmul(&k.t()?)? / (d as f64).sqrt())?;
    let scores = scores.broadcast_add(&causal_mask(t, q.device())?)?;
    let weights = softmax_last(&scores)?;
    Ok((weights.matmul(v)?, weights))
}

/// Multi-head attention with input/output projections and a causal mask.
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(vs: &mut VarStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(PseError::Config(format!("{name}: attention dim {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(vs, &format!("{name}.q"), dim, dim)?,
            k: Linear::new(vs, &format!("{name}.k"), dim, dim)?,
            v: Linear::new(vs, &format!("{name}.v"), dim, dim)?,
            o: Linear::new(vs, &format!("{name}.o"), dim, dim)?,
            heads,
        })
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        Ok(x.reshape((b, t, self.heads, d / self.heads))?.transpose(1, 2)?.contiguous()?)
    }

    /// Inputs `[B, T, dim]`; returns the output and per-head weights `[B, H, T, T]`.
    pub fn forward_with_weights(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, t, d) = q.dims3()?;
        let qh = self.split(&self.q.forward(q)?)?;
        let kh = self.split(&self.k.forward(k)?)?;
        let vh = self.split(&self.v.forward(v)?)?;
        let (out, weights) = causal_attention(&qh, &kh, &vh)?;
        let out = out.transpose(1, 2)?.contiguous()?.reshape((b, t, d))?;
        Ok((self.o.forward(&out)?, weights))
    }

    pub fn forward(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_weights(q, k, v)?.0)
    }
}

pub fn to_f32_tensor(data: &[f64], shape: &[usize], device: &Device) -> Result<Tensor> {
    let v: Vec<f32> = data.iter().map(|&x| x as f32).collect();
    Ok(Tensor::from_vec(v, shape, device)?.to_dtype(DType::F32)?)
}
