//! Patch extraction for convolutions as a custom op, so a convolution is a
//! single gather plus one matrix product in both directions.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

/// Turns `[B, C, T, F]` into `[B, C*kt*kf (+1), T_out*F_out]`, with row index
/// `(c*kt + dt)*kf + df`. Time is zero-padded by `time_left` frames on the
/// left, frequency by `freq_pad` bins on both sides; output frequency
/// positions are taken every `freq_stride` bins. With `ones` a final row of
/// ones is appended so a bias can ride along in the weight matrix.
#[derive(Debug, Clone, Copy)]
pub struct Im2Col {
    pub kt: usize,
    pub kf: usize,
    pub time_left: usize,
    pub freq_pad: usize,
    pub freq_stride: usize,
    pub ones: bool,
}

impl Im2Col {
    pub fn out_dims(&self, t: usize, f: usize) -> candle_core::Result<(usize, usize)> {
        let tp = t + self.time_left;
        let fp = f + 2 * self.freq_pad;
        if tp < self.kt || fp < self.kf || self.freq_stride == 0 {
            candle_core::bail!("im2col: input {t}x{f} too small for kernel {}x{}", self.kt, self.kf)
        }
        Ok((tp - self.kt + 1, (fp - self.kf) / self.freq_stride + 1))
    }

    fn rows(&self, c: usize) -> usize {
        c * self.kt * self.kf + usize::from(self.ones)
    }

    /// Calls `visit(dst, src, len)` for every run of output columns that
    /// reads input bins `src, src + stride, ...` of one batch item.
    fn for_each_run(&self, c: usize, t: usize, f: usize, mut visit: impl FnMut(usize, usize, usize)) -> candle_core::Result<()> {
        let (t_out, f_out) = self.out_dims(t, f)?;
        let cols = t_out * f_out;
        let s = self.freq_stride;
        for ci in 0..c {
            for dt in 0..self.kt {
                for df in 0..self.kf {
                    let row = (ci * self.kt + dt) * self.kf + df;
                    // output bins fo with 0 <= fo*s + df - pad < f
                    if f + self.freq_pad <= df {
                        continue;
                    }
                    let lo = self.freq_pad.saturating_sub(df).div_ceil(s);
                    let hi = ((f + self.freq_pad - df - 1) / s + 1).min(f_out);
                    if lo >= hi {
                        continue;
                    }
                    for to in 0..t_out {
                        let ti = to + dt;
                        if ti < self.time_left || ti - self.time_left >= t {
                            continue;
                        }
                        let src = (ci * t + ti - self.time_left) * f + lo * s + df - self.freq_pad;
                        visit(row * cols + to * f_out + lo, src, hi - lo);
                    }
                }
            }
        }
        Ok(())
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, t, f) = layout.shape().dims4()?;
        let (t_out, f_out) = self.out_dims(t, f)?;
        let x = match storage {
            CpuStorage::F32(v) => v,
            _ => candle_core::bail!("im2col expects f32"),
        };
        let Some((start, end)) = layout.contiguous_offsets() else { candle_core::bail!("im2col expects a contiguous input") };
        let x = &x[start..end];
        let rows = self.rows(c);
        let cols = t_out * f_out;
        let mut out = vec![0f32; b * rows * cols];
        for bi in 0..b {
            let src = &x[bi * c * t * f..(bi + 1) * c * t * f];
            let dst = &mut out[bi * rows * cols..(bi + 1) * rows * cols];
            let stride = self.freq_stride;
            self.for_each_run(c, t, f, |o, i, n| {
                if stride == 1 {
                    dst[o..o + n].copy_from_slice(&src[i..i + n]);
                } else {
                    for k in 0..n {
                        dst[o + k] = src[i + k * stride];
                    }
                }
            })?;
            if self.ones {
                dst[(rows - 1) * cols..].fill(1.0);
            }
        }
        Ok((CpuStorage::F32(out), Shape::from((b, rows, cols))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (b, c, t, f) = arg.dims4()?;
        let (t_out, f_out) = self.out_dims(t, f)?;
        let rows = self.rows(c);
        let cols = t_out * f_out;
        let g = grad_res.flatten_all()?.to_vec1::<f32>()?;
        let mut dx = vec![0f32; b * c * t * f];
        for bi in 0..b {
            let src = &g[bi * rows * cols..(bi + 1) * rows * cols];
            let dst = &mut dx[bi * c * t * f..(bi + 1) * c * t * f];
            let stride = self.freq_stride;
            self.for_each_run(c, t, f, |o, i, n| {
                if stride == 1 {
                    dst[i..i + n].iter_mut().zip(&src[o..o + n]).for_each(|(d, s)| *d += s);
                } else {
                    for k in 0..n {
                        dst[i + k * stride] += src[o + k];
                    }
                }
            })?;
        }
        Ok(Some(Tensor::from_vec(dx, (b, c, t, f), arg.device())?))
    }
}

/// Convolution via [`Im2Col`]: `w` is `[C_out, C_in, kt, kf]`, `bias` `[C_out]`.
pub fn conv2d_im2col(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, op: Im2Col) -> candle_core::Result<Tensor> {
    let (b, _, t, f) = x.dims4()?;
    let (c_out, c_in, kt, kf) = w.dims4()?;
    if x.dim(1)? != c_in || kt != op.kt || kf != op.kf {
        candle_core::bail!("conv: input {:?} vs kernel {:?}", x.dims(), w.dims())
    }
    let (t_out, f_out) = op.out_dims(t, f)?;
    let op = Im2Col { ones: bias.is_some(), ..op };
    let cols = x.contiguous()?.apply_op1(op)?;
    let mut wm = w.reshape((c_out, c_in * kt * kf))?;
    if let Some(bias) = bias {
        wm = Tensor::cat(&[&wm, &bias.reshape((c_out, 1))?], 1)?;
    }
    let k = wm.dim(1)?;
    let wm = wm.unsqueeze(0)?.broadcast_as((b, c_out, k))?.contiguous()?;
    wm.matmul(&cols)?.reshape((b, c_out, t_out, f_out))
}
