//! Per-channel ops with hand-written backward passes. Letting autograd
//! differentiate the broadcast formulations instead costs several full-size
//! temporaries and strided reductions per layer.

use candle_core::{CpuStorage, CustomOp2, CustomOp3, Layout, Shape, Tensor};

fn contiguous<'a>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [f32]> {
    let v = match s {
        CpuStorage::F32(v) => v,
        _ => candle_core::bail!("expected f32 storage"),
    };
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => candle_core::bail!("expected a contiguous tensor"),
    }
}

fn host(t: &Tensor) -> candle_core::Result<Vec<f32>> {
    t.flatten_all()?.to_vec1::<f32>()
}

/// `(outer, channels, inner)` split of a shape around `channel_dim`.
fn split(dims: &[usize], channel_dim: usize) -> (usize, usize, usize) {
    let outer = dims[..channel_dim].iter().product();
    let inner = dims[channel_dim + 1..].iter().product();
    (outer, dims[channel_dim], inner)
}

fn for_channels(dims: (usize, usize, usize), mut visit: impl FnMut(usize, std::ops::Range<usize>)) {
    let (outer, c, inner) = dims;
    for o in 0..outer {
        for ch in 0..c {
            let start = (o * c + ch) * inner;
            visit(ch, start..start + inner);
        }
    }
}

/// Parametric ReLU with one slope per channel.
pub struct PReluOp {
    pub channel_dim: usize,
}

impl CustomOp2 for PReluOp {
    fn name(&self) -> &'static str {
        "prelu"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let x = contiguous(s1, l1)?;
        let a = contiguous(s2, l2)?;
        let dims = split(l1.dims(), self.channel_dim);
        let mut y = vec![0f32; x.len()];
        for_channels(dims, |ch, r| {
            for i in r {
                y[i] = if x[i] > 0.0 { x[i] } else { a[ch] * x[i] };
            }
        });
        Ok((CpuStorage::F32(y), l1.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, a: &Tensor, _res: &Tensor, g: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (xv, av, gv) = (host(x)?, host(a)?, host(g)?);
        let dims = split(x.dims(), self.channel_dim);
        let mut dx = vec![0f32; xv.len()];
        let mut da = vec![0f32; av.len()];
        for_channels(dims, |ch, r| {
            for i in r {
                if xv[i] > 0.0 {
                    dx[i] = gv[i];
                } else {
                    dx[i] = av[ch] * gv[i];
                    da[ch] += gv[i] * xv[i];
                }
            }
        });
        Ok((Some(Tensor::from_vec(dx, x.shape(), x.device())?), Some(Tensor::from_vec(da, a.shape(), a.device())?)))
    }
}

/// `y = x * scale[c] + shift[c]` over channel axis 1.
pub struct ChannelAffine;

impl CustomOp3 for ChannelAffine {
    fn name(&self) -> &'static str {
        "channel-affine"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (x, scale, shift) = (contiguous(s1, l1)?, contiguous(s2, l2)?, contiguous(s3, l3)?);
        let mut y = vec![0f32; x.len()];
        for_channels(split(l1.dims(), 1), |ch, r| {
            for i in r {
                y[i] = x[i] * scale[ch] + shift[ch];
            }
        });
        Ok((CpuStorage::F32(y), l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        scale: &Tensor,
        shift: &Tensor,
        _res: &Tensor,
        g: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (xv, sv, gv) = (host(x)?, host(scale)?, host(g)?);
        let mut dx = vec![0f32; xv.len()];
        let mut ds = vec![0f32; sv.len()];
        let mut db = vec![0f32; sv.len()];
        for_channels(split(x.dims(), 1), |ch, r| {
            for i in r {
                dx[i] = gv[i] * sv[ch];
                ds[ch] += gv[i] * xv[i];
                db[ch] += gv[i];
            }
        });
        Ok((
            Some(Tensor::from_vec(dx, x.shape(), x.device())?),
            Some(Tensor::from_vec(ds, scale.shape(), x.device())?),
            Some(Tensor::from_vec(db, shift.shape(), x.device())?),
        ))
    }
}

/// Per-channel mean and biased variance over every axis but 1, in f64.
pub fn channel_stats(x: &[f32], dims: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let d = split(dims, 1);
    let n = (d.0 * d.2).max(1) as f64;
    let mut sum = vec![0f64; d.1];
    let mut sq = vec![0f64; d.1];
    for_channels(d, |ch, r| {
        for &v in &x[r] {
            sum[ch] += v as f64;
            sq[ch] += (v as f64) * (v as f64);
        }
    });
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let var = sq.iter().zip(&mean).map(|(q, m)| (q / n - m * m).max(0.0)).collect();
    (mean, var)
}

/// Batch normalization with batch statistics over every axis but 1 and an
/// affine `weight`/`bias`; gradients flow through the statistics.
pub struct BatchNormTrain {
    pub eps: f64,
}

impl BatchNormTrain {
    fn normalized(&self, x: &[f32], dims: &[usize]) -> (Vec<f32>, Vec<f64>) {
        let (mean, var) = channel_stats(x, dims);
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = vec![0f32; x.len()];
        for_channels(split(dims, 1), |ch, r| {
            for i in r {
                xhat[i] = ((x[i] as f64 - mean[ch]) * inv[ch]) as f32;
            }
        });
        (xhat, inv)
    }
}

impl CustomOp3 for BatchNormTrain {
    fn name(&self) -> &'static str {
        "batch-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (x, w, b) = (contiguous(s1, l1)?, contiguous(s2, l2)?, contiguous(s3, l3)?);
        let (mut y, _) = self.normalized(x, l1.dims());
        for_channels(split(l1.dims(), 1), |ch, r| {
            for v in &mut y[r] {
                *v = *v * w[ch] + b[ch];
            }
        });
        Ok((CpuStorage::F32(y), l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        b: &Tensor,
        _res: &Tensor,
        g: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (xv, wv, gv) = (host(x)?, host(w)?, host(g)?);
        let d = split(x.dims(), 1);
        let n = (d.0 * d.2).max(1) as f64;
        let (xhat, inv) = self.normalized(&xv, x.dims());
        let mut sum_g = vec![0f64; d.1];
        let mut sum_gx = vec![0f64; d.1];
        for_channels(d, |ch, r| {
            for i in r {
                sum_g[ch] += gv[i] as f64;
                sum_gx[ch] += gv[i] as f64 * xhat[i] as f64;
            }
        });
        let mut dx = vec![0f32; xv.len()];
        for_channels(d, |ch, r| {
            let k = wv[ch] as f64 * inv[ch] / n;
            for i in r {
                dx[i] = (k * (n * gv[i] as f64 - sum_g[ch] - xhat[i] as f64 * sum_gx[ch])) as f32;
            }
        });
        let dw: Vec<f32> = sum_gx.iter().map(|&v| v as f32).collect();
        let db: Vec<f32> = sum_g.iter().map(|&v| v as f32).collect();
        Ok((
            Some(Tensor::from_vec(dx, x.shape(), x.device())?),
            Some(Tensor::from_vec(dw, w.shape(), x.device())?),
            Some(Tensor::from_vec(db, b.shape(), x.device())?),
        ))
    }
}
