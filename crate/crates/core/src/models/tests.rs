use std::collections::HashMap;

use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nn::{causal_attention, complex_conv2d, Lstm, MultiHeadAttention, NamedArray};

fn rand_vec(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    Tensor::from_vec(rand_vec(shape.iter().product(), seed), shape, &Device::Cpu).unwrap()
}

fn flat(t: &Tensor) -> Vec<f32> {
    t.flatten_all().unwrap().to_vec1::<f32>().unwrap()
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn noise_spec(frames: usize, seed: u64) -> ComplexSpectrogram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<f64> = (0..(frames - 1) * 256).map(|_| rng.random_range(-0.1..0.1)).collect();
    stft(&Waveform::new(samples, 16000).unwrap(), &StftConfig::default()).unwrap()
}

fn dvec(seed: u64) -> DVector {
    DVector::new(rand_vec(128, seed).iter().map(|&v| v as f64).collect(), "spk").unwrap()
}

/// Randomizes every parameter so that normalization gains and PReLU slopes
/// are not at their trivial initial values.
fn scramble(vs: &VarStore, seed: u64) {
    let arrays: Vec<NamedArray> = vs
        .export()
        .unwrap()
        .into_iter()
        .enumerate()
        .map(|(i, a)| {
            let data = if a.name.contains("running_var") {
                rand_vec(a.data.len(), seed + i as u64).iter().map(|v| 0.5 + v.abs()).collect()
            } else {
                rand_vec(a.data.len(), seed + i as u64).iter().map(|v| v * 0.5).collect()
            };
            NamedArray { data, ..a }
        })
        .collect();
    vs.import(&arrays).unwrap();
}

#[test]
fn mask_shape_matches_input_for_both_models() {
    for kind in [ModelKind::Pdccrn, ModelKind::Pdcattunet] {
        for preset in [Preset::Small, Preset::Paper] {
            let net = PseNetwork::build(&ModelConfig::preset(kind, preset), 1).unwrap();
            let spec = noise_spec(100, 2);
            assert_eq!(spec.shape(), (100, 256));
            let mask = net.predict_mask(&spec, &dvec(3)).unwrap();
            assert_eq!((mask.frames, mask.bins), (100, 256), "{kind:?} {preset:?}");
            assert!(mask.data.iter().all(|c| c.re.is_finite() && c.im.is_finite()));
        }
    }
}

#[test]
fn odd_lengths_keep_shape() {
    let net = PseNetwork::build(&ModelConfig::preset(ModelKind::Pdcattunet, Preset::Small), 1).unwrap();
    for frames in [1, 2, 7] {
        let spec = noise_spec(frames.max(2), 5);
        let mask = net.predict_mask(&spec, &dvec(1)).unwrap();
        assert_eq!((mask.frames, mask.bins), spec.shape());
    }
}

#[test]
fn causal_in_inference_mode() {
    for kind in [ModelKind::Pdccrn, ModelKind::Pdcattunet] {
        let net = PseNetwork::build(&ModelConfig::preset(kind, Preset::Paper), 7).unwrap();
        scramble(net.var_store(), 100);
        let a = noise_spec(100, 11);
        let mut b = noise_spec(100, 12);
        b.data[..51 * 256].copy_from_slice(&a.data[..51 * 256]);
        let d = dvec(4);
        let ma = net.predict_mask(&a, &d).unwrap();
        let mb = net.predict_mask(&b, &d).unwrap();
        let diff = ma.data[..51 * 256].iter().zip(&mb.data[..51 * 256]).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
        assert!(diff <= 1e-6, "{kind:?}: prefix diff {diff}");
        let later = ma.data[51 * 256..].iter().zip(&mb.data[51 * 256..]).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
        assert!(later > 1e-6, "{kind:?}: suffix should react to different input");
    }
}

#[test]
fn parameter_counts_are_frozen() {
    let count = |kind, preset| PseNetwork::build(&ModelConfig::preset(kind, preset), 0).unwrap().num_parameters();
    assert_eq!(count(ModelKind::Pdccrn, Preset::Paper), PDCCRN_PARAMS);
    assert_eq!(count(ModelKind::Pdcattunet, Preset::Paper), PDCATTUNET_PARAMS);
}

const PDCCRN_PARAMS: usize = 1_248_098;
const PDCATTUNET_PARAMS: usize = 2_782_890;

#[test]
fn conditioning_changes_the_mask() {
    let net = PseNetwork::build(&ModelConfig::preset(ModelKind::Pdcattunet, Preset::Small), 3).unwrap();
    let spec = noise_spec(20, 1);
    let a = net.predict_mask(&spec, &dvec(1)).unwrap();
    let b = net.predict_mask(&spec, &dvec(2)).unwrap();
    assert!(a.data.iter().zip(&b.data).any(|(x, y)| (x - y).norm() > 1e-6));
}

#[test]
fn complex_conv_degenerate_cases() {
    let x_re = rand_tensor(&[1, 2, 5, 8], 1);
    let x_im = rand_tensor(&[1, 2, 5, 8], 2);
    let w = rand_tensor(&[3, 2, 2, 3], 3);
    let zero = w.zeros_like().unwrap();

    // W_i = 0: two independent real convolutions
    let (y_re, y_im) = complex_conv2d(&x_re, &x_im, &w, &zero, 1, 1).unwrap();
    let real = |x: &Tensor| crate::nn::pad_causal_2d(x, 1, 1).unwrap().conv2d(&w, 0, 1, 1, 1).unwrap();
    assert!(max_abs_diff(&flat(&y_re), &flat(&real(&x_re))) < 1e-5);
    assert!(max_abs_diff(&flat(&y_im), &flat(&real(&x_im))) < 1e-5);

    // purely real input, purely imaginary weights
    let (y_re, _) = complex_conv2d(&x_re, &x_re.zeros_like().unwrap(), &zero, &w, 1, 1).unwrap();
    assert!(flat(&y_re).iter().all(|v| v.abs() < 1e-6));
}

#[test]
fn complex_conv_1x1_is_elementwise_complex_product() {
    let x_re = rand_tensor(&[1, 1, 4, 6], 4);
    let x_im = rand_tensor(&[1, 1, 4, 6], 5);
    let w_re = rand_tensor(&[1, 1, 1, 1], 6);
    let w_im = rand_tensor(&[1, 1, 1, 1], 7);
    let (y_re, y_im) = complex_conv2d(&x_re, &x_im, &w_re, &w_im, 0, 0).unwrap();
    let w = Complex64::new(flat(&w_re)[0] as f64, flat(&w_im)[0] as f64);
    for (i, (a, b)) in flat(&x_re).iter().zip(flat(&x_im)).enumerate() {
        let want = Complex64::new(*a as f64, b as f64) * w;
        assert!((flat(&y_re)[i] as f64 - want.re).abs() < 1e-5);
        assert!((flat(&y_im)[i] as f64 - want.im).abs() < 1e-5);
    }
}

#[test]
fn complex_conv_rejects_mismatched_shapes() {
    let x = rand_tensor(&[1, 2, 4, 6], 1);
    let w = rand_tensor(&[1, 3, 1, 1], 2);
    assert!(complex_conv2d(&x, &x, &w, &w, 0, 0).is_err());
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn lstm_matches_gate_equations() {
    let mut vs = VarStore::new(9);
    let lstm = Lstm::new(&mut vs, "l", 3, 2).unwrap();
    let x = rand_tensor(&[1, 2, 3], 10);
    let y = flat(&lstm.forward(&x).unwrap());
    let (wi, wh, b) = (flat(&lstm.w_ih), flat(&lstm.w_hh), flat(&lstm.bias));
    let xs = flat(&x);
    let (mut h, mut c) = ([0.0f64; 2], [0.0f64; 2]);
    for t in 0..2 {
        let mut g = [0.0f64; 8];
        for (r, gr) in g.iter_mut().enumerate() {
            *gr = b[r] as f64
                + (0..3).map(|k| wi[r * 3 + k] as f64 * xs[t * 3 + k] as f64).sum::<f64>()
                + (0..2).map(|k| wh[r * 2 + k] as f64 * h[k]).sum::<f64>();
        }
        for j in 0..2 {
            c[j] = sig(g[2 + j]) * c[j] + sig(g[j]) * g[4 + j].tanh();
            h[j] = sig(g[6 + j]) * c[j].tanh();
            assert!((y[t * 2 + j] as f64 - h[j]).abs() < 1e-5, "t={t} j={j}");
        }
    }
}

#[test]
fn complex_lstm_properties() {
    let mut vs = VarStore::new(2);
    let l_re = Lstm::new(&mut vs, "r", 4, 3).unwrap();
    let l_im = Lstm::new(&mut vs, "i", 4, 3).unwrap();

    // zero input: bias-driven output, independent of the sequence length
    let z5 = Tensor::zeros((1, 5, 4), candle_core::DType::F32, &Device::Cpu).unwrap();
    let z8 = Tensor::zeros((1, 8, 4), candle_core::DType::F32, &Device::Cpu).unwrap();
    let (a, _) = complex_lstm(&l_re, &l_im, &z5, &z5).unwrap();
    let (b, _) = complex_lstm(&l_re, &l_im, &z8, &z8).unwrap();
    assert_eq!(flat(&a), flat(&b.narrow(1, 0, 5).unwrap()));

    // truncation leaves earlier outputs unchanged
    let x_re = rand_tensor(&[2, 6, 4], 3);
    let x_im = rand_tensor(&[2, 6, 4], 4);
    let (full_re, full_im) = complex_lstm(&l_re, &l_im, &x_re, &x_im).unwrap();
    let (cut_re, cut_im) =
        complex_lstm(&l_re, &l_im, &x_re.narrow(1, 0, 3).unwrap(), &x_im.narrow(1, 0, 3).unwrap()).unwrap();
    assert!(max_abs_diff(&flat(&cut_re), &flat(&full_re.narrow(1, 0, 3).unwrap())) < 1e-6);
    assert!(max_abs_diff(&flat(&cut_im), &flat(&full_im.narrow(1, 0, 3).unwrap())) < 1e-6);

    // combination rule against the component recurrences
    let want_re = (l_re.forward(&x_re).unwrap() - l_im.forward(&x_im).unwrap()).unwrap();
    let want_im = (l_re.forward(&x_im).unwrap() + l_im.forward(&x_re).unwrap()).unwrap();
    assert!(max_abs_diff(&flat(&full_re), &flat(&want_re)) < 1e-6);
    assert!(max_abs_diff(&flat(&full_im), &flat(&want_im)) < 1e-6);
}

#[test]
fn two_frame_attention_by_hand() {
    let q = [0.3f32, -0.7, 1.1, 0.2];
    let k = [0.5f32, 0.1, -0.4, 0.9];
    let v = [1.0f32, 2.0, -1.0, 0.5];
    let tensor = |d: &[f32]| Tensor::from_vec(d.to_vec(), (1, 1, 2, 2), &Device::Cpu).unwrap();
    let (out, w) = causal_attention(&tensor(&q), &tensor(&k), &tensor(&v)).unwrap();
    let out = flat(&out);
    let w = flat(&w);
    let dot = |a: &[f32], b: &[f32]| (a[0] * b[0] + a[1] * b[1]) as f64 / 2f64.sqrt();
    // frame 0 only sees key 0
    assert_eq!(w[0], 1.0);
    assert_eq!(w[1], 0.0);
    assert!((out[0] - v[0]).abs() < 1e-6 && (out[1] - v[1]).abs() < 1e-6);
    let s0 = dot(&q[2..], &k[..2]);
    let s1 = dot(&q[2..], &k[2..]);
    let w0 = s0.exp() / (s0.exp() + s1.exp());
    assert!((w[2] as f64 - w0).abs() < 1e-6);
    for j in 0..2 {
        let want = w0 * v[j] as f64 + (1.0 - w0) * v[2 + j] as f64;
        assert!((out[2 + j] as f64 - want).abs() < 1e-6);
    }
}

#[test]
fn attention_weights_are_causal_and_normalized() {
    let mut vs = VarStore::new(3);
    let mha = MultiHeadAttention::new(&mut vs, "a", 8, 4).unwrap();
    let x = (rand_tensor(&[2, 9, 8], 1) * 5.0).unwrap();
    let (_, weights) = mha.forward_with_weights(&x, &x, &x).unwrap();
    let data = flat(&weights);
    let t = 9;
    for (r, row) in data.chunks(t).enumerate() {
        let query = r % t;
        assert!(row[query + 1..].iter().all(|&v| v == 0.0));
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
    }
    assert!(MultiHeadAttention::new(&mut vs, "bad", 10, 4).is_err());
}

#[test]
fn encoder_block_halves_frequency() {
    let mut vs = VarStore::new(1);
    let block = AttentionConvBlock::new(&mut vs, "e", BlockKind::Encoder, 32, 32, (3, 2), 2, 32, 4).unwrap();
    let y = block.forward(&rand_tensor(&[1, 32, 100, 64], 2), Mode::Inference).unwrap();
    assert_eq!(y.dims(), &[1, 32, 100, 32]);

    let dec = AttentionConvBlock::new(&mut vs, "d", BlockKind::Decoder, 32, 16, (3, 2), 2, 128, 4).unwrap();
    let y = dec.forward(&rand_tensor(&[1, 32, 10, 64], 3), Mode::Inference).unwrap();
    assert_eq!(y.dims(), &[1, 16, 10, 128]);
}

#[test]
fn invalid_configs_are_rejected() {
    let mut c = PdcattunetConfig::default();
    c.num_heads = 3;
    assert!(c.validate().is_err());
    let mut c = PdcattunetConfig::default();
    c.bins = 200;
    assert!(c.validate().is_err());
    let mut c = PdccrnConfig::default();
    c.bins = 100;
    assert!(c.validate().is_err());
    let mut c = PdccrnConfig::default();
    c.encoder_filters[0] = 15;
    assert!(c.validate().is_err());
}

mod oracle {
    //! Plain f64 re-implementation of one bottleneck block.

    pub type Mat = Vec<Vec<f64>>;

    pub fn linear(x: &Mat, w: &[f32], b: &[f32]) -> Mat {
        let d_out = b.len();
        let d_in = x[0].len();
        x.iter()
            .map(|row| (0..d_out).map(|o| b[o] as f64 + (0..d_in).map(|i| w[o * d_in + i] as f64 * row[i]).sum::<f64>()).collect())
            .collect()
    }

    /// Weight `[out, in, k]`, zero padding on the left.
    pub fn causal_conv(x: &Mat, w: &[f32], b: &[f32], k: usize) -> Mat {
        let (t_n, c_in) = (x.len(), x[0].len());
        (0..t_n)
            .map(|t| {
                (0..b.len())
                    .map(|o| {
                        let mut acc = b[o] as f64;
                        for j in 0..k {
                            let src = t as isize + j as isize - (k as isize - 1);
                            if src < 0 {
                                continue;
                            }
                            for i in 0..c_in {
                                acc += w[(o * c_in + i) * k + j] as f64 * x[src as usize][i];
                            }
                        }
                        acc
                    })
                    .collect()
            })
            .collect()
    }

    pub fn prelu(x: &Mat, a: &[f32]) -> Mat {
        x.iter().map(|r| r.iter().zip(a).map(|(&v, &s)| if v >= 0.0 { v } else { s as f64 * v }).collect()).collect()
    }

    pub fn layer_norm(x: &Mat, g: &[f32], b: &[f32]) -> Mat {
        x.iter()
            .map(|r| {
                let n = r.len() as f64;
                let m = r.iter().sum::<f64>() / n;
                let v = r.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
                r.iter().enumerate().map(|(i, x)| (x - m) / (v + 1e-5).sqrt() * g[i] as f64 + b[i] as f64).collect()
            })
            .collect()
    }

    pub fn add(a: &Mat, b: &Mat) -> Mat {
        a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
    }

    pub fn mha(x: &Mat, p: &dyn Fn(&str) -> Vec<f32>, heads: usize) -> Mat {
        let q = linear(x, &p("q.weight"), &p("q.bias"));
        let k = linear(x, &p("k.weight"), &p("k.bias"));
        let v = linear(x, &p("v.weight"), &p("v.bias"));
        let (t_n, d) = (x.len(), x[0].len());
        let dh = d / heads;
        let mut out = vec![vec![0.0; d]; t_n];
        for h in 0..heads {
            let r = h * dh..(h + 1) * dh;
            for t in 0..t_n {
                let scores: Vec<f64> = (0..=t)
                    .map(|s| r.clone().map(|i| q[t][i] * k[s][i]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for i in r.clone() {
                    out[t][i] = (0..=t).map(|s| e[s] / z * v[s][i]).sum();
                }
            }
        }
        linear(&out, &p("o.weight"), &p("o.bias"))
    }
}

#[test]
fn bottleneck_block_matches_oracle() {
    let (h, t, heads, k) = (4, 3, 2, 3);
    let mut vs = VarStore::new(5);
    let block = BottleneckBlock::new(&mut vs, "b", h, heads, k).unwrap();
    scramble(&vs, 40);
    let params: HashMap<String, Vec<f32>> = vs.export().unwrap().into_iter().map(|a| (a.name, a.data)).collect();
    let p = |n: &str| params[&format!("b.{n}")].clone();

    let x = rand_tensor(&[1, t, h], 6);
    let got = flat(&block.forward(&x).unwrap());

    use oracle::*;
    let xs: Mat = flat(&x).chunks(h).map(|r| r.iter().map(|&v| v as f64).collect()).collect();
    let y = layer_norm(&prelu(&causal_conv(&xs, &p("conv1.weight"), &p("conv1.bias"), k), &p("act1.alpha")), &p("norm1.weight"), &p("norm1.bias"));
    let attn = mha(&y, &|n| p(&format!("attn.{n}")), heads);
    let z = add(&layer_norm(&attn, &p("norm2.weight"), &p("norm2.bias")), &y);
    let w = prelu(&causal_conv(&z, &p("conv2.weight"), &p("conv2.bias"), k), &p("act2.alpha"));
    let want = layer_norm(&add(&w, &xs), &p("norm3.weight"), &p("norm3.bias"));
    let want: Vec<f32> = want.concat().iter().map(|&v| v as f32).collect();
    assert!(max_abs_diff(&got, &want) < 1e-4, "{got:?} vs {want:?}");
}

#[test]
fn bottleneck_block_causal_and_time_invariant_on_zeros() {
    let mut vs = VarStore::new(8);
    let block = BottleneckBlock::new(&mut vs, "b", 8, 4, 3).unwrap();
    scramble(&vs, 3);
    let zeros = Tensor::zeros((1, 6, 8), candle_core::DType::F32, &Device::Cpu).unwrap();
    let out = block.forward(&zeros).unwrap().squeeze(0).unwrap().to_vec2::<f32>().unwrap();
    // frames past the conv's zero padding
    for row in &out[3..] {
        assert!(max_abs_diff(row, &out[2]) < 1e-5);
    }

    let x = rand_tensor(&[1, 10, 8], 1);
    let mut y = flat(&x);
    for v in &mut y[6 * 8..] {
        *v += 3.0;
    }
    let y = Tensor::from_vec(y, (1, 10, 8), &Device::Cpu).unwrap();
    let a = flat(&block.forward(&x).unwrap());
    let b = flat(&block.forward(&y).unwrap());
    assert!(max_abs_diff(&a[..6 * 8], &b[..6 * 8]) < 1e-6);
    assert!(BottleneckBlock::new(&mut vs, "bad", 6, 4, 3).is_err());
}

#[test]
fn identity_mask_enhance_is_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let samples: Vec<f64> = (0..16000 + 77).map(|_| rng.random_range(-0.3..0.3)).collect();
    let noisy = Waveform::new(samples, 16000).unwrap();
    let out = enhance(&ConstantMask::identity(), &StftConfig::full_band(), &noisy, &dvec(1)).unwrap();
    assert_eq!(out.len(), noisy.len());
    let err: f64 = out.samples.iter().zip(&noisy.samples).map(|(a, b)| (a - b).powi(2)).sum();
    let snr = 10.0 * (noisy.energy() / err).log10();
    assert!(snr > 50.0, "round trip snr {snr}");
}

#[test]
fn enhance_is_deterministic() {
    let net = PseNetwork::build(&ModelConfig::preset(ModelKind::Pdccrn, Preset::Small), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let samples: Vec<f64> = (0..8000).map(|_| rng.random_range(-0.1..0.1)).collect();
    let noisy = Waveform::new(samples, 16000).unwrap();
    let a = enhance(&net, &net.stft, &noisy, &dvec(3)).unwrap();
    let b = enhance(&net, &net.stft, &noisy, &dvec(3)).unwrap();
    assert_eq!(a.samples, b.samples);
    assert_eq!(a.len(), noisy.len());
}
