use candle_core::{Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_var(shape: &[usize], seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f32> = (0..shape.iter().product()).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    Var::from_tensor(&Tensor::from_vec(data, shape, &Device::Cpu).unwrap()).unwrap()
}

fn flat(t: &Tensor) -> Vec<f32> {
    t.flatten_all().unwrap().to_vec1::<f32>().unwrap()
}

fn close(a: &Tensor, b: &Tensor, tol: f32) {
    assert_eq!(a.dims(), b.dims());
    let d = flat(a).iter().zip(flat(b)).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
    assert!(d < tol, "max diff {d}");
}

/// Gradients of `sum(out * probe)` for each of `vars`.
fn grads(out: &Tensor, probe: &Tensor, vars: &[&Var]) -> Vec<Tensor> {
    let g = (out * probe).unwrap().sum_all().unwrap().backward().unwrap();
    vars.iter().map(|v| g.get(v.as_tensor()).unwrap().clone()).collect()
}

#[test]
fn im2col_conv_matches_native_conv_and_gradients() {
    for (stride, kt, kf) in [(1, 2, 3), (2, 2, 5), (1, 1, 1), (2, 3, 3)] {
        let x = rand_var(&[2, 3, 6, 8], 1);
        let w = rand_var(&[4, 3, kt, kf], 2);
        let b = rand_var(&[4], 3);
        let op = Im2Col { kt, kf, time_left: kt - 1, freq_pad: kf / 2, freq_stride: stride, ones: true };
        let ours = conv2d_im2col(&x, &w, Some(&b), op).unwrap();

        let padded = pad_causal_2d(&x, kt - 1, kf / 2).unwrap();
        let full = padded.conv2d(&w, 0, 1, 1, 1).unwrap().broadcast_add(&b.reshape((1, 4, 1, 1)).unwrap()).unwrap();
        let reference = subsample_freq(&full, stride).unwrap();
        close(&ours, &reference, 1e-5);

        let probe = rand_var(ours.dims(), 4);
        let a = grads(&ours, &probe, &[&x, &w, &b]);
        let r = grads(&reference, &probe, &[&x, &w, &b]);
        for (ga, gr) in a.iter().zip(&r) {
            close(ga, gr, 1e-4);
        }
    }
}

#[test]
fn prelu_matches_reference_and_gradients() {
    let x = rand_var(&[2, 3, 4, 5], 1);
    let mut vs = VarStore::new(0);
    let act = PRelu::new(&mut vs, "p", 3).unwrap();
    let alpha = vs.params()[0].1.clone();
    alpha.set(&Tensor::new(&[0.1f32, -0.3, 0.7], &Device::Cpu).unwrap()).unwrap();
    let ours = act.forward(&x, 1).unwrap();
    let a = alpha.as_tensor().reshape((1, 3, 1, 1)).unwrap();
    let reference = (x.relu().unwrap() - x.neg().unwrap().relu().unwrap().broadcast_mul(&a).unwrap()).unwrap();
    close(&ours, &reference, 1e-6);
    let probe = rand_var(x.dims(), 2);
    for (ga, gr) in grads(&ours, &probe, &[&x, &alpha]).iter().zip(&grads(&reference, &probe, &[&x, &alpha])) {
        close(ga, gr, 1e-5);
    }
}

fn reference_batch_norm(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let c = x.dim(1).unwrap();
    let flat = x.permute((0, 2, 3, 1)).unwrap().reshape(((), c)).unwrap();
    let mean = flat.mean(0).unwrap();
    let var = flat.broadcast_sub(&mean).unwrap().sqr().unwrap().mean(0).unwrap();
    let shape = (1, c, 1, 1);
    let inv = (var + 1e-5).unwrap().sqrt().unwrap().recip().unwrap();
    x.broadcast_sub(&mean.reshape(shape).unwrap())
        .unwrap()
        .broadcast_mul(&(inv * w).unwrap().reshape(shape).unwrap())
        .unwrap()
        .broadcast_add(&b.reshape(shape).unwrap())
        .unwrap()
}

#[test]
fn batch_norm_train_matches_reference_and_gradients() {
    let x = rand_var(&[3, 4, 5, 6], 1);
    let mut vs = VarStore::new(0);
    let bn = BatchNorm::new(&mut vs, "bn", 4).unwrap();
    let w = vs.params()[0].1.clone();
    let b = vs.params()[1].1.clone();
    w.set(&Tensor::new(&[0.5f32, 1.5, -1.0, 2.0], &Device::Cpu).unwrap()).unwrap();
    b.set(&Tensor::new(&[0.1f32, 0.0, -0.2, 0.3], &Device::Cpu).unwrap()).unwrap();

    let ours = bn.forward(&x, Mode::Train).unwrap();
    let reference = reference_batch_norm(&x, &w, &b);
    close(&ours, &reference, 1e-5);
    let probe = rand_var(x.dims(), 2);
    for (ga, gr) in grads(&ours, &probe, &[&x, &w, &b]).iter().zip(&grads(&reference, &probe, &[&x, &w, &b])) {
        close(ga, gr, 1e-4);
    }

    // running statistics moved 10% of the way from (0, 1)
    let running_mean = flat(vs.buffers()[0].1.as_tensor());
    let batch_mean = flat(&x.permute((1, 0, 2, 3)).unwrap().reshape((4, ())).unwrap().mean(1).unwrap());
    for (r, m) in running_mean.iter().zip(&batch_mean) {
        assert!((r - 0.1 * m).abs() < 1e-6);
    }
}

#[test]
fn batch_norm_inference_uses_running_stats() {
    let x = rand_var(&[2, 2, 3, 4], 5);
    let mut vs = VarStore::new(0);
    let bn = BatchNorm::new(&mut vs, "bn", 2).unwrap();
    vs.buffers()[0].1.set(&Tensor::new(&[0.5f32, -1.0], &Device::Cpu).unwrap()).unwrap();
    vs.buffers()[1].1.set(&Tensor::new(&[4.0f32, 0.25], &Device::Cpu).unwrap()).unwrap();
    let y = bn.forward(&x, Mode::Inference).unwrap();
    let xv = flat(&x);
    for (i, (yv, xv)) in flat(&y).iter().zip(&xv).enumerate() {
        let ch = (i / 12) % 2;
        let (m, v) = [(0.5f32, 4.0f32), (-1.0, 0.25)][ch];
        assert!((yv - (xv - m) / (v + 1e-5).sqrt()).abs() < 1e-5);
    }
    // statistics stay frozen
    assert_eq!(flat(vs.buffers()[0].1.as_tensor()), vec![0.5, -1.0]);
}

#[test]
fn causal_conv1d_is_causal() {
    let mut vs = VarStore::new(1);
    let conv = CausalConv1d::new(&mut vs, "c", 3, 2, 3).unwrap();
    let x = rand_var(&[1, 3, 8], 1);
    let mut data = flat(&x);
    for t in 5..8 {
        for c in 0..3 {
            data[c * 8 + t] += 1.0;
        }
    }
    let y = Tensor::from_vec(data, (1, 3, 8), &Device::Cpu).unwrap();
    let a = flat(&conv.forward(&x).unwrap());
    let b = flat(&conv.forward(&y).unwrap());
    for c in 0..2 {
        for t in 0..5 {
            assert_eq!(a[c * 8 + t], b[c * 8 + t]);
        }
        assert_ne!(a[c * 8 + 5], b[c * 8 + 5]);
    }
}

#[test]
fn frequency_resampling() {
    let x = Tensor::arange(0f32, 8.0, &Device::Cpu).unwrap().reshape((1, 1, 1, 8)).unwrap();
    assert_eq!(flat(&max_pool_freq(&x, 2).unwrap()), vec![1.0, 3.0, 5.0, 7.0]);
    assert_eq!(flat(&subsample_freq(&x, 2).unwrap()), vec![0.0, 2.0, 4.0, 6.0]);
    let small = Tensor::new(&[1f32, 2.0], &Device::Cpu).unwrap().reshape((1, 1, 1, 2)).unwrap();
    assert_eq!(flat(&upsample_freq(&small, 2).unwrap()), vec![1.0, 1.0, 2.0, 2.0]);
    assert_eq!(flat(&zero_stuff_freq(&small, 2).unwrap()), vec![1.0, 0.0, 2.0, 0.0]);
    assert!(max_pool_freq(&x, 3).is_err());
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let v = Var::from_tensor(&Tensor::new(&[1.0f32, -2.0, 0.5], &Device::Cpu).unwrap()).unwrap();
    let mut opt = Adam::new(vec![v.clone()], 0.01).unwrap();
    // gradient of sum(v * [3, -1, 0])
    let g = (v.as_tensor() * Tensor::new(&[3.0f32, -1.0, 0.0], &Device::Cpu).unwrap())
        .unwrap()
        .sum_all()
        .unwrap()
        .backward()
        .unwrap();
    opt.step(&g).unwrap();
    let after = flat(v.as_tensor());
    // bias-corrected first step is lr * sign(g) for non-zero g
    assert!((after[0] - 0.99).abs() < 1e-6);
    assert!((after[1] - -1.99).abs() < 1e-6);
    assert_eq!(after[2], 0.5);
}

#[test]
fn gradient_clipping_rescales_to_max_norm() {
    let v = Var::from_tensor(&Tensor::new(&[0.0f32, 0.0], &Device::Cpu).unwrap()).unwrap();
    let mut g = (v.as_tensor() * Tensor::new(&[3.0f32, 4.0], &Device::Cpu).unwrap())
        .unwrap()
        .sum_all()
        .unwrap()
        .backward()
        .unwrap();
    let norm = clip_grad_norm(&[v.clone()], &mut g, 1.0).unwrap();
    assert!((norm - 5.0).abs() < 1e-9);
    let clipped = flat(g.get(v.as_tensor()).unwrap());
    assert!((clipped[0] - 0.6).abs() < 1e-5 && (clipped[1] - 0.8).abs() < 1e-5);
}

#[test]
fn var_store_round_trip_and_errors() {
    let mut a = VarStore::new(1);
    Linear::new(&mut a, "l", 3, 2).unwrap();
    BatchNorm::new(&mut a, "bn", 2).unwrap();
    let mut b = VarStore::new(2);
    Linear::new(&mut b, "l", 3, 2).unwrap();
    BatchNorm::new(&mut b, "bn", 2).unwrap();
    assert_ne!(a.export().unwrap(), b.export().unwrap());
    b.import(&a.export().unwrap()).unwrap();
    assert_eq!(a.export().unwrap(), b.export().unwrap());
    assert_eq!(a.num_parameters(), 3 * 2 + 2 + 2 + 2);

    let mut arrays = a.export().unwrap();
    arrays[0].shape = vec![2, 2];
    assert!(b.import(&arrays).is_err());
    assert!(b.import(&a.export().unwrap()[1..]).is_err());
}
