use super::network::{layer_backward, layer_forward};
use super::*;
use crate::dataset::Dataset;
use crate::numerics::{ImageGrid, RandomStream};

fn random_tensor(stream: &mut RandomStream, n: usize, c: usize, h: usize, w: usize) -> Tensor {
    let mut t = Tensor::zeros(n, c, h, w);
    for v in &mut t.data {
        *v = stream.normal();
    }
    t
}

fn perturb_bn(params: &mut ParameterSet, stream: &mut RandomStream) {
    gradcheck::perturb_params(params, stream);
}

fn check_network_gradients(spec: &NetworkSpec, modes: &[BnMode], seed: u64) {
    let c = gradcheck::check_network(spec, modes, seed, 6, 8).unwrap();
    assert!(c.max_rel_err < 1e-4, "{c:?}");
    assert!(c.probes > 20);
}

#[test]
fn full_network_gradients_match_finite_differences_batch_mode() {
    let spec = NetworkSpec::new(5, 3).unwrap();
    check_network_gradients(&spec, &[BnMode::Batch; 5], 11);
}

#[test]
fn full_network_gradients_match_finite_differences_running_mode() {
    let spec = NetworkSpec::new(5, 3).unwrap();
    check_network_gradients(&spec, &[BnMode::Running; 5], 12);
}

#[test]
fn mixed_mode_gradients_match_finite_differences() {
    let spec = NetworkSpec::new(6, 2).unwrap();
    let modes = [BnMode::Running, BnMode::Running, BnMode::Running, BnMode::Batch, BnMode::Batch, BnMode::Batch];
    check_network_gradients(&spec, &modes, 13);
}

#[test]
fn single_layer_gradients_match_finite_differences() {
    for (i, kind) in [LayerKind::ConvRelu, LayerKind::ConvBnRelu, LayerKind::ConvBn, LayerKind::Conv].into_iter().enumerate() {
        let c = gradcheck::check_layer(kind, 21 + i as u64).unwrap();
        assert!(c.max_rel_err < 1e-4, "{kind:?}: {c:?}");
    }
}

#[test]
fn bias_feeding_batch_norm_has_zero_gradient() {
    let mut s = RandomStream::new(4);
    let layer = ConvLayer {
        c_in: 1,
        c_out: 2,
        weight: (0..18).map(|_| s.normal()).collect(),
        bias: vec![0.3, -0.2],
        bn: Some(BatchNormParams { gamma: vec![1.1, 0.9], beta: vec![0.0, 0.1], running_mean: vec![0.0; 2], running_var: vec![1.0; 2] }),
    };
    let x = random_tensor(&mut s, 3, 1, 4, 4);
    let r = random_tensor(&mut s, 3, 2, 4, 4);
    let fwd = layer_forward(&layer, LayerKind::ConvBn, &x, BnMode::Batch, 1e-5, true).unwrap();
    let mut g = LayerGrads { weight: vec![0.0; 18], bias: vec![0.0; 2], gamma: Some(vec![0.0; 2]), beta: Some(vec![0.0; 2]) };
    layer_backward(&layer, LayerKind::ConvBn, &x, &fwd.output, fwd.conv_out.as_ref(), &fwd.mean, &fwd.inv_std, BnMode::Batch, &r, &mut g, false);
    assert!(g.bias.iter().all(|b| b.abs() < 1e-9), "{:?}", g.bias);
}

#[test]
fn batch_norm_output_has_normalized_moments() {
    let mut s = RandomStream::new(3);
    let layer = ConvLayer {
        c_in: 1,
        c_out: 2,
        weight: (0..18).map(|_| s.normal()).collect(),
        bias: vec![0.5, -0.5],
        bn: Some(BatchNormParams { gamma: vec![1.0; 2], beta: vec![0.0; 2], running_mean: vec![0.0; 2], running_var: vec![1.0; 2] }),
    };
    let x = random_tensor(&mut s, 6, 1, 7, 7);
    let out = layer_forward(&layer, LayerKind::ConvBn, &x, BnMode::Batch, 1e-5, false).unwrap().output;
    for c in 0..2 {
        let vals: Vec<f64> = (0..6).flat_map(|i| out.item(i)[c * 49..(c + 1) * 49].to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-3);
    }
}

#[test]
fn running_statistics_follow_momentum_rule() {
    let spec = NetworkSpec::new(4, 2).unwrap();
    let mut s = RandomStream::new(5);
    let params = ParameterSet::init(&spec, &mut s).unwrap();
    let x = random_tensor(&mut s, 3, 1, 6, 6);
    let mut net = Denoiser::new(spec.clone(), params.clone()).unwrap();
    net.forward_tensor(x.clone(), 0, &[BnMode::Batch; 4], false).unwrap();
    // Layer 1 is the first batch-norm layer; its input is layer 0's output.
    let h0 = layer_forward(&params.layers[0], LayerKind::ConvRelu, &x, BnMode::Batch, spec.bn_eps, false).unwrap().output;
    let fwd = layer_forward(&params.layers[1], spec.layer_kind(1), &h0, BnMode::Batch, spec.bn_eps, false).unwrap();
    let bv = fwd.batch_var.unwrap();
    let bn = net.params().layers[1].bn.as_ref().unwrap();
    for c in 0..2 {
        assert!((bn.running_mean[c] - 0.01 * fwd.mean[c]).abs() < 1e-12);
        assert!((bn.running_var[c] - (0.99 + 0.01 * bv[c])).abs() < 1e-12);
    }
}

#[test]
fn zero_weights_give_constant_output_bias() {
    let spec = NetworkSpec::new(5, 3).unwrap();
    let mut params = ParameterSet::init(&spec, &mut RandomStream::new(1)).unwrap();
    for l in &mut params.layers {
        l.weight.iter_mut().for_each(|w| *w = 0.0);
    }
    params.layers[4].bias[0] = 0.25;
    let imgs = vec![ImageGrid::filled(6, 6, 3.0); 2];
    let out = denoise(&params, &spec, &imgs, 8).unwrap();
    assert!(out.iter().all(|o| o.data().iter().all(|&v| v == 0.25)));
}

#[test]
fn eval_is_deterministic_and_pure() {
    let spec = NetworkSpec::new(5, 4).unwrap();
    let mut s = RandomStream::new(2);
    let mut params = ParameterSet::init(&spec, &mut s).unwrap();
    perturb_bn(&mut params, &mut s);
    let imgs: Vec<ImageGrid> = (0..3).map(|_| ImageGrid::new(8, 8, (0..64).map(|_| s.normal()).collect()).unwrap()).collect();
    let before = params.clone();
    let a = forward(&mut params, &spec, &imgs, Mode::Eval).unwrap();
    let b = forward(&mut params, &spec, &imgs, Mode::Eval).unwrap();
    assert_eq!(a, b);
    assert_eq!(params, before);
    // Eval output of an item does not depend on the rest of the batch.
    let single = forward(&mut params, &spec, &imgs[1..2], Mode::Eval).unwrap();
    assert_eq!(single[0], a[1]);
    // Train mode moves the running statistics.
    forward(&mut params, &spec, &imgs, Mode::Train).unwrap();
    assert_ne!(params, before);
}

#[test]
fn shape_is_preserved_for_all_depths() {
    for depth in [5, 9, 11, 13, 15] {
        let spec = NetworkSpec::new(depth, 2).unwrap();
        let params = ParameterSet::init(&spec, &mut RandomStream::new(depth as u64)).unwrap();
        let out = denoise(&params, &spec, &[ImageGrid::filled(7, 5, 1.0)], 1).unwrap();
        assert_eq!((out[0].height(), out[0].width()), (7, 5));
        assert_eq!(params.layers.len(), depth);
    }
    assert!(NetworkSpec::new(3, 2).is_err());
}

#[test]
fn batch_mode_rejects_single_item() {
    let spec = NetworkSpec::new(4, 2).unwrap();
    let params = ParameterSet::init(&spec, &mut RandomStream::new(1)).unwrap();
    let mut net = Denoiser::new(spec, params).unwrap();
    assert!(net.forward(&[ImageGrid::zeros(4, 4)], Mode::Train).is_err());
    assert!(net.backward(&Tensor::zeros(1, 1, 4, 4), 0, false).is_err());
}

#[test]
fn backward_stop_layer_zeroes_lower_gradients() {
    let spec = NetworkSpec::new(5, 2).unwrap();
    let mut s = RandomStream::new(8);
    let params = ParameterSet::init(&spec, &mut s).unwrap();
    let x = random_tensor(&mut s, 2, 1, 5, 5);
    let r = random_tensor(&mut s, 2, 1, 5, 5);
    let mut net = Denoiser::new(spec.clone(), params).unwrap();
    net.forward_tensor(x.clone(), 0, &[BnMode::Batch; 5], true).unwrap();
    let full = net.backward(&r, 0, false).unwrap();
    let partial = net.backward(&r, 3, false).unwrap();
    for l in 0..5 {
        if l < 3 {
            assert!(partial.layers[l].weight.iter().all(|&v| v == 0.0));
        } else {
            assert_eq!(partial.layers[l], full.layers[l]);
        }
    }
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let mut p = vec![1.0, -2.0, 0.5];
    let g = vec![0.3, -7.0, 1e-3];
    let mut q = vec![4.0];
    let gq = vec![1.0];
    let mut state = AdamState::new(AdamConfig::with_learning_rate(0.01), &[p.clone(), q.clone()]);
    adam_step(&mut [&mut p, &mut q], &[&g, &gq], &mut state, &[true, false]).unwrap();
    // With bias correction the first step is lr · sign(g) up to epsilon.
    let expected = [1.0 - 0.01, -2.0 + 0.01, 0.5 - 0.01 * 1e-3 / (1e-3 + 1e-8)];
    for (a, b) in p.iter().zip(expected) {
        assert!((a - b).abs() < 1e-9);
    }
    assert_eq!(q, vec![4.0]);
    assert_eq!(state.first_moment[1], vec![0.0]);
}

#[test]
fn adam_matches_scalar_reference() {
    let cfg = AdamConfig::with_learning_rate(0.05);
    let grads = [0.4, -0.1, 0.25, 0.0, -0.3];
    let mut p = vec![0.7];
    let mut state = AdamState::new(cfg, &[p.clone()]);
    let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 0.7f64);
    for (t, &gv) in grads.iter().enumerate() {
        let g = vec![gv];
        adam_step(&mut [&mut p], &[&g], &mut state, &[true]).unwrap();
        m = 0.9 * m + 0.1 * gv;
        v = 0.999 * v + 0.001 * gv * gv;
        let tt = (t + 1) as i32;
        x -= 0.05 * (m / (1.0 - 0.9f64.powi(tt))) / ((v / (1.0 - 0.999f64.powi(tt))).sqrt() + 1e-8);
    }
    assert!((p[0] - x).abs() < 1e-12);
}

#[test]
fn trainable_mask_selects_last_layers() {
    let spec = NetworkSpec::new(6, 2).unwrap();
    let params = ParameterSet::init(&spec, &mut RandomStream::new(1)).unwrap();
    let mask = TrainableMask::new(&spec, &params, 2).unwrap();
    let layers = params.learnable_layers();
    for (flag, l) in mask.flags.iter().zip(layers) {
        assert_eq!(*flag, l >= 4);
    }
    assert_eq!(mask.first_trainable_layer(6), 4);
    assert!(TrainableMask::new(&spec, &params, 7).is_err());
    assert!(TrainableMask::new(&spec, &params, 0).unwrap().flags.iter().all(|f| !f));
}

#[test]
fn mse_helpers_agree() {
    let mut s = RandomStream::new(9);
    let a = random_tensor(&mut s, 3, 1, 4, 4);
    let b = random_tensor(&mut s, 3, 1, 4, 4);
    let (loss, grad) = mse_grad(&a, &b).unwrap();
    let direct = mse_loss(&a.to_images(), &b.to_images()).unwrap();
    assert!((loss - direct).abs() < 1e-12);
    for i in 0..a.data.len() {
        assert!((grad.data[i] - 2.0 * (a.data[i] - b.data[i]) / 3.0).abs() < 1e-12);
    }
    assert!(mse_loss::<Vec<f64>, Vec<f64>>(&[], &[]).is_err());
}

fn toy_dataset(seed: u64, n: usize) -> Dataset {
    let mut s = RandomStream::new(seed);
    let mut noisy = Vec::new();
    let mut clean = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let t: Vec<f64> = (0..64).map(|p| if (p % 8) > 3 { 1.0 } else { 0.0 }).collect();
        let x: Vec<f64> = t.iter().map(|v| v + 0.3 * s.normal()).collect();
        clean.push(ImageGrid::new(8, 8, t).unwrap());
        noisy.push(ImageGrid::new(8, 8, x).unwrap());
        labels.push((i % 2) as u8);
    }
    Dataset::from_pairs(noisy, clean, labels).unwrap()
}

#[test]
fn pretraining_reduces_validation_mse_and_is_reproducible() {
    let spec = NetworkSpec::new(4, 4).unwrap();
    let train = toy_dataset(1, 32);
    let val = toy_dataset(2, 8);
    let cfg = PretrainConfig { epochs: 15, batch_present: 4, batch_absent: 4, adam: AdamConfig::with_learning_rate(1e-2), patience: 15, max_batches_per_epoch: None };
    let a = pretrain(&spec, &train, &val, &cfg, &mut RandomStream::new(3)).unwrap();
    assert!(a.best_val_mse < a.initial_val_mse);
    assert!(a.log.iter().any(|e| e.epoch == a.best_epoch));
    let b = pretrain(&spec, &train, &val, &cfg, &mut RandomStream::new(3)).unwrap();
    assert_eq!(a.params, b.params);
}

#[test]
fn pretraining_rejects_empty_data() {
    let spec = NetworkSpec::new(4, 2).unwrap();
    let empty = Dataset::new(8, 8, Vec::new()).unwrap();
    let val = toy_dataset(2, 4);
    assert!(pretrain(&spec, &empty, &val, &PretrainConfig::default(), &mut RandomStream::new(1)).is_err());
}
