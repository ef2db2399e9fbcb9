//! Central finite-difference checks of the reverse-mode gradients.

use super::network::{layer_backward, layer_forward};
use super::{BatchNormParams, BnMode, ConvLayer, Denoiser, LayerGrads, LayerKind, NetworkSpec, ParameterSet, Tensor};
use crate::error::Result;
use crate::numerics::RandomStream;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-4;

/// Worst relative error over the probed coordinates, and how many were
/// probed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub probes: usize,
}

impl GradCheck {
    fn new() -> Self {
        Self { max_rel_err: 0.0, probes: 0 }
    }

    fn record(&mut self, fd: f64, analytic: f64) {
        self.max_rel_err = self.max_rel_err.max(rel_err(fd, analytic));
        self.probes += 1;
    }
}

fn random_tensor(stream: &mut RandomStream, n: usize, c: usize, h: usize, w: usize) -> Tensor {
    let mut t = Tensor::zeros(n, c, h, w);
    for v in &mut t.data {
        *v = stream.normal();
    }
    t
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Relative error, treating differences below finite-difference roundoff
/// as exact.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let diff = (a - b).abs();
    if diff < 1e-7 {
        return 0.0;
    }
    diff / a.abs().max(b.abs())
}

/// Moves batch-norm and bias parameters away from their initial values so
/// every gradient path is exercised.
pub fn perturb_params(params: &mut ParameterSet, stream: &mut RandomStream) {
    for l in &mut params.layers {
        if let Some(bn) = l.bn.as_mut() {
            for g in &mut bn.gamma {
                *g = 1.0 + 0.3 * stream.normal();
            }
            for b in &mut bn.beta {
                *b = 0.2 * stream.normal();
            }
            for m in &mut bn.running_mean {
                *m = 0.1 * stream.normal();
            }
            for v in &mut bn.running_var {
                *v = 0.5 + stream.uniform();
            }
        }
        for b in &mut l.bias {
            *b = 0.1 * stream.normal();
        }
    }
}

fn projected_loss(spec: &NetworkSpec, params: &ParameterSet, x: &Tensor, modes: &[BnMode], r: &Tensor) -> Result<f64> {
    let mut net = Denoiser::new(spec.clone(), params.clone())?;
    let out = net.forward_tensor(x.clone(), 0, modes, false)?;
    Ok(dot(&out.data, &r.data))
}

/// Gradient of the projected loss `Σ r ⊙ net(x)` for a batch of four 8×8
/// inputs, probed at `per_tensor` coordinates of every learnable tensor and
/// at `input_probes` input pixels.
pub fn check_network(spec: &NetworkSpec, modes: &[BnMode], seed: u64, per_tensor: usize, input_probes: usize) -> Result<GradCheck> {
    let mut s = RandomStream::new(seed);
    let mut params = ParameterSet::init(spec, &mut s)?;
    perturb_params(&mut params, &mut s);
    let x = random_tensor(&mut s, 4, 1, 8, 8);
    let r = random_tensor(&mut s, 4, 1, 8, 8);

    let mut net = Denoiser::new(spec.clone(), params.clone())?;
    net.forward_tensor(x.clone(), 0, modes, true)?;
    let grads = net.backward(&r, 0, true)?;

    let h = FD_STEP;
    let mut check = GradCheck::new();
    let analytic: Vec<Vec<f64>> = grads.tensors().into_iter().map(|t| t.to_vec()).collect();
    for (k, tensor) in analytic.iter().enumerate() {
        let len = tensor.len();
        for probe in 0..len.min(per_tensor) {
            let i = (probe * 7919) % len;
            let mut plus = params.clone();
            plus.learnable_mut()[k][i] += h;
            let mut minus = params.clone();
            minus.learnable_mut()[k][i] -= h;
            let fd = (projected_loss(spec, &plus, &x, modes, &r)? - projected_loss(spec, &minus, &x, modes, &r)?) / (2.0 * h);
            check.record(fd, tensor[i]);
        }
    }
    let gx = grads.input.expect("input gradient requested");
    for probe in 0..input_probes {
        let i = (probe * 37) % x.data.len();
        let mut xp = x.clone();
        xp.data[i] += h;
        let mut xm = x.clone();
        xm.data[i] -= h;
        let fd = (projected_loss(spec, &params, &xp, modes, &r)? - projected_loss(spec, &params, &xm, modes, &r)?) / (2.0 * h);
        check.record(fd, gx.data[i]);
    }
    Ok(check)
}

/// One layer of `kind` in isolation, batch statistics, every weight,
/// bias, BN affine parameter and a stride of input pixels.
pub fn check_layer(kind: LayerKind, seed: u64) -> Result<GradCheck> {
    let mut s = RandomStream::new(seed);
    let (c_in, c_out) = (2, 3);
    let mut layer = ConvLayer {
        c_in,
        c_out,
        weight: (0..c_out * c_in * 9).map(|_| 0.4 * s.normal()).collect(),
        bias: (0..c_out).map(|_| 0.1 * s.normal()).collect(),
        bn: kind.has_bn().then(|| BatchNormParams {
            gamma: (0..c_out).map(|_| 1.0 + 0.2 * s.normal()).collect(),
            beta: (0..c_out).map(|_| 0.1 * s.normal()).collect(),
            running_mean: vec![0.0; c_out],
            running_var: vec![1.0; c_out],
        }),
    };
    let x = random_tensor(&mut s, 3, c_in, 5, 6);
    let mut r = random_tensor(&mut s, 3, c_out, 5, 6);
    if kind.has_relu() {
        // Outputs near the ReLU kink get zero weight so that ±h
        // perturbations never cross it inside the projected loss.
        let linear_kind = if kind.has_bn() { LayerKind::ConvBn } else { LayerKind::Conv };
        let z = layer_forward(&layer, linear_kind, &x, BnMode::Batch, 1e-5, false)?.output;
        for (rv, zv) in r.data.iter_mut().zip(&z.data) {
            if zv.abs() < 1e-2 {
                *rv = 0.0;
            }
        }
    }
    let eval = |layer: &ConvLayer, x: &Tensor| -> Result<f64> { Ok(dot(&layer_forward(layer, kind, x, BnMode::Batch, 1e-5, false)?.output.data, &r.data)) };
    let fwd = layer_forward(&layer, kind, &x, BnMode::Batch, 1e-5, true)?;
    let mut g = LayerGrads {
        weight: vec![0.0; layer.weight.len()],
        bias: vec![0.0; c_out],
        gamma: kind.has_bn().then(|| vec![0.0; c_out]),
        beta: kind.has_bn().then(|| vec![0.0; c_out]),
    };
    let gx = layer_backward(&layer, kind, &x, &fwd.output, fwd.conv_out.as_ref(), &fwd.mean, &fwd.inv_std, BnMode::Batch, &r, &mut g, true)
        .expect("input gradient requested");
    let h = FD_STEP;
    let mut check = GradCheck::new();
    let mut central = |layer: &mut ConvLayer, get: &dyn Fn(&mut ConvLayer) -> &mut f64, analytic: f64| -> Result<()> {
        let orig = *get(layer);
        *get(layer) = orig + h;
        let p = eval(layer, &x)?;
        *get(layer) = orig - h;
        let m = eval(layer, &x)?;
        *get(layer) = orig;
        check.record((p - m) / (2.0 * h), analytic);
        Ok(())
    };
    for i in 0..layer.weight.len() {
        central(&mut layer, &|l| &mut l.weight[i], g.weight[i])?;
    }
    for i in 0..c_out {
        central(&mut layer, &|l| &mut l.bias[i], g.bias[i])?;
    }
    if let (Some(gg), Some(gb)) = (&g.gamma, &g.beta) {
        for i in 0..c_out {
            central(&mut layer, &|l| &mut l.bn.as_mut().expect("bn layer").gamma[i], gg[i])?;
            central(&mut layer, &|l| &mut l.bn.as_mut().expect("bn layer").beta[i], gb[i])?;
        }
    }
    for i in (0..x.data.len()).step_by(7) {
        let mut xp = x.clone();
        xp.data[i] += h;
        let mut xm = x.clone();
        xm.data[i] -= h;
        check.record((eval(&layer, &xp)? - eval(&layer, &xm)?) / (2.0 * h), gx.data[i]);
    }
    Ok(check)
}
