use serde::{Deserialize, Serialize};

use super::tensor::{col2im, gemm, im2col, Tensor};
use crate::error::{invalid, Error, Result};
use crate::numerics::{ImageGrid, RandomStream};

/// Layer type by position in the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    ConvRelu,
    ConvBnRelu,
    ConvBn,
    Conv,
}

impl LayerKind {
    pub fn has_bn(self) -> bool {
        matches!(self, LayerKind::ConvBnRelu | LayerKind::ConvBn)
    }

    pub fn has_relu(self) -> bool {
        matches!(self, LayerKind::ConvRelu | LayerKind::ConvBnRelu)
    }
}

/// Plain CNN denoiser: Conv+ReLU, (D−3)× Conv+BN+ReLU, Conv+BN, Conv.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub depth: usize,
    pub filters: usize,
    #[serde(default = "default_bn_eps")]
    pub bn_eps: f64,
    /// Weight of the previous running statistic in the BN moving average.
    #[serde(default = "default_bn_momentum")]
    pub bn_momentum: f64,
}

fn default_bn_eps() -> f64 {
    1e-5
}

fn default_bn_momentum() -> f64 {
    0.99
}

impl NetworkSpec {
    pub fn new(depth: usize, filters: usize) -> Result<Self> {
        let spec = Self { depth, filters, bn_eps: default_bn_eps(), bn_momentum: default_bn_momentum() };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 4 {
            return invalid(format!("network depth must be at least 4, got {}", self.depth));
        }
        if self.filters == 0 {
            return invalid("filter count must be positive");
        }
        if !(self.bn_eps > 0.0) || !(0.0..1.0).contains(&self.bn_momentum) {
            return invalid("batch-norm epsilon must be positive and momentum in [0, 1)");
        }
        Ok(())
    }

    pub fn layer_kind(&self, layer: usize) -> LayerKind {
        match layer {
            0 => LayerKind::ConvRelu,
            l if l + 1 == self.depth => LayerKind::Conv,
            l if l + 2 == self.depth => LayerKind::ConvBn,
            _ => LayerKind::ConvBnRelu,
        }
    }

    /// (input channels, output channels) of a layer.
    pub fn channels(&self, layer: usize) -> (usize, usize) {
        let c_in = if layer == 0 { 1 } else { self.filters };
        let c_out = if layer + 1 == self.depth { 1 } else { self.filters };
        (c_in, c_out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub c_in: usize,
    pub c_out: usize,
    /// `c_out × c_in × 3 × 3`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub bn: Option<BatchNormParams>,
}

/// All denoiser weights and batch-norm buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet {
    pub layers: Vec<ConvLayer>,
}

/// Which part of a layer a tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorRole {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl TensorRole {
    pub fn is_learnable(self) -> bool {
        !matches!(self, TensorRole::RunningMean | TensorRole::RunningVar)
    }

    fn suffix(self) -> &'static str {
        match self {
            TensorRole::Weight => "weight",
            TensorRole::Bias => "bias",
            TensorRole::Gamma => "gamma",
            TensorRole::Beta => "beta",
            TensorRole::RunningMean => "running_mean",
            TensorRole::RunningVar => "running_var",
        }
    }
}

/// Name, layer, role and shape of one stored tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub layer: usize,
    pub role: TensorRole,
    pub shape: Vec<usize>,
}

impl ParameterSet {
    /// Glorot-uniform kernels, zero biases, identity batch norm.
    pub fn init(spec: &NetworkSpec, stream: &mut RandomStream) -> Result<Self> {
        spec.validate()?;
        let layers = (0..spec.depth)
            .map(|l| {
                let (c_in, c_out) = spec.channels(l);
                let fan_in = (c_in * 9) as f64;
                let fan_out = (c_out * 9) as f64;
                let limit = (6.0 / (fan_in + fan_out)).sqrt();
                let weight = (0..c_out * c_in * 9).map(|_| stream.uniform_range(-limit, limit)).collect();
                let bn = spec.layer_kind(l).has_bn().then(|| BatchNormParams {
                    gamma: vec![1.0; c_out],
                    beta: vec![0.0; c_out],
                    running_mean: vec![0.0; c_out],
                    running_var: vec![1.0; c_out],
                });
                ConvLayer { c_in, c_out, weight, bias: vec![0.0; c_out], bn }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn check(&self, spec: &NetworkSpec) -> Result<()> {
        spec.validate()?;
        if self.layers.len() != spec.depth {
            return invalid(format!("parameter set has {} layers, spec has {}", self.layers.len(), spec.depth));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let (c_in, c_out) = spec.channels(l);
            if layer.c_in != c_in || layer.c_out != c_out || layer.weight.len() != c_out * c_in * 9 || layer.bias.len() != c_out {
                return invalid(format!("layer {l} shapes do not match the network spec"));
            }
            match (&layer.bn, spec.layer_kind(l).has_bn()) {
                (Some(bn), true) => {
                    if [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var].iter().any(|v| v.len() != c_out) {
                        return invalid(format!("layer {l} batch-norm shapes are wrong"));
                    }
                    if bn.running_var.iter().any(|&v| !(v > 0.0)) {
                        return invalid(format!("layer {l} running variance must be positive"));
                    }
                }
                (None, false) => {}
                _ => return invalid(format!("layer {l} batch-norm presence does not match the network spec")),
            }
        }
        Ok(())
    }

    /// Every stored tensor, in canonical order.
    pub fn tensor_infos(&self) -> Vec<TensorInfo> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut push = |role: TensorRole, shape: Vec<usize>| {
                out.push(TensorInfo { name: format!("layer{}.{}", l + 1, role.suffix()), layer: l, role, shape });
            };
            push(TensorRole::Weight, vec![layer.c_out, layer.c_in, 3, 3]);
            push(TensorRole::Bias, vec![layer.c_out]);
            if layer.bn.is_some() {
                for role in [TensorRole::Gamma, TensorRole::Beta, TensorRole::RunningMean, TensorRole::RunningVar] {
                    push(role, vec![layer.c_out]);
                }
            }
        }
        out
    }

    pub fn tensor(&self, layer: usize, role: TensorRole) -> Option<&Vec<f64>> {
        let l = self.layers.get(layer)?;
        match role {
            TensorRole::Weight => Some(&l.weight),
            TensorRole::Bias => Some(&l.bias),
            TensorRole::Gamma => l.bn.as_ref().map(|b| &b.gamma),
            TensorRole::Beta => l.bn.as_ref().map(|b| &b.beta),
            TensorRole::RunningMean => l.bn.as_ref().map(|b| &b.running_mean),
            TensorRole::RunningVar => l.bn.as_ref().map(|b| &b.running_var),
        }
    }

    pub fn tensor_mut(&mut self, layer: usize, role: TensorRole) -> Option<&mut Vec<f64>> {
        let l = self.layers.get_mut(layer)?;
        match role {
            TensorRole::Weight => Some(&mut l.weight),
            TensorRole::Bias => Some(&mut l.bias),
            TensorRole::Gamma => l.bn.as_mut().map(|b| &mut b.gamma),
            TensorRole::Beta => l.bn.as_mut().map(|b| &mut b.beta),
            TensorRole::RunningMean => l.bn.as_mut().map(|b| &mut b.running_mean),
            TensorRole::RunningVar => l.bn.as_mut().map(|b| &mut b.running_var),
        }
    }

    /// Learnable tensors in canonical order (the order used by gradients,
    /// optimizer state and trainable masks).
    pub fn learnable_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
            if let Some(bn) = &mut layer.bn {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        out
    }

    pub fn learnable(&self) -> Vec<&Vec<f64>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.push(&layer.weight);
            out.push(&layer.bias);
            if let Some(bn) = &layer.bn {
                out.push(&bn.gamma);
                out.push(&bn.beta);
            }
        }
        out
    }

    /// Layer index of each learnable tensor.
    pub fn learnable_layers(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let count = if layer.bn.is_some() { 4 } else { 2 };
            out.extend(std::iter::repeat_n(l, count));
        }
        out
    }

    pub fn num_learnable(&self) -> usize {
        self.learnable().iter().map(|t| t.len()).sum()
    }
}

/// Batch-norm behavior of one layer during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and update the running averages.
    Batch,
    /// Normalize with the running statistics; buffers untouched.
    Running,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Gradients for one layer's learnable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub gamma: Option<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
    /// Gradient with respect to the network input, when requested.
    pub input: Option<Tensor>,
}

impl Gradients {
    pub fn zeros_like(params: &ParameterSet) -> Self {
        let layers = params
            .layers
            .iter()
            .map(|l| LayerGrads {
                weight: vec![0.0; l.weight.len()],
                bias: vec![0.0; l.bias.len()],
                gamma: l.bn.as_ref().map(|b| vec![0.0; b.gamma.len()]),
                beta: l.bn.as_ref().map(|b| vec![0.0; b.beta.len()]),
            })
            .collect();
        Self { layers, input: None }
    }

    /// Same canonical order as [`ParameterSet::learnable`].
    pub fn tensors(&self) -> Vec<&Vec<f64>> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.weight);
            out.push(&l.bias);
            if let (Some(g), Some(b)) = (&l.gamma, &l.beta) {
                out.push(g);
                out.push(b);
            }
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0))
    }
}

struct LayerCache {
    input: Tensor,
    /// Convolution output (pre-normalization); only for BN layers.
    conv_out: Option<Tensor>,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    bn_mode: BnMode,
}

struct ForwardCache {
    start_layer: usize,
    layers: Vec<LayerCache>,
    output: Tensor,
}

/// Output of a single layer's forward pass.
pub(crate) struct LayerForward {
    pub output: Tensor,
    pub conv_out: Option<Tensor>,
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
    /// Biased batch variance, present in [`BnMode::Batch`].
    pub batch_var: Option<Vec<f64>>,
}

impl LayerForward {
    /// Folds the batch statistics into the layer's running averages.
    pub fn update_running(&self, layer: &mut ConvLayer, momentum: f64) {
        if let (Some(bn), Some(var)) = (layer.bn.as_mut(), self.batch_var.as_ref()) {
            for ch in 0..var.len() {
                bn.running_mean[ch] = momentum * bn.running_mean[ch] + (1.0 - momentum) * self.mean[ch];
                bn.running_var[ch] = momentum * bn.running_var[ch] + (1.0 - momentum) * var[ch];
            }
        }
    }
}

pub(crate) fn conv_forward(layer: &ConvLayer, input: &Tensor) -> Tensor {
    let (h, w) = (input.h, input.w);
    let hw = h * w;
    let k = layer.c_in * 9;
    let mut out = Tensor::zeros(input.n, layer.c_out, h, w);
    let mut col = vec![0.0; k * hw];
    for i in 0..input.n {
        im2col(input.item(i), layer.c_in, h, w, &mut col);
        let dst = out.item_mut(i);
        for (co, b) in layer.bias.iter().enumerate() {
            dst[co * hw..(co + 1) * hw].fill(*b);
        }
        gemm(layer.c_out, k, hw, 1.0, &layer.weight, (k as isize, 1), &col, (hw as isize, 1), 1.0, dst, hw as isize);
    }
    out
}

/// Forward pass of one layer. Running statistics are not modified; see
/// [`LayerForward::update_running`].
pub(crate) fn layer_forward(
    layer: &ConvLayer,
    kind: LayerKind,
    input: &Tensor,
    bn_mode: BnMode,
    eps: f64,
    keep_conv_out: bool,
) -> Result<LayerForward> {
    if input.c != layer.c_in {
        return invalid(format!("layer expects {} input channels, got {}", layer.c_in, input.c));
    }
    let z = conv_forward(layer, input);
    let hw = z.plane();
    let mut mean = Vec::new();
    let mut inv_std = Vec::new();
    let mut conv_out = None;
    let mut batch_var = None;
    let mut y = if kind.has_bn() {
        let bn = layer.bn.as_ref().ok_or_else(|| Error::State("batch-norm parameters missing".into()))?;
        let c = layer.c_out;
        match bn_mode {
            BnMode::Batch => {
                if z.n < 2 {
                    return invalid("batch statistics need at least 2 images");
                }
                let count = (z.n * hw) as f64;
                mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for i in 0..z.n {
                    let item = z.item(i);
                    for ch in 0..c {
                        mean[ch] += item[ch * hw..(ch + 1) * hw].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for i in 0..z.n {
                    let item = z.item(i);
                    for ch in 0..c {
                        let m = mean[ch];
                        var[ch] += item[ch * hw..(ch + 1) * hw].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count);
                inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                batch_var = Some(var);
            }
            BnMode::Running => {
                mean = bn.running_mean.clone();
                inv_std = bn.running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            }
        }
        let mut y = z.clone();
        for i in 0..y.n {
            let item = y.item_mut(i);
            for ch in 0..c {
                let (m, s, g, b) = (mean[ch], inv_std[ch], bn.gamma[ch], bn.beta[ch]);
                for v in &mut item[ch * hw..(ch + 1) * hw] {
                    *v = g * (*v - m) * s + b;
                }
            }
        }
        if keep_conv_out {
            conv_out = Some(z);
        }
        y
    } else {
        z
    };
    if kind.has_relu() {
        y.data.iter_mut().for_each(|v| *v = v.max(0.0));
    }
    Ok(LayerForward { output: y, conv_out, mean, inv_std, batch_var })
}

/// Backward pass of one layer. Accumulates parameter gradients into
/// `grads` and returns the input gradient when `need_input_grad`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_backward(
    layer: &ConvLayer,
    kind: LayerKind,
    input: &Tensor,
    output: &Tensor,
    conv_out: Option<&Tensor>,
    mean: &[f64],
    inv_std: &[f64],
    bn_mode: BnMode,
    d_output: &Tensor,
    grads: &mut LayerGrads,
    need_input_grad: bool,
) -> Option<Tensor> {
    let hw = output.plane();
    let c = layer.c_out;
    let mut dz = d_output.clone();
    if kind.has_relu() {
        for (g, &o) in dz.data.iter_mut().zip(&output.data) {
            if o <= 0.0 {
                *g = 0.0;
            }
        }
    }
    if kind.has_bn() {
        let bn = layer.bn.as_ref().expect("batch-norm layer");
        let z = conv_out.expect("conv output cached for batch-norm layer");
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for i in 0..dz.n {
            let dy = dz.item(i);
            let zi = z.item(i);
            for ch in 0..c {
                let (m, s) = (mean[ch], inv_std[ch]);
                let range = ch * hw..(ch + 1) * hw;
                for (g, &zv) in dy[range.clone()].iter().zip(&zi[range]) {
                    dgamma[ch] += g * (zv - m) * s;
                    dbeta[ch] += g;
                }
            }
        }
        match bn_mode {
            BnMode::Batch => {
                let count = (dz.n * hw) as f64;
                for i in 0..dz.n {
                    let zi = z.item(i).to_vec();
                    let dy = dz.item_mut(i);
                    for ch in 0..c {
                        let (m, s, g) = (mean[ch], inv_std[ch], bn.gamma[ch]);
                        let scale = g * s / count;
                        let range = ch * hw..(ch + 1) * hw;
                        for (d, &zv) in dy[range.clone()].iter_mut().zip(&zi[range]) {
                            let xhat = (zv - m) * s;
                            *d = scale * (count * *d - dbeta[ch] - xhat * dgamma[ch]);
                        }
                    }
                }
            }
            BnMode::Running => {
                for i in 0..dz.n {
                    let dy = dz.item_mut(i);
                    for ch in 0..c {
                        let scale = bn.gamma[ch] * inv_std[ch];
                        dy[ch * hw..(ch + 1) * hw].iter_mut().for_each(|d| *d *= scale);
                    }
                }
            }
        }
        for ch in 0..c {
            grads.gamma.as_mut().expect("gamma grads")[ch] += dgamma[ch];
            grads.beta.as_mut().expect("beta grads")[ch] += dbeta[ch];
        }
    }
    let k = layer.c_in * 9;
    let mut col = vec![0.0; k * hw];
    let mut dcol = vec![0.0; k * hw];
    let mut d_input = need_input_grad.then(|| Tensor::zeros(input.n, input.c, input.h, input.w));
    for i in 0..dz.n {
        let dzi = dz.item(i);
        for ch in 0..c {
            grads.bias[ch] += dzi[ch * hw..(ch + 1) * hw].iter().sum::<f64>();
        }
        im2col(input.item(i), layer.c_in, input.h, input.w, &mut col);
        // dW (c × k) += dz (c × hw) · colᵀ (hw × k)
        gemm(c, hw, k, 1.0, dzi, (hw as isize, 1), &col, (1, hw as isize), 1.0, &mut grads.weight, k as isize);
        if let Some(di) = d_input.as_mut() {
            // dcol (k × hw) = Wᵀ (k × c) · dz (c × hw)
            gemm(k, c, hw, 1.0, &layer.weight, (1, k as isize), dzi, (hw as isize, 1), 0.0, &mut dcol, hw as isize);
            col2im(&dcol, layer.c_in, input.h, input.w, di.item_mut(i));
        }
    }
    d_input
}

/// Denoising network with cached intermediates for reverse-mode gradients.
pub struct Denoiser {
    spec: NetworkSpec,
    params: ParameterSet,
    cache: Option<ForwardCache>,
}

impl std::fmt::Debug for Denoiser {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Denoiser").field("spec", &self.spec).field("cached", &self.cache.is_some()).finish()
    }
}

impl Denoiser {
    pub fn new(spec: NetworkSpec, params: ParameterSet) -> Result<Self> {
        params.check(&spec)?;
        Ok(Self { spec, params, cache: None })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    /// Mutable parameter access; drops any cached forward pass.
    pub fn params_mut(&mut self) -> &mut ParameterSet {
        self.cache = None;
        &mut self.params
    }

    pub fn into_params(self) -> ParameterSet {
        self.params
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    /// Full forward pass. Train mode uses batch statistics, updates running
    /// statistics and caches intermediates for [`Denoiser::backward`].
    pub fn forward(&mut self, batch: &[ImageGrid], mode: Mode) -> Result<Vec<ImageGrid>> {
        let x = Tensor::from_images(batch)?;
        let out = match mode {
            Mode::Train => {
                let modes = vec![BnMode::Batch; self.spec.depth];
                self.forward_tensor(x, 0, &modes, true)?
            }
            Mode::Eval => self.eval_range(x, 0, self.spec.depth)?,
        };
        Ok(out.to_images())
    }

    /// Eval-mode pass through layers `[start, end)`; never mutates state.
    pub fn eval_range(&self, mut x: Tensor, start: usize, end: usize) -> Result<Tensor> {
        if start > end || end > self.spec.depth {
            return invalid("layer range out of bounds");
        }
        for l in start..end {
            x = layer_forward(&self.params.layers[l], self.spec.layer_kind(l), &x, BnMode::Running, self.spec.bn_eps, false)?.output;
        }
        Ok(x)
    }

    /// Runs layers `[start, depth)` with per-layer batch-norm modes
    /// (`bn_modes` is indexed by absolute layer). With `keep_cache` the
    /// intermediates are retained for a later backward pass.
    pub fn forward_tensor(&mut self, x: Tensor, start: usize, bn_modes: &[BnMode], keep_cache: bool) -> Result<Tensor> {
        if bn_modes.len() != self.spec.depth {
            return invalid("one batch-norm mode per layer is required");
        }
        if start >= self.spec.depth {
            return invalid("start layer out of bounds");
        }
        self.cache = None;
        let mut caches = Vec::new();
        let mut current = x;
        for l in start..self.spec.depth {
            let kind = self.spec.layer_kind(l);
            let fwd = layer_forward(&self.params.layers[l], kind, &current, bn_modes[l], self.spec.bn_eps, keep_cache)?;
            fwd.update_running(&mut self.params.layers[l], self.spec.bn_momentum);
            let next = fwd.output;
            if keep_cache {
                caches.push(LayerCache {
                    input: std::mem::replace(&mut current, next),
                    conv_out: fwd.conv_out,
                    mean: fwd.mean,
                    inv_std: fwd.inv_std,
                    bn_mode: bn_modes[l],
                });
            } else {
                current = next;
            }
        }
        if keep_cache {
            self.cache = Some(ForwardCache { start_layer: start, layers: caches, output: current.clone() });
        }
        Ok(current)
    }

    /// Reverse-mode gradients of a scalar loss given `d_output = ∂L/∂output`
    /// from the most recent cached forward pass. Layers below `stop_layer`
    /// get zero gradients; the input gradient is computed only when asked
    /// for (and requires `stop_layer` equal to the forward start layer).
    pub fn backward(&mut self, d_output: &Tensor, stop_layer: usize, need_input_grad: bool) -> Result<Gradients> {
        let cache = self.cache.as_ref().ok_or_else(|| Error::State("backward called without a cached train-mode forward pass".into()))?;
        if d_output.n != cache.output.n || d_output.data.len() != cache.output.data.len() {
            return invalid("output gradient shape does not match the cached forward pass");
        }
        let stop = stop_layer.max(cache.start_layer);
        let mut grads = Gradients::zeros_like(&self.params);
        let mut upstream = d_output.clone();
        for l in (stop..self.spec.depth).rev() {
            let lc = &cache.layers[l - cache.start_layer];
            let output = if l + 1 == self.spec.depth { &cache.output } else { &cache.layers[l + 1 - cache.start_layer].input };
            let want_input = l > stop || need_input_grad;
            let d_in = layer_backward(
                &self.params.layers[l],
                self.spec.layer_kind(l),
                &lc.input,
                output,
                lc.conv_out.as_ref(),
                &lc.mean,
                &lc.inv_std,
                lc.bn_mode,
                &upstream,
                &mut grads.layers[l],
                want_input,
            );
            if let Some(d) = d_in {
                upstream = d;
            }
        }
        if need_input_grad {
            grads.input = Some(upstream);
        }
        Ok(grads)
    }
}

/// Forward pass on a batch of images (see [`Denoiser::forward`]).
pub fn forward(params: &mut ParameterSet, spec: &NetworkSpec, batch: &[ImageGrid], mode: Mode) -> Result<Vec<ImageGrid>> {
    let mut net = Denoiser::new(spec.clone(), std::mem::replace(params, ParameterSet { layers: Vec::new() }))?;
    let out = net.forward(batch, mode);
    *params = net.into_params();
    out
}

/// Denoises images in eval mode, in chunks to bound memory.
pub fn denoise(params: &ParameterSet, spec: &NetworkSpec, images: &[ImageGrid], chunk: usize) -> Result<Vec<ImageGrid>> {
    let net = Denoiser::new(spec.clone(), params.clone())?;
    let mut out = Vec::with_capacity(images.len());
    for part in images.chunks(chunk.max(1)) {
        let x = Tensor::from_images(part)?;
        out.extend(net.eval_range(x, 0, spec.depth)?.to_images());
    }
    Ok(out)
}
