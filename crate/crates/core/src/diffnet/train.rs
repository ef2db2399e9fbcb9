use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState, TrainableMask};
use super::network::{denoise, BnMode, Denoiser, NetworkSpec, ParameterSet};
use super::tensor::Tensor;
use crate::dataset::{BalancedBatcher, Dataset};
use crate::error::{invalid, Result};
use crate::numerics::{ImageGrid, RandomStream};

/// `(1/J) Σ_j ‖output_j − target_j‖²`.
pub fn mse_loss<A: AsRef<[f64]>, B: AsRef<[f64]>>(outputs: &[A], targets: &[B]) -> Result<f64> {
    if outputs.is_empty() || outputs.len() != targets.len() {
        return invalid("outputs and targets must be non-empty and equally many");
    }
    let mut total = 0.0;
    for (o, t) in outputs.iter().zip(targets) {
        let (o, t) = (o.as_ref(), t.as_ref());
        if o.len() != t.len() {
            return invalid("output and target shapes differ");
        }
        total += o.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(total / outputs.len() as f64)
}

/// MSE loss and its gradient with respect to the outputs.
pub fn mse_grad(outputs: &Tensor, targets: &Tensor) -> Result<(f64, Tensor)> {
    if outputs.data.len() != targets.data.len() || outputs.n != targets.n || outputs.n == 0 {
        return invalid("output and target tensors differ in shape");
    }
    let j = outputs.n as f64;
    let mut grad = outputs.clone();
    let mut loss = 0.0;
    for (g, t) in grad.data.iter_mut().zip(&targets.data) {
        let d = *g - t;
        loss += d * d;
        *g = 2.0 * d / j;
    }
    Ok((loss / j, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_present: usize,
    pub batch_absent: usize,
    pub adam: AdamConfig,
    /// Stop after this many epochs without validation improvement.
    pub patience: usize,
    /// Cap on mini-batches per epoch (None = one pass over the data).
    #[serde(default)]
    pub max_batches_per_epoch: Option<usize>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 50, batch_present: 50, batch_absent: 50, adam: AdamConfig::default(), patience: 10, max_batches_per_epoch: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainResult {
    pub params: ParameterSet,
    pub log: Vec<EpochLog>,
    /// Epoch of the returned snapshot; 0 means the initialization.
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub initial_val_mse: f64,
}

pub(crate) fn validation_mse(params: &ParameterSet, spec: &NetworkSpec, validation: &Dataset) -> Result<f64> {
    let outputs = denoise(params, spec, &validation.noisy_images(), 64)?;
    mse_loss(&outputs, &validation.targets())
}

pub(crate) fn batch_tensors(dataset: &Dataset, indices: &[usize]) -> Result<(Tensor, Tensor)> {
    let noisy: Vec<&ImageGrid> = indices.iter().map(|&i| dataset.noisy(i)).collect();
    let targets: Vec<&ImageGrid> = indices.iter().map(|&i| dataset.target(i)).collect();
    let (h, w) = (dataset.height(), dataset.width());
    Ok((
        Tensor::from_slices(&noisy.iter().map(|g| g.data()).collect::<Vec<_>>(), h, w)?,
        Tensor::from_slices(&targets.iter().map(|g| g.data()).collect::<Vec<_>>(), h, w)?,
    ))
}

/// MSE pretraining with balanced mini-batches; returns the snapshot with
/// the lowest validation MSE (the initialization included).
pub fn pretrain(
    spec: &NetworkSpec,
    dataset: &Dataset,
    validation: &Dataset,
    config: &PretrainConfig,
    stream: &mut RandomStream,
) -> Result<PretrainResult> {
    if dataset.is_empty() {
        return invalid("training dataset is empty");
    }
    if validation.is_empty() {
        return invalid("validation dataset is empty");
    }
    let params = ParameterSet::init(spec, &mut stream.derive(0))?;
    pretrain_from(spec, params, dataset, validation, config, &mut stream.derive(1))
}

/// Continues MSE training from given parameters (all layers trainable).
pub fn pretrain_from(
    spec: &NetworkSpec,
    params: ParameterSet,
    dataset: &Dataset,
    validation: &Dataset,
    config: &PretrainConfig,
    order_stream: &mut RandomStream,
) -> Result<PretrainResult> {
    let mut net = Denoiser::new(spec.clone(), params)?;
    let batcher = BalancedBatcher::new(dataset, config.batch_present, config.batch_absent)?;
    let mask = TrainableMask::all(net.params());
    let mut adam = AdamState::new(config.adam, &net.params().learnable());
    let modes = vec![BnMode::Batch; spec.depth];

    let initial_val_mse = validation_mse(net.params(), spec, validation)?;
    let mut best = (0usize, initial_val_mse, net.params().clone());
    let mut log = Vec::new();
    let mut since_best = 0;
    for epoch in 1..=config.epochs {
        let mut batches = batcher.epoch(order_stream);
        if let Some(cap) = config.max_batches_per_epoch {
            batches.truncate(cap.max(1));
        }
        let mut epoch_loss = 0.0;
        for idx in &batches {
            let (x, target) = batch_tensors(dataset, idx)?;
            let out = net.forward_tensor(x, 0, &modes, true)?;
            let (loss, grad) = mse_grad(&out, &target)?;
            let grads = net.backward(&grad, 0, false)?;
            net.clear_cache();
            let grad_refs = grads.tensors();
            let mut p = net.params_mut().learnable_mut();
            adam_step(&mut p, &grad_refs, &mut adam, &mask.flags)?;
            epoch_loss += loss;
        }
        let train_loss = epoch_loss / batches.len() as f64;
        let val_loss = validation_mse(net.params(), spec, validation)?;
        log.push(EpochLog { epoch, train_loss, val_loss });
        if val_loss < best.1 {
            best = (epoch, val_loss, net.params().clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    Ok(PretrainResult { params: best.2, log, best_epoch: best.0, best_val_mse: best.1, initial_val_mse })
}
