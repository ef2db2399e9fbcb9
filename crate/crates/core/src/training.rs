//! Task-informed fine-tuning: an observer is appended to the pretrained
//! denoiser and trained jointly with its last layers under
//! `λ·L_physical + (1 − λ)·L_task`.

use serde::{Deserialize, Serialize};

use crate::dataset::{BalancedBatcher, Dataset};
use crate::diffnet::{adam_step, mse_grad, AdamConfig, AdamState, BnMode, Denoiser, NetworkSpec, ParameterSet, Tensor, TrainableMask};
use crate::error::{invalid, Result};
use crate::numerics::RandomStream;
use crate::observers::{bce_loss, slnn_ho_loss, LinearTemplate};

/// Observer appended during fine-tuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObserverKind {
    /// Affine template + sigmoid, BCE loss.
    SlnnNo,
    /// Pure linear template, Hotelling surrogate loss.
    SlnnHo,
}

impl ObserverKind {
    pub fn name(self) -> &'static str {
        match self {
            ObserverKind::SlnnNo => "slnn-no",
            ObserverKind::SlnnHo => "slnn-ho",
        }
    }
}

impl std::str::FromStr for ObserverKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "slnn-no" => Ok(ObserverKind::SlnnNo),
            "slnn-ho" => Ok(ObserverKind::SlnnHo),
            other => invalid(format!("unknown training observer '{other}'")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HybridConfig {
    pub lambda: f64,
    pub observer: ObserverKind,
    pub n_train: usize,
    pub epochs: usize,
    pub batch_present: usize,
    pub batch_absent: usize,
    pub adam: AdamConfig,
    /// Learning rate of the appended observer; defaults to the denoiser's.
    #[serde(default)]
    pub observer_learning_rate: Option<f64>,
    /// Keep the batch-norm running statistics of frozen layers fixed and
    /// run those layers with them, so frozen layers compute exactly what
    /// they computed after pretraining.
    #[serde(default)]
    pub freeze_bn_stats: bool,
    pub patience: usize,
    #[serde(default)]
    pub max_batches_per_epoch: Option<usize>,
}

impl Default for HybridConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            observer: ObserverKind::SlnnNo,
            n_train: 3,
            epochs: 30,
            batch_present: 50,
            batch_absent: 50,
            adam: AdamConfig::default(),
            observer_learning_rate: None,
            freeze_bn_stats: false,
            patience: 10,
            max_batches_per_epoch: None,
        }
    }
}

impl HybridConfig {
    pub fn validate(&self, spec: &NetworkSpec) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return invalid(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        if self.n_train > spec.depth {
            return invalid(format!("n_train {} exceeds depth {}", self.n_train, spec.depth));
        }
        if self.batch_present == 0 || self.batch_absent == 0 {
            return invalid("fine-tuning batches need both classes");
        }
        if self.observer == ObserverKind::SlnnHo && self.batch_present != self.batch_absent {
            return invalid("the Hotelling surrogate loss requires balanced batches");
        }
        Ok(())
    }
}

/// `λ·l_physical + (1 − λ)·l_task`.
pub fn hybrid_loss(l_physical: f64, l_task: f64, lambda: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return invalid(format!("lambda must lie in [0, 1], got {lambda}"));
    }
    if !l_physical.is_finite() || !l_task.is_finite() {
        return invalid("loss components must be finite");
    }
    Ok(lambda * l_physical + (1.0 - lambda) * l_task)
}

/// Loss components for one epoch (training means) and the validation set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossLog {
    pub epoch: usize,
    pub physical: f64,
    pub task: f64,
    pub hybrid: f64,
    pub val_physical: f64,
    pub val_task: f64,
    pub val_hybrid: f64,
}

#[derive(Clone, Debug)]
pub struct FinetuneResult {
    pub params: ParameterSet,
    pub observer: LinearTemplate,
    pub log: Vec<LossLog>,
    pub best_epoch: usize,
}

/// Task loss and its gradients for a batch of denoised outputs.
struct TaskGrad {
    loss: f64,
    d_outputs: Vec<Vec<f64>>,
    d_weights: Vec<f64>,
    d_bias: f64,
}

fn task_loss(kind: ObserverKind, outputs: &[&[f64]], labels: &[u8], observer: &LinearTemplate) -> Result<TaskGrad> {
    match kind {
        ObserverKind::SlnnNo => {
            let scores: Vec<f64> = outputs.iter().map(|f| observer.apply(f)).collect::<Result<_>>()?;
            let (loss, ds) = bce_loss(&scores, labels)?;
            let mut d_weights = vec![0.0; observer.dimension()];
            for (f, g) in outputs.iter().zip(&ds) {
                d_weights.iter_mut().zip(f.iter()).for_each(|(a, x)| *a += g * x);
            }
            let d_outputs = ds.iter().map(|g| observer.weights.iter().map(|w| g * w).collect()).collect();
            Ok(TaskGrad { loss, d_outputs, d_weights, d_bias: ds.iter().sum() })
        }
        ObserverKind::SlnnHo => {
            let out = slnn_ho_loss(outputs, labels, &observer.weights)?;
            Ok(TaskGrad { loss: out.loss, d_outputs: out.d_outputs, d_weights: out.d_weights, d_bias: 0.0 })
        }
    }
}

/// Largest balanced index subset (first occurrences of each class).
fn balanced_subset(labels: &[u8]) -> Vec<usize> {
    let ones: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    let zeros: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
    let k = ones.len().min(zeros.len());
    ones[..k].iter().chain(&zeros[..k]).copied().collect()
}

/// Input tensor of the first trainable layer for every sample, when it is
/// cheap enough to keep in memory.
const FEATURE_CACHE_LIMIT_BYTES: usize = 1 << 30;

enum Prefix {
    Cached(Tensor),
    OnDemand,
}

fn noisy_tensor(ds: &Dataset, indices: &[usize]) -> Result<Tensor> {
    let imgs: Vec<&[f64]> = indices.iter().map(|&i| ds.noisy(i).data()).collect();
    Tensor::from_slices(&imgs, ds.height(), ds.width())
}

fn targets_tensor(ds: &Dataset, indices: &[usize]) -> Result<Tensor> {
    let imgs: Vec<&[f64]> = indices.iter().map(|&i| ds.target(i).data()).collect();
    Tensor::from_slices(&imgs, ds.height(), ds.width())
}

fn build_prefix(net: &Denoiser, ds: &Dataset, first: usize) -> Result<Prefix> {
    let channels = if first == 0 || first == net.spec().depth { 1 } else { net.spec().filters };
    let bytes = ds.len() * channels * ds.height() * ds.width() * 8;
    if bytes > FEATURE_CACHE_LIMIT_BYTES {
        return Ok(Prefix::OnDemand);
    }
    let mut all = Tensor::zeros(ds.len(), channels, ds.height(), ds.width());
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(64) {
        let f = net.eval_range(noisy_tensor(ds, chunk)?, 0, first)?;
        for (k, &i) in chunk.iter().enumerate() {
            all.item_mut(i).copy_from_slice(f.item(k));
        }
    }
    Ok(Prefix::Cached(all))
}

fn prefix_batch(net: &Denoiser, prefix: &Prefix, ds: &Dataset, indices: &[usize], first: usize) -> Result<Tensor> {
    match prefix {
        Prefix::Cached(t) => Ok(t.gather(indices)),
        Prefix::OnDemand => net.eval_range(noisy_tensor(ds, indices)?, 0, first),
    }
}

/// Eval-mode outputs of the whole network for a dataset, reusing the
/// frozen prefix when available.
fn eval_outputs(net: &Denoiser, prefix: &Prefix, ds: &Dataset, first: usize) -> Result<Tensor> {
    let depth = net.spec().depth;
    let mut out = Tensor::zeros(ds.len(), 1, ds.height(), ds.width());
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(64) {
        let x = prefix_batch(net, prefix, ds, chunk, first)?;
        let y = net.eval_range(x, first, depth)?;
        for (k, &i) in chunk.iter().enumerate() {
            out.item_mut(i).copy_from_slice(y.item(k));
        }
    }
    Ok(out)
}

fn mse_of(outputs: &Tensor, ds: &Dataset) -> Result<f64> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    Ok(mse_grad(outputs, &targets_tensor(ds, &idx)?)?.0)
}

/// Jointly optimizes the last `n_train` layers and an appended observer
/// (zero-initialized) under the hybrid loss. Returns the epoch snapshot
/// with the lowest validation hybrid loss.
pub fn finetune(
    pretrained: &ParameterSet,
    spec: &NetworkSpec,
    dataset: &Dataset,
    validation: &Dataset,
    config: &HybridConfig,
    stream: &mut RandomStream,
) -> Result<FinetuneResult> {
    config.validate(spec)?;
    if dataset.is_empty() || validation.is_empty() {
        return invalid("training and validation datasets must be non-empty");
    }
    if dataset.height() != validation.height() || dataset.width() != validation.width() {
        return invalid("training and validation grids differ");
    }
    let depth = spec.depth;
    let lambda = config.lambda;
    let mut net = Denoiser::new(spec.clone(), pretrained.clone())?;
    let mask = TrainableMask::new(spec, net.params(), config.n_train)?;
    let first = mask.first_trainable_layer(depth);
    // With live frozen statistics the whole network runs in batch mode.
    let prefix_frozen = config.freeze_bn_stats || first == depth;
    let start = if prefix_frozen { first } else { 0 };
    let bn_modes: Vec<BnMode> = (0..depth).map(|l| if l < first && config.freeze_bn_stats { BnMode::Running } else { BnMode::Batch }).collect();

    let mut observer = LinearTemplate::zeros(dataset.height() * dataset.width());
    let observer_adam_cfg = AdamConfig { learning_rate: config.observer_learning_rate.unwrap_or(config.adam.learning_rate), ..config.adam };
    let mut observer_adam = AdamState::new(observer_adam_cfg, &[vec![0.0; observer.dimension()], vec![0.0]]);
    let mut adam = AdamState::new(config.adam, &net.params().learnable());

    let train_prefix = if prefix_frozen { build_prefix(&net, dataset, first)? } else { Prefix::OnDemand };
    let val_prefix = if prefix_frozen { build_prefix(&net, validation, first)? } else { Prefix::OnDemand };
    let val_labels = validation.labels();
    let val_subset = balanced_subset(&val_labels);
    if val_subset.is_empty() {
        return invalid("validation set needs both classes");
    }

    let batcher = BalancedBatcher::new(dataset, config.batch_present, config.batch_absent)?;
    let mut order = stream.derive(1);
    let mut log = Vec::new();
    let mut best: Option<(usize, f64, ParameterSet, LinearTemplate)> = None;
    let mut since_best = 0;
    for epoch in 1..=config.epochs {
        let mut batches = batcher.epoch(&mut order);
        if let Some(cap) = config.max_batches_per_epoch {
            batches.truncate(cap.max(1));
        }
        let (mut sum_p, mut sum_t) = (0.0, 0.0);
        for idx in &batches {
            let labels: Vec<u8> = idx.iter().map(|&i| dataset.label(i)).collect();
            let target = targets_tensor(dataset, idx)?;
            let (out, trained_denoiser) = if first == depth {
                // Nothing trainable: outputs of the fixed network.
                (eval_outputs_batch(&net, &train_prefix, dataset, idx, first)?, false)
            } else {
                let x = if prefix_frozen { prefix_batch(&net, &train_prefix, dataset, idx, first)? } else { noisy_tensor(dataset, idx)? };
                (net.forward_tensor(x, start, &bn_modes, true)?, true)
            };
            let (lp, d_lp) = mse_grad(&out, &target)?;
            let items: Vec<&[f64]> = (0..out.n).map(|k| out.item(k)).collect();
            let tg = task_loss(config.observer, &items, &labels, &observer)?;
            sum_p += lp;
            sum_t += tg.loss;

            if trained_denoiser {
                let mut d_out = d_lp;
                for (k, row) in tg.d_outputs.iter().enumerate() {
                    for (d, g) in d_out.item_mut(k).iter_mut().zip(row) {
                        *d = lambda * *d + (1.0 - lambda) * g;
                    }
                }
                let grads = net.backward(&d_out, first, false)?;
                net.clear_cache();
                let grad_refs = grads.tensors();
                let mut p = net.params_mut().learnable_mut();
                adam_step(&mut p, &grad_refs, &mut adam, &mask.flags)?;
            }
            let gw: Vec<f64> = tg.d_weights.iter().map(|g| (1.0 - lambda) * g).collect();
            let gb = vec![(1.0 - lambda) * tg.d_bias];
            let mut bias = vec![observer.bias];
            let train_bias = config.observer == ObserverKind::SlnnNo;
            adam_step(&mut [&mut observer.weights, &mut bias], &[&gw, &gb], &mut observer_adam, &[true, train_bias])?;
            observer.bias = bias[0];
        }
        let nb = batches.len() as f64;
        let (physical, task) = (sum_p / nb, sum_t / nb);

        let val_out = eval_outputs(&net, &val_prefix, validation, first)?;
        let val_physical = mse_of(&val_out, validation)?;
        let val_items: Vec<&[f64]> = val_subset.iter().map(|&i| val_out.item(i)).collect();
        let val_sub_labels: Vec<u8> = val_subset.iter().map(|&i| val_labels[i]).collect();
        let val_task = task_loss(config.observer, &val_items, &val_sub_labels, &observer)?.loss;
        let val_hybrid = hybrid_loss(val_physical, val_task, lambda)?;
        log.push(LossLog { epoch, physical, task, hybrid: hybrid_loss(physical, task, lambda)?, val_physical, val_task, val_hybrid });
        if best.as_ref().is_none_or(|b| val_hybrid < b.1) {
            best = Some((epoch, val_hybrid, net.params().clone(), observer.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    match best {
        Some((best_epoch, _, params, observer)) => Ok(FinetuneResult { params, observer, log, best_epoch }),
        None => Ok(FinetuneResult { params: net.into_params(), observer, log, best_epoch: 0 }),
    }
}

fn eval_outputs_batch(net: &Denoiser, prefix: &Prefix, ds: &Dataset, indices: &[usize], first: usize) -> Result<Tensor> {
    let x = prefix_batch(net, prefix, ds, indices, first)?;
    net.eval_range(x, first, net.spec().depth)
}
