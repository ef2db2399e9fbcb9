use serde::{Deserialize, Serialize};

use super::network::{NetworkSpec, ParameterSet};
use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self { learning_rate, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// First/second moment accumulators for a list of tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<T: AsRef<[f64]>>(config: AdamConfig, tensors: &[T]) -> Self {
        let zeros: Vec<Vec<f64>> = tensors.iter().map(|t| vec![0.0; t.as_ref().len()]).collect();
        Self { config, step: 0, first_moment: zeros.clone(), second_moment: zeros }
    }
}

/// One Adam update on every tensor whose mask flag is set. Masked-out
/// tensors and their moments are left untouched.
pub fn adam_step(params: &mut [&mut Vec<f64>], grads: &[&Vec<f64>], state: &mut AdamState, mask: &[bool]) -> Result<()> {
    if params.len() != grads.len() || params.len() != mask.len() || params.len() != state.first_moment.len() {
        return invalid("parameter, gradient, mask and optimizer state counts differ");
    }
    state.step += 1;
    let AdamConfig { learning_rate, beta1, beta2, epsilon } = state.config;
    let t = state.step as f64;
    let c1 = 1.0 - beta1.powf(t);
    let c2 = 1.0 - beta2.powf(t);
    for (k, p) in params.iter_mut().enumerate() {
        if !mask[k] {
            continue;
        }
        let g = grads[k];
        if p.len() != g.len() || p.len() != state.first_moment[k].len() {
            return invalid(format!("tensor {k} shape mismatch"));
        }
        let m = &mut state.first_moment[k];
        let v = &mut state.second_moment[k];
        for i in 0..p.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
    Ok(())
}

/// Trainable flags over the learnable tensors of a parameter set: true for
/// the kernels, biases and BN affine parameters of the last `n_train`
/// convolutional layers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainableMask {
    pub n_train: usize,
    pub flags: Vec<bool>,
}

impl TrainableMask {
    pub fn new(spec: &NetworkSpec, params: &ParameterSet, n_train: usize) -> Result<Self> {
        if n_train > spec.depth {
            return invalid(format!("cannot train {n_train} layers of a depth-{} network", spec.depth));
        }
        let first = spec.depth - n_train;
        let flags = params.learnable_layers().into_iter().map(|l| l >= first).collect();
        Ok(Self { n_train, flags })
    }

    pub fn all(params: &ParameterSet) -> Self {
        Self { n_train: params.layers.len(), flags: vec![true; params.learnable().len()] }
    }

    /// Index of the first trainable layer.
    pub fn first_trainable_layer(&self, depth: usize) -> usize {
        depth - self.n_train
    }
}
