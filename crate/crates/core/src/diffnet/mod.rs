//! The CNN denoiser: layers with exact reverse-mode gradients, trainable
//! masks, the Adam optimizer and MSE pretraining.

mod adam;
pub mod gradcheck;
mod network;
mod tensor;
mod train;

pub use adam::{adam_step, AdamConfig, AdamState, TrainableMask};
pub use network::{
    denoise, forward, BatchNormParams, BnMode, ConvLayer, Denoiser, Gradients, LayerGrads, LayerKind, Mode, NetworkSpec, ParameterSet, TensorInfo,
    TensorRole,
};
pub use tensor::Tensor;
pub use train::{mse_grad, mse_loss, pretrain, pretrain_from, EpochLog, PretrainConfig, PretrainResult};

#[cfg(test)]
mod tests;
