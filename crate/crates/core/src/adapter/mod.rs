//! Frozen-base / trainable-copy denoiser stack with in-repo analytic
//! backpropagation.
//!
//! [`network::BaseDenoiser`] is pretrained on the denoising objective and
//! then frozen. [`network::ControlModule`] holds a trainable copy of the
//! trunk plus an event encoder; its block outputs enter the base through
//! zero-initialized projections, so adaptation starts from an exact identity
//! and only moves where the event signal earns it.

pub mod checkpoint;
pub mod layers;
pub mod network;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointData, LoadedCheckpoint};
pub use layers::{zeroed, Conv2d, EmbedAffine, ParamTensors, TemporalConv};
pub use network::{
    AdaptedModel, BaseDenoiser, ControlBranch, ControlModule, DenoiserConfig, EventEncoder,
};
pub use train::{
    adapt_steps, mean_eval_loss, param_hash, pretrain_base, pretrain_steps, train_adapter, Adam,
    LossPoint, TrainConfig, TrainSample,
};
