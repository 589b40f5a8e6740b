//! Small 3D convolutional segmentation network with hand-written forward and
//! backward passes, soft-Dice loss and Adam.
//!
//! Everything is generic over [`Real`] so the same code trains in f32 and is
//! checked against finite differences in f64.

mod adam;
mod checkpoint;
mod conv;
mod loss;
mod network;
mod real;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState, DEFAULT_LR};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
};
pub use conv::{conv3d_backward, conv3d_forward};
pub use loss::{dice_loss, dice_loss_with, one_hot, softmax_channels, DiceOptions, DICE_SMOOTH};
pub use network::{
    argmax_channels, backward, forward, forward_raw, init_params, loss_and_grads,
    predict_classes, train_step, zscore, ForwardCache, ModelParams, NetworkConfig, KERNEL,
};
pub use real::Real;
pub use tensor::Tensor;
