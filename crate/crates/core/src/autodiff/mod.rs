//! Dense tensors and hand-differentiated layers.
//!
//! Every layer is generic over [`Scalar`] so the same code runs in `f32`
//! for training and in `f64` for finite-difference gradient checks. Layers
//! return a cache from `forward` that their `backward` consumes; parameter
//! gradients accumulate until an optimizer step clears them.

mod layers;
mod lstm;
mod param;
mod tensor;

pub use layers::{
    dropout, dropout_backward, embedding_forward, global_avg_pool1d, global_avg_pool1d_backward, one_hot, softmax,
    softmax_cross_entropy, spatial_dropout1d, spatial_dropout1d_backward, Activation, Conv1d, Conv1dCache, Dense,
    DenseCache, DropoutMask,
};
pub use lstm::{lstm_cell_forward, BiLstm, BiLstmCache, LstmCache, LstmParams};
pub use param::{adam_step, glorot_uniform, orthogonal, AdamConfig, Parameter};
pub use tensor::{gemm, MatMut, MatRef, Scalar, Tensor};

#[cfg(test)]
mod tests;
