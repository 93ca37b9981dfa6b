//! Dense tensors, U-net layers with hand-written backward passes, and the model.
//!
//! Everything is generic over [`Scalar`] so the same code runs in 32-bit for
//! training and in 64-bit for gradient checking.

mod conv;
mod io;
mod layers;
mod model;
mod scalar;
mod tensor;

pub use conv::{conv2d_backward, conv2d_backward_naive, conv2d_forward, conv2d_forward_naive, ConvGrads};
pub use io::{read_params, read_weight_file, write_weight_file, WeightEntry, WeightFile};
pub use layers::{
    concat_channels, maxpool_backward, maxpool_forward, relu_backward, relu_forward, sigmoid,
    sigmoid_bce_loss, split_channels, upconv_backward, upconv_forward, PoolIndices,
};
pub use model::{
    init_params, model_backward, model_forward, param_count, ForwardCache, ModelParams, ModelSpec,
    ParamKind, DEPTH,
};
pub use scalar::Scalar;
pub use tensor::Tensor;
