//! Layers, model graphs and the quantized forward pass.

mod forward;
mod graph;
pub(crate) mod kernels;
mod ops;

pub use forward::{forward, forward_observed, Activation, ForwardOptions, Mode};
pub use graph::{parse_arch, LayerKind, LayerParams, LayerSpec, ModelGraph, Weights};
pub use ops::{
    argmax_rows, batch_stats, batchnorm_apply, batchnorm_forward, maxpool, maxpool_codes,
    maxpool_with_indices, relu, relu_codes, softmax, softmax_cross_entropy, BatchNormParams,
    PoolGeometry,
};

pub(crate) use forward::check_input;
pub(crate) use ops::{code_key, pool_argmax};
