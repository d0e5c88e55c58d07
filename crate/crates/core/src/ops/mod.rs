//! Forward and backward primitives for the layers a network is built from.

pub mod conv;
pub mod dense;
pub mod pool;

pub use conv::{conv_backward, conv_forward, ConvGrads, ConvSpec};
pub use dense::{
    dropout, dropout_backward, fc_backward, fc_forward, relu_backward, relu_forward, softmax,
    softmax_cross_entropy, FcGrads,
};
pub use pool::{maxpool_backward, maxpool_forward, ArgmaxMap, PoolSpec};
