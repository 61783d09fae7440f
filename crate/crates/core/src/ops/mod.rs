//! The fixed set of differentiable layers the networks are built from.

pub mod basic;
pub mod conv;
pub mod norm;
pub mod optim;

pub use basic::{
    add, avg_pool2d, avg_pool2d_backward, global_avg_pool, global_avg_pool_backward, linear, linear_backward,
    argmax_rows, max_pool2d, max_pool2d_backward, relu, relu_backward, softmax_cross_entropy, Linear,
};
pub use conv::{conv2d_backward, conv2d_forward, ConvGrads, ConvLayer, ConvShape};
pub use norm::{batchnorm2d, batchnorm2d_backward, BatchNorm2d, Mode};
pub use optim::{sgd_step, LrSchedule, Sgd};
