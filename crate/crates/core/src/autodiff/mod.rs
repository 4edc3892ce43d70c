//! Reverse-mode automatic differentiation restricted to the layers of the
//! u-net: 3x3/1x1 convolution, batch norm, ReLU, 2x2 max pooling, 2x2
//! up-convolution, channel concatenation, sigmoid and the weighted logistic
//! loss. Also hosts the optimizer, the learning-rate schedule and the
//! checkpoint format.

mod checkpoint;
mod conv;
mod direct;
mod element;
mod graph;
mod optim;
mod tensor;

pub use checkpoint::{Checkpoint, CKPT_MAGIC};
pub use element::Element;
pub use graph::{
    sigmoid_value, BatchNormMode, BatchNormStats, Gradients, Graph, NodeId, BN_EPS, BN_STATS_MOMENTUM,
};
pub use optim::{PlateauSchedule, SgdMomentum, PLATEAU_IMPROVEMENT};
pub use tensor::{Shape, Tensor};
