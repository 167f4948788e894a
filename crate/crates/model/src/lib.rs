//! Per-slice segmentation network: a dense-block encoder-decoder taking the
//! 8-channel input stack and producing 3-class probabilities, with the
//! reverse-mode gradients, loss and optimizer needed to train it.
//!
//! Everything is generic over [`Element`] (`f32` or `f64`).

pub mod checkpoint;
pub mod element;
pub mod error;
pub mod graph;
mod kernels;
pub mod loss;
pub mod net;
pub mod optim;
pub mod tensor;

pub use checkpoint::CheckpointMeta;
pub use element::Element;
pub use error::{ModelError, Result};
pub use graph::{BatchStats, Graph, NodeId, ParamId};
pub use loss::mse_loss;
pub use net::{BackboneConfig, Mode, Network, RunningStats};
pub use optim::{Adam, AdamConfig};
pub use tensor::Tensor;

pub type Network32 = Network<f32>;
pub type Network64 = Network<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
