//! Minimal CPU tensor network engine: NCHW `f64` tensors, sequential layer
//! stacks with explicit reverse passes, and Adam.

mod conv;
pub mod layers;
pub mod optim;
pub mod weights;

pub use layers::{Activation, Grads, Layer, Params, Sequential, Tape};
pub use optim::{Adam, AdamConfig};
pub use weights::TensorStore;

/// Batch of feature maps, shape `(N, C, H, W)`.
pub type Tensor = ndarray::Array4<f64>;
