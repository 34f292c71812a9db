//! Layers, the Adam optimizer, the learning-rate schedule, and checkpoints.

pub mod checkpoint;
mod layers;
mod optim;

pub use layers::{init_uniform, Activation, ConvBlock, DenseModule};
pub use optim::{lr_schedule, Adam};
