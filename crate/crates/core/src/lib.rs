//! Joint weight quantization and channel pruning for small convolutional
//! networks: projection onto a low-bit grid, ℓ1 shrinkage, channel Group
//! Lasso, a splitting pull toward the quantized weights and the CTℓ1 layer
//! penalty, with the training loops, metrics, datasets and run plumbing.

pub mod api;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod penalties;
pub mod quantizer;
pub mod run;
pub mod schedule;
pub mod tensor;
pub mod trainer;

pub use checkpoint::QuantizedCheckpoint;
pub use config::{Overrides, RunConfig};
pub use error::{Error, Result};
pub use tensor::Tensor;
pub use trainer::{Algorithm, CollapseEvent, TrainConfig, Trainer};
