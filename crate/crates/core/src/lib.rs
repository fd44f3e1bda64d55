//! Self-supervised contrastive pretraining for grayscale images: paired
//! augmentation, a residual bottleneck encoder with projection head, NT-Xent
//! loss, LARS with warmup + cosine schedule, frozen-encoder linear probing,
//! binary classification metrics and Grad-CAM heatmaps.

pub mod augment;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod explain;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tape, Tensor, Var};
