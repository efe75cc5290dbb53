//! Nine-path 2.5D convolutional lesion segmentation.
//!
//! Each path is a dual-encoder U-Net over one anatomical plane and one intensity
//! normalization; the nine binarized path outputs are stacked with the input and fused by
//! a small 3D CNN. Majority-vote and union fusion are available as baselines.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
mod kernels;
pub mod manifest;
pub mod metrics;
pub mod ninepath;
pub mod ops;
pub mod optim;
pub mod phantom;
pub mod preprocess;
pub mod tensor;
pub mod train;
pub mod unet;
pub mod volume;

pub use autodiff::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use optim::{sgd_nesterov_step, OptimizerConfig, ParamId, ParamStore, Parameter};
pub use tensor::{Scalar, Tensor};
