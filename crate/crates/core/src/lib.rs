//! In-context binary segmentation.
//!
//! A single network segments a query image given a support set of labeled
//! examples of the same task. The crate contains a small reverse-mode
//! differentiation engine, the cross-convolutional layers and network, a
//! procedural generator of synthetic tasks, augmentation, task archives,
//! training and ensembled evaluation.

pub mod augment;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod image;
pub mod kernels;
pub mod layers;
pub mod net;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autodiff::{grad_check, GradCheckReport, Padding, Param, ParamId, ParamStore, Tape, Var};
pub use error::{Error, Result};
pub use kernels::Reduction;
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;

pub use net::{Network, NetworkConfig, SupportPair};

pub type Network32 = Network<f32>;
pub type Network64 = Network<f64>;
