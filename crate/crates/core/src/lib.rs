//! Long-tail image classification toolkit.
//!
//! Builds long-tail benchmarks (including a colour-injected MNIST variant
//! with spurious context), trains the re-sampling baselines (uniform CE,
//! class-balanced re-sampling, classifier re-training, mixup), and trains
//! dual-branch models with context-shift augmentation: contexts extracted
//! with Grad-CAM from confidently fitted samples are kept in a FIFO bank
//! and blended into class-balanced re-sampled images.
//!
//! The numeric core is generic over [`Scalar`] (`f32` for training, `f64`
//! for gradient checks); the aliases below fix the common instantiations.

pub mod context_bank;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod lt_data;
pub mod model;
pub mod nn;
pub mod rng;
pub mod saliency;
pub mod sampling;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use context_bank::ContextBank;
pub use error::{Error, Result};
pub use model::{DualBranchModel, Head};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type DualBranchModelF32 = model::DualBranchModel<f32>;
pub type DualBranchModelF64 = model::DualBranchModel<f64>;
pub type TensorF32 = tensor::Tensor<f32>;
pub type TensorF64 = tensor::Tensor<f64>;
pub type ActivationMapF32 = saliency::ActivationMap<f32>;
pub type TrainRunF32 = training::TrainRun<f32>;
