//! LTCF-Net: dual color-space low-light image enhancement.
//!
//! The crate is layered bottom-up: [`tensor`], [`kernels`] and [`fft`] hold
//! the raw numerics, [`autograd`] records differentiable forward passes over
//! a [`params::ParamStore`], and the remaining modules build the network,
//! its losses and its training loop on top.

pub mod autograd;
pub mod blocks;
pub mod checkpoint;
pub mod colorspace;
pub mod data;
pub mod error;
pub mod fft;
pub mod gradcheck;
pub mod kernels;
pub mod losses;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;

pub use autograd::{Gradients, Graph, Unary, Var};
pub use colorspace::{ColorSpace, ImagePlanes, WhitePoint};
pub use data::{DegradationConfig, ImagePair, PairedDataset};
pub use error::{Error, FileIssue, Result};
pub use fft::{fft2, ifft2, ComplexTensor};
pub use kernels::Padding;
pub use losses::{FeatureExtractor, LossWeights};
pub use model::{Branches, LtcfNet, ModelConfig};
pub use optim::{AdamState, History, ScheduleConfig, TrainOptions};
pub use params::{Init, ParamId, ParamStore, Parameter};
pub use tensor::{Scalar, Tensor};
