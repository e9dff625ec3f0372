//! Deep similarity kernels: Siamese convolutional networks whose pair scores
//! are post-processed into Mercer kernels for SVM and k-NN classification
//! under transfer learning.
//!
//! Math modules are generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the `f64` instantiation used by the pipeline and file formats.

pub mod classify;
pub mod data;
pub mod error;
pub mod kernel;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod siamese;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type NetworkParams = nn::NetworkParams<f64>;
pub type LabeledImageSet = data::LabeledImageSet<f64>;
pub type SiameseNet = siamese::SiameseNet<f64>;
pub type GramMatrix = kernel::GramMatrix<f64>;
pub type EigenDecomposition = kernel::EigenDecomposition<f64>;
pub use classify::{OneVsOne, SvmModel};
