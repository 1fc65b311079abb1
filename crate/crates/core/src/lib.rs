//! Dense CNN detection over complete max-pooling fragments: the feature maps
//! of every pooling offset are computed once per image, the classifier runs
//! as a convolution over them, and every window position is scored exactly
//! as a patch-by-patch scan would score it.
//!
//! Numeric code is generic over [`scalar::Scalar`] (`f32`, `f64`); the
//! aliases below name the common instantiations.

pub mod backprop;
pub mod bench;
pub mod cost;
pub mod dcf;
pub mod detector;
pub mod error;
pub mod fft;
pub mod layers;
pub mod oracles;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod train;

pub use detector::{detect, DetectConfig, Detection};
pub use error::{DcfError, Result};
pub use layers::{Network, NetworkSpec};
pub use scalar::Scalar;
pub use tensor::{Padding, Tensor};

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type KernelBank32 = tensor::KernelBank<f32>;
pub type KernelBank64 = tensor::KernelBank<f64>;
pub type Network32 = layers::Network<f32>;
pub type Network64 = layers::Network<f64>;
pub type FragmentSet32 = dcf::FragmentSet<f32>;
pub type FragmentSet64 = dcf::FragmentSet<f64>;
pub type Regressor32 = detector::RegressorWeights<f32>;
pub type Regressor64 = detector::RegressorWeights<f64>;
pub type FlopsReport64 = cost::FlopsReport<f64>;
pub type ExactFlopsReport = cost::FlopsReport<i64>;
