//! Training and evaluation engine for SqueezeNet1.1 and three ultralight
//! fire-module variants on binary malaria blood-cell classification.
//!
//! The crate is self-contained: tensors, convolution kernels, reverse-mode
//! differentiation, Adam, the image pipeline and the evaluation metrics are
//! all implemented here.

pub mod arch;
pub mod autograd;
pub mod class;
pub mod cli;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model_io;
pub mod ops;
pub mod tensor;
pub mod training;

pub use arch::{build, count_trainable_params, summary, ArchId, ArchSpec, FireSpec, Network};
pub use autograd::{backward, grad_check, GradientSet, Tape, Var};
pub use class::Class;
pub use error::{Error, Result};
pub use tensor::{ConvKernel, Padding, Scalar, Tensor4};
