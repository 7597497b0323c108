//! EEG gaze-position regression with a hybrid vision transformer.
//!
//! The crate carries its own small tensor library with reverse-mode
//! differentiation ([`autograd`]), the model ([`patch`], [`encoder`],
//! [`model`]), a named-tensor archive format ([`weights`]), trial data
//! handling ([`data`]) and the training/evaluation protocol ([`train`],
//! [`metrics`]).

pub mod autograd;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub(crate) mod kernels;
pub mod metrics;
pub mod model;
pub mod params;
pub mod patch;
pub mod tensor;
pub mod train;
pub mod weights;

pub use autograd::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use model::{EEGViTModel, Mode, ModelConfig, ModelVariant};
pub use tensor::{DType, Real, Tensor};
