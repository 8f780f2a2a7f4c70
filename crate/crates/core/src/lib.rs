//! Skip-layer fully convolutional network for binary lesion segmentation.
//!
//! The crate carries its own rank-4 tensor type and a define-by-run
//! reverse-mode tape ([`autodiff`]), the operators the network is built from
//! ([`ops`]), the six-head concatenation-fusion topology ([`model`]), SGD with
//! momentum ([`optim`]), dataset handling ([`data`]) and the five-metric
//! evaluation protocol ([`metrics`]).

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use mask::BinaryMask;
pub use model::{ArchitectureConfig, FcnModel};
pub use tensor::{Scalar, Shape, Tensor};
