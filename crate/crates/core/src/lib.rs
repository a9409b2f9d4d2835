//! Global/local selective-scan network for reference-guided image
//! super-resolution, with the numerical kernels it is built from.

pub mod audit;
pub mod autodiff;
pub mod bench;
pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod scalar;
pub mod ssm;
pub mod suite;
pub mod tensor;
pub mod train;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Shape, Tensor};
