//! Discovery, training and composition of low-rank "slider" directions for
//! text-conditioned diffusion models.

pub mod adapter;
pub mod backend;
pub mod composer;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod manifest;
pub mod pca;
pub mod sampler;
pub mod runtime;
pub mod schedule;
pub mod shapes;
pub mod tensor_file;
pub mod trainer;
pub mod workspace;

pub use error::{Error, Result};
