pub mod attn_curvature;
pub mod cli;
pub mod convergence;
pub mod curvature;
pub mod data;
pub mod error;
pub mod nn;
pub mod spectra;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
