//! Point cloud geometry compression with a sparse distribution prior and a
//! prior-conditioned diffusion decoder.

pub mod autograd;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod diffusion;
pub mod entropy;
pub mod error;
pub mod geom;
pub mod latent;
pub mod model;
pub mod nn;
pub mod report;
pub mod sparse;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use geom::{NormalizationInfo, PointCloud};
pub use tensor::Tensor;
