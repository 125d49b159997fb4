pub mod condvae;
pub mod diffusion;
pub mod error;
pub mod formats;
pub mod geomrecover;
pub mod graphrep;
pub mod latentvae;
pub mod nn;
pub mod pdfsim;
pub mod pipeline;
pub mod structgen;

pub use error::{Error, Result};
