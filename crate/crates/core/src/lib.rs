//! Unsupervised face-shape regression: a linear morphable model, a
//! differentiable rasterizer and Phong shader, a decoder network trained
//! through identity-embedding losses, and the evaluation tooling.

pub mod cli;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod model;
pub mod network;
pub mod raster;
pub mod real;
pub mod render;
pub mod shading;
pub mod trainer;

pub use error::{Error, Result};
pub use real::Real;
