//! In-place transformer reasoning over region-of-interest features inside
//! convolutional video feature maps.

pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod params;
pub mod posenc;
pub mod roi;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod troi;

pub use error::{Error, Result};
pub use tensor::{Graph, Precision, Real, Tensor, Var};
