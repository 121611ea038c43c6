//! Scale-aware linear-bias attention for multi-resolution remote sensing.
//!
//! The crate holds a small reverse-mode autodiff engine, GSD-scaled distance
//! biases, the three-encoder / two-cross-encoder / masked-decoder model with
//! its contrastive and reconstruction objectives, representation probes, and
//! a synthetic aligned-triplet data pipeline built on XYZ tile math.

pub mod attention;
pub mod bias;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod nn;
pub mod params;
pub mod probe;
pub mod tensor;

pub use error::{Error, Result};
