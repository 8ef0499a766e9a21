//! Critical-category-aware quantization toolkit for set-prediction detectors.

pub mod allocator;
pub mod autodiff;
pub mod cli;
pub mod matching;
pub mod error;
pub mod exec;
pub mod model;
pub mod objectives;
pub mod params;
pub mod pipeline;
pub mod qat;
pub mod quantizer;
pub mod sensitivity;
pub mod train;

pub use error::{Error, Result};
