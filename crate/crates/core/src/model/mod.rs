//! Toy set-prediction detector and its synthetic dataset.

mod config;
pub mod dataset;
pub mod io;
mod net;

pub use config::ModelConfig;
pub use io::{Checkpoint, Dataset};
pub use dataset::{gen_dataset, DatasetSpec, Object, Sample, Split, SuperCategory};
pub use net::{
    bind_constants, forward, forward_graph, forward_with, init_model, patchify, positional_encoding,
    tensor_count, DetectionSet,
};
