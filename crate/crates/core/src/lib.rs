pub mod adapter;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod distill;
pub mod edge;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod grid;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use config::ModelConfig;
pub use error::{Error, Result};
pub use grid::FeatureGrid;
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
