pub mod backbone;
pub mod candidates;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod embeddings;
pub mod model;
pub mod error;
pub mod evaluation;
pub mod experiments;
pub mod retrieval;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
