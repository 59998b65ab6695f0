pub mod cli;
pub mod codec;
pub mod config;
pub mod ctr;
pub mod error;
pub mod eval;
pub mod graph;
pub mod ingest;
pub mod model;
pub mod pretrain;
pub mod rng;
pub mod sescf;
pub mod tensor;

pub use error::{Error, Result};
