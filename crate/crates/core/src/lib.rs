pub mod data;
pub mod error;
pub mod experiments;
pub mod model;
pub mod numerics;
pub mod retrieval;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
