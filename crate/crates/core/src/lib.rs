pub mod analysis;
pub mod corpus;
pub mod decoding;
pub mod error;
pub mod lm;
pub mod model;
pub mod metrics;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
