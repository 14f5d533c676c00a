pub mod augment;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod mt_client;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
