//! Token-alignable draft training and lossless speculative decoding on toy
//! transformer models.

pub mod checkpoint;
pub mod corpus;
pub mod dataset;
pub mod decode;
pub mod draft;
pub mod error;
pub mod harness;
pub mod layers;
pub mod numerics;
pub mod target;
pub mod training;

pub use corpus::Token;
pub use error::{Error, Result};
