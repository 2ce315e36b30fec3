//! Guided-attention image captioning over partial-order embeddings.

pub mod checkpoint;
pub mod corpus;
pub mod decoder;
pub mod error;
pub mod metrics;
pub mod numerics;
pub mod ordernet;
pub mod pipeline;
pub mod topics;

pub use error::{Error, Result};
