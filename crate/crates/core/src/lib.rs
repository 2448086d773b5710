//! Hierarchical self-contrastive preference optimization on a toy
//! vision-language model.

pub mod error;
pub mod mlpo;
pub mod prefgen;
pub mod rerank;
pub mod tensor;
pub mod vlm;

pub use error::{Error, Result};
