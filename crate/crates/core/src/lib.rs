//! Lightweight multilingual sentence embeddings: a small reverse-mode
//! autodiff engine, a transformer dual encoder, margin-softmax and
//! distillation objectives, training loops and exact-search retrieval
//! evaluation.

pub mod autodiff;
pub mod checkpoint;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod nn;
pub mod train;

pub use error::{Error, ErrorClass, Result};
