//! Generalized zero-shot multi-label text coding.
//!
//! A label-wise attentive extractor produces per-code document features and
//! per-code classifiers tied to graph-propagated label embeddings. A
//! conditional WGAN-GP learns to synthesize features for codes without
//! training data, and those features fine-tune the corresponding
//! classifiers while every other classifier stays untouched.

pub mod adaptation;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod extractor;
pub mod generation;
pub mod hierarchy;
pub mod params;
pub mod pipeline;
pub mod synthetic;
pub mod tape;

pub use error::{Error, Result};
