//! Sentence segmentation with a limited-lookahead transformer token
//! classifier: data preparation, corruption, training, strided inference
//! and evaluation.

pub mod baseline;
pub mod checkpoint;
pub mod corpus;
pub mod corrupt;
pub mod error;
pub mod eval;
pub mod infer;
pub mod model;
pub mod rng;
pub mod synthetic;
pub mod tokenize;
pub mod train;

pub use error::{Error, Result};
