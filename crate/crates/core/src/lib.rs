//! Masked diffusion language model with schema-scaffolded decoding for
//! structured extraction.

pub mod checkpoint;
pub mod decode;
pub mod diffusion;
pub mod error;
pub mod evalkit;
pub mod experiment;
pub mod nn;
pub mod scaffold;
pub mod schema;
pub mod synthcorpus;
pub mod tokenization;
pub mod train;

pub use error::{Error, Result};
