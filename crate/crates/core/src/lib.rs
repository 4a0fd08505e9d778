//! Joint key-element extraction and multi-dimension classification of short
//! incident narratives, with statistical pattern mining over the results.

pub mod error;
pub mod eval;
pub mod layers;
pub mod model;
pub mod patterns;
pub mod schema;
pub mod synth;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
