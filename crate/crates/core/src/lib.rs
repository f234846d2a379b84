//! Desk-scale retrieval-enhanced transformer (RETRO) with chunked
//! cross-attention, plus the token-overlap attribution analysis that splits
//! retrieval gains by how many tokens a prediction shares verbatim with its
//! retrieved neighbors.
//!
//! Pipeline: [`corpus`] → [`tokenizer`] → [`retrieval`] database →
//! [`trainer`] → [`eval`] (records, buckets, reports).

pub mod corpus;
pub mod error;
pub mod eval;
pub mod hashing;
pub mod io_util;
pub mod model;
pub mod pipeline;
pub mod retrieval;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
