//! Unified news recall and ranking.
//!
//! A self-attention news encoder and user encoder produce a ranking user
//! embedding; a memory of basis user embeddings, addressed by attention with
//! the ranking embedding as query, turns it into a recall embedding.

pub mod cli;
pub mod corpus;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
