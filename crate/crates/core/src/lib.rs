//! Knowledge-graph enhanced entity correction for query rewriting.
//!
//! A noisy query is corrected in two layers: a bi-encoder retrieves
//! candidate entities from a dense index, and a cross encoder re-ranks the
//! candidates while detecting the corrupt span (or the null span). Both
//! layers see entity descriptions and a graph-attention encoding of the
//! entity's one-hop neighbourhood.

pub mod catalog;
pub mod error;
pub mod evalharness;
pub mod graphenc;
pub mod io;
pub mod kgpretrain;
pub mod kgstore;
pub mod nn;
pub mod pipeline;
pub mod rerankspan;
pub mod synthdata;
pub mod retrieval;
pub mod textenc;

pub use error::{Error, Result};
