//! Graph in-context learning engine.
//!
//! Pretrain a small prompt-graph model once on a source graph using
//! pseudo-labels derived from neighborhood centroids, then classify
//! nodes or typed edges on entirely different graphs by assembling a
//! prompt graph from a handful of labeled examples — with zero
//! parameter updates at inference time.

pub mod context;
pub mod embed;
pub mod episode;
pub mod error;
pub mod exec;
pub mod graph;
pub mod objectives;
pub mod prompt;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
