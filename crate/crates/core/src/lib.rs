//! Path retrieval over knowledge graphs for retrieval-augmented generation.
//!
//! The crate mines hard training paths from a graph, trains a cross-attentive
//! query–path scorer with a frequency-weighted contrastive loss, retrieves
//! paths by scorer-guided beam search and measures shortcut and long-tail
//! retrieval bias.

pub mod error;
pub mod eval;
pub mod graph;
pub mod inference;
pub mod mining;
pub mod pipeline;
pub mod scorer;
pub mod similarity;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
