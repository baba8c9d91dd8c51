//! Channel pruning for convolutional networks driven by attention statistics.
//!
//! The pipeline: train a base network, freeze it, attach small attention
//! modules in front of every prunable layer, train only the modules while a
//! mitigation schedule tightens the softmax constraint, average the softmax
//! outputs over the training set into per-channel statistics, convert a single
//! compression ratio into per-layer channel selections through a global
//! threshold, cut the selected channels out of the graph, and fine-tune.

pub mod arch;
pub mod attention;
pub mod cost;
pub mod error;
pub mod graph;
pub mod io;
pub mod pipeline;
pub mod solver;
pub mod stats;
pub mod surgery;
pub mod tensor;

pub use error::{Error, Result};
