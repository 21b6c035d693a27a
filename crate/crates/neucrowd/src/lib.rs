//! Representation learning from small, inconsistent crowdsourced label sets.
//!
//! The library builds n-tuplet training batches with safety-aware sampling
//! and batch-level robust anchors, trains a weight-sharing embedding network
//! with an assurance-weighted softmax loss, co-trains a hardness sampling
//! network that selects the hardest tuplets, and evaluates the learned
//! embeddings with a downstream l2-regularized logistic classifier.

pub mod config;
pub mod crowd;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod io;
pub mod nn;
pub mod sampler;
pub mod srl;
pub mod trainer;
pub mod tuplet;

pub use error::{Error, Result};
