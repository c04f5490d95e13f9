//! Low-rank pruning of small decoder-only transformers.
//!
//! Every linear projection `W` is replaced by a product `B·C` of rank `R`
//! fitted to the model's own activations, so that `B·C·X ≈ W·X` on
//! calibration data rather than `B·C ≈ W`. A per-site pruning level is then
//! chosen by search against a task accuracy threshold.
//!
//! The pipeline is: build or load a [`model::ModelWeights`], capture
//! activations with [`calibrate::capture_calibration`], factor every site at
//! every level into an [`calibrate::AdapterCache`], then search with
//! [`search::binary_search_uniform`] or [`search::ga_search`] and summarize
//! with [`report`].

pub mod calibrate;
pub mod container;
pub mod corpus;
pub mod error;
pub mod factorize;
pub mod linalg;
pub mod model;
pub mod report;
pub mod search;

pub use error::{Error, Result};
