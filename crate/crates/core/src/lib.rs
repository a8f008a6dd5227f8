//! Bayesian spatiotemporal disease mapping for areal count data.
//!
//! The pipeline runs from ingestion of stratified death counts, through
//! expected counts by indirect standardization, to latent Gaussian models
//! (BYM2 spatial, RW1 temporal and iid interaction effects) fitted by a
//! Laplace approximation with central-composite integration over the
//! hyperparameters, and finally relative-risk summaries.

pub mod epi;
pub mod error;
pub mod graph;
pub mod inference;
pub mod model;
pub mod simulate;
pub mod sparse;
pub mod structure;
pub mod summaries;

pub use error::{Error, Result};
