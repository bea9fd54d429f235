//! Graph-based imputation of missing values in tabular data.
//!
//! Rows of a batch become nodes of a latent graph whose edges are sampled
//! from learned node embeddings; a graph convolution over that graph
//! reconstructs hidden cells. See the crate README for an overview.

pub mod baselines;
pub mod dataio;
pub mod ensemble;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod missingness;
pub mod model;
pub mod ndmath;
pub mod objectives;
pub mod seeds;
pub mod training;

pub use error::{Error, Result};
