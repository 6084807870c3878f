//! Probabilistic segmentation of layered images: a global low-rank Gaussian
//! shape prior over ordered boundary heights, Gaussian patch appearance
//! models, column-chain regularizers and alternating variational inference.

pub mod appearance;
pub mod config;
pub mod error;
pub mod eval;
pub mod gaussian;
pub mod inference;
mod io;
pub mod pipeline;
pub mod regularizer;
pub mod scan;
pub mod shape;
pub mod synth;

pub use error::{Error, Result};
pub use io::{MODEL_MAGIC, MODEL_VERSION};
