//! Cross-modal retrieval through a shared latent space.
//!
//! Two domain-specific classifiers are pretrained with a soft orthogonality
//! penalty on their penultimate features; an encoder–decoder then maps both
//! feature sets into one embedding space under a five-term objective, and
//! retrieval runs as exact Euclidean k-NN in that space.

pub mod checkpoint;
pub mod cli;
pub mod dataio;
pub mod diffmath;
mod error;
pub mod pipeline;
pub mod retrieval;
pub mod stage1;
pub mod stage2;

pub use diffmath::{MathError, Matrix};
pub use error::TrainError;
