//! Clustering-based unsupervised domain adaptation for metric learning with
//! asymmetric co-teaching.
//!
//! The pipeline has three stages: train an encoder on the labeled source
//! domain, adapt it to the target domain by alternating clustering and
//! triplet fine-tuning on the clustered inliers, then refine it with two peer
//! models that pick small-loss samples for each other. The main model learns
//! from filtered outliers plus inliers, the collaborator from filtered inliers.

pub mod adapt;
pub mod cluster;
pub mod coteach;
pub mod datasynth;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod io;
pub mod metric;
pub mod pipeline;
pub mod rng;

pub use error::{Error, Result};
