//! Spatial causal inference with neural outcome models.
//!
//! The outcome model is additive: a linear direct term per treatment, a
//! learned interference function of each treatment's neighbourhood patch,
//! a learned function of the observed confounders, and an inducing-point
//! Gaussian process term standing in for an unobserved smooth spatial
//! confounder. Effects are estimated from the fitted model by contrasting
//! counterfactual predictions, optionally reweighted by generalized
//! propensity score balancing weights.

pub mod catalog;
pub mod codec;
pub mod dataset;
pub mod effects;
pub mod error;
pub mod experiment;
pub mod gp;
pub mod linalg;
pub mod model;
pub mod nets;
pub mod par;
pub mod raster;
pub mod rng;
pub mod synthgen;
pub mod tensor;

pub use error::{Error, Result};
