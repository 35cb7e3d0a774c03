//! Core library for `rgfm`: adaptive-hop graph-of-graphs construction,
//! constant-curvature mixture-of-experts routing, two-stage contrastive
//! training, and the numerical oracles backing the method's guarantees.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`graph`] / [`graphio`] / [`splits`]: attributed-graph storage, text
//!   file format, k-hop extraction, evaluation splits and perturbations.
//! - [`tensor`]: dense rank-<=2 `f64` tensors with a reverse-mode tape,
//!   the losses used by both training stages, Adam, and checkpoints.
//! - [`manifold`]: constant-curvature geometry kernels (exp0/log0/dist0)
//!   in the kappa-stereographic chart.
//! - [`encoder`]: the stage-1 subgraph encoder with contrastive views.
//! - [`gog`]: budget-bounded hop selection and similarity-sampled
//!   graph-of-graphs edges.
//! - [`moe`]: candidate-expert determination, confidence-aware top-m
//!   routing, curvature experts, fusion and load balancing.
//! - [`oracle`]: brute-force / Monte-Carlo verification of the noise
//!   fusion, edge-construction error ordering, and excess-risk results.
//! - [`pipeline`]: end-to-end orchestration, evaluation and reports.

pub mod encoder;
pub mod error;
pub mod gog;
pub mod graph;
pub mod graphio;
pub mod manifold;
pub mod metrics;
pub mod moe;
pub mod oracle;
pub mod parallel;
pub mod pipeline;
pub mod rng;
pub mod splits;
pub mod synth;
pub mod tensor;

pub use error::RgfmError;

/// Convenience alias used across the crate.
pub type Result<T> = std::result::Result<T, RgfmError>;
