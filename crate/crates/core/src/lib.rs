//! Learning mixtures of generalized linear models from score-function
//! cross-moments and a whitened tensor power method.
//!
//! The pipeline: [`moments::empirical_m3`] builds `M̂₃ = (1/n) Σ y_i·S₃(x_i)`
//! (or with `y_i³` for linear regression mixtures),
//! [`decomposition::robust_decompose`] recovers the component directions, and
//! [`em::em_refine`] fits per-component scales, biases and mixing weights.
//! [`pipeline::learn`] ties the steps together.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod activation;
pub mod decomposition;
pub mod em;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod moments;
pub mod pipeline;
pub mod rng;
pub mod score;
pub mod synthetic;
pub mod tensor;

pub use activation::Activation;
pub use decomposition::{DecompositionParams, DecompositionResult};
pub use error::{Error, Result};
pub use moments::{Dataset, MomentMode};
pub use pipeline::{ExperimentConfig, LearnOptions, LearnOutcome, ModeSetting};
pub use score::{ScoreModel, Transform};
pub use synthetic::GlmMixture;
