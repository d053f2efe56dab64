//! Post-hoc stochastic concept bottleneck models.
//!
//! A frozen concept bottleneck model (encoder, concept head, target head) is
//! wrapped with a trainable covariance head so that concept logits follow a
//! multivariate normal. Interventions on a subset of concepts then update the
//! rest through Gaussian conditioning.

pub mod data;
pub mod error;
pub mod gaussian;
pub mod intervention;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
pub use gaussian::{ConceptDistribution, ConditionalResult};
pub use model::{CovarianceHead, CovarianceKind, ForwardOutput, Mode, ModelBundle, PercentileTable};
