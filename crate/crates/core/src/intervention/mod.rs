//! Test-time concept interventions.
//!
//! A policy picks the next concept, a strategy turns the user's binary value
//! into a logit, and for stochastic models the remaining logits are
//! conditioned on the intervened ones before resampling.

mod confidence;
mod curve;
mod policy;
mod session;
mod strategy;

pub use confidence::{is_feasible, region_radius_sq, solve_confidence_region, ConfidenceSolution, SolverSettings, FEASIBILITY_TOL};
pub use curve::{curve_fingerprint, evaluate_plain, row_seed, run_intervention_curve, CurveConfig};
pub use policy::{select_next, uncertainty_ranking, PolicyKind};
pub use session::{conditional_mean_full, InterventionEvent, InterventionSession, SessionState};
pub use strategy::{
    apply_strategy, calibrate_percentiles, cbm_probability, percentile_sorted, InterventionMask, StrategyKind,
    DEFAULT_ALPHA, DEFAULT_EPSILON,
};
