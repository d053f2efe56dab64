use serde::{Deserialize, Serialize};

use super::confidence::{solve_confidence_region, SolverSettings};
use crate::error::{invalid_config, Error, Result};
use crate::gaussian::ConceptDistribution;
use crate::model::{ModelBundle, PercentileTable};
use crate::nn::{logit, sigmoid};

pub const DEFAULT_EPSILON: f64 = 0.01;
pub const DEFAULT_ALPHA: f64 = 0.05;
const SIMPLE_LOW: f64 = 0.05;
const SIMPLE_HIGH: f64 = 0.95;

/// Rule assigning values to intervened concepts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StrategyKind {
    /// Logits of `ε` / `1 − ε`.
    Hard { epsilon: f64 },
    /// Logits of 0.05 / 0.95.
    SimplePercentile,
    /// Per-concept 5th / 95th percentile of training-set logits.
    EmpiricalPercentile,
    /// Most likely values inside the `1 − α` confidence ellipsoid.
    ConfidenceRegion {
        alpha: f64,
        #[serde(default)]
        solver: SolverSettings,
    },
}

impl Default for StrategyKind {
    fn default() -> Self {
        StrategyKind::Hard {
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl StrategyKind {
    pub fn name(&self) -> &'static str {
        match self {
            StrategyKind::Hard { .. } => "hard",
            StrategyKind::SimplePercentile => "simple_percentile",
            StrategyKind::EmpiricalPercentile => "empirical_percentile",
            StrategyKind::ConfidenceRegion { .. } => "confidence_region",
        }
    }

    /// Parses a strategy name with default parameters.
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "hard" => Some(StrategyKind::default()),
            "simple_percentile" | "simple" => Some(StrategyKind::SimplePercentile),
            "empirical_percentile" | "empirical" => Some(StrategyKind::EmpiricalPercentile),
            "confidence_region" | "confidence" => Some(StrategyKind::ConfidenceRegion {
                alpha: DEFAULT_ALPHA,
                solver: SolverSettings::default(),
            }),
            _ => None,
        }
    }

    /// The four strategies with default parameters.
    pub fn all() -> [StrategyKind; 4] {
        ["hard", "simple_percentile", "empirical_percentile", "confidence_region"]
            .map(|s| StrategyKind::parse(s).expect("known name"))
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            StrategyKind::Hard { epsilon } if !(epsilon > 0.0 && epsilon < 0.5) => {
                Err(invalid_config("epsilon", "must lie in (0, 0.5)"))
            }
            // α = 1 is accepted as the limit where the region shrinks to the mean
            StrategyKind::ConfidenceRegion { alpha, .. } if !(alpha > 0.0 && alpha <= 1.0) => {
                Err(invalid_config("alpha", "must lie in (0, 1]"))
            }
            _ => Ok(()),
        }
    }

    /// True if the strategy needs the Gaussian concept distribution.
    pub fn needs_covariance(&self) -> bool {
        matches!(self, StrategyKind::ConfidenceRegion { .. })
    }
}

/// Intervened concepts with user values and the logits a strategy set.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct InterventionMask {
    pub intervened: Vec<usize>,
    pub values_binary: Vec<u8>,
    pub values_logits: Vec<f64>,
}

impl InterventionMask {
    pub fn len(&self) -> usize {
        self.intervened.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intervened.is_empty()
    }
}

fn percentile_logit(table: Option<&PercentileTable>, concept: usize, value: u8) -> Result<f64> {
    let t = table.ok_or(Error::MissingPercentileTable)?;
    Ok(if value == 1 { t.high[concept] } else { t.low[concept] })
}

/// Logits for the intervened concepts `indices` set to `values`.
///
/// `dist` is the full predicted logit distribution; only the confidence
/// region strategy reads its covariance.
pub fn apply_strategy(
    strategy: &StrategyKind,
    indices: &[usize],
    values: &[u8],
    dist: &ConceptDistribution,
    percentiles: Option<&PercentileTable>,
) -> Result<Vec<f64>> {
    strategy.validate()?;
    if indices.is_empty() {
        return Err(Error::InvalidIndexSet("empty intervention mask".into()));
    }
    if indices.len() != values.len() {
        return Err(Error::DimensionMismatch {
            expected: indices.len(),
            got: values.len(),
        });
    }
    if let Some(&v) = values.iter().find(|&&v| v > 1) {
        return Err(invalid_config("value", format!("concept values must be 0 or 1, got {v}")));
    }
    if let Some(&i) = indices.iter().find(|&&i| i >= dist.dim()) {
        return Err(Error::UnknownConcept(i));
    }
    match *strategy {
        StrategyKind::Hard { epsilon } => Ok(values
            .iter()
            .map(|&v| if v == 1 { logit(1.0 - epsilon) } else { logit(epsilon) })
            .collect()),
        StrategyKind::SimplePercentile => Ok(values
            .iter()
            .map(|&v| if v == 1 { logit(SIMPLE_HIGH) } else { logit(SIMPLE_LOW) })
            .collect()),
        StrategyKind::EmpiricalPercentile => indices
            .iter()
            .zip(values)
            .map(|(&i, &v)| percentile_logit(percentiles, i, v))
            .collect(),
        StrategyKind::ConfidenceRegion { alpha, solver } => {
            let marginal = dist.marginal(indices)?;
            Ok(solve_confidence_region(values, &marginal, alpha, &solver)?.logits)
        }
    }
}

/// Probability a CBM assigns to an intervened concept. The hard strategy
/// sets it to exactly 0 or 1.
pub fn cbm_probability(
    strategy: &StrategyKind,
    concept: usize,
    value: u8,
    percentiles: Option<&PercentileTable>,
) -> Result<f64> {
    strategy.validate()?;
    match strategy {
        StrategyKind::Hard { .. } => Ok(f64::from(value)),
        StrategyKind::SimplePercentile => Ok(if value == 1 { SIMPLE_HIGH } else { SIMPLE_LOW }),
        StrategyKind::EmpiricalPercentile => Ok(sigmoid(percentile_logit(percentiles, concept, value)?)),
        StrategyKind::ConfidenceRegion { .. } => Err(Error::IncompatibleStrategy(strategy.name().into())),
    }
}

/// Per-concept 5th and 95th percentiles of the model's mean logits over
/// `rows` (linear interpolation between order statistics).
pub fn calibrate_percentiles(bundle: &ModelBundle, inputs: &[&[f64]]) -> Result<PercentileTable> {
    if inputs.is_empty() {
        return Err(invalid_config("rows", "percentile calibration needs at least one row"));
    }
    let c = bundle.concepts();
    let mut columns = vec![Vec::with_capacity(inputs.len()); c];
    for x in inputs {
        for (col, v) in columns.iter_mut().zip(bundle.concept_logits(x)?) {
            col.push(v);
        }
    }
    let mut low = Vec::with_capacity(c);
    let mut high = Vec::with_capacity(c);
    for col in columns.iter_mut() {
        col.sort_by(f64::total_cmp);
        low.push(percentile_sorted(col, 5.0));
        high.push(percentile_sorted(col, 95.0));
    }
    Ok(PercentileTable { low, high })
}

/// `q`-th percentile of sorted data.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q / 100.0 * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}
