use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::policy::PolicyKind;
use super::session::InterventionSession;
use super::strategy::StrategyKind;
use crate::data::{Dataset, Split};
use crate::error::{invalid_config, Error, Result};
use crate::metrics::{row_concept_hits, CurvePoint, InterventionCurve, RunLabel};
use crate::model::io::fingerprint;
use crate::model::ModelBundle;
use crate::nn::argmax;
use crate::rng::{child_seed, stream_rng};

const POLICY_STREAM: u64 = 1 << 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveConfig {
    pub policy: PolicyKind,
    pub strategy: StrategyKind,
    pub samples: usize,
    pub seed: u64,
    pub split: Split,
    /// Follow the uncertainty ranking of the un-intervened state instead of
    /// re-ranking after every step.
    #[serde(default)]
    pub rank_once: bool,
    /// Row label; defaults to the model mode.
    #[serde(default)]
    pub method: Option<String>,
}

impl CurveConfig {
    pub fn new(policy: PolicyKind, strategy: StrategyKind, samples: usize, seed: u64) -> Self {
        Self {
            policy,
            strategy,
            samples,
            seed,
            split: Split::Test,
            rank_once: false,
            method: None,
        }
    }
}

/// Seed of the session for dataset row `row`.
pub fn row_seed(seed: u64, row: usize) -> u64 {
    child_seed(seed, row as u64)
}

/// Hash of the model and every setting except the seed.
pub fn curve_fingerprint(bundle: &ModelBundle, config: &CurveConfig, rows: usize) -> String {
    let v = serde_json::json!({
        "model": fingerprint(bundle),
        "policy": config.policy,
        "strategy": config.strategy,
        "samples": config.samples,
        "split": config.split,
        "rank_once": config.rank_once,
        "method": method_name(bundle, config),
        "rows": rows,
    });
    hex::encode(Sha256::digest(v.to_string().as_bytes()))[..16].to_string()
}

fn method_name(bundle: &ModelBundle, config: &CurveConfig) -> String {
    config.method.clone().unwrap_or_else(|| bundle.mode().name().to_string())
}

/// Per-row hit counts at `k = 0..=C`.
struct RowTrace {
    concept_hits: Vec<usize>,
    target_hits: Vec<bool>,
}

fn trace_row(bundle: &Arc<ModelBundle>, data: &Dataset, row: usize, config: &CurveConfig) -> Result<RowTrace> {
    let c = bundle.concepts();
    let truth = data.concepts(row);
    let label = data.label(row);
    let seed = row_seed(config.seed, row);
    let mut session = InterventionSession::new(bundle.clone(), data.features(row).to_vec(), config.samples, seed)?;
    let mut policy_rng = stream_rng(seed, POLICY_STREAM);
    let ranked = (config.rank_once && config.policy == PolicyKind::ConceptUncertainty).then(|| session.state().ranking());
    let mut concept_hits = Vec::with_capacity(c + 1);
    let mut target_hits = Vec::with_capacity(c + 1);
    for k in 0..=c {
        let st = session.state();
        concept_hits.push(row_concept_hits(&st.concept_probs, truth));
        target_hits.push(argmax(&st.class_probs) == label);
        if k == c {
            break;
        }
        let next = match &ranked {
            Some(order) => order[k],
            None => session.suggest(config.policy, &mut policy_rng)?,
        };
        session.intervene(next, truth[next], config.strategy)?;
    }
    Ok(RowTrace {
        concept_hits,
        target_hits,
    })
}

/// Greedy ground-truth interventions on every row of `config.split`.
///
/// Rows run in parallel, each on its own random streams; results are summed
/// in row order so the curve does not depend on the thread count.
pub fn run_intervention_curve(
    bundle: &Arc<ModelBundle>,
    data: &Dataset,
    config: &CurveConfig,
) -> Result<InterventionCurve> {
    config.strategy.validate()?;
    if config.samples == 0 {
        return Err(invalid_config("samples", "need at least one Monte Carlo sample"));
    }
    if config.strategy.needs_covariance() && !bundle.is_stochastic() {
        return Err(Error::IncompatibleStrategy(config.strategy.name().into()));
    }
    if data.num_concepts() != bundle.concepts() || data.input_dim() != bundle.input_dim() {
        return Err(Error::ShapeMismatch("dataset does not match the model".into()));
    }
    let rows = data.indices(config.split);
    if rows.is_empty() {
        return Err(invalid_config("split", format!("{} split is empty", config.split.name())));
    }
    let traces: Vec<RowTrace> = rows
        .par_iter()
        .map(|&r| trace_row(bundle, data, r, config))
        .collect::<Result<_>>()?;
    let c = bundle.concepts();
    let n = rows.len() as f64;
    let points = (0..=c)
        .map(|k| {
            let concept: usize = traces.iter().map(|t| t.concept_hits[k]).sum();
            let target = traces.iter().filter(|t| t.target_hits[k]).count();
            CurvePoint {
                k,
                concept_acc: concept as f64 / (n * c as f64),
                target_acc: target as f64 / n,
            }
        })
        .collect();
    let label = RunLabel {
        method: method_name(bundle, config),
        policy: config.policy.name().into(),
        strategy: config.strategy.name().into(),
    };
    InterventionCurve::from_points(label, curve_fingerprint(bundle, config, rows.len()), config.seed, points)
}

/// Concept and target accuracy without interventions, using the same
/// per-row streams as the curve's `k = 0` point.
pub fn evaluate_plain(bundle: &ModelBundle, data: &Dataset, split: Split, samples: usize, seed: u64) -> Result<(f64, f64)> {
    let rows = data.indices(split);
    if rows.is_empty() {
        return Err(invalid_config("split", format!("{} split is empty", split.name())));
    }
    let hits: Vec<(usize, bool)> = rows
        .par_iter()
        .map(|&r| {
            let mut rng = stream_rng(row_seed(seed, r), 0);
            let out = bundle.forward(data.features(r), samples, &mut rng)?;
            Ok((
                row_concept_hits(&out.concept_probs, data.concepts(r)),
                argmax(&out.class_probs) == data.label(r),
            ))
        })
        .collect::<Result<_>>()?;
    let n = rows.len() as f64;
    let concept: usize = hits.iter().map(|h| h.0).sum();
    let target = hits.iter().filter(|h| h.1).count();
    Ok((concept as f64 / (n * bundle.concepts() as f64), target as f64 / n))
}
