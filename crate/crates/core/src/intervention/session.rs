use std::sync::Arc;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::policy::{select_next, uncertainty_ranking, PolicyKind};
use super::strategy::{apply_strategy, cbm_probability, InterventionMask, StrategyKind};
use crate::error::{invalid_config, Error, Result};
use crate::gaussian::{ConceptDistribution, ConditionalResult};
use crate::model::{bernoulli_into, ModelBundle};
use crate::nn::sigmoid;
use crate::rng::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterventionEvent {
    pub concept: usize,
    pub value: u8,
    pub strategy: StrategyKind,
}

/// Everything a client sees after the latest intervention.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionState {
    pub mask: InterventionMask,
    /// Intervened coordinates hold exactly their value; the rest are
    /// Monte Carlo means of `σ(η)` (or the CBM probability).
    pub concept_probs: Vec<f64>,
    pub class_probs: Vec<f64>,
    /// Scores the uncertainty policy ranks: `σ` of the conditional mean.
    pub policy_probs: Vec<f64>,
    /// Distribution over the non-intervened logits, stochastic models only.
    pub conditional: Option<ConditionalResult>,
    pub history: Vec<InterventionEvent>,
}

impl SessionState {
    pub fn intervened(&self) -> &[usize] {
        &self.mask.intervened
    }

    /// Remaining concepts, most uncertain first.
    pub fn ranking(&self) -> Vec<usize> {
        let mut taken = vec![false; self.policy_probs.len()];
        for &i in &self.mask.intervened {
            taken[i] = true;
        }
        uncertainty_ranking(&self.policy_probs, &taken)
    }
}

enum Base {
    Gaussian(ConceptDistribution),
    Bernoulli(Vec<f64>),
}

/// Interventions on one input, replayable from its seed.
///
/// State after `k` events is computed with the random stream `(seed, k)`, so
/// undo returns bit-identical state and `k = 0` matches a plain forward pass
/// of the bundle under `stream_rng(seed, 0)`.
pub struct InterventionSession {
    bundle: Arc<ModelBundle>,
    input: Vec<f64>,
    samples: usize,
    seed: u64,
    base: Base,
    events: Vec<InterventionEvent>,
    state: SessionState,
}

impl InterventionSession {
    pub fn new(bundle: Arc<ModelBundle>, input: Vec<f64>, samples: usize, seed: u64) -> Result<Self> {
        if samples == 0 {
            return Err(invalid_config("samples", "need at least one Monte Carlo sample"));
        }
        let base = if bundle.is_stochastic() {
            Base::Gaussian(bundle.concept_distribution(&input)?)
        } else {
            Base::Bernoulli(bundle.concept_logits(&input)?.into_iter().map(sigmoid).collect())
        };
        let mut session = Self {
            bundle,
            input,
            samples,
            seed,
            base,
            events: Vec::new(),
            state: SessionState {
                mask: InterventionMask::default(),
                concept_probs: Vec::new(),
                class_probs: Vec::new(),
                policy_probs: Vec::new(),
                conditional: None,
                history: Vec::new(),
            },
        };
        session.state = session.compute(&[])?;
        Ok(session)
    }

    pub fn bundle(&self) -> &Arc<ModelBundle> {
        &self.bundle
    }

    pub fn input(&self) -> &[f64] {
        &self.input
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn state(&self) -> &SessionState {
        &self.state
    }

    /// Mean and factor of the predicted logits before any intervention.
    pub fn base_distribution(&self) -> Option<&ConceptDistribution> {
        match &self.base {
            Base::Gaussian(d) => Some(d),
            Base::Bernoulli(_) => None,
        }
    }

    /// Sets `concept` to `value` and recomputes the state. On error the
    /// session is unchanged.
    pub fn intervene(&mut self, concept: usize, value: u8, strategy: StrategyKind) -> Result<&SessionState> {
        if concept >= self.bundle.concepts() {
            return Err(Error::UnknownConcept(concept));
        }
        if value > 1 {
            return Err(invalid_config("value", format!("concept values must be 0 or 1, got {value}")));
        }
        if self.events.iter().any(|e| e.concept == concept) {
            return Err(Error::AlreadyIntervened(concept));
        }
        strategy.validate()?;
        if strategy.needs_covariance() && matches!(self.base, Base::Bernoulli(_)) {
            return Err(Error::IncompatibleStrategy(strategy.name().into()));
        }
        let mut events = self.events.clone();
        events.push(InterventionEvent {
            concept,
            value,
            strategy,
        });
        self.state = self.compute(&events)?;
        self.events = events;
        Ok(&self.state)
    }

    /// Drops the latest intervention.
    pub fn undo(&mut self) -> Result<&SessionState> {
        let mut events = self.events.clone();
        events.pop().ok_or(Error::NothingToUndo)?;
        self.state = self.compute(&events)?;
        self.events = events;
        Ok(&self.state)
    }

    /// Next concept under `policy`, scored on the current state.
    pub fn suggest<R: Rng + ?Sized>(&self, policy: PolicyKind, rng: &mut R) -> Result<usize> {
        select_next(policy, &self.state.policy_probs, &self.state.mask.intervened, rng)
    }

    fn compute(&self, events: &[InterventionEvent]) -> Result<SessionState> {
        let k = events.len() as u64;
        let mut rng = stream_rng(self.seed, k);
        let history = events.to_vec();
        if events.is_empty() {
            let out = self.bundle.forward(&self.input, self.samples, &mut rng)?;
            let policy_probs = match &self.base {
                Base::Gaussian(d) => d.mean().iter().map(|&m| sigmoid(m)).collect(),
                Base::Bernoulli(p) => p.clone(),
            };
            return Ok(SessionState {
                mask: InterventionMask::default(),
                concept_probs: out.concept_probs,
                class_probs: out.class_probs,
                policy_probs,
                conditional: None,
                history,
            });
        }
        let strategy = events.last().expect("nonempty").strategy;
        let intervened: Vec<usize> = events.iter().map(|e| e.concept).collect();
        let values: Vec<u8> = events.iter().map(|e| e.value).collect();
        match &self.base {
            Base::Bernoulli(p) => {
                let mut sampled = p.clone();
                let mut policy_probs = p.clone();
                let mut logits = Vec::with_capacity(events.len());
                for e in events {
                    let q = cbm_probability(&strategy, e.concept, e.value, self.bundle.percentiles())?;
                    sampled[e.concept] = q;
                    policy_probs[e.concept] = f64::from(e.value);
                    logits.push(crate::nn::logit(q.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)));
                }
                let class_probs = self.bundle.average_over_bernoulli(&sampled, self.samples, &mut rng);
                Ok(SessionState {
                    mask: InterventionMask {
                        intervened,
                        values_binary: values,
                        values_logits: logits,
                    },
                    concept_probs: policy_probs.clone(),
                    class_probs,
                    policy_probs,
                    conditional: None,
                    history,
                })
            }
            Base::Gaussian(dist) => {
                let logits = apply_strategy(&strategy, &intervened, &values, dist, self.bundle.percentiles())?;
                let c = dist.dim();
                let mut clamped = vec![0.0; c];
                for (&i, &v) in intervened.iter().zip(&values) {
                    clamped[i] = f64::from(v);
                }
                let mask = InterventionMask {
                    intervened: intervened.clone(),
                    values_binary: values,
                    values_logits: logits.clone(),
                };
                if intervened.len() == c {
                    // nothing left to sample; every draw is the same vector
                    let class_probs = self.bundle.class_probs(&clamped);
                    return Ok(SessionState {
                        mask,
                        concept_probs: clamped.clone(),
                        class_probs,
                        policy_probs: clamped,
                        conditional: None,
                        history,
                    });
                }
                let cond = dist.condition(&intervened, &logits)?;
                let (concept_probs, class_probs) = self.sample_remainder(&cond, &clamped, &mut rng);
                let mut policy_probs = clamped;
                for (r, &i) in cond.kept_indices.iter().enumerate() {
                    policy_probs[i] = sigmoid(cond.dist.mean()[r]);
                }
                Ok(SessionState {
                    mask,
                    concept_probs,
                    class_probs,
                    policy_probs,
                    conditional: Some(cond),
                    history,
                })
            }
        }
    }

    fn sample_remainder<R: Rng + ?Sized>(
        &self,
        cond: &ConditionalResult,
        clamped: &[f64],
        rng: &mut R,
    ) -> (Vec<f64>, Vec<f64>) {
        let kept = &cond.kept_indices;
        let r = kept.len();
        let k = self.bundle.classes();
        let mut noise = vec![0.0; r];
        let mut eta = vec![0.0; r];
        let mut hard = vec![0.0; r];
        let mut full = clamped.to_vec();
        let mut scratch = vec![0.0; k];
        let mut prob_acc = vec![0.0; r];
        let mut class_acc = vec![0.0; k];
        for _ in 0..self.samples {
            for n in noise.iter_mut() {
                *n = rng.sample(StandardNormal);
            }
            cond.dist.sample_into(&noise, &mut eta);
            for (e, acc) in eta.iter_mut().zip(prob_acc.iter_mut()) {
                *e = sigmoid(*e);
                *acc += *e;
            }
            bernoulli_into(&eta, rng, &mut hard);
            for (a, &i) in kept.iter().enumerate() {
                full[i] = hard[a];
            }
            self.bundle.class_probs_into(&full, &mut scratch);
            for (a, s) in class_acc.iter_mut().zip(&scratch) {
                *a += s;
            }
        }
        let m = self.samples as f64;
        let mut concept_probs = clamped.to_vec();
        for (a, &i) in kept.iter().enumerate() {
            concept_probs[i] = prob_acc[a] / m;
        }
        class_acc.iter_mut().for_each(|a| *a /= m);
        (concept_probs, class_acc)
    }
}

/// Conditional mean of the non-intervened logits as a full-length vector
/// (intervened coordinates hold their set logits).
pub fn conditional_mean_full(state: &SessionState, concepts: usize) -> Option<DVector<f64>> {
    let cond = state.conditional.as_ref()?;
    let mut out = DVector::zeros(concepts);
    for (a, &i) in state.mask.intervened.iter().enumerate() {
        out[i] = state.mask.values_logits[a];
    }
    for (r, &i) in cond.kept_indices.iter().enumerate() {
        out[i] = cond.dist.mean()[r];
    }
    Some(out)
}
