use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rule choosing the next concept to intervene on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Random,
    /// Probability closest to 0.5 first.
    ConceptUncertainty,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Random => "random",
            PolicyKind::ConceptUncertainty => "concept_uncertainty",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "random" => Some(PolicyKind::Random),
            "concept_uncertainty" | "uncertainty" => Some(PolicyKind::ConceptUncertainty),
            _ => None,
        }
    }
}

/// Picks a concept not in `already`.
///
/// The uncertainty policy takes `argmin |probs[i] − 0.5|` with ties going to
/// the lowest index; the random policy draws uniformly from what is left.
pub fn select_next<R: Rng + ?Sized>(
    policy: PolicyKind,
    probs: &[f64],
    already: &[usize],
    rng: &mut R,
) -> Result<usize> {
    let c = probs.len();
    let mut taken = vec![false; c];
    for &i in already {
        if i >= c {
            return Err(Error::UnknownConcept(i));
        }
        taken[i] = true;
    }
    let remaining: Vec<usize> = (0..c).filter(|&i| !taken[i]).collect();
    if remaining.is_empty() {
        return Err(Error::AllIntervened);
    }
    match policy {
        PolicyKind::Random => Ok(remaining[rng.random_range(0..remaining.len())]),
        PolicyKind::ConceptUncertainty => {
            let mut best = remaining[0];
            for &i in &remaining[1..] {
                if (probs[i] - 0.5).abs() < (probs[best] - 0.5).abs() {
                    best = i;
                }
            }
            Ok(best)
        }
    }
}

/// Remaining concepts ordered by uncertainty, most uncertain first.
pub fn uncertainty_ranking(probs: &[f64], intervened: &[bool]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).filter(|&i| !intervened[i]).collect();
    order.sort_by(|&a, &b| {
        (probs[a] - 0.5)
            .abs()
            .total_cmp(&(probs[b] - 0.5).abs())
            .then(a.cmp(&b))
    });
    order
}
