//! Accuracy, intervention AUC and multi-seed aggregation.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::argmax;

/// Mean over samples and concepts of `1[(p > 0.5) == c]`.
pub fn concept_accuracy(probs: &[Vec<f64>], truth: &[&[u8]]) -> Result<f64> {
    if probs.len() != truth.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} prediction rows for {} truth rows",
            probs.len(),
            truth.len()
        )));
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    for (p, c) in probs.iter().zip(truth) {
        if p.len() != c.len() {
            return Err(Error::ShapeMismatch(format!("{} probabilities for {} concepts", p.len(), c.len())));
        }
        hits += row_concept_hits(p, c);
        total += c.len();
    }
    if total == 0 {
        return Err(Error::ShapeMismatch("no predictions".into()));
    }
    Ok(hits as f64 / total as f64)
}

/// Count of concepts whose thresholded probability equals the truth.
pub fn row_concept_hits(probs: &[f64], truth: &[u8]) -> usize {
    probs
        .iter()
        .zip(truth)
        .filter(|(&p, &c)| (p > 0.5) == (c == 1))
        .count()
}

/// Mean over samples of `1[argmax class_probs == y]`.
pub fn target_accuracy(class_probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if class_probs.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} prediction rows for {} labels",
            class_probs.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::ShapeMismatch("no predictions".into()));
    }
    let hits = class_probs.iter().zip(labels).filter(|(p, &y)| argmax(p) == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Trapezoid area under `(k, value)` divided by the `k` range.
pub fn normalized_auc(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::TooFewPoints);
    }
    if points.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err(Error::InvalidIndexSet("curve k values must increase strictly".into()));
    }
    let area: f64 = points
        .windows(2)
        .map(|w| 0.5 * (w[1].0 - w[0].0) * (w[0].1 + w[1].1))
        .sum();
    Ok(area / (points[points.len() - 1].0 - points[0].0))
}

/// Mean and sample standard deviation (`n − 1`), zero spread for one value.
/// Values are sorted first so the result does not depend on input order.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let mut sq: Vec<f64> = v.iter().map(|x| (x - mean) * (x - mean)).collect();
    sq.sort_by(f64::total_cmp);
    (mean, (sq.iter().sum::<f64>() / (n - 1.0)).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub k: usize,
    pub concept_acc: f64,
    pub target_acc: f64,
}

/// Which method/policy/strategy a curve belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RunLabel {
    pub method: String,
    pub policy: String,
    pub strategy: String,
}

/// One run of the intervention sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionCurve {
    pub label: RunLabel,
    /// Hash of everything that defines the run except the seed.
    pub config_fingerprint: String,
    pub seed: u64,
    pub points: Vec<CurvePoint>,
    pub auc_concept: f64,
    pub auc_target: f64,
}

impl InterventionCurve {
    /// Builds a curve and its AUCs from points at `k = 0..=C`.
    pub fn from_points(label: RunLabel, config_fingerprint: String, seed: u64, points: Vec<CurvePoint>) -> Result<Self> {
        let (auc_concept, auc_target) = curve_aucs(&points)?;
        Ok(Self {
            label,
            config_fingerprint,
            seed,
            points,
            auc_concept,
            auc_target,
        })
    }
}

fn curve_aucs(points: &[CurvePoint]) -> Result<(f64, f64)> {
    let concept: Vec<(f64, f64)> = points.iter().map(|p| (p.k as f64, p.concept_acc)).collect();
    let target: Vec<(f64, f64)> = points.iter().map(|p| (p.k as f64, p.target_acc)).collect();
    Ok((normalized_auc(&concept)?, normalized_auc(&target)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregatePoint {
    pub k: usize,
    pub concept_acc_mean: f64,
    pub concept_acc_sd: f64,
    pub target_acc_mean: f64,
    pub target_acc_sd: f64,
}

/// Mean and spread over seeds of curves sharing one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateCurve {
    pub label: RunLabel,
    pub config_fingerprint: String,
    pub seeds: Vec<u64>,
    pub points: Vec<AggregatePoint>,
    pub auc_concept_mean: f64,
    pub auc_concept_sd: f64,
    pub auc_target_mean: f64,
    pub auc_target_sd: f64,
}

pub fn aggregate_runs(curves: &[InterventionCurve]) -> Result<AggregateCurve> {
    let first = curves
        .first()
        .ok_or_else(|| Error::MixedConfigs("no runs to aggregate".into()))?;
    for c in &curves[1..] {
        if c.config_fingerprint != first.config_fingerprint || c.label != first.label {
            return Err(Error::MixedConfigs(format!(
                "{} ({}) vs {} ({})",
                first.config_fingerprint, first.label.strategy, c.config_fingerprint, c.label.strategy
            )));
        }
        let ks = |x: &InterventionCurve| x.points.iter().map(|p| p.k).collect::<Vec<_>>();
        if ks(c) != ks(first) {
            return Err(Error::MixedConfigs("runs use different k grids".into()));
        }
    }
    let points = (0..first.points.len())
        .map(|i| {
            let concept: Vec<f64> = curves.iter().map(|c| c.points[i].concept_acc).collect();
            let target: Vec<f64> = curves.iter().map(|c| c.points[i].target_acc).collect();
            let (cm, cs) = mean_sd(&concept);
            let (tm, ts) = mean_sd(&target);
            AggregatePoint {
                k: first.points[i].k,
                concept_acc_mean: cm,
                concept_acc_sd: cs,
                target_acc_mean: tm,
                target_acc_sd: ts,
            }
        })
        .collect();
    let (auc_concept_mean, auc_concept_sd) = mean_sd(&curves.iter().map(|c| c.auc_concept).collect::<Vec<_>>());
    let (auc_target_mean, auc_target_sd) = mean_sd(&curves.iter().map(|c| c.auc_target).collect::<Vec<_>>());
    let mut seeds: Vec<u64> = curves.iter().map(|c| c.seed).collect();
    seeds.sort_unstable();
    Ok(AggregateCurve {
        label: first.label.clone(),
        config_fingerprint: first.config_fingerprint.clone(),
        seeds,
        points,
        auc_concept_mean,
        auc_concept_sd,
        auc_target_mean,
        auc_target_sd,
    })
}

impl AggregateCurve {
    /// `k,concept_acc_mean,concept_acc_sd,target_acc_mean,target_acc_sd`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,concept_acc_mean,concept_acc_sd,target_acc_mean,target_acc_sd\n");
        for p in &self.points {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                p.k, p.concept_acc_mean, p.concept_acc_sd, p.target_acc_mean, p.target_acc_sd
            );
        }
        out
    }

    /// AUCs, seeds and fingerprint for the CSV's sidecar file.
    pub fn sidecar_json(&self) -> String {
        let v = serde_json::json!({
            "method": self.label.method,
            "policy": self.label.policy,
            "strategy": self.label.strategy,
            "config_fingerprint": self.config_fingerprint,
            "seeds": self.seeds,
            "auc_concept_mean": self.auc_concept_mean,
            "auc_concept_sd": self.auc_concept_sd,
            "auc_target_mean": self.auc_target_mean,
            "auc_target_sd": self.auc_target_sd,
        });
        serde_json::to_string_pretty(&v).expect("plain json")
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.csv")), self.to_csv())?;
        std::fs::write(dir.join(format!("{stem}.json")), self.sidecar_json())?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucRow {
    pub label: RunLabel,
    pub runs: usize,
    pub concept_auc_mean: f64,
    pub concept_auc_sd: f64,
    pub target_auc_mean: f64,
    pub target_auc_sd: f64,
}

/// One row per method/policy/strategy with AUC mean and sd.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AucTable {
    pub rows: Vec<AucRow>,
}

impl AucTable {
    /// Rows sorted by label so the table does not depend on run order.
    pub fn from_aggregates(aggs: &[AggregateCurve]) -> Self {
        let mut sorted: Vec<&AggregateCurve> = aggs.iter().collect();
        sorted.sort_by(|a, b| (&a.label, &a.config_fingerprint).cmp(&(&b.label, &b.config_fingerprint)));
        let rows = sorted
            .into_iter()
            .map(|a| AucRow {
                label: a.label.clone(),
                runs: a.seeds.len(),
                concept_auc_mean: a.auc_concept_mean,
                concept_auc_sd: a.auc_concept_sd,
                target_auc_mean: a.auc_target_mean,
                target_auc_sd: a.auc_target_sd,
            })
            .collect();
        Self { rows }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "method,policy,strategy,runs,concept_auc_mean,concept_auc_sd,target_auc_mean,target_auc_sd\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.label.method,
                r.label.policy,
                r.label.strategy,
                r.runs,
                r.concept_auc_mean,
                r.concept_auc_sd,
                r.target_auc_mean,
                r.target_auc_sd
            );
        }
        out
    }

    /// Aligned plain-text rendering with four decimals.
    pub fn to_text(&self) -> String {
        let header = ["method", "policy", "strategy", "concept AUC", "target AUC"];
        let cells: Vec<[String; 5]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.label.method.clone(),
                    r.label.policy.clone(),
                    r.label.strategy.clone(),
                    format!("{:.4} ± {:.4}", r.concept_auc_mean, r.concept_auc_sd),
                    format!("{:.4} ± {:.4}", r.target_auc_mean, r.target_auc_sd),
                ]
            })
            .collect();
        let mut widths = header.map(|h| h.chars().count());
        for row in &cells {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.chars().count());
            }
        }
        let mut out = String::new();
        let line = |out: &mut String, row: &[String]| {
            let parts: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
                .collect();
            let _ = writeln!(out, "{}", parts.join("  ").trim_end());
        };
        line(&mut out, &header.map(String::from));
        let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
        line(&mut out, &rule);
        for row in &cells {
            line(&mut out, row);
        }
        out
    }
}
