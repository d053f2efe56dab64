use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::interventions::{draw_masks, row_intervention_loss, InterventionTrainingConfig};
use super::loss::{row_loss, FrozenRow, LossBreakdown, LossConfig, NoiseDraw};
use super::optim::{optimizer_step, OptimizerConfig, OptimizerState, Schedule};
use crate::data::{Dataset, Split};
use crate::error::{invalid_config, Error, Result};
use crate::metrics::row_concept_hits;
use crate::model::{CovarianceKind, Mode, ModelBundle};
use crate::nn::argmax;
use crate::rng::{child_seed, stream_rng};

const SHUFFLE_STREAM: u64 = 1 << 32;
const VALIDATION_STREAM: u64 = 2 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Paradigm {
    Plain,
    WithInterventions,
}

impl Paradigm {
    pub fn name(self) -> &'static str {
        match self {
            Paradigm::Plain => "plain",
            Paradigm::WithInterventions => "with_interventions",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PscbmTrainConfig {
    pub paradigm: Paradigm,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossConfig,
    pub interventions: InterventionTrainingConfig,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl PscbmTrainConfig {
    /// Defaults per head kind and paradigm: global lr 1e-3 with weight decay
    /// 1 and step-wise decay; amortized lr 1e-4 without decay, cosine; with
    /// interventions lr 1e-4, weight decay 4, cosine.
    pub fn defaults(kind: CovarianceKind, paradigm: Paradigm) -> Self {
        let optimizer = match (paradigm, kind) {
            (Paradigm::WithInterventions, _) => OptimizerConfig {
                lr: 1e-4,
                weight_decay: 4.0,
                schedule: Schedule::Cosine,
            },
            (Paradigm::Plain, CovarianceKind::Global) => OptimizerConfig {
                lr: 1e-3,
                weight_decay: 1.0,
                schedule: Schedule::StepWise,
            },
            (Paradigm::Plain, CovarianceKind::Amortized) => OptimizerConfig {
                lr: 1e-4,
                weight_decay: 0.0,
                schedule: Schedule::Cosine,
            },
        };
        Self {
            paradigm,
            epochs: 50,
            batch_size: 64,
            loss: LossConfig::default(),
            interventions: InterventionTrainingConfig::default(),
            optimizer,
            seed: 0,
        }
    }

    pub fn validate(&self, concepts: usize) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid_config("batch_size", "must be at least 1"));
        }
        self.loss.validate()?;
        self.optimizer.validate()?;
        if self.paradigm == Paradigm::WithInterventions {
            self.interventions.validate(concepts)?;
        }
        Ok(())
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub concept_acc: f64,
    pub target_acc: f64,
    /// Seconds since training started.
    pub wall_time_s: f64,
}

/// Per-epoch validation and training metrics. Validation has an extra
/// epoch-0 row measured before the first update.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingLog {
    pub validation: Vec<EpochMetrics>,
    pub train: Vec<EpochMetrics>,
}

pub const LOG_HEADER: &str = "epoch,concept_loss,target_loss,regularizer,total,concept_acc,target_acc,wall_time_s";

fn rows_to_csv(rows: &[EpochMetrics]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.epoch,
            r.loss.concept_loss,
            r.loss.target_loss,
            r.loss.regularizer,
            r.loss.total,
            r.concept_acc,
            r.target_acc,
            r.wall_time_s
        );
    }
    out
}

impl TrainingLog {
    pub fn validation_csv(&self) -> String {
        rows_to_csv(&self.validation)
    }

    pub fn train_csv(&self) -> String {
        rows_to_csv(&self.train)
    }

    /// Writes validation rows to `path` and training rows next to it as
    /// `<stem>.train.csv`.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.validation_csv())?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("metrics");
        std::fs::write(path.with_file_name(format!("{stem}.train.csv")), self.train_csv())?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub bundle: ModelBundle,
    pub log: TrainingLog,
    pub wall_time_s: f64,
}

pub(crate) struct Labeled<'a> {
    pub(crate) rows: Vec<usize>,
    pub(crate) data: &'a Dataset,
}

fn row_noise_seed(seed: u64, epoch: usize) -> u64 {
    child_seed(seed, epoch as u64)
}

/// Plain-paradigm loss and accuracies on `rows` with fixed noise.
fn evaluate(
    bundle: &ModelBundle,
    cache: &[FrozenRow],
    split: &Labeled<'_>,
    cfg: &LossConfig,
    seed: u64,
) -> Result<(LossBreakdown, f64, f64)> {
    let c = bundle.concepts();
    let results: Vec<(LossBreakdown, usize, bool)> = split
        .rows
        .par_iter()
        .zip(cache.par_iter())
        .map(|(&r, frozen)| {
            let mut rng = stream_rng(seed, r as u64);
            let noise = NoiseDraw::draw(&mut rng, cfg.samples, c);
            let truth = split.data.concepts(r);
            let (b, _, probs, pbar) = row_loss(bundle, frozen, truth, split.data.label(r), cfg, &noise, false)?;
            Ok((b, row_concept_hits(&probs, truth), argmax(&pbar) == split.data.label(r)))
        })
        .collect::<Result<_>>()?;
    let parts: Vec<LossBreakdown> = results.iter().map(|r| r.0).collect();
    let n = results.len() as f64;
    let concept_hits: usize = results.iter().map(|r| r.1).sum();
    let target_hits = results.iter().filter(|r| r.2).count();
    Ok((
        LossBreakdown::mean(&parts),
        concept_hits as f64 / (n * c as f64),
        target_hits as f64 / n,
    ))
}

/// Trains the covariance head of a PSCBM; the backbone is never touched.
pub fn train_pscbm(bundle: &ModelBundle, data: &Dataset, config: &PscbmTrainConfig) -> Result<TrainOutput> {
    if bundle.mode() != Mode::Pscbm {
        return Err(Error::WrongMode {
            expected: "pscbm",
            got: bundle.mode().name(),
        });
    }
    if !bundle.is_stochastic() {
        return Err(invalid_config("covariance_enabled", "enable the covariance before training"));
    }
    let c = bundle.concepts();
    config.validate(c)?;
    if data.num_concepts() != c || data.input_dim() != bundle.input_dim() || data.classes() != bundle.classes() {
        return Err(Error::ShapeMismatch("dataset does not match the model".into()));
    }
    let started = Instant::now();
    let mut model = bundle.clone();
    let mut log = TrainingLog::default();
    if config.epochs == 0 {
        return Ok(TrainOutput {
            bundle: model,
            log,
            wall_time_s: 0.0,
        });
    }

    let train = Labeled {
        rows: data.indices(Split::Train),
        data,
    };
    let val = Labeled {
        rows: data.indices(Split::Val),
        data,
    };
    if train.rows.is_empty() {
        return Err(invalid_config("data", "train split is empty"));
    }
    // frozen backbone: features and mean logits are computed once
    let cache_of = |rows: &[usize]| -> Result<Vec<FrozenRow>> {
        rows.par_iter()
            .map(|&r| FrozenRow::compute(&model, data.features(r)))
            .collect()
    };
    let train_cache = cache_of(&train.rows)?;
    let val_cache = cache_of(&val.rows)?;
    let val_seed = child_seed(config.seed, VALIDATION_STREAM);

    let eval_row = |model: &ModelBundle, epoch: usize| -> Result<Option<EpochMetrics>> {
        if val.rows.is_empty() {
            return Ok(None);
        }
        let (loss, concept_acc, target_acc) = evaluate(model, &val_cache, &val, &config.loss, val_seed)?;
        Ok(Some(EpochMetrics {
            epoch,
            loss,
            concept_acc,
            target_acc,
            wall_time_s: started.elapsed().as_secs_f64(),
        }))
    };
    if let Some(m) = eval_row(&model, 0)? {
        log.validation.push(m);
    }

    let head_params = model.covariance_head().expect("stochastic").num_params();
    let mut opt = OptimizerState::new(config.optimizer, head_params, config.epochs);
    let mut order: Vec<usize> = (0..train.rows.len()).collect();
    for epoch in 0..config.epochs {
        opt.epoch = epoch;
        order.shuffle(&mut stream_rng(config.seed, SHUFFLE_STREAM + epoch as u64));
        let noise_seed = row_noise_seed(config.seed, epoch);
        let mut epoch_parts = Vec::with_capacity(order.len());
        let mut concept_acc_sum = 0.0;
        let mut target_acc_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let results: Vec<(LossBreakdown, Vec<f64>, f64, f64)> = batch
                .par_iter()
                .map(|&pos| {
                    let r = train.rows[pos];
                    let frozen = &train_cache[pos];
                    let truth = data.concepts(r);
                    let y = data.label(r);
                    let mut rng = stream_rng(noise_seed, r as u64);
                    match config.paradigm {
                        Paradigm::Plain => {
                            let noise = NoiseDraw::draw(&mut rng, config.loss.samples, c);
                            let (b, g, probs, pbar) = row_loss(&model, frozen, truth, y, &config.loss, &noise, true)?;
                            let ca = row_concept_hits(&probs, truth) as f64 / c as f64;
                            let ta = f64::from(u8::from(argmax(&pbar) == y));
                            Ok((b, g.expect("gradient requested"), ca, ta))
                        }
                        Paradigm::WithInterventions => {
                            let draws = draw_masks(&mut rng, c, &config.interventions, config.loss.samples);
                            let (b, g, (ca, ta)) = row_intervention_loss(
                                &model,
                                frozen,
                                truth,
                                y,
                                &config.interventions,
                                &config.loss,
                                &draws,
                                true,
                            )?;
                            Ok((b, g.expect("gradient requested"), ca, ta))
                        }
                    }
                })
                .collect::<Result<_>>()?;
            let mut grad = vec![0.0; head_params];
            for (b, g, ca, ta) in &results {
                for (a, v) in grad.iter_mut().zip(g) {
                    *a += v;
                }
                epoch_parts.push(*b);
                concept_acc_sum += ca;
                target_acc_sum += ta;
            }
            let n = results.len() as f64;
            grad.iter_mut().for_each(|v| *v /= n);
            let head = model.covariance_head_mut().expect("stochastic");
            let mut params = head.params();
            optimizer_step(&mut opt, &mut params, &grad)?;
            head.set_params(&params);
        }
        let n = order.len() as f64;
        log.train.push(EpochMetrics {
            epoch: epoch + 1,
            loss: LossBreakdown::mean(&epoch_parts),
            concept_acc: concept_acc_sum / n,
            target_acc: target_acc_sum / n,
            wall_time_s: started.elapsed().as_secs_f64(),
        });
        if let Some(m) = eval_row(&model, epoch + 1)? {
            log.validation.push(m);
        }
    }
    Ok(TrainOutput {
        bundle: model,
        log,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}
