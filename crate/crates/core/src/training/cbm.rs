//! Joint training of the CBM backbone.
//!
//! Loss per row: `Σᵢ BCE(cᵢ, σ(μᵢ)) + λ₁·CE(y, 1/M Σₘ softmax(f(ĉ⁽ᵐ⁾)))`
//! with hard Bernoulli samples `ĉ⁽ᵐ⁾` of `σ(μ)` and straight-through
//! gradients into the concept head and encoder.

use std::time::Instant;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{check_targets, target_logit_grad, LossBreakdown, LossConfig};
use super::optim::{optimizer_step, OptimizerConfig, OptimizerState, Schedule};
use super::trainer::{EpochMetrics, TrainOutput, TrainingLog};
use crate::data::{Dataset, Split};
use crate::error::{invalid_config, Error, Result};
use crate::intervention::calibrate_percentiles;
use crate::metrics::row_concept_hits;
use crate::model::{bernoulli_into, ModelBundle};
use crate::nn::{argmax, bce_with_logit, sigmoid, softmax_in_place, DenseRows, Linear};
use crate::rng::{child_seed, stream_rng};

const INIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1 << 32;
const VALIDATION_STREAM: u64 = 2 << 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CbmTrainConfig {
    pub feature_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda1: f64,
    pub samples: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for CbmTrainConfig {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            epochs: 50,
            batch_size: 64,
            lambda1: 1.0,
            samples: 100,
            optimizer: OptimizerConfig {
                lr: 1e-2,
                weight_decay: 0.1,
                schedule: Schedule::StepWise,
            },
            seed: 0,
        }
    }
}

impl CbmTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(invalid_config("feature_dim", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(invalid_config("batch_size", "must be at least 1"));
        }
        if self.samples == 0 {
            return Err(invalid_config("samples", "must be at least 1"));
        }
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) {
            return Err(invalid_config("lambda1", "must be a nonnegative number"));
        }
        self.optimizer.validate()
    }

    fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda1: self.lambda1,
            lambda2: 0.0,
            samples: self.samples,
            ..LossConfig::default()
        }
    }
}

/// Flat gradient over encoder, concept head and target head, in that order,
/// each in [`Linear::params`] layout.
struct BackboneGrad(Vec<f64>);

struct RowResult {
    loss: LossBreakdown,
    grad: Option<BackboneGrad>,
    concept_hits: usize,
    target_hit: bool,
}

fn layer_slices(bundle: &ModelBundle) -> [usize; 3] {
    [
        bundle.encoder().num_params(),
        bundle.concept_head().num_params(),
        bundle.target_head().num_params(),
    ]
}

fn add_outer(out: &mut [f64], layer: &Linear, g: &[f64], input: &[f64], scale: f64) {
    let cols = layer.input_dim();
    let rows = layer.output_dim();
    for r in 0..rows {
        let gr = g[r] * scale;
        if gr == 0.0 {
            continue;
        }
        for (c, &x) in input.iter().enumerate() {
            out[r * cols + c] += gr * x;
        }
        out[rows * cols + r] += gr;
    }
}

fn cbm_row<R: rand::Rng + ?Sized>(
    bundle: &ModelBundle,
    x: &[f64],
    c: &[u8],
    y: usize,
    cfg: &CbmTrainConfig,
    rng: &mut R,
    want_grad: bool,
) -> Result<RowResult> {
    check_targets(c, y, bundle.concepts(), bundle.classes())?;
    let z = bundle.features(x)?;
    let mu = bundle.concept_head().apply(&z);
    let p: Vec<f64> = mu.iter().map(|&m| sigmoid(m)).collect();
    let concept: f64 = c.iter().zip(&mu).map(|(&ci, &m)| bce_with_logit(f64::from(ci), m)).sum();

    let k = bundle.classes();
    let cdim = bundle.concepts();
    let m_count = cfg.samples;
    let f = DenseRows::from_linear(bundle.target_head());
    let mut hard = vec![0.0; m_count * cdim];
    let mut probs = vec![0.0; m_count * k];
    for m in 0..m_count {
        let h = &mut hard[m * cdim..(m + 1) * cdim];
        bernoulli_into(&p, rng, h);
        let out = &mut probs[m * k..(m + 1) * k];
        f.apply_into(h, out);
        softmax_in_place(out);
    }
    let mut pbar = vec![0.0; k];
    for m in 0..m_count {
        for (j, pb) in pbar.iter_mut().enumerate() {
            *pb += probs[m * k + j];
        }
    }
    pbar.iter_mut().for_each(|v| *v /= m_count as f64);
    let target = -pbar[y].max(f64::MIN_POSITIVE).ln();
    let loss = LossBreakdown::new(concept, target, 0.0, &cfg.loss_config());
    let concept_hits = row_concept_hits(&p, c);
    let target_hit = argmax(&pbar) == y;
    if !want_grad {
        return Ok(RowResult {
            loss,
            grad: None,
            concept_hits,
            target_hit,
        });
    }

    let [ne, ng, nf] = layer_slices(bundle);
    let mut grad = vec![0.0; ne + ng + nf];
    let scale = cfg.lambda1 / (m_count as f64 * pbar[y].max(f64::MIN_POSITIVE));
    let mut g_hard = vec![0.0; cdim];
    let mut ds = vec![0.0; k];
    for m in 0..m_count {
        target_logit_grad(&probs[m * k..(m + 1) * k], y, scale, &mut ds);
        let h = &hard[m * cdim..(m + 1) * cdim];
        add_outer(&mut grad[ne + ng..], bundle.target_head(), &ds, h, 1.0);
        f.add_transpose(&ds, &mut g_hard);
    }
    // straight-through: dĉ/dμ := σ'(μ)
    let g_mu: Vec<f64> = (0..cdim)
        .map(|i| (p[i] - f64::from(c[i])) + g_hard[i] * p[i] * (1.0 - p[i]))
        .collect();
    let g_head = bundle.concept_head();
    add_outer(&mut grad[ne..ne + ng], g_head, &g_mu, &z, 1.0);
    let g_z = g_head.weight.transpose() * DVector::from_column_slice(&g_mu);
    add_outer(&mut grad[..ne], bundle.encoder(), g_z.as_slice(), x, 1.0);
    Ok(RowResult {
        loss,
        grad: Some(BackboneGrad(grad)),
        concept_hits,
        target_hit,
    })
}

fn backbone_params(bundle: &ModelBundle) -> Vec<f64> {
    let mut out = bundle.encoder().params();
    out.extend(bundle.concept_head().params());
    out.extend(bundle.target_head().params());
    out
}

fn set_backbone_params(bundle: &mut ModelBundle, flat: &[f64]) {
    let [ne, ng, _] = layer_slices(bundle);
    let mut e = bundle.encoder().clone();
    let mut g = bundle.concept_head().clone();
    let mut f = bundle.target_head().clone();
    e.set_params(&flat[..ne]);
    g.set_params(&flat[ne..ne + ng]);
    f.set_params(&flat[ne + ng..]);
    bundle.set_backbone(e, g, f);
}

fn evaluate(bundle: &ModelBundle, data: &Dataset, rows: &[usize], cfg: &CbmTrainConfig, seed: u64) -> Result<(LossBreakdown, f64, f64)> {
    let results: Vec<RowResult> = rows
        .par_iter()
        .map(|&r| {
            let mut rng = stream_rng(seed, r as u64);
            cbm_row(bundle, data.features(r), data.concepts(r), data.label(r), cfg, &mut rng, false)
        })
        .collect::<Result<_>>()?;
    let n = rows.len() as f64;
    let parts: Vec<LossBreakdown> = results.iter().map(|r| r.loss).collect();
    let concept: usize = results.iter().map(|r| r.concept_hits).sum();
    let target = results.iter().filter(|r| r.target_hit).count();
    Ok((
        LossBreakdown::mean(&parts),
        concept as f64 / (n * bundle.concepts() as f64),
        target as f64 / n,
    ))
}

/// Stores training-split logit percentiles for the empirical strategy.
fn calibrate(model: &mut ModelBundle, data: &Dataset) -> Result<()> {
    let rows = data.indices(Split::Train);
    if rows.is_empty() {
        return Ok(());
    }
    let inputs: Vec<&[f64]> = rows.iter().map(|&r| data.features(r)).collect();
    let table = calibrate_percentiles(model, &inputs)?;
    model.set_percentiles(table)
}

/// Trains a CBM from a seeded random initialization. The returned model
/// carries percentiles of its training-split logits.
pub fn train_cbm(data: &Dataset, config: &CbmTrainConfig) -> Result<TrainOutput> {
    config.validate()?;
    let started = Instant::now();
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    init_rng.set_stream(INIT_STREAM);
    let mut model = ModelBundle::random_cbm(
        data.input_dim(),
        config.feature_dim,
        data.num_concepts(),
        data.classes(),
        &mut init_rng,
    )?;
    let mut log = TrainingLog::default();
    if config.epochs == 0 {
        calibrate(&mut model, data)?;
        return Ok(TrainOutput {
            bundle: model,
            log,
            wall_time_s: 0.0,
        });
    }
    let train_rows = data.indices(Split::Train);
    let val_rows = data.indices(Split::Val);
    if train_rows.is_empty() {
        return Err(invalid_config("data", "train split is empty"));
    }
    let val_seed = child_seed(config.seed, VALIDATION_STREAM);
    let eval_row = |model: &ModelBundle, epoch: usize| -> Result<Option<EpochMetrics>> {
        if val_rows.is_empty() {
            return Ok(None);
        }
        let (loss, concept_acc, target_acc) = evaluate(model, data, &val_rows, config, val_seed)?;
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

    let mut params = backbone_params(&model);
    let mut opt = OptimizerState::new(config.optimizer, params.len(), config.epochs);
    let mut order = train_rows.clone();
    for epoch in 0..config.epochs {
        opt.epoch = epoch;
        order.shuffle(&mut stream_rng(config.seed, SHUFFLE_STREAM + epoch as u64));
        let noise_seed = child_seed(config.seed, epoch as u64 + 1);
        let mut parts = Vec::with_capacity(order.len());
        let mut concept_hits = 0usize;
        let mut target_hits = 0usize;
        for batch in order.chunks(config.batch_size) {
            let results: Vec<RowResult> = batch
                .par_iter()
                .map(|&r| {
                    let mut rng = stream_rng(noise_seed, r as u64);
                    cbm_row(&model, data.features(r), data.concepts(r), data.label(r), config, &mut rng, true)
                })
                .collect::<Result<_>>()?;
            let mut grad = vec![0.0; params.len()];
            for res in &results {
                let g = &res.grad.as_ref().expect("gradient requested").0;
                for (a, v) in grad.iter_mut().zip(g) {
                    *a += v;
                }
                parts.push(res.loss);
                concept_hits += res.concept_hits;
                target_hits += usize::from(res.target_hit);
            }
            let n = results.len() as f64;
            grad.iter_mut().for_each(|v| *v /= n);
            optimizer_step(&mut opt, &mut params, &grad)?;
            set_backbone_params(&mut model, &params);
        }
        let n = order.len() as f64;
        log.train.push(EpochMetrics {
            epoch: epoch + 1,
            loss: LossBreakdown::mean(&parts),
            concept_acc: concept_hits as f64 / (n * model.concepts() as f64),
            target_acc: target_hits as f64 / n,
            wall_time_s: started.elapsed().as_secs_f64(),
        });
        if let Some(m) = eval_row(&model, epoch + 1)? {
            log.validation.push(m);
        }
    }
    if !params.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidConfig {
            field: "lr".into(),
            reason: "training diverged".into(),
        });
    }
    calibrate(&mut model, data)?;
    Ok(TrainOutput {
        bundle: model,
        log,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

/// Single-row CBM loss and flat backbone gradient with the sampling stream
/// seeded from `seed`.
pub fn cbm_loss_and_gradient(
    bundle: &ModelBundle,
    x: &[f64],
    c: &[u8],
    y: usize,
    cfg: &CbmTrainConfig,
    seed: u64,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = cbm_row(bundle, x, c, y, cfg, &mut rng, true)?;
    Ok((r.loss, r.grad.expect("gradient requested").0))
}
