//! Loss after random training-time interventions.
//!
//! Each of `N` masks intervenes on a fixed number of concepts, sets their
//! logits with the training strategy and draws one sample of the remaining
//! logits from the conditional normal. The conditional sample is written as
//! `η̃_R = η_R + K (η'_S − η_S)` with `η = μ + L ε` and `K = Σ_RS Σ_SS⁻¹`,
//! which has the conditional distribution and is differentiable in `L`.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::loss::{
    chain_to_params, check_targets, head_raw, regularizer_terms, target_logit_grad, FrozenRow, LossBreakdown, LossConfig,
    TargetPath,
};
use crate::error::{invalid_config, Error, Result};
use crate::gaussian::{cholesky, complement, ConceptDistribution};
use crate::intervention::{apply_strategy, StrategyKind};
use crate::model::{unpack_factor, ModelBundle};
use crate::nn::{argmax, bce_with_logit, sigmoid, softmax_in_place, DenseRows};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterventionTrainingConfig {
    /// Random masks per row per iteration (`N`).
    pub masks: usize,
    /// Concepts per mask; `None` means `round(0.2·C)`.
    pub mask_size: Option<usize>,
    pub strategy: StrategyKind,
}

impl Default for InterventionTrainingConfig {
    fn default() -> Self {
        Self {
            masks: 20,
            mask_size: None,
            strategy: StrategyKind::default(),
        }
    }
}

impl InterventionTrainingConfig {
    /// Resolved mask size for `concepts`.
    pub fn mask_size_for(&self, concepts: usize) -> usize {
        self.mask_size
            .unwrap_or_else(|| (0.2 * concepts as f64).round() as usize)
    }

    pub fn validate(&self, concepts: usize) -> Result<()> {
        if self.masks == 0 {
            return Err(invalid_config("masks", "must be at least 1"));
        }
        let size = self.mask_size_for(concepts);
        if size == 0 || size >= concepts {
            return Err(invalid_config(
                "mask_size",
                format!("must lie in [1, {}) for {concepts} concepts, got {size}", concepts),
            ));
        }
        self.strategy.validate()
    }
}

/// Randomness for one mask: the intervened set (sorted), `C` normals and
/// `M·|R|` uniforms for the Bernoulli draws of the remaining concepts.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskDraw {
    pub subset: Vec<usize>,
    pub normals: Vec<f64>,
    pub uniforms: Vec<f64>,
}

impl MaskDraw {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, concepts: usize, size: usize, samples: usize) -> Self {
        let mut subset = sample_indices(rng, concepts, size).into_vec();
        subset.sort_unstable();
        let normals = (0..concepts).map(|_| rng.sample(StandardNormal)).collect();
        let uniforms = (0..samples * (concepts - size)).map(|_| rng.random::<f64>()).collect();
        Self {
            subset,
            normals,
            uniforms,
        }
    }
}

/// Per-mask loss terms and `d loss / dL`.
struct MaskTerms {
    concept: f64,
    target: f64,
    dl: Option<DMatrix<f64>>,
    /// Fraction of concepts predicted correctly after the intervention.
    concept_acc: f64,
    target_hit: bool,
}

#[allow(clippy::too_many_arguments)]
fn mask_terms(
    bundle: &ModelBundle,
    row: &FrozenRow,
    l: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    c: &[u8],
    y: usize,
    eta_s: &[f64],
    cfg: &LossConfig,
    draw: &MaskDraw,
    want_grad: bool,
) -> Result<MaskTerms> {
    let cdim = row.mu.len();
    let s = &draw.subset;
    let r = complement(s, cdim);
    let (ns, nr) = (s.len(), r.len());
    let samples = draw.uniforms.len() / nr.max(1);
    if draw.normals.len() != cdim || samples == 0 || draw.uniforms.len() != samples * nr {
        return Err(Error::ShapeMismatch("mask draw does not match the model".into()));
    }

    let sigma_ss = DMatrix::from_fn(ns, ns, |a, b| sigma[(s[a], s[b])]);
    let chol_ss = cholesky(&sigma_ss)?;
    let inv_ss = {
        let half = chol_ss
            .solve_lower_triangular(&DMatrix::identity(ns, ns))
            .expect("positive pivots");
        half.transpose() * half
    };
    let sigma_rs = DMatrix::from_fn(nr, ns, |a, b| sigma[(r[a], s[b])]);
    let gain = &sigma_rs * &inv_ss;

    let eps = DVector::from_column_slice(&draw.normals);
    let eta = DVector::from_column_slice(&row.mu) + l * &eps;
    let delta = DVector::from_fn(ns, |b, _| eta_s[b] - eta[s[b]]);
    let shift = &gain * &delta;
    let eta_r: Vec<f64> = (0..nr).map(|a| eta[r[a]] + shift[a]).collect();

    let mut concept = 0.0;
    for (b, &i) in s.iter().enumerate() {
        concept += bce_with_logit(f64::from(c[i]), eta_s[b]);
    }
    let sig_r: Vec<f64> = eta_r.iter().map(|&e| sigmoid(e)).collect();
    for (a, &i) in r.iter().enumerate() {
        concept += bce_with_logit(f64::from(c[i]), eta_r[a]);
    }

    let f = DenseRows::from_linear(bundle.target_head());
    let kdim = bundle.classes();
    let mut input: Vec<f64> = c.iter().map(|&v| f64::from(v)).collect();
    let mut probs = vec![0.0; samples * kdim];
    for m in 0..samples {
        let u = &draw.uniforms[m * nr..(m + 1) * nr];
        for (a, &i) in r.iter().enumerate() {
            input[i] = match cfg.target_path {
                TargetPath::StraightThrough => f64::from(u8::from(u[a] < sig_r[a])),
                TargetPath::Soft => sig_r[a],
            };
        }
        let p = &mut probs[m * kdim..(m + 1) * kdim];
        f.apply_into(&input, p);
        softmax_in_place(p);
    }
    let mut pbar = vec![0.0; kdim];
    for m in 0..samples {
        for (k, pb) in pbar.iter_mut().enumerate() {
            *pb += probs[m * kdim + k];
        }
    }
    pbar.iter_mut().for_each(|v| *v /= samples as f64);
    let pbar_y = pbar[y];
    let target_loss = -pbar_y.max(f64::MIN_POSITIVE).ln();
    let hits = ns + r.iter().zip(&sig_r).filter(|(&i, &p)| (p > 0.5) == (c[i] == 1)).count();
    let concept_acc = hits as f64 / cdim as f64;
    let target_hit = argmax(&pbar) == y;
    if !want_grad {
        return Ok(MaskTerms {
            concept,
            target: target_loss,
            dl: None,
            concept_acc,
            target_hit,
        });
    }

    // gradient with respect to η̃_R
    let scale = 1.0 / (samples as f64 * pbar_y.max(f64::MIN_POSITIVE));
    let mut g_c = vec![0.0; cdim];
    if cfg.lambda1 != 0.0 {
        let mut ds = vec![0.0; kdim];
        for m in 0..samples {
            target_logit_grad(&probs[m * kdim..(m + 1) * kdim], y, scale, &mut ds);
            f.add_transpose(&ds, &mut g_c);
        }
    }
    let g_r = DVector::from_fn(nr, |a, _| {
        let i = r[a];
        let sg = sig_r[a];
        (sg - f64::from(c[i])) + cfg.lambda1 * g_c[i] * sg * (1.0 - sg)
    });

    // through η = μ + Lε: v_R = g_R, v_S = −Kᵀ g_R
    let v_s = -(gain.transpose() * &g_r);
    let mut v = DVector::zeros(cdim);
    for (a, &i) in r.iter().enumerate() {
        v[i] = g_r[a];
    }
    for (b, &i) in s.iter().enumerate() {
        v[i] = v_s[b];
    }
    let mut dl = &v * eps.transpose();

    // through K = Σ_RS Σ_SS⁻¹
    let g_k = &g_r * delta.transpose();
    let g_rs = &g_k * &inv_ss;
    let g_ss = -(gain.transpose() * &g_rs);
    let mut g_sigma = DMatrix::zeros(cdim, cdim);
    for (a, &i) in r.iter().enumerate() {
        for (b, &j) in s.iter().enumerate() {
            g_sigma[(i, j)] = g_rs[(a, b)];
        }
    }
    for (a, &i) in s.iter().enumerate() {
        for (b, &j) in s.iter().enumerate() {
            g_sigma[(i, j)] = g_ss[(a, b)];
        }
    }
    dl += (&g_sigma + g_sigma.transpose()) * l;
    dl.fill_upper_triangle(0.0, 1);
    Ok(MaskTerms {
        concept,
        target: target_loss,
        dl: Some(dl),
        concept_acc,
        target_hit,
    })
}

/// Average loss over the given masks, with the head gradient on request.
/// Also returns post-intervention concept and target accuracy averaged over
/// the masks.
#[allow(clippy::too_many_arguments)]
pub(crate) fn row_intervention_loss(
    bundle: &ModelBundle,
    row: &FrozenRow,
    c: &[u8],
    y: usize,
    icfg: &InterventionTrainingConfig,
    cfg: &LossConfig,
    draws: &[MaskDraw],
    want_grad: bool,
) -> Result<(LossBreakdown, Option<Vec<f64>>, (f64, f64))> {
    let cdim = bundle.concepts();
    check_targets(c, y, cdim, bundle.classes())?;
    icfg.validate(cdim)?;
    if draws.is_empty() {
        return Err(invalid_config("masks", "need at least one mask draw"));
    }
    let head = bundle.covariance_head().ok_or(Error::WrongMode {
        expected: "stochastic",
        got: bundle.mode().name(),
    })?;
    let raw = head_raw(head, &row.z)?;
    let l = unpack_factor(&raw, cdim);
    let sigma = &l * l.transpose();
    let dist = ConceptDistribution::new(DVector::from_column_slice(&row.mu), l.clone())?;

    let mut concept = 0.0;
    let mut target = 0.0;
    let mut concept_acc = 0.0;
    let mut target_acc = 0.0;
    let mut dl_sum = want_grad.then(|| DMatrix::zeros(cdim, cdim));
    for draw in draws {
        let values: Vec<u8> = draw.subset.iter().map(|&i| c[i]).collect();
        // strategy output is treated as a constant
        let eta_s = apply_strategy(&icfg.strategy, &draw.subset, &values, &dist, bundle.percentiles())?;
        let t = mask_terms(bundle, row, &l, &sigma, c, y, &eta_s, cfg, draw, want_grad)?;
        concept += t.concept;
        target += t.target;
        concept_acc += t.concept_acc;
        target_acc += f64::from(u8::from(t.target_hit));
        if let (Some(acc), Some(d)) = (dl_sum.as_mut(), t.dl) {
            *acc += d;
        }
    }
    let n = draws.len() as f64;
    let want_reg_grad = want_grad && cfg.lambda2 != 0.0;
    let (reg, dl_reg) = regularizer_terms(&l, cfg.use_absolute_reg, want_reg_grad);
    let breakdown = LossBreakdown::new(concept / n, target / n, reg, cfg);
    let grad = dl_sum.map(|mut dl| {
        dl /= n;
        if let Some(r) = dl_reg {
            dl += r * cfg.lambda2;
        }
        let mut out = vec![0.0; head.num_params()];
        chain_to_params(head, &raw, &row.z, &dl, 1.0, &mut out);
        out
    });
    Ok((breakdown, grad, (concept_acc / n, target_acc / n)))
}

/// Draws `N` masks from `rng`, one after another.
pub fn draw_masks<R: Rng + ?Sized>(
    rng: &mut R,
    concepts: usize,
    icfg: &InterventionTrainingConfig,
    samples: usize,
) -> Vec<MaskDraw> {
    let size = icfg.mask_size_for(concepts);
    (0..icfg.masks)
        .map(|_| MaskDraw::draw(rng, concepts, size, samples))
        .collect()
}

/// Loss after `N` random interventions, averaged over the masks.
pub fn intervention_training_loss<R: Rng + ?Sized>(
    bundle: &ModelBundle,
    x: &[f64],
    c: &[u8],
    y: usize,
    icfg: &InterventionTrainingConfig,
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    icfg.validate(bundle.concepts())?;
    let row = FrozenRow::compute(bundle, x)?;
    let draws = draw_masks(rng, bundle.concepts(), icfg, cfg.samples);
    Ok(row_intervention_loss(bundle, &row, c, y, icfg, cfg, &draws, false)?.0)
}

/// Loss and head gradient for explicit mask draws.
pub fn intervention_loss_and_gradient(
    bundle: &ModelBundle,
    x: &[f64],
    c: &[u8],
    y: usize,
    icfg: &InterventionTrainingConfig,
    cfg: &LossConfig,
    draws: &[MaskDraw],
) -> Result<(LossBreakdown, Vec<f64>)> {
    cfg.validate()?;
    let row = FrozenRow::compute(bundle, x)?;
    let (b, g, _) = row_intervention_loss(bundle, &row, c, y, icfg, cfg, draws, true)?;
    Ok((b, g.expect("gradient requested")))
}
