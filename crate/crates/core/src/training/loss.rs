//! SCBM loss and its gradient with respect to the covariance head.
//!
//! The backbone is frozen, so everything here works on cached encoder
//! features `z` and mean logits `μ`. Gaussian noise is reparameterized
//! (`η = μ + L·ε`) and drawn up front, which makes the loss a deterministic
//! function of the covariance parameters for a fixed [`NoiseDraw`].

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, Error, Result};
use crate::model::{tri_index, tri_len, CovarianceHead, ModelBundle};
use crate::nn::{log_sum_exp, sigmoid, sigmoid_bce_parts, softmax_in_place, DenseRows, Linear};

/// How the target term differentiates through the Bernoulli draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetPath {
    /// Hard samples forward, `σ'(η)` backward.
    #[default]
    StraightThrough,
    /// `σ(η)` fed to the target head; exact gradients.
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Monte Carlo samples `M`.
    pub samples: usize,
    /// Penalize `|Σ⁻¹ᵢⱼ|` instead of the signed entries.
    pub use_absolute_reg: bool,
    pub target_path: TargetPath,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.01,
            samples: 100,
            use_absolute_reg: true,
            target_path: TargetPath::StraightThrough,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) {
            return Err(invalid_config("lambda1", "must be a nonnegative number"));
        }
        if !(self.lambda2 >= 0.0 && self.lambda2.is_finite()) {
            return Err(invalid_config("lambda2", "must be a nonnegative number"));
        }
        if self.samples == 0 {
            return Err(invalid_config("samples", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub concept_loss: f64,
    pub target_loss: f64,
    pub regularizer: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(concept_loss: f64, target_loss: f64, regularizer: f64, cfg: &LossConfig) -> Self {
        Self {
            concept_loss,
            target_loss,
            regularizer,
            total: concept_loss + cfg.lambda1 * target_loss + cfg.lambda2 * regularizer,
        }
    }

    /// Mean of the components; `total` is averaged too, so the identity
    /// still holds up to rounding.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut out = LossBreakdown::default();
        for b in items {
            out.concept_loss += b.concept_loss;
            out.target_loss += b.target_loss;
            out.regularizer += b.regularizer;
            out.total += b.total;
        }
        out.concept_loss /= n;
        out.target_loss /= n;
        out.regularizer /= n;
        out.total /= n;
        out
    }
}

/// Standard normals and uniforms for `M` samples of `C` concepts, drawn
/// sample by sample (`C` normals, then `C` uniforms).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub samples: usize,
    pub concepts: usize,
    pub normals: Vec<f64>,
    pub uniforms: Vec<f64>,
}

impl NoiseDraw {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, samples: usize, concepts: usize) -> Self {
        let mut normals = Vec::with_capacity(samples * concepts);
        let mut uniforms = Vec::with_capacity(samples * concepts);
        for _ in 0..samples {
            for _ in 0..concepts {
                normals.push(rng.sample(StandardNormal));
            }
            for _ in 0..concepts {
                uniforms.push(rng.random::<f64>());
            }
        }
        Self {
            samples,
            concepts,
            normals,
            uniforms,
        }
    }

    fn normal(&self, m: usize) -> &[f64] {
        &self.normals[m * self.concepts..(m + 1) * self.concepts]
    }

    fn uniform(&self, m: usize) -> &[f64] {
        &self.uniforms[m * self.concepts..(m + 1) * self.concepts]
    }
}

/// Cached frozen quantities for one row.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenRow {
    pub z: Vec<f64>,
    pub mu: Vec<f64>,
}

impl FrozenRow {
    pub fn compute(bundle: &ModelBundle, x: &[f64]) -> Result<Self> {
        let z = bundle.features(x)?;
        let mu = bundle.concept_head().apply(&z);
        Ok(Self { z, mu })
    }
}

pub(crate) fn check_targets(c: &[u8], y: usize, concepts: usize, classes: usize) -> Result<()> {
    if c.len() != concepts {
        return Err(Error::DimensionMismatch {
            expected: concepts,
            got: c.len(),
        });
    }
    if let Some(v) = c.iter().find(|&&v| v > 1) {
        return Err(Error::InvalidLabel(format!("concept value {v} is not binary")));
    }
    if y >= classes {
        return Err(Error::InvalidLabel(format!("class {y} out of range for {classes} classes")));
    }
    Ok(())
}

fn head_of(bundle: &ModelBundle) -> Result<&CovarianceHead> {
    bundle.covariance_head().ok_or(Error::WrongMode {
        expected: "stochastic",
        got: bundle.mode().name(),
    })
}

/// Raw packed head output for a row.
pub(crate) fn head_raw(head: &CovarianceHead, z: &[f64]) -> Result<Vec<f64>> {
    head.raw(Some(z))
}

/// `d(−ln p̄_y)/ds` for one sample's logits `s`, given its class
/// probabilities `p` and `scale = 1/(M p̄_y)`.
#[inline]
pub(crate) fn target_logit_grad(p: &[f64], y: usize, scale: f64, out: &mut [f64]) {
    let coef = p[y] * scale;
    for (k, (o, &pk)) in out.iter_mut().zip(p).enumerate() {
        *o = coef * (pk - if k == y { 1.0 } else { 0.0 });
    }
}

/// Loss of the plain paradigm with `d loss / dL` (lower triangle) when
/// `want_grad` is set. The regularizer is not included.
pub(crate) fn plain_terms(
    mu: &[f64],
    l: &DMatrix<f64>,
    c: &[u8],
    y: usize,
    target: &Linear,
    cfg: &LossConfig,
    noise: &NoiseDraw,
    want_grad: bool,
) -> (f64, f64, Option<DMatrix<f64>>, Vec<f64>, Vec<f64>) {
    let cdim = mu.len();
    let kdim = target.output_dim();
    let m_count = noise.samples;
    let f = DenseRows::from_linear(target);
    let mut packed = vec![0.0; tri_len(cdim)];
    for i in 0..cdim {
        for j in 0..=i {
            packed[tri_index(i, j)] = l[(i, j)];
        }
    }
    let cf: Vec<f64> = c.iter().map(|&v| f64::from(v)).collect();
    let mut eta = vec![0.0; cdim];
    let mut sigs = vec![0.0; m_count * cdim];
    let mut ells = vec![0.0; m_count];
    let mut probs = vec![0.0; m_count * kdim];
    let mut inputs = vec![0.0; cdim];
    let mut mean_sig = vec![0.0; cdim];
    for m in 0..m_count {
        let eps = noise.normal(m);
        let u = noise.uniform(m);
        for i in 0..cdim {
            let row = &packed[tri_index(i, 0)..=tri_index(i, i)];
            eta[i] = mu[i] + row.iter().zip(eps).map(|(a, b)| a * b).sum::<f64>();
        }
        let sig = &mut sigs[m * cdim..(m + 1) * cdim];
        // factors lie in (1, 2]; fold the product into the sum before overflow
        let mut ell = 0.0;
        let mut prod = 1.0;
        for i in 0..cdim {
            let (s, one_plus_e, rest) = sigmoid_bce_parts(cf[i], eta[i]);
            sig[i] = s;
            prod *= one_plus_e;
            if prod > 1e250 {
                ell -= prod.ln();
                prod = 1.0;
            }
            ell -= rest;
            mean_sig[i] += s;
            inputs[i] = match cfg.target_path {
                TargetPath::StraightThrough => f64::from(u8::from(u[i] < s)),
                TargetPath::Soft => s,
            };
        }
        ells[m] = ell - prod.ln();
        let p = &mut probs[m * kdim..(m + 1) * kdim];
        f.apply_into(&inputs, p);
        softmax_in_place(p);
    }
    mean_sig.iter_mut().for_each(|v| *v /= m_count as f64);
    let lse = log_sum_exp(&ells);
    let concept = -lse + (m_count as f64).ln();
    let mut pbar = vec![0.0; kdim];
    for p in probs.chunks_exact(kdim) {
        for (a, v) in pbar.iter_mut().zip(p) {
            *a += v;
        }
    }
    pbar.iter_mut().for_each(|v| *v /= m_count as f64);
    let target_loss = -pbar[y].max(f64::MIN_POSITIVE).ln();
    if !want_grad {
        return (concept, target_loss, None, mean_sig, pbar);
    }

    let mut dpacked = vec![0.0; packed.len()];
    let scale = 1.0 / (m_count as f64 * pbar[y].max(f64::MIN_POSITIVE));
    let mut ds = vec![0.0; kdim];
    let mut g_c = vec![0.0; cdim];
    for m in 0..m_count {
        let w = (ells[m] - lse).exp();
        let sig = &sigs[m * cdim..(m + 1) * cdim];
        g_c.iter_mut().for_each(|v| *v = 0.0);
        if cfg.lambda1 != 0.0 {
            target_logit_grad(&probs[m * kdim..(m + 1) * kdim], y, scale, &mut ds);
            f.add_transpose(&ds, &mut g_c);
        }
        let eps = noise.normal(m);
        for i in 0..cdim {
            let s = sig[i];
            // −d ell/dη = σ(η) − c, weighted by the softmax over samples
            let gi = w * (s - cf[i]) + cfg.lambda1 * g_c[i] * s * (1.0 - s);
            if gi == 0.0 {
                continue;
            }
            let row = &mut dpacked[tri_index(i, 0)..=tri_index(i, i)];
            for (d, e) in row.iter_mut().zip(eps) {
                *d += gi * e;
            }
        }
    }
    let mut dl = DMatrix::zeros(cdim, cdim);
    for i in 0..cdim {
        for j in 0..=i {
            dl[(i, j)] = dpacked[tri_index(i, j)];
        }
    }
    (concept, target_loss, Some(dl), mean_sig, pbar)
}

/// `Σᵢ≠ⱼ |Σ⁻¹ᵢⱼ|` (or the signed sum) and its gradient with respect to `L`.
pub(crate) fn regularizer_terms(l: &DMatrix<f64>, use_absolute: bool, want_grad: bool) -> (f64, Option<DMatrix<f64>>) {
    let c = l.nrows();
    let inv_l = l
        .solve_lower_triangular(&DMatrix::identity(c, c))
        .expect("factor has positive diagonal");
    let p = inv_l.transpose() * &inv_l;
    let mut value = 0.0;
    let mut h = DMatrix::zeros(c, c);
    for i in 0..c {
        for j in 0..c {
            if i == j {
                continue;
            }
            let v = p[(i, j)];
            if use_absolute {
                value += v.abs();
                h[(i, j)] = if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                };
            } else {
                value += v;
                h[(i, j)] = 1.0;
            }
        }
    }
    if !want_grad {
        return (value, None);
    }
    // dR/dΣ = −P H P, symmetric; dR/dL = 2 (dR/dΣ) L
    let g_sigma = -(&p * &h * &p);
    let mut dl = (g_sigma * l) * 2.0;
    dl.fill_upper_triangle(0.0, 1);
    (value, Some(dl))
}

/// Maps `d loss / dL` to the head's flat parameter layout and adds it into
/// `out`, scaled by `weight`.
pub(crate) fn chain_to_params(
    head: &CovarianceHead,
    raw: &[f64],
    z: &[f64],
    dl: &DMatrix<f64>,
    weight: f64,
    out: &mut [f64],
) {
    let c = dl.nrows();
    let mut draw = vec![0.0; tri_len(c)];
    for i in 0..c {
        for j in 0..i {
            draw[tri_index(i, j)] = dl[(i, j)];
        }
        let t = tri_index(i, i);
        draw[t] = dl[(i, i)] * sigmoid(raw[t]);
    }
    match head {
        CovarianceHead::Global { .. } => {
            for (o, d) in out.iter_mut().zip(&draw) {
                *o += weight * d;
            }
        }
        CovarianceHead::Amortized { map } => {
            let dz = map.input_dim();
            for (t, &d) in draw.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let wd = weight * d;
                for (j, &zj) in z.iter().enumerate() {
                    out[t * dz + j] += wd * zj;
                }
                out[draw.len() * dz + t] += wd;
            }
        }
    }
}

/// Loss of one row for fixed noise, plus the gradient over the covariance
/// head's parameters (same layout as [`CovarianceHead::params`]).
pub fn scbm_loss_and_gradient(
    bundle: &ModelBundle,
    x: &[f64],
    c: &[u8],
    y: usize,
    cfg: &LossConfig,
    noise: &NoiseDraw,
) -> Result<(LossBreakdown, Vec<f64>)> {
    cfg.validate()?;
    let row = FrozenRow::compute(bundle, x)?;
    let (b, g, _, _) = row_loss(bundle, &row, c, y, cfg, noise, true)?;
    Ok((b, g.expect("gradient requested")))
}

/// Loss of one row for fixed noise.
pub fn scbm_loss_with_noise(
    bundle: &ModelBundle,
    x: &[f64],
    c: &[u8],
    y: usize,
    cfg: &LossConfig,
    noise: &NoiseDraw,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    let row = FrozenRow::compute(bundle, x)?;
    Ok(row_loss(bundle, &row, c, y, cfg, noise, false)?.0)
}

/// Loss of one row with fresh noise from `rng`.
pub fn scbm_loss<R: Rng + ?Sized>(
    bundle: &ModelBundle,
    x: &[f64],
    c: &[u8],
    y: usize,
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let noise = NoiseDraw::draw(rng, cfg.samples, bundle.concepts());
    scbm_loss_with_noise(bundle, x, c, y, cfg, &noise)
}

/// Plain-paradigm loss on cached features. Also returns the mean sampled
/// concept probabilities and averaged class probabilities.
pub(crate) fn row_loss(
    bundle: &ModelBundle,
    row: &FrozenRow,
    c: &[u8],
    y: usize,
    cfg: &LossConfig,
    noise: &NoiseDraw,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<Vec<f64>>, Vec<f64>, Vec<f64>)> {
    check_targets(c, y, bundle.concepts(), bundle.classes())?;
    let head = head_of(bundle)?;
    if noise.concepts != bundle.concepts() || noise.samples == 0 {
        return Err(Error::DimensionMismatch {
            expected: bundle.concepts(),
            got: noise.concepts,
        });
    }
    let raw = head_raw(head, &row.z)?;
    let l = crate::model::unpack_factor(&raw, bundle.concepts());
    let (concept, target, dl_main, mean_sig, pbar) =
        plain_terms(&row.mu, &l, c, y, bundle.target_head(), cfg, noise, want_grad);
    let want_reg_grad = want_grad && cfg.lambda2 != 0.0;
    let (reg, dl_reg) = regularizer_terms(&l, cfg.use_absolute_reg, want_reg_grad);
    let breakdown = LossBreakdown::new(concept, target, reg, cfg);
    let grad = dl_main.map(|mut dl| {
        if let Some(r) = dl_reg {
            dl += r * cfg.lambda2;
        }
        let mut out = vec![0.0; head.num_params()];
        chain_to_params(head, &raw, &row.z, &dl, 1.0, &mut out);
        out
    });
    Ok((breakdown, grad, mean_sig, pbar))
}

/// Mean loss and mean gradient over a batch with per-row noise.
pub fn loss_gradient(
    bundle: &ModelBundle,
    rows: &[(&[f64], &[u8], usize)],
    cfg: &LossConfig,
    noises: &[NoiseDraw],
) -> Result<(LossBreakdown, Vec<f64>)> {
    cfg.validate()?;
    if rows.len() != noises.len() || rows.is_empty() {
        return Err(Error::ShapeMismatch(format!("{} rows for {} noise draws", rows.len(), noises.len())));
    }
    let head = head_of(bundle)?;
    let mut grad = vec![0.0; head.num_params()];
    let mut parts = Vec::with_capacity(rows.len());
    for (&(x, c, y), noise) in rows.iter().zip(noises) {
        let (b, g) = scbm_loss_and_gradient(bundle, x, c, y, cfg, noise)?;
        parts.push(b);
        for (a, v) in grad.iter_mut().zip(g) {
            *a += v;
        }
    }
    let n = rows.len() as f64;
    grad.iter_mut().for_each(|v| *v /= n);
    Ok((LossBreakdown::mean(&parts), grad))
}
