//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use pscbm::model::{tri_len, CovarianceHead, CovarianceKind};
use pscbm::nn::Linear;
use pscbm::{Mode, ModelBundle};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// `A·Aᵀ + d·I/4` for a Gaussian `A`: well conditioned SPD.
pub fn random_spd<R: Rng + ?Sized>(rng: &mut R, d: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| normal(rng));
    &a * a.transpose() + DMatrix::identity(d, d) * (d as f64 / 4.0)
}

pub fn random_vec<R: Rng + ?Sized>(rng: &mut R, d: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(d, |_, _| scale * normal(rng))
}

/// Random non-empty proper subset of `0..d`, sorted.
pub fn random_subset<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vec<usize> {
    loop {
        let s: Vec<usize> = (0..d).filter(|_| rng.random_bool(0.5)).collect();
        if !s.is_empty() && s.len() < d {
            return s;
        }
    }
}

/// Gaussian conditioning through an explicit dense inverse of `Σ_SS`.
pub fn dense_condition(
    mean: &DVector<f64>,
    sigma: &DMatrix<f64>,
    s: &[usize],
    values: &[f64],
) -> (Vec<usize>, DVector<f64>, DMatrix<f64>) {
    let d = mean.len();
    let r: Vec<usize> = (0..d).filter(|i| !s.contains(i)).collect();
    let block = |rows: &[usize], cols: &[usize]| DMatrix::from_fn(rows.len(), cols.len(), |a, b| sigma[(rows[a], cols[b])]);
    let inv = block(s, s).try_inverse().expect("invertible block");
    let k = block(&r, s) * inv;
    let diff = DVector::from_fn(s.len(), |b, _| values[b] - mean[s[b]]);
    let cond_mean = DVector::from_fn(r.len(), |a, _| mean[r[a]]) + &k * diff;
    let cond_cov = block(&r, &r) - &k * block(s, &r);
    (r, cond_mean, cond_cov)
}

/// `ln Γ(x)` by recurrence up to `x ≥ 10` and a Stirling series.
pub fn ln_gamma_stirling(mut x: f64) -> f64 {
    let mut shift = 0.0;
    while x < 10.0 {
        shift -= x.ln();
        x += 1.0;
    }
    let x2 = x * x;
    let series = 1.0 / (12.0 * x) - 1.0 / (360.0 * x * x2) + 1.0 / (1260.0 * x2 * x2 * x) - 1.0 / (1680.0 * x2 * x2 * x2 * x);
    shift + (x - 0.5) * x.ln() - x + 0.5 * (2.0 * std::f64::consts::PI).ln() + series
}

/// `P(χ²_d ≤ x)` by composite Simpson quadrature of the density after the
/// substitution `t = s²`, which removes the singularity at 0 for `d = 1`.
pub fn chi2_cdf_quadrature(d: usize, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let k = d as f64;
    let log_norm = -(k / 2.0) * 2f64.ln() - ln_gamma_stirling(k / 2.0) + 2f64.ln();
    // integrand 2·s^{k−1}·e^{−s²/2} / (2^{k/2} Γ(k/2))
    let g = |s: f64| {
        if s == 0.0 {
            if d == 1 {
                log_norm.exp()
            } else {
                0.0
            }
        } else {
            ((k - 1.0) * s.ln() - s * s / 2.0 + log_norm).exp()
        }
    };
    let upper = x.sqrt();
    let n = 20_000;
    let h = upper / n as f64;
    let mut sum = g(0.0) + g(upper);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        sum += w * g(i as f64 * h);
    }
    sum * h / 3.0
}

/// Quantile by bisection on [`chi2_cdf_quadrature`].
pub fn chi2_quantile_quadrature(d: usize, p: f64) -> f64 {
    let mut lo = 0.0;
    let mut hi = d as f64 + 20.0 * (d as f64).sqrt() + 20.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if chi2_cdf_quadrature(d, mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-11 {
            break;
        }
    }
    0.5 * (lo + hi)
}

pub fn random_linear<R: Rng + ?Sized>(rng: &mut R, input: usize, output: usize, scale: f64) -> Linear {
    let mut l = Linear::zeros(input, output);
    for v in l.weight.iter_mut() {
        *v = scale * normal(rng);
    }
    for v in l.bias.iter_mut() {
        *v = 0.5 * scale * normal(rng);
    }
    l
}

/// PSCBM bundle with random backbone and a random (non-identity) head.
pub fn random_pscbm<R: Rng + ?Sized>(
    rng: &mut R,
    d_x: usize,
    d_z: usize,
    c: usize,
    k: usize,
    kind: CovarianceKind,
) -> ModelBundle {
    let enc = random_linear(rng, d_x, d_z, 0.5);
    let g = random_linear(rng, d_z, c, 0.5);
    let f = random_linear(rng, c, k, 1.0);
    let mut head = CovarianceHead::identity(kind, c, d_z);
    let mut params = head.params();
    for v in params.iter_mut() {
        *v += 0.3 * normal(rng);
    }
    if kind == CovarianceKind::Amortized {
        // keep the amortized map small so off-diagonals stay moderate
        let bias_start = d_z * tri_len(c);
        for v in params[..bias_start].iter_mut() {
            *v *= 0.3;
        }
    }
    head.set_params(&params);
    ModelBundle::new(enc, g, f, Some(head), Mode::Pscbm).expect("consistent shapes")
}

pub fn random_cbm<R: Rng + ?Sized>(rng: &mut R, d_x: usize, d_z: usize, c: usize, k: usize) -> ModelBundle {
    let enc = random_linear(rng, d_x, d_z, 0.5);
    let g = random_linear(rng, d_z, c, 0.5);
    let f = random_linear(rng, c, k, 1.0);
    ModelBundle::new(enc, g, f, None, Mode::Cbm).expect("consistent shapes")
}

pub fn random_input<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vec<f64> {
    (0..d).map(|_| normal(rng)).collect()
}

pub fn random_concepts<R: Rng + ?Sized>(rng: &mut R, c: usize) -> Vec<u8> {
    (0..c).map(|_| u8::from(rng.random_bool(0.5))).collect()
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
