//! Most likely intervened logits inside a confidence ellipsoid.
//!
//! Maximizes `Σ log σ(sᵢ ηᵢ)` with `sᵢ = 2cᵢ − 1` subject to
//! `(η − μ)ᵀ Σ⁻¹ (η − μ) ≤ χ²_{d,1−α}` and `sᵢ (ηᵢ − μᵢ) ≥ 0`.
//!
//! In `uᵢ = sᵢ (ηᵢ − μᵢ)` the objective is increasing in every coordinate,
//! so the ellipsoid constraint is active. For a multiplier `λ` the penalized
//! problem `max Σ φᵢ(uᵢ) − λ/2·uᵀPu` over `u ≥ 0` is strictly concave and
//! solved by projected Newton; `uᵀPu` decreases in `λ`, and a root find on
//! `ln λ` puts the solution on the boundary.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, Error, Result};
use crate::gaussian::{chi2_quantile, ConceptDistribution};
use crate::nn::{log_sigmoid, sigmoid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    /// Root-finding steps on the multiplier.
    pub max_iters: usize,
    /// Relative tolerance on the Mahalanobis radius.
    pub tol: f64,
    /// Projected Newton steps per multiplier.
    pub newton_iters: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            max_iters: 200,
            tol: 1e-12,
            newton_iters: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceSolution {
    pub logits: Vec<f64>,
    /// False when the iteration budget ran out; `logits` is then the last
    /// iterate pulled back inside the region.
    pub converged: bool,
    pub iterations: usize,
}

/// Feasibility slack accepted by [`is_feasible`].
pub const FEASIBILITY_TOL: f64 = 1e-8;

/// Penalized problem in the sign-flipped coordinates.
struct Penalized {
    /// `sᵢ μᵢ`
    a: DVector<f64>,
    /// `S Σ⁻¹ S`
    p: DMatrix<f64>,
}

impl Penalized {
    fn value(&self, u: &DVector<f64>, lambda: f64) -> f64 {
        let fit: f64 = (0..u.len()).map(|i| log_sigmoid(self.a[i] + u[i])).sum();
        fit - 0.5 * lambda * u.dot(&(&self.p * u))
    }

    fn radius_sq(&self, u: &DVector<f64>) -> f64 {
        u.dot(&(&self.p * u))
    }

    /// Maximizes over `u ≥ 0` starting from `u`.
    fn solve(&self, u: &mut DVector<f64>, lambda: f64, iters: usize) {
        let d = u.len();
        for _ in 0..iters {
            let pu = &self.p * &*u;
            let grad = DVector::from_fn(d, |i, _| sigmoid(-(self.a[i] + u[i])) - lambda * pu[i]);
            let free: Vec<usize> = (0..d).filter(|&i| !(u[i] <= 0.0 && grad[i] <= 0.0)).collect();
            if free.is_empty() {
                return;
            }
            let h = DMatrix::from_fn(free.len(), free.len(), |r, c| {
                let (i, j) = (free[r], free[c]);
                let curv = if i == j {
                    let z = self.a[i] + u[i];
                    sigmoid(z) * sigmoid(-z)
                } else {
                    0.0
                };
                lambda * self.p[(i, j)] + curv
            });
            let g_free = DVector::from_fn(free.len(), |r, _| grad[free[r]]);
            let Some(chol) = h.cholesky() else { return };
            let step = chol.solve(&g_free);

            let base = self.value(u, lambda);
            let mut t = 1.0;
            let mut accepted = None;
            for _ in 0..60 {
                let mut cand = u.clone();
                for (r, &i) in free.iter().enumerate() {
                    cand[i] = (u[i] + t * step[r]).max(0.0);
                }
                let gain: f64 = free.iter().map(|&i| grad[i] * (cand[i] - u[i])).sum();
                if self.value(&cand, lambda) >= base + 1e-4 * gain {
                    accepted = Some(cand);
                    break;
                }
                t *= 0.5;
            }
            let Some(cand) = accepted else { return };
            let moved = (&cand - &*u).amax();
            *u = cand;
            if moved <= 1e-14 * u.amax().max(1.0) {
                return;
            }
        }
    }
}

/// True if `logits` lies in the region up to [`FEASIBILITY_TOL`].
pub fn is_feasible(logits: &[f64], values: &[u8], dist: &ConceptDistribution, alpha: f64) -> Result<bool> {
    let q = region_radius_sq(dist.dim(), alpha)?;
    let m = dist.mahalanobis_sq(logits)?;
    let signs_ok = values
        .iter()
        .zip(logits)
        .enumerate()
        .all(|(i, (&c, &eta))| {
            let d = eta - dist.mean()[i];
            if c == 1 {
                d >= -FEASIBILITY_TOL
            } else {
                d <= FEASIBILITY_TOL
            }
        });
    Ok(signs_ok && m <= q + FEASIBILITY_TOL)
}

/// `χ²_{d,1−α}`, zero at `α = 1`.
pub fn region_radius_sq(d: usize, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(invalid_config("alpha", "must lie in (0, 1]"));
    }
    if alpha == 1.0 {
        return Ok(0.0);
    }
    chi2_quantile(d, 1.0 - alpha)
}

/// Solves the constrained program for the marginal `dist` over the
/// intervened concepts, with `values` aligned to its coordinates.
pub fn solve_confidence_region(
    values: &[u8],
    dist: &ConceptDistribution,
    alpha: f64,
    settings: &SolverSettings,
) -> Result<ConfidenceSolution> {
    let d = dist.dim();
    if values.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: values.len(),
        });
    }
    if settings.max_iters == 0 || settings.newton_iters == 0 || !(settings.tol > 0.0) {
        return Err(invalid_config("solver", "max_iters, newton_iters and tol must be positive"));
    }
    let q = region_radius_sq(d, alpha)?;
    let mean = dist.mean().clone();
    if q == 0.0 {
        return Ok(ConfidenceSolution {
            logits: mean.as_slice().to_vec(),
            converged: true,
            iterations: 0,
        });
    }
    let s: Vec<f64> = values.iter().map(|&v| if v == 1 { 1.0 } else { -1.0 }).collect();
    let precision = dist.precision();
    let prob = Penalized {
        a: DVector::from_fn(d, |i, _| s[i] * mean[i]),
        p: DMatrix::from_fn(d, d, |i, j| s[i] * s[j] * precision[(i, j)]),
    };

    // excess(ℓ) = uᵀPu / q − 1 at λ = e^ℓ, decreasing in ℓ
    let mut u = DVector::zeros(d);
    let excess = |ell: f64, u: &mut DVector<f64>| {
        prob.solve(u, ell.exp(), settings.newton_iters);
        prob.radius_sq(u) / q - 1.0
    };
    let mut iterations = 0;
    let mut ell_a = 0.0;
    let mut f_a = excess(ell_a, &mut u);
    let mut u_a = u.clone();
    let step = if f_a > 0.0 { 2.0 } else { -2.0 };
    let (mut ell_b, mut f_b, mut u_b) = (ell_a, f_a, u_a.clone());
    while (f_b > 0.0) == (f_a > 0.0) && iterations < settings.max_iters {
        iterations += 1;
        (ell_a, f_a, u_a) = (ell_b, f_b, u_b.clone());
        ell_b += step;
        f_b = excess(ell_b, &mut u);
        u_b = u.clone();
    }
    // Illinois regula falsi with a bisection guard
    let mut converged = false;
    let mut side = 0i8;
    while iterations < settings.max_iters {
        if f_a.abs() <= settings.tol || f_b.abs() <= settings.tol || (ell_b - ell_a).abs() < 1e-15 {
            converged = true;
            break;
        }
        iterations += 1;
        let mut ell = ell_b - f_b * (ell_b - ell_a) / (f_b - f_a);
        let (lo, hi) = (ell_a.min(ell_b), ell_a.max(ell_b));
        if !(ell > lo && ell < hi) {
            ell = 0.5 * (lo + hi);
        }
        u = if (ell - ell_a).abs() < (ell - ell_b).abs() { u_a.clone() } else { u_b.clone() };
        let f = excess(ell, &mut u);
        if (f > 0.0) == (f_b > 0.0) {
            (ell_b, f_b, u_b) = (ell, f, u.clone());
            if side == 1 {
                f_a *= 0.5;
            }
            side = 1;
        } else {
            (ell_a, f_a, u_a) = (ell_b, f_b, u_b.clone());
            (ell_b, f_b, u_b) = (ell, f, u.clone());
            side = -1;
        }
    }
    let mut best = if f_a.abs() < f_b.abs() { u_a } else { u_b };
    // pull back inside; scaling keeps u ≥ 0
    let r = prob.radius_sq(&best);
    if r > q {
        best *= (q / r).sqrt() * (1.0 - 1e-14);
    }
    Ok(ConfidenceSolution {
        logits: (0..d).map(|i| mean[i] + s[i] * best[i]).collect(),
        converged,
        iterations,
    })
}
