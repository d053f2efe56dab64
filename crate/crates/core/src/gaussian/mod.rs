//! Multivariate normal machinery over concept logits.
//!
//! A [`ConceptDistribution`] keeps the covariance only as its lower Cholesky
//! factor `L` (`Σ = L·Lᵀ`). Every operation that needs `Σ⁻¹` works through
//! triangular solves against `L` or against the factor of a sub-block.

mod chi2;

pub use chi2::{chi2_cdf, chi2_quantile, ln_gamma, regularized_gamma_p};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-10;
const PIVOT_TOL: f64 = 1e-12;
const JITTER_SCALE: f64 = 1e-10;
const JITTER_ATTEMPTS: usize = 3;

/// Cholesky factorization of a symmetric positive-definite matrix.
///
/// The input is symmetrized before factoring. Asymmetry beyond `1e-10`
/// (relative to the largest entry) is rejected, as is any pivot `≤ 1e-12`.
pub fn cholesky(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = sigma.nrows();
    if sigma.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: sigma.ncols(),
        });
    }
    let scale = sigma.amax().max(1.0);
    let mut asym = 0.0f64;
    for i in 0..n {
        for j in 0..i {
            asym = asym.max((sigma[(i, j)] - sigma[(j, i)]).abs());
        }
    }
    if asym > SYMMETRY_TOL * scale {
        return Err(Error::NotSymmetric(asym));
    }

    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut pivot = 0.5 * (sigma[(j, j)] + sigma[(j, j)]);
        for k in 0..j {
            pivot -= l[(j, k)] * l[(j, k)];
        }
        if !(pivot > PIVOT_TOL) {
            return Err(Error::NotPositiveDefinite { index: j, pivot });
        }
        let d = pivot.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let mut s = 0.5 * (sigma[(i, j)] + sigma[(j, i)]);
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(l)
}

/// Gaussian over concept logits, `η ~ N(μ, L·Lᵀ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptDistribution {
    mean: DVector<f64>,
    chol: DMatrix<f64>,
}

/// Distribution of the non-intervened logits after conditioning.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalResult {
    /// Indices of the remaining coordinates, strictly increasing.
    pub kept_indices: Vec<usize>,
    pub dist: ConceptDistribution,
}

impl ConceptDistribution {
    /// Builds a distribution from a mean and a lower-triangular factor with
    /// strictly positive diagonal.
    pub fn new(mean: DVector<f64>, chol: DMatrix<f64>) -> Result<Self> {
        let c = mean.len();
        if c == 0 {
            return Err(Error::DimensionMismatch {
                expected: 1,
                got: 0,
            });
        }
        if chol.nrows() != c || chol.ncols() != c {
            return Err(Error::DimensionMismatch {
                expected: c,
                got: chol.nrows(),
            });
        }
        for i in 0..c {
            if !(chol[(i, i)] > 0.0) || !chol[(i, i)].is_finite() {
                return Err(Error::NotPositiveDefinite {
                    index: i,
                    pivot: chol[(i, i)],
                });
            }
            for j in (i + 1)..c {
                if chol[(i, j)] != 0.0 {
                    return Err(Error::ShapeMismatch(format!(
                        "factor is not lower triangular at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Self { mean, chol })
    }

    pub fn from_covariance(mean: DVector<f64>, sigma: &DMatrix<f64>) -> Result<Self> {
        if sigma.nrows() != mean.len() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                got: sigma.nrows(),
            });
        }
        let chol = cholesky(sigma)?;
        Self::new(mean, chol)
    }

    /// `N(0, I)` of the given dimension.
    pub fn standard(dim: usize) -> Self {
        Self {
            mean: DVector::zeros(dim),
            chol: DMatrix::identity(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn chol(&self) -> &DMatrix<f64> {
        &self.chol
    }

    /// Materializes `Σ = L·Lᵀ`.
    pub fn covariance(&self) -> DMatrix<f64> {
        &self.chol * self.chol.transpose()
    }

    /// `Σ[rows, cols]` computed from rows of the factor.
    pub fn covariance_block(&self, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), cols.len(), |a, b| {
            let (i, j) = (rows[a], cols[b]);
            let upto = i.min(j);
            let mut s = 0.0;
            for k in 0..=upto {
                s += self.chol[(i, k)] * self.chol[(j, k)];
            }
            s
        })
    }

    /// Reparameterized draw `μ + L·noise`.
    pub fn sample(&self, noise: &[f64]) -> Result<DVector<f64>> {
        if noise.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: noise.len(),
            });
        }
        let mut out = DVector::zeros(self.dim());
        self.sample_into(noise, out.as_mut_slice());
        Ok(out)
    }

    /// Allocation-free variant of [`sample`](Self::sample) for inner loops.
    pub fn sample_into(&self, noise: &[f64], out: &mut [f64]) {
        debug_assert_eq!(noise.len(), self.dim());
        debug_assert_eq!(out.len(), self.dim());
        for (i, o) in out.iter_mut().enumerate() {
            let mut s = self.mean[i];
            for (j, n) in noise.iter().enumerate().take(i + 1) {
                s += self.chol[(i, j)] * n;
            }
            *o = s;
        }
    }

    /// Exact log-density using the factor; no explicit inverse.
    pub fn log_density(&self, point: &[f64]) -> Result<f64> {
        let c = self.dim();
        if point.len() != c {
            return Err(Error::DimensionMismatch {
                expected: c,
                got: point.len(),
            });
        }
        let mut z = vec![0.0; c];
        for i in 0..c {
            let mut s = point[i] - self.mean[i];
            for (k, zk) in z.iter().enumerate().take(i) {
                s -= self.chol[(i, k)] * zk;
            }
            z[i] = s / self.chol[(i, i)];
        }
        let quad: f64 = z.iter().map(|v| v * v).sum();
        let log_det: f64 = (0..c).map(|i| self.chol[(i, i)].ln()).sum();
        Ok(-0.5 * quad - log_det - 0.5 * c as f64 * (2.0 * std::f64::consts::PI).ln())
    }

    /// Squared Mahalanobis distance `(x − μ)ᵀ Σ⁻¹ (x − μ)`.
    pub fn mahalanobis_sq(&self, point: &[f64]) -> Result<f64> {
        let c = self.dim();
        if point.len() != c {
            return Err(Error::DimensionMismatch {
                expected: c,
                got: point.len(),
            });
        }
        let diff = DVector::from_fn(c, |i, _| point[i] - self.mean[i]);
        let z = self
            .chol
            .solve_lower_triangular(&diff)
            .expect("factor has positive diagonal");
        Ok(z.norm_squared())
    }

    /// `Σ⁻¹ = L⁻ᵀ L⁻¹`.
    pub fn precision(&self) -> DMatrix<f64> {
        let c = self.dim();
        let inv_l = self
            .chol
            .solve_lower_triangular(&DMatrix::identity(c, c))
            .expect("factor has positive diagonal");
        inv_l.transpose() * inv_l
    }

    /// Sum of the off-diagonal entries of `Σ⁻¹`, of their absolute values
    /// when `use_absolute` is set.
    pub fn precision_offdiag_sum(&self, use_absolute: bool) -> f64 {
        let p = self.precision();
        let c = self.dim();
        let mut s = 0.0;
        for i in 0..c {
            for j in 0..c {
                if i != j {
                    s += if use_absolute { p[(i, j)].abs() } else { p[(i, j)] };
                }
            }
        }
        s
    }

    /// Marginal over `indices` (in the given order).
    pub fn marginal(&self, indices: &[usize]) -> Result<ConceptDistribution> {
        validate_indices(indices, self.dim())?;
        if indices.is_empty() {
            return Err(Error::InvalidIndexSet("empty marginal".into()));
        }
        let mean = DVector::from_fn(indices.len(), |a, _| self.mean[indices[a]]);
        let block = self.covariance_block(indices, indices);
        ConceptDistribution::from_covariance(mean, &block)
    }

    /// Conditions on `η[intervened] = values`.
    ///
    /// `values` is aligned with `intervened`, which may be in any order. An
    /// empty set returns the distribution unchanged; conditioning on every
    /// coordinate is rejected with [`Error::EmptyRemainder`].
    pub fn condition(&self, intervened: &[usize], values: &[f64]) -> Result<ConditionalResult> {
        let c = self.dim();
        if values.len() != intervened.len() {
            return Err(Error::DimensionMismatch {
                expected: intervened.len(),
                got: values.len(),
            });
        }
        validate_indices(intervened, c)?;
        if intervened.is_empty() {
            return Ok(ConditionalResult {
                kept_indices: (0..c).collect(),
                dist: self.clone(),
            });
        }
        if intervened.len() == c {
            return Err(Error::EmptyRemainder);
        }
        let kept = complement(intervened, c);

        let sigma_ss = self.covariance_block(intervened, intervened);
        let chol_ss = cholesky(&sigma_ss)?;
        let sigma_sr = self.covariance_block(intervened, &kept);

        // gain = Σ_SS⁻¹ Σ_SR
        let half = chol_ss
            .solve_lower_triangular(&sigma_sr)
            .expect("positive pivots");
        let gain = chol_ss
            .transpose()
            .solve_upper_triangular(&half)
            .expect("positive pivots");

        let shift = DVector::from_fn(intervened.len(), |a, _| values[a] - self.mean[intervened[a]]);
        let mean = DVector::from_fn(kept.len(), |r, _| {
            let mut s = self.mean[kept[r]];
            for a in 0..intervened.len() {
                s += gain[(a, r)] * shift[a];
            }
            s
        });

        let sigma_rr = self.covariance_block(&kept, &kept);
        let mut cond = sigma_rr - sigma_sr.transpose() * &gain;
        symmetrize(&mut cond);
        let chol = factor_with_jitter(&cond)?;
        Ok(ConditionalResult {
            kept_indices: kept,
            dist: ConceptDistribution { mean, chol },
        })
    }
}

/// Indices in `0..dim` not present in `taken`, increasing.
pub fn complement(taken: &[usize], dim: usize) -> Vec<usize> {
    let mut mask = vec![false; dim];
    for &i in taken {
        mask[i] = true;
    }
    (0..dim).filter(|&i| !mask[i]).collect()
}

fn validate_indices(indices: &[usize], dim: usize) -> Result<()> {
    let mut seen = vec![false; dim];
    for &i in indices {
        if i >= dim {
            return Err(Error::InvalidIndexSet(format!("index {i} out of range for dim {dim}")));
        }
        if seen[i] {
            return Err(Error::InvalidIndexSet(format!("index {i} repeated")));
        }
        seen[i] = true;
    }
    Ok(())
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

fn factor_with_jitter(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = sigma.nrows();
    let jitter = JITTER_SCALE * sigma.trace().abs() / n as f64;
    let mut last = None;
    for attempt in 0..=JITTER_ATTEMPTS {
        let mut m = sigma.clone();
        if attempt > 0 {
            for i in 0..n {
                m[(i, i)] += attempt as f64 * jitter;
            }
        }
        match cholesky(&m) {
            Ok(l) => return Ok(l),
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

#[cfg(test)]
mod tests {
    use super::*;

    macro_rules! assert_close {
        ($a:expr, $b:expr, $tol:expr) => {{
            let (a, b): (f64, f64) = ($a, $b);
            assert!((a - b).abs() <= $tol, "{} vs {} (tol {})", a, b, $tol);
        }};
    }

    #[test]
    fn cholesky_of_identity_is_identity() {
        let l = cholesky(&DMatrix::identity(3, 3)).unwrap();
        assert_eq!(l, DMatrix::identity(3, 3));
    }

    #[test]
    fn cholesky_two_by_two() {
        let s = DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 5.0]);
        let l = cholesky(&s).unwrap();
        assert_eq!(l, DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 1.0, 2.0]));
    }

    #[test]
    fn cholesky_rejects_indefinite_and_asymmetric() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(cholesky(&s), Err(Error::NotPositiveDefinite { index: 1, .. })));
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(matches!(cholesky(&s), Err(Error::NotSymmetric(_))));
        let s = DMatrix::zeros(2, 2);
        assert!(matches!(cholesky(&s), Err(Error::NotPositiveDefinite { index: 0, .. })));
    }

    #[test]
    fn sampling_examples() {
        let d = ConceptDistribution::new(
            DVector::from_vec(vec![1.0, -2.0]),
            DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 1.0, 3.0]),
        )
        .unwrap();
        assert_eq!(d.sample(&[0.0, 0.0]).unwrap().as_slice(), &[1.0, -2.0]);
        let s = ConceptDistribution::standard(3);
        assert_eq!(s.sample(&[1.0, 0.0, 0.0]).unwrap().as_slice(), &[1.0, 0.0, 0.0]);
        assert!(matches!(s.sample(&[1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn scalar_conditioning() {
        let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let d = ConceptDistribution::from_covariance(DVector::zeros(2), &sigma).unwrap();
        let r = d.condition(&[0], &[2.0]).unwrap();
        assert_eq!(r.kept_indices, vec![1]);
        assert_close!(r.dist.mean()[0], 1.0, 1e-14);
        assert_close!(r.dist.covariance()[(0, 0)], 0.75, 1e-14);
    }

    #[test]
    fn empty_conditioning_is_identity_and_full_is_rejected() {
        let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let d = ConceptDistribution::from_covariance(DVector::from_vec(vec![0.3, 0.1]), &sigma).unwrap();
        let r = d.condition(&[], &[]).unwrap();
        assert_eq!(r.dist, d);
        assert_eq!(r.kept_indices, vec![0, 1]);
        assert_eq!(d.condition(&[0, 1], &[0.0, 0.0]), Err(Error::EmptyRemainder));
        assert!(matches!(d.condition(&[0, 0], &[0.0, 0.0]), Err(Error::InvalidIndexSet(_))));
        assert!(matches!(d.condition(&[5], &[0.0]), Err(Error::InvalidIndexSet(_))));
    }

    #[test]
    fn log_density_examples() {
        for dim in 1..5 {
            let d = ConceptDistribution::standard(dim);
            let lp = d.log_density(&vec![0.0; dim]).unwrap();
            assert_close!(lp, -(dim as f64) / 2.0 * (2.0 * std::f64::consts::PI).ln(), 1e-14);
        }
        let d = ConceptDistribution::from_covariance(
            DVector::from_vec(vec![1.0]),
            &DMatrix::from_element(1, 1, 4.0),
        )
        .unwrap();
        let lp = d.log_density(&[3.0]).unwrap();
        let expected = -0.5 * (2.0 * std::f64::consts::PI * 4.0).ln() - 0.5;
        assert_close!(lp, expected, 1e-14);
    }

    #[test]
    fn precision_offdiag_examples() {
        assert_eq!(ConceptDistribution::standard(4).precision_offdiag_sum(true), 0.0);
        let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let d = ConceptDistribution::from_covariance(DVector::zeros(2), &sigma).unwrap();
        assert_close!(d.precision_offdiag_sum(false), -4.0 / 3.0, 1e-14);
        assert_close!(d.precision_offdiag_sum(true), 4.0 / 3.0, 1e-14);
    }

    #[test]
    fn conditional_covariance_ignores_values() {
        let sigma = DMatrix::from_row_slice(3, 3, &[2.0, 0.6, 0.3, 0.6, 1.5, -0.2, 0.3, -0.2, 1.0]);
        let d = ConceptDistribution::from_covariance(DVector::from_vec(vec![0.1, 0.2, 0.3]), &sigma)
            .unwrap();
        let a = d.condition(&[1], &[4.0]).unwrap();
        let b = d.condition(&[1], &[-7.5]).unwrap();
        assert_eq!(a.dist.chol(), b.dist.chol());
        assert_ne!(a.dist.mean(), b.dist.mean());
    }

    #[test]
    fn new_rejects_bad_factors() {
        let upper = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(ConceptDistribution::new(DVector::zeros(2), upper).is_err());
        let neg = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, -1.0]);
        assert!(ConceptDistribution::new(DVector::zeros(2), neg).is_err());
    }
}
