use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::nn::{softplus, softplus_inv, Linear};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CovarianceKind {
    /// One `Σ` shared by every input.
    Global,
    /// `Σ(x)` predicted from encoder features.
    Amortized,
}

impl CovarianceKind {
    pub fn name(self) -> &'static str {
        match self {
            CovarianceKind::Global => "global",
            CovarianceKind::Amortized => "amortized",
        }
    }
}

/// Trainable predictor of the Cholesky factor of `Σ`.
///
/// Both kinds emit `C(C+1)/2` raw values laid out row by row over the lower
/// triangle. Diagonal entries go through softplus, off-diagonals are used
/// as-is.
#[derive(Debug, Clone, PartialEq)]
pub enum CovarianceHead {
    Global { raw: DVector<f64> },
    Amortized { map: Linear },
}

/// Number of packed lower-triangle entries for `c` concepts.
pub fn tri_len(c: usize) -> usize {
    c * (c + 1) / 2
}

/// Packed position of `(row, col)` with `col ≤ row`.
#[inline]
pub fn tri_index(row: usize, col: usize) -> usize {
    debug_assert!(col <= row);
    row * (row + 1) / 2 + col
}

fn concepts_from_len(len: usize) -> usize {
    // smallest c with c(c+1)/2 == len
    let mut c = 0;
    while tri_len(c) < len {
        c += 1;
    }
    c
}

impl CovarianceHead {
    /// Head whose decoded factor is the identity for every input.
    pub fn identity(kind: CovarianceKind, concepts: usize, feature_dim: usize) -> Self {
        let mut raw = DVector::zeros(tri_len(concepts));
        let one = softplus_inv(1.0);
        for i in 0..concepts {
            raw[tri_index(i, i)] = one;
        }
        match kind {
            CovarianceKind::Global => CovarianceHead::Global { raw },
            CovarianceKind::Amortized => {
                let mut map = Linear::zeros(feature_dim, tri_len(concepts));
                map.bias = raw;
                CovarianceHead::Amortized { map }
            }
        }
    }

    pub fn kind(&self) -> CovarianceKind {
        match self {
            CovarianceHead::Global { .. } => CovarianceKind::Global,
            CovarianceHead::Amortized { .. } => CovarianceKind::Amortized,
        }
    }

    pub fn concepts(&self) -> usize {
        match self {
            CovarianceHead::Global { raw } => concepts_from_len(raw.len()),
            CovarianceHead::Amortized { map } => concepts_from_len(map.output_dim()),
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            CovarianceHead::Global { raw } => raw.len(),
            CovarianceHead::Amortized { map } => map.num_params(),
        }
    }

    /// Flat parameter vector (raw values, or row-major weight then bias).
    pub fn params(&self) -> Vec<f64> {
        match self {
            CovarianceHead::Global { raw } => raw.as_slice().to_vec(),
            CovarianceHead::Amortized { map } => map.params(),
        }
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        match self {
            CovarianceHead::Global { raw } => raw.copy_from_slice(flat),
            CovarianceHead::Amortized { map } => map.set_params(flat),
        }
    }

    /// Packed raw values for one input.
    pub fn raw(&self, features: Option<&[f64]>) -> Result<Vec<f64>> {
        match self {
            CovarianceHead::Global { raw } => Ok(raw.as_slice().to_vec()),
            CovarianceHead::Amortized { map } => {
                let z = features.ok_or(Error::MissingFeatures)?;
                if z.len() != map.input_dim() {
                    return Err(Error::DimensionMismatch {
                        expected: map.input_dim(),
                        got: z.len(),
                    });
                }
                Ok(map.apply(z))
            }
        }
    }
}

/// Unpacks the head's raw output into the lower-triangular factor `L`.
///
/// `features` is ignored for a global head and required for an amortized
/// one.
pub fn decode_covariance(head: &CovarianceHead, features: Option<&[f64]>) -> Result<DMatrix<f64>> {
    let raw = head.raw(features)?;
    Ok(unpack_factor(&raw, head.concepts()))
}

pub(crate) fn unpack_factor(raw: &[f64], c: usize) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(c, c);
    for i in 0..c {
        for j in 0..i {
            l[(i, j)] = raw[tri_index(i, j)];
        }
        l[(i, i)] = softplus(raw[tri_index(i, i)]);
    }
    l
}
