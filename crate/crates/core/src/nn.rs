//! Scalar activations and a dense affine layer.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x)`, stable for large `|x|`.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// `ln(1 + eˣ)`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
#[inline]
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp_m1()).ln()
    } else {
        y.exp_m1().ln()
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Binary cross-entropy `−[c ln σ(η) + (1 − c) ln(1 − σ(η))]` from a logit.
#[inline]
pub fn bce_with_logit(c: f64, eta: f64) -> f64 {
    -(c * log_sigmoid(eta) + (1.0 - c) * log_sigmoid(-eta))
}

/// `(σ(η), 1 + e^{−|η|}, max(η, 0) − c·η)`: the sigmoid and the two parts of
/// `BCE(c, σ(η)) = ln(1 + e^{−|η|}) + max(η, 0) − c·η`, leaving the log to
/// the caller so that a sum of BCE terms needs one logarithm.
#[inline]
pub(crate) fn sigmoid_bce_parts(c: f64, eta: f64) -> (f64, f64, f64) {
    let e = (-eta.abs()).exp();
    let s = if eta >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
    (s, 1.0 + e, eta.max(0.0) - c * eta)
}

/// In-place softmax.
pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Dense affine map `y = W·x + b`, `W` of shape `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: DMatrix::zeros(output, input),
            bias: DVector::zeros(output),
        }
    }

    /// Weights `N(0, 1/in)`, zero bias.
    pub fn random<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, (1.0 / input.max(1) as f64).sqrt()).expect("finite std");
        Self {
            weight: DMatrix::from_fn(output, input, |_, _| normal.sample(rng)),
            bias: DVector::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.input_dim());
        for (r, o) in out.iter_mut().enumerate() {
            let mut s = self.bias[r];
            for (c, xc) in x.iter().enumerate() {
                s += self.weight[(r, c)] * xc;
            }
            *o = s;
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.output_dim()];
        self.apply_into(x, &mut out);
        out
    }

    /// Parameters flattened as row-major weight followed by bias.
    pub fn params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        for r in 0..self.output_dim() {
            for c in 0..self.input_dim() {
                v.push(self.weight[(r, c)]);
            }
        }
        v.extend(self.bias.iter());
        v
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params());
        let (rows, cols) = (self.output_dim(), self.input_dim());
        for r in 0..rows {
            for c in 0..cols {
                self.weight[(r, c)] = flat[r * cols + c];
            }
        }
        for r in 0..rows {
            self.bias[r] = flat[rows * cols + r];
        }
    }
}

/// Row-major copy of a [`Linear`] for tight inner loops.
#[derive(Debug, Clone)]
pub(crate) struct DenseRows {
    pub cols: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseRows {
    pub fn from_linear(layer: &Linear) -> Self {
        let mut weight = Vec::with_capacity(layer.weight.len());
        for r in 0..layer.output_dim() {
            weight.extend(layer.weight.row(r).iter());
        }
        Self {
            cols: layer.input_dim(),
            weight,
            bias: layer.bias.iter().copied().collect(),
        }
    }

    #[inline]
    pub fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        for ((o, row), b) in out.iter_mut().zip(self.weight.chunks_exact(self.cols)).zip(&self.bias) {
            *o = b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }

    /// `out += Wᵀ·g`.
    #[inline]
    pub fn add_transpose(&self, g: &[f64], out: &mut [f64]) {
        for (row, &gr) in self.weight.chunks_exact(self.cols).zip(g) {
            if gr == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(row) {
                *o += gr * w;
            }
        }
    }
}
