//! Chi-squared distribution via the regularized lower incomplete gamma.

use crate::error::{Error, Result};

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = LANCZOS[0];
    let t = x + LANCZOS_G + 0.5;
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized lower incomplete gamma `P(a, x)`.
///
/// Series expansion below `x < a + 1`, Lentz continued fraction for the
/// upper tail otherwise.
pub fn regularized_gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x.is_infinite() {
        return 1.0;
    }
    let log_prefix = -x + a * x.ln() - ln_gamma(a);
    if x < a + 1.0 {
        let mut ap = a;
        let mut term = 1.0 / a;
        let mut sum = term;
        for _ in 0..10_000 {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * 1e-17 {
                break;
            }
        }
        (sum.ln() + log_prefix).exp().min(1.0)
    } else {
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..10_000 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < 1e-17 {
                break;
            }
        }
        let q = (log_prefix.exp() * h).clamp(0.0, 1.0);
        1.0 - q
    }
}

/// CDF of the chi-squared distribution with `d` degrees of freedom.
pub fn chi2_cdf(d: usize, x: f64) -> f64 {
    regularized_gamma_p(d as f64 / 2.0, x / 2.0)
}

fn chi2_pdf(d: usize, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let k = d as f64 / 2.0;
    ((k - 1.0) * x.ln() - x / 2.0 - k * std::f64::consts::LN_2 - ln_gamma(k)).exp()
}

/// Inverse CDF of the chi-squared distribution.
///
/// Safeguarded Newton iteration inside a shrinking bracket; falls back to
/// bisection whenever a Newton step would leave the bracket.
pub fn chi2_quantile(d: usize, p: f64) -> Result<f64> {
    if d == 0 {
        return Err(Error::InvalidDegrees(d));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidProbability(p));
    }
    let mut lo = 0.0f64;
    let mut hi = (d as f64).max(1.0);
    while chi2_cdf(d, hi) < p {
        lo = hi;
        hi *= 2.0;
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..300 {
        let f = chi2_cdf(d, x) - p;
        if f == 0.0 {
            return Ok(x);
        }
        if f < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let slope = chi2_pdf(d, x);
        let mut next = if slope > 0.0 { x - f / slope } else { f64::NAN };
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() <= 1e-15 * x.max(1e-300) || hi - lo <= 1e-15 * hi {
            return Ok(next);
        }
        x = next;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ln_gamma_small_integers() {
        let mut fact = 1.0f64;
        for n in 1..20 {
            assert!((ln_gamma(n as f64) - fact.ln()).abs() < 1e-12, "n={n}");
            fact *= n as f64;
        }
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-13);
    }

    #[test]
    fn two_degrees_is_exponential() {
        for &p in &[0.01, 0.3, 0.5, 0.95, 0.999] {
            let q = chi2_quantile(2, p).unwrap();
            assert!((q - (-2.0 * (1.0f64 - p).ln())).abs() < 1e-10, "p={p}");
        }
        assert!((chi2_quantile(2, 0.95).unwrap() - 5.991_464_547_107_979).abs() < 1e-9);
    }

    #[test]
    fn one_degree_is_squared_normal() {
        // z_{0.975} = 1.959963984540054
        let z = 1.959_963_984_540_054_f64;
        assert!((chi2_quantile(1, 0.95).unwrap() - z * z).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert_eq!(chi2_quantile(2, 0.0), Err(Error::InvalidProbability(0.0)));
        assert_eq!(chi2_quantile(2, 1.0), Err(Error::InvalidProbability(1.0)));
        assert_eq!(chi2_quantile(0, 0.5), Err(Error::InvalidDegrees(0)));
    }

    #[test]
    fn cdf_limits() {
        assert_eq!(chi2_cdf(3, 0.0), 0.0);
        assert!((chi2_cdf(3, 1e4) - 1.0).abs() < 1e-15);
    }
}
