//! Small statistical helpers: Wilson intervals, weighted least squares and
//! multinomial resampling.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Binomial, Distribution};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Two-sided standard normal quantile for confidence `level`.
pub fn normal_quantile(level: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(0.5 + level / 2.0)
}

/// Quantile of the chi-square distribution with `dof` degrees of freedom.
pub fn chi_square_quantile(p: f64, dof: usize) -> f64 {
    ChiSquared::new(dof as f64).expect("positive dof").inverse_cdf(p)
}

/// Wilson score interval for `hits` successes in `trials`.
pub fn wilson_interval(hits: u64, trials: u64, z: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = hits as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Coefficients and covariance of a weighted least-squares fit.
#[derive(Clone, Debug)]
pub struct LinearModel {
    pub coef: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
    pub residual_variance: f64,
}

impl LinearModel {
    pub fn se(&self, i: usize) -> f64 {
        self.cov[i][i].max(0.0).sqrt()
    }
}

/// Fits `y ~ X b` with weights `w` (inverse variances up to a common scale).
/// The covariance uses the residual variance estimate.
pub fn weighted_least_squares(rows: &[Vec<f64>], y: &[f64], w: &[f64]) -> Result<LinearModel> {
    let n = rows.len();
    let p = rows.first().map_or(0, Vec::len);
    if n <= p || y.len() != n || w.len() != n {
        return Err(Error::TooFewSamples { got: n, need: p + 1 });
    }
    let x = DMatrix::from_fn(n, p, |i, j| rows[i][j] * w[i].sqrt());
    let yv = DVector::from_fn(n, |i, _| y[i] * w[i].sqrt());
    let xtx = x.transpose() * &x;
    let inv = xtx
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::InvalidArgument("singular least-squares design".into()))?;
    let coef = &inv * x.transpose() * &yv;
    let resid = &yv - &x * &coef;
    let residual_variance = resid.norm_squared() / (n - p) as f64;
    let cov = (0..p).map(|i| (0..p).map(|j| inv[(i, j)] * residual_variance).collect()).collect();
    Ok(LinearModel { coef: coef.iter().copied().collect(), cov, residual_variance })
}

/// Multinomial resample of `counts` (total preserved) via sequential binomials.
pub fn multinomial_resample<R: Rng>(counts: &[u64], rng: &mut R) -> Vec<u64> {
    let mut remaining: u64 = counts.iter().sum();
    let mut mass_left: f64 = remaining as f64;
    let mut out = Vec::with_capacity(counts.len());
    for &c in counts {
        if remaining == 0 || mass_left <= 0.0 {
            out.push(0);
            continue;
        }
        let p = (c as f64 / mass_left).clamp(0.0, 1.0);
        let draw = if p >= 1.0 {
            remaining
        } else {
            Binomial::new(remaining, p).expect("valid binomial").sample(rng)
        };
        out.push(draw);
        remaining -= draw;
        mass_left -= c as f64;
    }
    out
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    #[test]
    fn wilson_contains_point_estimate() {
        let (lo, hi) = wilson_interval(30, 100, 1.96);
        assert!(lo < 0.3 && 0.3 < hi);
        let (lo, hi) = wilson_interval(0, 100, 1.96);
        assert_eq!(lo, 0.0);
        assert!(hi > 0.0 && hi < 0.05);
    }

    #[test]
    fn least_squares_recovers_line() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![1.0, i as f64]).collect();
        let y: Vec<f64> = (0..10).map(|i| 2.0 - 0.5 * i as f64).collect();
        let fit = weighted_least_squares(&rows, &y, &[1.0; 10]).unwrap();
        assert!((fit.coef[0] - 2.0).abs() < 1e-12);
        assert!((fit.coef[1] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn multinomial_preserves_total() {
        let mut rng = stream_rng(1, 0);
        let counts = [5, 0, 17, 3, 100];
        let r = multinomial_resample(&counts, &mut rng);
        assert_eq!(r.iter().sum::<u64>(), 125);
        assert_eq!(r[1], 0);
    }

    #[test]
    fn quantiles() {
        assert!((normal_quantile(0.95) - 1.959964).abs() < 1e-5);
        assert!((chi_square_quantile(0.95, 2) - 5.991465).abs() < 1e-5);
        assert_eq!(quantile_sorted(&[1.0, 2.0, 3.0], 0.5), 2.0);
    }
}
