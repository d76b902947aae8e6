//! Spread certificate and the bounds that give it meaning.
//!
//! `Spread(b) = √tr(Σ_L(b))` where `Σ_L` is the posterior covariance of the
//! source location. For weighted particles it equals the weighted RMS
//! deviation from the weighted mean, so stopping once `Spread < ζ` bounds the
//! posterior mean-squared localization error by `ζ²`.

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pf::{weighted_moments, ParticleSet};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StoppingError {
    #[error("delta must lie in (0, 1), got {0}")]
    Delta(f64),
    #[error("credible radius is defined for 2 or 3 dimensions, got {0}")]
    Dimension(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BeliefSource {
    Teacher,
    Student,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpreadCertificate<T> {
    pub spread: T,
    pub source: BeliefSource,
    pub dim: usize,
}

/// Weighted RMS deviation of the location block from its weighted mean.
pub fn spread_particles<T: Scalar>(ps: &ParticleSet<T>, location: &[usize]) -> T {
    let mut mean = vec![T::zero(); location.len()];
    for (th, w) in ps.iter() {
        for (m, &j) in mean.iter_mut().zip(location) {
            *m = *m + w * th[j];
        }
    }
    ps.iter()
        .map(|(th, w)| w * location.iter().zip(&mean).map(|(&j, &m)| (th[j] - m) * (th[j] - m)).sum::<T>())
        .sum::<T>()
        .sqrt()
}

/// `√Σ σ_j²` over the location indices of a diagonal Gaussian given by its
/// log-variances.
pub fn spread_gaussian<T: Scalar>(log_var: &[T], location: &[usize]) -> T {
    location.iter().map(|&j| log_var[j].exp()).sum::<T>().sqrt()
}

impl<T: Scalar> SpreadCertificate<T> {
    pub fn from_particles(ps: &ParticleSet<T>, location: &[usize]) -> Self {
        Self { spread: spread_particles(ps, location), source: BeliefSource::Teacher, dim: location.len() }
    }

    pub fn from_gaussian(log_var: &[T], location: &[usize]) -> Self {
        Self { spread: spread_gaussian(log_var, location), source: BeliefSource::Student, dim: location.len() }
    }
}

/// Strict `spread < zeta`; a non-finite spread never stops.
pub fn should_stop<T: Scalar>(spread: T, zeta: T) -> bool {
    if !spread.is_finite() {
        warn!("non-finite spread {spread}; not stopping");
        return false;
    }
    spread < zeta
}

/// Markov bound `P(‖θ_L - μ‖ ≥ δ) ≤ min(1, Spread²/δ²)`.
pub fn markov_bound<T: Scalar>(spread: T, delta: T) -> T {
    (spread * spread / (delta * delta)).min(T::one())
}

/// Radius `√c · Spread` holding at least `1 - delta` Gaussian posterior mass,
/// with `c = -2 ln δ` in 2D and the χ²₃ quantile in 3D.
pub fn credible_radius_gaussian<T: Scalar>(spread: T, delta: T, dim: usize) -> Result<T, StoppingError> {
    if !(delta > T::zero() && delta < T::one()) {
        return Err(StoppingError::Delta(delta.f64()));
    }
    let c = match dim {
        2 => -T::c(2.0) * delta.ln(),
        3 => T::c(chi2_quantile(1.0 - delta.f64(), 3)),
        other => return Err(StoppingError::Dimension(other)),
    };
    Ok(c.sqrt() * spread)
}

/// Weighted mean squared distance of the location block from `point`.
pub fn weighted_sq_error_about<T: Scalar>(ps: &ParticleSet<T>, location: &[usize], point: &[T]) -> T {
    ps.iter()
        .map(|(th, w)| w * location.iter().zip(point).map(|(&j, &a)| (th[j] - a) * (th[j] - a)).sum::<T>())
        .sum()
}

/// Weighted mean Euclidean distance of the location block from its weighted mean.
pub fn weighted_mean_error<T: Scalar>(ps: &ParticleSet<T>, location: &[usize]) -> T {
    let m = weighted_moments(ps);
    ps.iter()
        .map(|(th, w)| w * location.iter().map(|&j| (th[j] - m.mean[j]) * (th[j] - m.mean[j])).sum::<T>().sqrt())
        .sum()
}

/// Regularized lower incomplete gamma `P(a, x)`.
pub fn regularized_gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let log_prefactor = -x + a * x.ln() - ln_gamma(a);
    if x < a + 1.0 {
        // Series expansion.
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut ap = a;
        for _ in 0..1000 {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * 1e-16 {
                break;
            }
        }
        sum * log_prefactor.exp()
    } else {
        // Lentz continued fraction for Q(a, x).
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..1000 {
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
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        1.0 - log_prefactor.exp() * h
    }
}

/// Lanczos approximation of `ln Γ(x)` for `x > 0`.
fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
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
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + G + 0.5;
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

pub fn chi2_cdf(x: f64, k: u32) -> f64 {
    regularized_gamma_p(k as f64 / 2.0, x / 2.0)
}

/// `p`-quantile of χ²ₖ by bisection to 1e-10.
pub fn chi2_quantile(p: f64, k: u32) -> f64 {
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while chi2_cdf(hi, k) < p {
        hi *= 2.0;
    }
    while hi - lo > 1e-10 {
        let mid = 0.5 * (lo + hi);
        if chi2_cdf(mid, k) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn particle_spread_hand_values() {
        let same = ParticleSet::uniform(2, vec![3.0, 4.0, 3.0, 4.0, 3.0, 4.0]).unwrap();
        assert_eq!(spread_particles(&same, &[0, 1]), 0.0);
        let two = ParticleSet::uniform(2, vec![0.0, 0.0, 2.0, 0.0]).unwrap();
        assert_relative_eq!(spread_particles(&two, &[0, 1]), 1.0, max_relative = 1e-15);
    }

    #[test]
    fn gaussian_spread_hand_values() {
        assert_relative_eq!(spread_gaussian(&[0.0, 0.0], &[0, 1]), 2f64.sqrt(), max_relative = 1e-15);
        assert_relative_eq!(spread_gaussian(&[3f64.ln(), 0.0], &[0, 1]), 2.0, max_relative = 1e-15);
        assert_relative_eq!(spread_gaussian(&[0.0; 9], &[0, 1, 2]), 1.732051, epsilon = 1e-6);
    }

    #[test]
    fn stop_rule_is_strict_and_fail_safe() {
        assert!(should_stop(0.04, 0.05));
        assert!(!should_stop(0.05, 0.05));
        assert!(!should_stop(f64::NAN, 0.05));
        assert!(!should_stop(f64::INFINITY, f64::INFINITY));
    }

    #[test]
    fn markov_values() {
        assert_eq!(markov_bound(1.0, 2.0), 0.25);
        assert_eq!(markov_bound(2.0, 2.0), 1.0);
        assert_eq!(markov_bound(3.0, 1.0), 1.0);
    }

    #[test]
    fn credible_radius_values() {
        let r = credible_radius_gaussian(1.0, 0.05, 2).unwrap();
        assert_relative_eq!(r * r, 5.991465, epsilon = 1e-6);
        assert_relative_eq!(r, 2.447746, epsilon = 1e-6);
        let r = credible_radius_gaussian(1.5, (-2.0f64).exp(), 2).unwrap();
        assert_relative_eq!(r, 3.0, max_relative = 1e-14);
        assert!(credible_radius_gaussian(1.0, 1.0, 2).is_err());
        assert!(credible_radius_gaussian(1.0, 0.5, 4).is_err());
    }

    #[test]
    fn chi2_quantiles_match_closed_forms() {
        // χ²₂ quantile is -2 ln(1 - p).
        for p in [0.5, 0.9, 0.95, 0.99] {
            assert_relative_eq!(chi2_quantile(p, 2), -2.0 * (1.0 - p).ln(), epsilon = 1e-9);
        }
        // χ²₃ CDF: erf(√(x/2)) - √(2x/π) e^{-x/2}; tabulated 95% quantile 7.814728.
        assert_relative_eq!(chi2_quantile(0.95, 3), 7.814728, epsilon = 1e-6);
        assert_relative_eq!(chi2_quantile(0.99, 3), 11.344867, epsilon = 1e-6);
        // Upper tail from the closed form erfc(√20) + √(80/π)·e^{-20}.
        assert_relative_eq!(1.0 - chi2_cdf(40.0, 3), 1.0655090365574438e-8, max_relative = 1e-6);
        assert_relative_eq!(ln_gamma(5.0), 24f64.ln(), max_relative = 1e-13);
    }
}
