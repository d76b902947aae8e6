//! Bernoulli-gated Gaussian-mixture sensor.
//!
//! With probability `p_d` the sensor reports the field value plus measurement
//! noise `N(0, s(h)²)`; otherwise it reports pure background
//! `N(0, sigma_bg²)`. The observation density is therefore
//! `(1-p_d)·N(z; 0, sigma_bg²) + p_d·N(z; h, s(h)²)` with
//! `s(h)² = sigma_meas² + (sigma_rel·h)²`. `sigma_rel = 0` gives a constant
//! measurement noise.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::ForwardModel;
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SensorError {
    #[error("detection probability must lie in [0, 1], got {0}")]
    DetectionProbability(f64),
    #[error("`{name}` must be finite and > 0, got {value}")]
    NonPositiveStd { name: &'static str, value: f64 },
    #[error("`sigma_rel` must be finite and >= 0, got {0}")]
    RelativeNoise(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Deserialize<'de> + Default"))]
pub struct SensorParams<T> {
    pub p_d: T,
    /// Background noise std (non-detection branch).
    pub sigma_bg: T,
    /// Measurement noise std floor (detection branch).
    pub sigma_meas: T,
    /// Measurement noise std per unit of intensity.
    #[serde(default)]
    pub sigma_rel: T,
}

impl<T: Scalar> SensorParams<T> {
    pub fn new(p_d: T, sigma_bg: T, sigma_meas: T) -> Result<Self, SensorError> {
        if !(p_d >= T::zero() && p_d <= T::one()) {
            return Err(SensorError::DetectionProbability(p_d.f64()));
        }
        for (name, value) in [("sigma_bg", sigma_bg), ("sigma_meas", sigma_meas)] {
            if !(value.is_finite() && value > T::zero()) {
                return Err(SensorError::NonPositiveStd { name, value: value.f64() });
            }
        }
        Ok(Self { p_d, sigma_bg, sigma_meas, sigma_rel: T::zero() })
    }

    pub fn with_relative(self, sigma_rel: T) -> Result<Self, SensorError> {
        if !(sigma_rel.is_finite() && sigma_rel >= T::zero()) {
            return Err(SensorError::RelativeNoise(sigma_rel.f64()));
        }
        Ok(Self { sigma_rel, ..self })
    }

    pub fn validate(&self) -> Result<(), SensorError> {
        Self::new(self.p_d, self.sigma_bg, self.sigma_meas)?.with_relative(self.sigma_rel).map(|_| ())
    }

    /// Detection-branch std for intensity `h`.
    #[inline]
    pub fn meas_std(&self, h: T) -> T {
        if self.sigma_rel == T::zero() {
            self.sigma_meas
        } else {
            self.sigma_meas.hypot(self.sigma_rel * h)
        }
    }
}

impl<T: Scalar> Default for SensorParams<T> {
    fn default() -> Self {
        Self { p_d: T::c(0.9), sigma_bg: T::c(0.05), sigma_meas: T::c(0.05), sigma_rel: T::zero() }
    }
}

/// One scalar reading taken at `pose` on step `step`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation<T> {
    pub z: T,
    pub pose: Vec<T>,
    pub step: usize,
}

#[inline]
pub fn normal_pdf<T: Scalar>(z: T, mean: T, sd: T) -> T {
    let u = (z - mean) / sd;
    (-T::c(0.5) * u * u).exp() / (sd * (T::c(2.0) * T::PI()).sqrt())
}

#[inline]
fn normal_log_pdf<T: Scalar>(z: T, mean: T, sd: T) -> T {
    let u = (z - mean) / sd;
    -T::c(0.5) * u * u - sd.ln() - T::c(0.5) * (T::c(2.0) * T::PI()).ln()
}

/// Mixture density of `z` given the noise-free intensity `h`.
#[inline]
pub fn mixture_density<T: Scalar>(z: T, h: T, sp: &SensorParams<T>) -> T {
    (T::one() - sp.p_d) * normal_pdf(z, T::zero(), sp.sigma_bg) + sp.p_d * normal_pdf(z, h, sp.meas_std(h))
}

/// Log of [`mixture_density`], evaluated without underflow.
pub fn mixture_log_density<T: Scalar>(z: T, h: T, sp: &SensorParams<T>) -> T {
    let one = T::one();
    let mut terms = [T::neg_infinity(); 2];
    if sp.p_d < one {
        terms[0] = (one - sp.p_d).ln() + normal_log_pdf(z, T::zero(), sp.sigma_bg);
    }
    if sp.p_d > T::zero() {
        terms[1] = sp.p_d.ln() + normal_log_pdf(z, h, sp.meas_std(h));
    }
    let hi = terms[0].max(terms[1]);
    if hi == T::neg_infinity() {
        return hi;
    }
    hi + ((terms[0] - hi).exp() + (terms[1] - hi).exp()).ln()
}

/// Draws a reading for noise-free intensity `h_val`.
pub fn sample_observation<T: Scalar, R: Rng + ?Sized>(h_val: T, sp: &SensorParams<T>, rng: &mut R) -> T {
    let detected = rng.random::<f64>() < sp.p_d.f64();
    let xi: f64 = rng.sample(StandardNormal);
    if detected {
        h_val + sp.meas_std(h_val) * T::c(xi)
    } else {
        sp.sigma_bg * T::c(xi)
    }
}

/// Density of `z` at `pose` under parameters `theta`. Singular queries are
/// clamped to the value at the singular radius.
#[inline]
pub fn likelihood<T: Scalar, M: ForwardModel<T> + ?Sized>(
    z: T,
    pose: &[T],
    theta: &[T],
    model: &M,
    sp: &SensorParams<T>,
) -> T {
    mixture_density(z, model.eval_clamped(pose, theta), sp)
}

#[inline]
pub fn log_likelihood<T: Scalar, M: ForwardModel<T> + ?Sized>(
    z: T,
    pose: &[T],
    theta: &[T],
    model: &M,
    sp: &SensorParams<T>,
) -> T {
    mixture_log_density(z, model.eval_clamped(pose, theta), sp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{Plume2d, ThetaVector};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rejects_invalid_params() {
        assert!(SensorParams::new(1.5, 1.0, 1.0).is_err());
        assert!(SensorParams::new(0.5, 0.0, 1.0).is_err());
        assert!(SensorParams::new(0.5, 1.0, f64::NAN).is_err());
        assert!(SensorParams::new(0.0, 1.0, 1.0).is_ok());
    }

    #[test]
    fn half_gate_density() {
        let sp = SensorParams::<f64>::new(0.5, 1.0, 1.0).unwrap();
        let d = mixture_density(0.0, 1.0, &sp);
        let oracle = 0.5 * 0.398942280401433 + 0.5 * 0.241970724519143;
        assert_relative_eq!(d, oracle, max_relative = 1e-12);
        assert_relative_eq!(d, 0.320457, epsilon = 1e-6);
        assert_relative_eq!(mixture_log_density(0.0, 1.0, &sp), d.ln(), max_relative = 1e-13);
    }

    #[test]
    fn background_only_ignores_theta() {
        let sp = SensorParams::new(0.0, 0.3, 0.1).unwrap();
        let a = ThetaVector::new(1.0, 1.0, 5.0, 0.0, 0.0, 1.0, 1.0).unwrap().to_array();
        let b = ThetaVector::new(9.0, 2.0, 50.0, 1.0, 2.0, 3.0, 4.0).unwrap().to_array();
        let pose = [0.0, 0.0];
        let la = likelihood(0.2, &pose, &a, &Plume2d, &sp);
        assert_eq!(la, likelihood(0.2, &pose, &b, &Plume2d, &sp));
        assert_relative_eq!(la, normal_pdf(0.2, 0.0, 0.3), max_relative = 1e-15);
    }

    #[test]
    fn full_gate_mode_height() {
        let sp = SensorParams::new(1.0, 0.3, 0.2).unwrap();
        let th = ThetaVector::new(1.0, 1.0, 5.0, 0.0, 0.0, 1.0, 1.0).unwrap().to_array();
        let pose = [0.0, 0.0];
        let h = Plume2d.eval_clamped(&pose, &th);
        let d = likelihood(h, &pose, &th, &Plume2d, &sp);
        assert_relative_eq!(d, 1.0 / (0.2 * (2.0 * std::f64::consts::PI).sqrt()), max_relative = 1e-14);
    }

    #[test]
    fn log_density_survives_extreme_readings() {
        let sp = SensorParams::<f64>::default();
        assert_eq!(mixture_density(1e3, 0.0, &sp), 0.0);
        let l = mixture_log_density(1e3, 0.0, &sp);
        assert!(l.is_finite() && l < -1e6);
    }

    #[test]
    fn density_integrates_to_one() {
        let sp = SensorParams::new(0.7, 0.2, 0.1).unwrap();
        let (lo, hi, n) = (-5.0, 7.0, 120_000);
        let dz = (hi - lo) / n as f64;
        // Simpson's rule.
        let mut acc = 0.0;
        for k in 0..=n {
            let w = if k == 0 || k == n { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * mixture_density(lo + k as f64 * dz, 2.0, &sp);
        }
        assert!((acc * dz / 3.0 - 1.0).abs() < 1e-4);
    }

    #[test]
    fn degenerate_gate_is_deterministic() {
        let sp = SensorParams::new(1.0, 0.1, 1e-300).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(sample_observation(1.25, &sp, &mut rng), 1.25);
        }
    }

    #[test]
    fn background_samples_center_on_zero() {
        let sp = SensorParams::new(0.0, 0.5, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let mean = (0..n).map(|_| sample_observation(3.0, &sp, &mut rng)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 3.0 * 0.5 / (n as f64).sqrt());
    }

    #[test]
    fn mixture_mean_is_gated_intensity() {
        let sp = SensorParams::new(0.7, 0.1, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 1_000_000;
        let draws: Vec<f64> = (0..n).map(|_| sample_observation(1.0, &sp, &mut rng)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - 0.7).abs() < 3.0 * (var / n as f64).sqrt());
    }

    #[test]
    fn sampler_matches_density_entropy() {
        let sp = SensorParams::new(0.6, 0.3, 0.2).unwrap();
        let h = 1.5;
        // Differential entropy by quadrature.
        let (lo, hi, n) = (-4.0, 6.0, 200_000);
        let dz = (hi - lo) / n as f64;
        let entropy: f64 = (0..n)
            .map(|k| {
                let z = lo + (k as f64 + 0.5) * dz;
                let p = mixture_density(z, h, &sp);
                if p > 0.0 { -p * p.ln() * dz } else { 0.0 }
            })
            .sum();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = 100_000;
        let lls: Vec<f64> =
            (0..m).map(|_| mixture_log_density(sample_observation(h, &sp, &mut rng), h, &sp)).collect();
        let mean = lls.iter().sum::<f64>() / m as f64;
        let var = lls.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
        assert!((mean + entropy).abs() < 3.0 * (var / m as f64).sqrt(), "{mean} vs {}", -entropy);
    }
}
