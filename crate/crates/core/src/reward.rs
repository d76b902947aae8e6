//! Information-gain reward from consecutive teacher weight vectors.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewardError {
    #[error("weight vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("clip window capacity must be >= 1")]
    ZeroCapacity,
    #[error("clip quantile must lie in (0, 1], got {0}")]
    Quantile(f64),
}

/// Default stabilizer inside the log denominator.
pub const KL_EPS: f64 = 1e-12;

/// `Σ w_new·ln(w_new / (w_old + eps))`, with `0·ln 0 = 0`.
///
/// Both vectors must be the normalized weights *before* resampling.
pub fn kl_weights<T: Scalar>(w_new: &[T], w_old: &[T], eps: T) -> Result<T, RewardError> {
    if w_new.len() != w_old.len() {
        return Err(RewardError::LengthMismatch(w_new.len(), w_old.len()));
    }
    Ok(w_new
        .iter()
        .zip(w_old)
        .filter(|(&wn, _)| wn > T::zero())
        .map(|(&wn, &wo)| wn * (wn / (wo + eps)).ln())
        .sum())
}

/// Closed-form `KL(N(μ₁, diag e^{s₁}) ‖ N(μ₀, diag e^{s₀}))` for diagonal Gaussians
/// given means and log-variances.
pub fn gaussian_kl_diag<T: Scalar>(mu_new: &[T], log_var_new: &[T], mu_old: &[T], log_var_old: &[T]) -> T {
    let half = T::c(0.5);
    mu_new
        .iter()
        .zip(log_var_new)
        .zip(mu_old.iter().zip(log_var_old))
        .map(|((&m1, &s1), (&m0, &s0))| {
            let dm = m1 - m0;
            half * (s0 - s1 + ((s1 - s0).exp() + dm * dm / s0.exp()) - T::one())
        })
        .sum()
}

/// Rolling window used for percentile clipping of rewards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardState {
    window: VecDeque<f64>,
    capacity: usize,
    quantile: f64,
}

impl RewardState {
    pub fn new(capacity: usize, quantile: f64) -> Result<Self, RewardError> {
        if capacity == 0 {
            return Err(RewardError::ZeroCapacity);
        }
        if !(quantile > 0.0 && quantile <= 1.0) {
            return Err(RewardError::Quantile(quantile));
        }
        Ok(Self { window: VecDeque::with_capacity(capacity), capacity, quantile })
    }

    pub fn len(&self) -> usize {
        self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }

    /// Nearest-rank empirical quantile of the window.
    pub fn threshold(&self) -> Option<f64> {
        if self.window.is_empty() {
            return None;
        }
        let mut sorted: Vec<f64> = self.window.iter().copied().collect();
        sorted.sort_by(f64::total_cmp);
        let rank = (self.quantile * sorted.len() as f64).ceil().max(1.0) as usize;
        Some(sorted[rank.min(sorted.len()) - 1])
    }

    fn push(&mut self, r: f64) {
        if self.window.len() == self.capacity {
            self.window.pop_front();
        }
        self.window.push_back(r);
    }
}

impl Default for RewardState {
    fn default() -> Self {
        Self::new(1000, 0.99).expect("valid defaults")
    }
}

/// Caps `r` at the window quantile, then records the raw value.
pub fn clip_reward(r: f64, state: &mut RewardState) -> f64 {
    let out = match state.threshold() {
        Some(t) => r.min(t),
        None => r,
    };
    state.push(r);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// Dense information gain only.
    #[default]
    Kl,
    /// Terminal success bonus only.
    Hard,
    /// Information gain plus the success bonus.
    Mixed,
    /// Information gain, with the success bonus switched on in the second
    /// half of training.
    Curriculum,
}

impl RewardMode {
    /// Whether per-step information gain enters the return.
    pub fn dense(self) -> bool {
        !matches!(self, RewardMode::Hard)
    }
}

/// Success bonus granted once at episode end.
pub const SUCCESS_BONUS: f64 = 1.0;

/// `certificate_stop` is true when the spread certificate ended the episode
/// before the horizon; `progress` is the fraction of training completed.
pub fn terminal_reward(certificate_stop: bool, mode: RewardMode, progress: f64) -> f64 {
    let bonus_active = match mode {
        RewardMode::Kl => false,
        RewardMode::Hard | RewardMode::Mixed => true,
        RewardMode::Curriculum => progress > 0.5,
    };
    if bonus_active && certificate_stop {
        SUCCESS_BONUS
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn kl_hand_values() {
        assert_eq!(kl_weights(&[0.3, 0.7], &[0.3, 0.7], 0.0).unwrap(), 0.0);
        let r = kl_weights(&[0.9, 0.1], &[0.5, 0.5], 0.0).unwrap();
        assert_relative_eq!(r, 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln(), max_relative = 1e-15);
        assert_relative_eq!(r, 0.368064, epsilon = 1e-6);
        let r = kl_weights(&[1.0, 0.0], &[0.5, 0.5], 0.0).unwrap();
        assert_relative_eq!(r, std::f64::consts::LN_2, max_relative = 1e-15);
        assert!(kl_weights(&[1.0], &[0.5, 0.5], 0.0).is_err());
    }

    #[test]
    fn clip_nearest_rank() {
        let mut st = RewardState::new(1000, 0.99).unwrap();
        assert_eq!(clip_reward(5.0, &mut st), 5.0);
        let mut st = RewardState::new(1000, 0.99).unwrap();
        for i in 1..=100 {
            st.push(i as f64);
        }
        assert_eq!(clip_reward(500.0, &mut st), 99.0);
        assert_eq!(clip_reward(3.5, &mut st), 3.5);
        assert_eq!(st.len(), 102);
    }

    #[test]
    fn clip_window_evicts_oldest() {
        let mut st = RewardState::new(3, 1.0).unwrap();
        for r in [10.0, 1.0, 1.0, 1.0] {
            clip_reward(r, &mut st);
        }
        assert_eq!(st.threshold(), Some(1.0));
        assert!(RewardState::new(0, 0.5).is_err());
        assert!(RewardState::new(1, 0.0).is_err());
    }

    #[test]
    fn terminal_modes() {
        assert_eq!(terminal_reward(true, RewardMode::Kl, 1.0), 0.0);
        assert_eq!(terminal_reward(true, RewardMode::Hard, 0.0), 1.0);
        assert_eq!(terminal_reward(false, RewardMode::Hard, 0.0), 0.0);
        assert_eq!(terminal_reward(true, RewardMode::Mixed, 0.0), 1.0);
        assert_eq!(terminal_reward(true, RewardMode::Curriculum, 0.25), 0.0);
        assert_eq!(terminal_reward(true, RewardMode::Curriculum, 0.75), 1.0);
    }

    #[test]
    fn gaussian_kl_known_cases() {
        let mu = [1.0, -2.0];
        let lv = [0.3, -0.4];
        assert_relative_eq!(gaussian_kl_diag(&mu, &lv, &mu, &lv), 0.0, epsilon = 1e-15);
        // KL(N(1,1) || N(0,1)) = 1/2
        assert_relative_eq!(gaussian_kl_diag(&[1.0], &[0.0], &[0.0], &[0.0]), 0.5, max_relative = 1e-15);
        // KL(N(0,4) || N(0,1)) = (4 - 1 - ln 4)/2
        let v = gaussian_kl_diag(&[0.0], &[4f64.ln()], &[0.0], &[0.0]);
        assert_relative_eq!(v, (3.0 - 4f64.ln()) / 2.0, max_relative = 1e-14);
    }

    fn simplex(raw: &[f64]) -> Vec<f64> {
        let t: f64 = raw.iter().sum();
        raw.iter().map(|x| x / t).collect()
    }

    proptest! {
        #[test]
        fn kl_nonnegative_and_zero_iff_equal(
            pair in (2usize..30).prop_flat_map(|n| (
                prop::collection::vec(0.0f64..1.0, n),
                prop::collection::vec(0.01f64..1.0, n),
            ))
        ) {
            let (a, b) = pair;
            prop_assume!(a.iter().sum::<f64>() > 1e-3);
            let (wn, wo) = (simplex(&a), simplex(&b));
            let r = kl_weights(&wn, &wo, 0.0).unwrap();
            prop_assert!(r >= -1e-12);
            prop_assert!(kl_weights(&wo, &wo, 0.0).unwrap().abs() < 1e-12);
            let l1: f64 = wn.iter().zip(&wo).map(|(x, y)| (x - y).abs()).sum();
            if l1 > 1e-3 {
                prop_assert!(r > 1e-12);
            }
        }
    }
}
