//! Belief features, squashed diagonal-Gaussian actor, critic, GAE and the
//! clipped PPO update.

use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{self, Adam, CheckpointError, CheckpointHeader, Mlp, NnError, RunningStats};
use crate::pf::{weighted_moments, ParticleSet};
use crate::student::{compress_reading, GaussianBelief};

/// Floor on the action standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-3;
/// Standardized policy inputs are clipped to `±INPUT_CLIP`.
pub const INPUT_CLIP: f64 = 10.0;

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("non-finite PPO loss in epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("rollout fields have inconsistent lengths")]
    Misaligned,
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Location-block summary of a belief.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefFeatures {
    pub mu_l: Vec<f64>,
    pub sigma_l: Vec<f64>,
    pub spread: f64,
}

impl BeliefFeatures {
    /// Moments over the full Θ-space restricted to `location`.
    pub fn from_particles(ps: &ParticleSet<f64>, location: &[usize]) -> Self {
        let m = weighted_moments(ps);
        let mu_l = location.iter().map(|&j| m.mean[j]).collect();
        let sigma_l = location.iter().map(|&j| m.cov_at(j, j).max(0.0).sqrt()).collect();
        Self { mu_l, sigma_l, spread: m.block_trace(location).max(0.0).sqrt() }
    }

    /// `belief` must be in raw parameter units.
    pub fn from_gaussian(belief: &GaussianBelief, location: &[usize]) -> Self {
        let sd = belief.std();
        let sigma_l: Vec<f64> = location.iter().map(|&j| sd[j]).collect();
        let spread = sigma_l.iter().map(|s| s * s).sum::<f64>().sqrt();
        Self { mu_l: location.iter().map(|&j| belief.mu[j]).collect(), sigma_l, spread }
    }
}

/// `ψ = [o, p, μ_L, σ_L, Spread]`, or `[o, p, μ_L]` without spread
/// features. The reading enters compressed like the student input.
pub fn policy_state(z: f64, pose: &[f64], feats: &BeliefFeatures, with_spread: bool) -> Vec<f64> {
    let mut psi = Vec::with_capacity(2 + pose.len() + 2 * feats.mu_l.len());
    psi.push(compress_reading(z));
    psi.extend_from_slice(pose);
    psi.extend_from_slice(&feats.mu_l);
    if with_spread {
        psi.extend_from_slice(&feats.sigma_l);
        psi.push(feats.spread);
    }
    psi
}

pub fn policy_state_dim(pose_dim: usize, loc_dim: usize, with_spread: bool) -> usize {
    1 + pose_dim + loc_dim + if with_spread { loc_dim + 1 } else { 0 }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Log-density of the pre-squash sample `u` under `N(mu, diag σ²)`.
pub fn gaussian_log_prob(u: &[f64], mu: &[f64], sigma: &[f64]) -> f64 {
    u.iter()
        .zip(mu)
        .zip(sigma)
        .map(|((&u, &m), &s)| {
            let e = (u - m) / s;
            -0.5 * e * e - s.ln() - 0.5 * LN_2PI
        })
        .sum()
}

/// `Σ ln(L·(1 - tanh²u))`, the log-Jacobian of `a = L·tanh(u)`.
pub fn squash_log_det(u: &[f64], l_step: f64) -> f64 {
    // ln(1 - tanh²u) = 2(ln 2 - u - softplus(-2u)), stable for large |u|.
    u.iter().map(|&u| l_step.ln() + 2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))).sum()
}

/// Entropy of `N(·, diag σ²)`.
pub fn gaussian_entropy(sigma: &[f64]) -> f64 {
    sigma.iter().map(|s| 0.5 * (LN_2PI + 1.0) + s.ln()).sum()
}

/// Per-sample clipped surrogate `min(r·A, clip(r, 1-ε, 1+ε)·A)`.
pub fn clipped_objective(ratio: f64, adv: f64, eps: f64) -> f64 {
    (ratio * adv).min(ratio.clamp(1.0 - eps, 1.0 + eps) * adv)
}

/// Shifts to zero mean and scales to unit (population) std.
pub fn normalize_advantages(adv: &[f64]) -> Vec<f64> {
    let n = adv.len().max(1) as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let sd = var.sqrt() + 1e-8;
    adv.iter().map(|a| (a - mean) / sd).collect()
}

/// Generalized advantage estimation. `values` has one more entry than
/// `rewards` (the bootstrap value); `dones[t]` marks that transition `t`
/// ended its episode. Returns `(advantages, returns)`.
pub fn gae(rewards: &[f64], values: &[f64], dones: &[bool], gamma: f64, lam: f64) -> (Vec<f64>, Vec<f64>) {
    let t_len = rewards.len();
    assert_eq!(values.len(), t_len + 1);
    assert_eq!(dones.len(), t_len);
    let mut adv = vec![0.0; t_len];
    let mut next = 0.0;
    for t in (0..t_len).rev() {
        let mask = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * values[t + 1] * mask - values[t];
        next = delta + gamma * lam * mask * next;
        adv[t] = next;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lam: f64,
    pub clip: f64,
    pub c_v: f64,
    pub c_ent: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub rollout: usize,
    pub lr: f64,
    pub max_grad_norm: f64,
    pub hidden: usize,
    pub init_log_std: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lam: 0.95,
            clip: 0.2,
            c_v: 0.5,
            c_ent: 0.01,
            epochs: 4,
            minibatch: 64,
            rollout: 2048,
            lr: 3e-4,
            max_grad_norm: 0.5,
            hidden: 128,
            init_log_std: 0.0,
        }
    }
}

/// Transitions collected under a fixed policy. `psi` holds the standardized
/// network inputs actually fed to the actor and critic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Rollout {
    pub psi: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
    pub log_prob: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    /// Value of the state after the last transition (0 when it was terminal).
    pub bootstrap: f64,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn check(&self) -> Result<(), PolicyError> {
        let n = self.rewards.len();
        if [self.psi.len(), self.u.len(), self.log_prob.len(), self.values.len(), self.dones.len()]
            .iter()
            .any(|&l| l != n)
        {
            return Err(PolicyError::Misaligned);
        }
        Ok(())
    }

    pub fn append(&mut self, other: Rollout) {
        self.psi.extend(other.psi);
        self.u.extend(other.u);
        self.log_prob.extend(other.log_prob);
        self.rewards.extend(other.rewards);
        self.values.extend(other.values);
        self.dones.extend(other.dones);
        self.bootstrap = other.bootstrap;
    }

    pub fn advantages(&self, gamma: f64, lam: f64) -> (Vec<f64>, Vec<f64>) {
        let mut v = self.values.clone();
        v.push(self.bootstrap);
        gae(&self.rewards, &v, &self.dones, gamma, lam)
    }
}

/// One sampled (or mean) action.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionSample {
    /// Pre-squash Gaussian sample.
    pub u: Vec<f64>,
    /// Displacement `L_step·tanh(u)`.
    pub action: Vec<f64>,
    /// Log-density of `u`; add [`squash_log_det`] negated for the density
    /// of `action`.
    pub log_prob: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

/// Actor, critic, input statistics and optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub actor: Mlp,
    /// Softplus parameters of the state-independent action std.
    pub std_param: Vec<f64>,
    pub critic: Mlp,
    pub stats: RunningStats,
    pub l_step: f64,
    actor_opt: Adam,
    critic_opt: Adam,
}

fn inv_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

impl Policy {
    pub fn new<R: Rng + ?Sized>(state_dim: usize, act_dim: usize, l_step: f64, cfg: &PpoConfig, rng: &mut R) -> Self {
        let h = cfg.hidden;
        let mut actor = Mlp::new(&[state_dim, h, h, act_dim], 0.01, rng);
        actor.zero_output_weights();
        let critic = Mlp::new(&[state_dim, h, h, 1], 1.0, rng);
        let std_param = vec![inv_softplus(cfg.init_log_std.exp()); act_dim];
        let actor_opt = Adam::new(actor.num_params() + act_dim);
        let critic_opt = Adam::new(critic.num_params());
        Self { actor, std_param, critic, stats: RunningStats::new(state_dim), l_step, actor_opt, critic_opt }
    }

    pub fn state_dim(&self) -> usize {
        self.actor.input_dim()
    }

    pub fn act_dim(&self) -> usize {
        self.actor.output_dim()
    }

    /// Standardizes with the current statistics and clips to `±INPUT_CLIP`.
    pub fn prepare(&self, psi: &[f64]) -> Vec<f64> {
        self.stats.normalize(psi).into_iter().map(|v| v.clamp(-INPUT_CLIP, INPUT_CLIP)).collect()
    }

    pub fn observe(&mut self, psi: &[f64]) {
        self.stats.update(psi);
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.std_param.iter().map(|&p| softplus(p).max(SIGMA_FLOOR)).collect()
    }

    /// `(μ_a, σ_a)` for a prepared input.
    pub fn actor_forward(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>), PolicyError> {
        Ok((self.actor.forward(x)?, self.sigma()))
    }

    pub fn value(&self, x: &[f64]) -> Result<f64, PolicyError> {
        Ok(self.critic.forward(x)?[0])
    }

    pub fn sample<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Result<ActionSample, PolicyError> {
        let (mu, sigma) = self.actor_forward(x)?;
        let u: Vec<f64> = mu
            .iter()
            .zip(&sigma)
            .map(|(m, s)| {
                let g: f64 = rng.sample(StandardNormal);
                m + s * g
            })
            .collect();
        let log_prob = gaussian_log_prob(&u, &mu, &sigma);
        Ok(ActionSample { action: self.squash(&u), u, log_prob })
    }

    /// Deterministic evaluation action `L_step·tanh(μ_a)`.
    pub fn mean_action(&self, x: &[f64]) -> Result<Vec<f64>, PolicyError> {
        let (mu, _) = self.actor_forward(x)?;
        Ok(self.squash(&mu))
    }

    pub fn squash(&self, u: &[f64]) -> Vec<f64> {
        u.iter().map(|v| self.l_step * v.tanh()).collect()
    }

    /// Gradient of `Σ_k coef_k · log π(u_k | x_k)` plus `c_ent·H` w.r.t. the
    /// actor's flat parameters followed by the std parameters.
    fn actor_grad(&self, xs: &[&[f64]], us: &[&[f64]], coefs: &[f64], ent_coef: f64) -> Result<Vec<f64>, PolicyError> {
        let n_mlp = self.actor.num_params();
        let d = self.act_dim();
        let mut grads = vec![0.0; n_mlp + d];
        let sigma = self.sigma();
        let mut g_sigma = vec![0.0; d];
        for ((x, u), &c) in xs.iter().zip(us).zip(coefs) {
            if c == 0.0 {
                continue;
            }
            let (mu, trace) = self.actor.forward_traced(x)?;
            let mut g_mu = vec![0.0; d];
            for j in 0..d {
                let e = u[j] - mu[j];
                let s2 = sigma[j] * sigma[j];
                g_mu[j] = c * e / s2;
                g_sigma[j] += c * (e * e / (s2 * sigma[j]) - 1.0 / sigma[j]);
            }
            self.actor.backward(&trace, &g_mu, &mut grads[..n_mlp]);
        }
        for j in 0..d {
            let gs = g_sigma[j] + ent_coef / sigma[j];
            let p = self.std_param[j];
            if softplus(p) > SIGMA_FLOOR {
                grads[n_mlp + j] = gs * sigmoid(p);
            }
        }
        Ok(grads)
    }

    /// Clipped PPO update over the rollout. Advantages are normalized over
    /// the whole batch before the epochs start.
    pub fn ppo_update<R: Rng + ?Sized>(&mut self, ro: &Rollout, cfg: &PpoConfig, rng: &mut R) -> Result<PpoStats, PolicyError> {
        ro.check()?;
        if ro.is_empty() {
            return Ok(PpoStats::default());
        }
        let (adv_raw, returns) = ro.advantages(cfg.gamma, cfg.lam);
        let adv = normalize_advantages(&adv_raw);
        let n = ro.len();
        let mut idx: Vec<usize> = (0..n).collect();
        let mut stats = PpoStats::default();
        let mut batches = 0usize;
        for epoch in 0..cfg.epochs {
            idx.shuffle(rng);
            for chunk in idx.chunks(cfg.minibatch.max(1)) {
                let m = chunk.len() as f64;
                let sigma = self.sigma();
                let mut coefs = Vec::with_capacity(chunk.len());
                let (mut pl, mut kl, mut clipped) = (0.0, 0.0, 0.0);
                for &i in chunk {
                    let mu = self.actor.forward(&ro.psi[i])?;
                    let lp = gaussian_log_prob(&ro.u[i], &mu, &sigma);
                    let log_ratio = lp - ro.log_prob[i];
                    let r = log_ratio.exp();
                    let a = adv[i];
                    pl -= clipped_objective(r, a, cfg.clip) / m;
                    kl += ((r - 1.0) - log_ratio) / m;
                    let unclipped_active = r * a <= r.clamp(1.0 - cfg.clip, 1.0 + cfg.clip) * a;
                    if (r - 1.0).abs() > cfg.clip {
                        clipped += 1.0 / m;
                    }
                    // d(-objective)/d logπ, averaged.
                    coefs.push(if unclipped_active { -r * a / m } else { 0.0 });
                }
                let entropy = gaussian_entropy(&sigma);
                let xs: Vec<&[f64]> = chunk.iter().map(|&i| ro.psi[i].as_slice()).collect();
                let us: Vec<&[f64]> = chunk.iter().map(|&i| ro.u[i].as_slice()).collect();
                let mut g_actor = self.actor_grad(&xs, &us, &coefs, -cfg.c_ent)?;

                let mut g_critic = vec![0.0; self.critic.num_params()];
                let mut vl = 0.0;
                for &i in chunk {
                    let (v, trace) = self.critic.forward_traced(&ro.psi[i])?;
                    let e = v[0] - returns[i];
                    vl += e * e / m;
                    self.critic.backward(&trace, &[cfg.c_v * 2.0 * e / m], &mut g_critic);
                }

                let total = pl + cfg.c_v * vl - cfg.c_ent * entropy;
                if !total.is_finite() || g_actor.iter().chain(&g_critic).any(|g| !g.is_finite()) {
                    warn!("ppo: non-finite loss in epoch {epoch}; aborting epoch");
                    return Err(PolicyError::NonFiniteLoss { epoch });
                }
                clip_grad_norm(&mut g_actor, cfg.max_grad_norm);
                clip_grad_norm(&mut g_critic, cfg.max_grad_norm);
                let n_mlp = self.actor.num_params();
                let mut params: Vec<f64> = self.actor.params().iter().chain(&self.std_param).copied().collect();
                self.actor_opt.step(&mut params, &g_actor, cfg.lr);
                self.actor.params_mut().copy_from_slice(&params[..n_mlp]);
                self.std_param.copy_from_slice(&params[n_mlp..]);
                self.critic_opt.step(self.critic.params_mut(), &g_critic, cfg.lr);

                stats.policy_loss += pl;
                stats.value_loss += vl;
                stats.entropy += entropy;
                stats.approx_kl += kl;
                stats.clip_fraction += clipped;
                batches += 1;
            }
        }
        let b = batches.max(1) as f64;
        stats.policy_loss /= b;
        stats.value_loss /= b;
        stats.entropy /= b;
        stats.approx_kl /= b;
        stats.clip_fraction /= b;
        Ok(stats)
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        let values: Vec<f64> =
            self.actor.params().iter().chain(&self.std_param).chain(self.critic.params()).copied().collect();
        let header = CheckpointHeader {
            kind: "policy".into(),
            layers: self.actor.sizes().to_vec(),
            n_values: values.len(),
            meta: serde_json::json!({
                "critic_layers": self.critic.sizes(),
                "l_step": self.l_step,
                "sigma_floor": SIGMA_FLOOR,
                "input_clip": INPUT_CLIP,
                "stats_count": self.stats.count,
                "stats_mean": self.stats.mean,
                "stats_var": self.stats.var(),
            }),
        };
        nn::write_checkpoint(path, &header, &values)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let (header, values) = nn::read_checkpoint(path)?;
        if header.kind != "policy" {
            return Err(CheckpointError::Format(format!("expected a policy checkpoint, found `{}`", header.kind)).into());
        }
        let meta: PolicyMeta = serde_json::from_value(header.meta).map_err(CheckpointError::Header)?;
        let actor_len: usize = header.layers.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        let act_dim = *header.layers.last().ok_or_else(|| CheckpointError::Format("empty layers".into()))?;
        if values.len() < actor_len + act_dim {
            return Err(CheckpointError::Format("policy payload too short".into()).into());
        }
        let actor = Mlp::from_params(header.layers, values[..actor_len].to_vec())?;
        let std_param = values[actor_len..actor_len + act_dim].to_vec();
        let critic = Mlp::from_params(meta.critic_layers, values[actor_len + act_dim..].to_vec())?;
        let actor_opt = Adam::new(actor.num_params() + act_dim);
        let critic_opt = Adam::new(critic.num_params());
        Ok(Self {
            actor,
            std_param,
            critic,
            stats: RunningStats::from_parts(meta.stats_count, meta.stats_mean, meta.stats_var),
            l_step: meta.l_step,
            actor_opt,
            critic_opt,
        })
    }
}

#[derive(Deserialize)]
struct PolicyMeta {
    critic_layers: Vec<usize>,
    l_step: f64,
    stats_count: u64,
    stats_mean: Vec<f64>,
    stats_var: Vec<f64>,
}

fn clip_grad_norm(g: &mut [f64], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        g.iter_mut().for_each(|v| *v *= s);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// `Â_t = Σ_l (γλ)^l δ_{t+l}`, truncated at the first terminal step.
    fn gae_double_sum(r: &[f64], v: &[f64], d: &[bool], gamma: f64, lam: f64) -> Vec<f64> {
        let n = r.len();
        let delta: Vec<f64> =
            (0..n).map(|t| r[t] + gamma * v[t + 1] * if d[t] { 0.0 } else { 1.0 } - v[t]).collect();
        (0..n)
            .map(|t| {
                let mut acc = 0.0;
                for l in 0..n - t {
                    acc += (gamma * lam).powi(l as i32) * delta[t + l];
                    if d[t + l] {
                        break;
                    }
                }
                acc
            })
            .collect()
    }

    #[test]
    fn gae_hand_cases() {
        let (a, ret) = gae(&[1.0, 1.0, 1.0], &[0.5, 0.5, 0.5, 0.0], &[false; 3], 0.9, 0.9);
        let oracle = gae_double_sum(&[1.0, 1.0, 1.0], &[0.5, 0.5, 0.5, 0.0], &[false; 3], 0.9, 0.9);
        for (x, y) in a.iter().zip(&oracle) {
            assert_relative_eq!(x, y, epsilon = 1e-12);
        }
        assert_relative_eq!(ret[2], 1.0, epsilon = 1e-12);
        // γ = 0: Â_t = r_t - V_t.
        let (a, _) = gae(&[2.0, 3.0], &[1.0, 0.5, 9.0], &[false, false], 0.0, 0.95);
        assert_eq!(a, vec![1.0, 2.5]);
        // λ = 0: Â_t = δ_t.
        let (a, _) = gae(&[2.0, 3.0], &[1.0, 0.5, 4.0], &[false, false], 0.5, 0.0);
        assert_eq!(a, vec![2.0 + 0.25 - 1.0, 3.0 + 2.0 - 0.5]);
    }

    #[test]
    fn gae_matches_double_sum_up_to_length_50() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for len in 1..=50 {
            for _ in 0..5 {
                let r: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
                let v: Vec<f64> = (0..=len).map(|_| rng.random_range(-1.0..1.0)).collect();
                let d: Vec<bool> = (0..len).map(|_| rng.random_bool(0.1)).collect();
                let (a, _) = gae(&r, &v, &d, 0.99, 0.95);
                for (x, y) in a.iter().zip(gae_double_sum(&r, &v, &d, 0.99, 0.95)) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn clip_arithmetic() {
        assert_relative_eq!(clipped_objective(1.5, 2.0, 0.2), 1.2 * 2.0, max_relative = 1e-15);
        assert_relative_eq!(clipped_objective(0.5, -2.0, 0.2), 0.8 * -2.0, max_relative = 1e-15);
        assert_eq!(clipped_objective(1.0, 0.7, 0.2), 0.7);
        assert_eq!(clipped_objective(1.1, 1.0, 0.2), 1.1);
    }

    #[test]
    fn entropy_closed_form() {
        let s = [0.3, 1.7, 2.2];
        let oracle: f64 = s.iter().map(|s: &f64| 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * s * s).ln()).sum();
        assert!((gaussian_entropy(&s) - oracle).abs() < 1e-12);
    }

    #[test]
    fn squash_log_det_matches_direct_formula() {
        for u in [-3.0f64, -0.4, 0.0, 0.9, 2.5] {
            let direct = (2.0 * (1.0 - u.tanh().powi(2))).ln();
            assert_relative_eq!(squash_log_det(&[u], 2.0), direct, max_relative = 1e-12);
        }
        assert!(squash_log_det(&[40.0], 1.0).is_finite());
    }

    #[test]
    fn zero_output_layer_gives_zero_mean_and_bounded_actions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = Policy::new(5, 2, 1.0, &PpoConfig { hidden: 16, ..Default::default() }, &mut rng);
        for x in [vec![0.0; 5], vec![3.0, -2.0, 1.0, 0.0, 5.0]] {
            assert_eq!(p.actor_forward(&x).unwrap().0, vec![0.0, 0.0]);
            assert_eq!(p.mean_action(&x).unwrap(), vec![0.0, 0.0]);
            let s = p.sample(&x, &mut rng).unwrap();
            assert!(s.action.iter().all(|a| a.abs() <= 1.0));
        }
        assert_relative_eq!(p.sigma()[0], 1.0, max_relative = 1e-12);
    }

    #[test]
    fn log_prob_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = Policy::new(4, 2, 1.0, &PpoConfig { hidden: 12, ..Default::default() }, &mut rng);
        // Give the output layer some weight so gradients reach the trunk.
        let n = p.actor.num_params();
        for k in n - 30..n {
            p.actor.params_mut()[k] = rng.random_range(-0.5..0.5);
        }
        p.std_param = vec![0.3, -0.2];
        let x = [0.5, -1.0, 0.3, 2.0];
        let u = [0.4, -0.7];
        let g = p.actor_grad(&[&x], &[&u], &[1.0], 0.0).unwrap();
        let lp = |q: &Policy| {
            let (mu, s) = q.actor_forward(&x).unwrap();
            gaussian_log_prob(&u, &mu, &s)
        };
        let h = 1e-6;
        for _ in 0..10 {
            let i = rng.random_range(0..n + 2);
            let bump = |q: &mut Policy, dh: f64| {
                if i < n {
                    q.actor.params_mut()[i] += dh;
                } else {
                    q.std_param[i - n] += dh;
                }
            };
            let mut a = p.clone();
            bump(&mut a, h);
            let mut b = p.clone();
            bump(&mut b, -h);
            let fd = (lp(&a) - lp(&b)) / (2.0 * h);
            let denom = fd.abs().max(g[i].abs()).max(1e-6);
            assert!((fd - g[i]).abs() / denom < 1e-4, "coord {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn ratio_identity_at_old_policy() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = Policy::new(3, 1, 1.0, &PpoConfig { hidden: 8, ..Default::default() }, &mut rng);
        let x = vec![0.2, 0.1, -0.3];
        let s = p.sample(&x, &mut rng).unwrap();
        let (mu, sigma) = p.actor_forward(&x).unwrap();
        assert_eq!(gaussian_log_prob(&s.u, &mu, &sigma), s.log_prob);
        assert_eq!(clipped_objective(1.0, 0.37, 0.2), 0.37);
    }

    #[test]
    fn bandit_smoke_test() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // A narrow initial std keeps the tanh squash near-linear, so the best
        // Gaussian mean is close to the best action.
        let cfg = PpoConfig {
            hidden: 32,
            rollout: 256,
            minibatch: 64,
            lr: 3e-3,
            c_ent: 0.0,
            init_log_std: 0.2f64.ln(),
            ..Default::default()
        };
        let mut p = Policy::new(1, 1, 1.0, &cfg, &mut rng);
        let target = 0.5;
        let x = vec![1.0];
        let mut steps = 0;
        while steps < 5000 {
            let mut ro = Rollout::default();
            for _ in 0..cfg.rollout {
                let s = p.sample(&x, &mut rng).unwrap();
                ro.psi.push(x.clone());
                ro.values.push(p.value(&x).unwrap());
                ro.rewards.push(-(s.action[0] - target).powi(2));
                ro.u.push(s.u);
                ro.log_prob.push(s.log_prob);
                ro.dones.push(true);
            }
            steps += cfg.rollout;
            p.ppo_update(&ro, &cfg, &mut rng).unwrap();
        }
        let a = p.mean_action(&x).unwrap()[0];
        assert!((a - target).abs() < 0.1, "mean action {a}");
    }

    #[test]
    fn teacher_features_two_particles() {
        let ps = ParticleSet::uniform(3, vec![0.0, 0.0, 7.0, 2.0, 0.0, 1.0]).unwrap();
        let f = BeliefFeatures::from_particles(&ps, &[0, 1]);
        assert_eq!(f.mu_l, vec![1.0, 0.0]);
        assert_relative_eq!(f.spread, 1.0, max_relative = 1e-15);
        let g = BeliefFeatures::from_gaussian(&GaussianBelief { mu: vec![1.0, 2.0, 3.0], log_var: vec![0.0; 3] }, &[0, 1]);
        assert_relative_eq!(g.spread, 2f64.sqrt(), max_relative = 1e-15);
        assert_eq!(policy_state(0.0, &[1.0, 2.0], &g, true).len(), policy_state_dim(2, 2, true));
        assert_eq!(policy_state(0.0, &[1.0, 2.0], &g, false).len(), policy_state_dim(2, 2, false));
    }

    proptest! {
        #[test]
        fn spread_is_rotation_invariant(
            pts in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0, 0.01f64..1.0), 2..40)
        ) {
            let (c, s) = (30f64.to_radians().cos(), 30f64.to_radians().sin());
            let thetas: Vec<f64> = pts.iter().flat_map(|p| [p.0, p.1]).collect();
            let rot: Vec<f64> = pts.iter().flat_map(|p| [c * p.0 - s * p.1, s * p.0 + c * p.1]).collect();
            let w: Vec<f64> = pts.iter().map(|p| p.2).collect();
            let tw: f64 = w.iter().sum();
            let w: Vec<f64> = w.iter().map(|x| x / tw).collect();
            let a = BeliefFeatures::from_particles(&ParticleSet::new(2, thetas, w.clone()).unwrap(), &[0, 1]);
            let b = BeliefFeatures::from_particles(&ParticleSet::new(2, rot, w).unwrap(), &[0, 1]);
            prop_assert!((a.spread - b.spread).abs() < 1e-12 * (1.0 + a.spread));
        }

        #[test]
        fn advantage_normalization_is_scale_invariant(
            adv in prop::collection::vec(-5.0f64..5.0, 2..50), c in 0.1f64..100.0
        ) {
            let a = normalize_advantages(&adv);
            let b = normalize_advantages(&adv.iter().map(|x| c * x).collect::<Vec<_>>());
            for (x, y) in a.iter().zip(&b) {
                prop_assert_eq!(x.signum(), y.signum());
                prop_assert!((x - y).abs() < 1e-6 * (1.0 + x.abs()));
            }
        }
    }
}
