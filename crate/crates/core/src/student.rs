//! Amortized diagonal-Gaussian posterior over Θ.
//!
//! The network maps a window of the `K` most recent `(z, pose)` pairs to a
//! Gaussian in *scaled* parameter coordinates `θ̃ = (θ - offset)/scale`
//! (see [`Affine`]). The log-variance clip applies in those coordinates;
//! [`GaussianBelief::to_physical`] maps a belief back to raw units.

use std::collections::VecDeque;
use std::path::Path;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{self, Adam, CheckpointError, CheckpointHeader, Mlp, NnError, RunningStats};
use crate::pf::{BoxPrior, ParticleSet};

/// `ln(1e-3²)`.
pub const LOG_VAR_MIN: f64 = -13.815510557964274;
/// `ln(10²)`.
pub const LOG_VAR_MAX: f64 = 4.605170185988092;
/// Additive weight stabilizer in the distillation loss.
pub const WEIGHT_EPS: f64 = 1e-12;

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Error)]
pub enum StudentError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("belief dimension {belief} does not match particle dimension {particles}")]
    DimensionMismatch { belief: usize, particles: usize },
    #[error("empty training batch")]
    EmptyBatch,
    #[error("non-finite distillation loss")]
    NonFiniteLoss,
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Diagonal Gaussian given by its mean and log-variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianBelief {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl GaussianBelief {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_var.iter().map(|lv| (0.5 * lv).exp()).collect()
    }

    /// `-ln N(theta; μ, diag σ²)`.
    pub fn nll(&self, theta: &[f64]) -> f64 {
        self.mu
            .iter()
            .zip(&self.log_var)
            .zip(theta)
            .map(|((&m, &lv), &t)| 0.5 * (lv + (t - m) * (t - m) / lv.exp() + LN_2PI))
            .sum()
    }

    /// Maps a belief over scaled coordinates back to raw parameter units.
    pub fn to_physical(&self, affine: &Affine) -> GaussianBelief {
        GaussianBelief {
            mu: self.mu.iter().zip(&affine.offset).zip(&affine.scale).map(|((m, o), s)| o + s * m).collect(),
            log_var: self.log_var.iter().zip(&affine.scale).map(|(lv, s)| lv + 2.0 * s.ln()).collect(),
        }
    }
}

/// Per-coordinate affine map between raw parameters and the coordinates the
/// student predicts in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Affine {
    pub fn identity(dim: usize) -> Self {
        Self { offset: vec![0.0; dim], scale: vec![1.0; dim] }
    }

    /// Centers on the prior midpoint and scales by the prior standard
    /// deviation `width/√12`, so the prior has unit variance per coordinate.
    pub fn from_prior(prior: &BoxPrior<f64>) -> Self {
        let d = prior.dim();
        let scale = (0..d).map(|j| (prior.width(j) / 12f64.sqrt()).max(1e-12)).collect();
        Self { offset: (0..d).map(|j| prior.midpoint(j)).collect(), scale }
    }

    pub fn dim(&self) -> usize {
        self.offset.len()
    }

    pub fn forward(&self, theta: &[f64]) -> Vec<f64> {
        theta.iter().zip(&self.offset).zip(&self.scale).map(|((t, o), s)| (t - o) / s).collect()
    }
}

/// Sliding window of recent readings, most recent first, zero-padded.
///
/// Readings are compressed with `sign(z)·ln(1 + |z|)` before entering the
/// window: plume intensities span many orders of magnitude.
#[derive(Debug, Clone, PartialEq)]
pub struct InputWindow {
    k: usize,
    pose_dim: usize,
    entries: VecDeque<Vec<f64>>,
}

pub fn compress_reading(z: f64) -> f64 {
    z.signum() * z.abs().ln_1p()
}

impl InputWindow {
    pub fn new(k: usize, pose_dim: usize) -> Self {
        Self { k, pose_dim, entries: VecDeque::with_capacity(k) }
    }

    pub fn len(&self) -> usize {
        self.k * (1 + self.pose_dim)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, z: f64, pose: &[f64]) {
        debug_assert_eq!(pose.len(), self.pose_dim);
        if self.entries.len() == self.k {
            self.entries.pop_back();
        }
        let mut e = Vec::with_capacity(1 + self.pose_dim);
        e.push(compress_reading(z));
        e.extend_from_slice(pose);
        self.entries.push_front(e);
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for e in &self.entries {
            out.extend_from_slice(e);
        }
        out.resize(self.len(), 0.0);
        out
    }
}

/// Sufficient statistics of a weighted particle set for the Gaussian NLL:
/// per-dimension weighted mean and variance of the scaled particles, using
/// `ε`-stabilized normalized weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillTarget {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl DistillTarget {
    pub fn from_particles(ps: &ParticleSet<f64>, affine: &Affine) -> Result<Self, StudentError> {
        if ps.dim() != affine.dim() {
            return Err(StudentError::DimensionMismatch { belief: affine.dim(), particles: ps.dim() });
        }
        let d = ps.dim();
        let total: f64 = ps.weights().iter().map(|w| w + WEIGHT_EPS).sum();
        let mut mean = vec![0.0; d];
        for (th, w) in ps.iter() {
            let wt = (w + WEIGHT_EPS) / total;
            for j in 0..d {
                mean[j] += wt * (th[j] - affine.offset[j]) / affine.scale[j];
            }
        }
        let mut var = vec![0.0; d];
        for (th, w) in ps.iter() {
            let wt = (w + WEIGHT_EPS) / total;
            for j in 0..d {
                let e = (th[j] - affine.offset[j]) / affine.scale[j] - mean[j];
                var[j] += wt * e * e;
            }
        }
        Ok(Self { mean, var })
    }

    /// Point-mass target (zero variance).
    pub fn point(theta_scaled: Vec<f64>) -> Self {
        let d = theta_scaled.len();
        Self { mean: theta_scaled, var: vec![0.0; d] }
    }
}

/// `-Σ_i w̃_i ln N(θ̃_i; μ, diag σ²)` given the target's moments.
pub fn distill_loss_target(belief: &GaussianBelief, target: &DistillTarget) -> Result<f64, StudentError> {
    if belief.dim() != target.mean.len() {
        return Err(StudentError::DimensionMismatch { belief: belief.dim(), particles: target.mean.len() });
    }
    Ok((0..belief.dim())
        .map(|j| {
            let dm = target.mean[j] - belief.mu[j];
            0.5 * (belief.log_var[j] + (target.var[j] + dm * dm) / belief.log_var[j].exp() + LN_2PI)
        })
        .sum())
}

/// Weighted NLL of raw particles under a belief expressed in raw units.
pub fn distill_loss(belief: &GaussianBelief, ps: &ParticleSet<f64>) -> Result<f64, StudentError> {
    let target = DistillTarget::from_particles(ps, &Affine::identity(ps.dim()))?;
    distill_loss_target(belief, &target)
}

/// Gradient of [`distill_loss_target`] w.r.t. the unclipped head output
/// `[μ, s]` where `log_var = clip(s)`. Zero gradient on clipped coordinates.
fn loss_grad_head(raw: &[f64], target: &DistillTarget) -> Vec<f64> {
    let d = target.mean.len();
    let mut g = vec![0.0; 2 * d];
    for j in 0..d {
        let mu = raw[j];
        let s = raw[d + j];
        let lv = s.clamp(LOG_VAR_MIN, LOG_VAR_MAX);
        let inv_var = (-lv).exp();
        let dm = target.mean[j] - mu;
        g[j] = -dm * inv_var;
        if (LOG_VAR_MIN..=LOG_VAR_MAX).contains(&s) {
            g[d + j] = 0.5 * (1.0 - (target.var[j] + dm * dm) * inv_var);
        }
    }
    g
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudentConfig {
    pub window: usize,
    pub hidden: usize,
    pub lr: f64,
    /// Minibatch size drawn from the replay buffer per update.
    pub batch: usize,
    pub buffer: usize,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self { window: 8, hidden: 128, lr: 1e-3, batch: 16, buffer: 4096 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentNet {
    pub window: usize,
    pub pose_dim: usize,
    pub dim: usize,
    pub mlp: Mlp,
    pub stats: RunningStats,
    pub affine: Affine,
    adam: Adam,
}

impl StudentNet {
    pub fn new<R: Rng + ?Sized>(cfg: &StudentConfig, pose_dim: usize, affine: Affine, rng: &mut R) -> Self {
        let dim = affine.dim();
        let n_in = cfg.window * (1 + pose_dim);
        let mlp = Mlp::new(&[n_in, cfg.hidden, cfg.hidden, 2 * dim], 0.1, rng);
        let adam = Adam::new(mlp.num_params());
        Self { window: cfg.window, pose_dim, dim, mlp, stats: RunningStats::new(n_in), affine, adam }
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn new_window(&self) -> InputWindow {
        InputWindow::new(self.window, self.pose_dim)
    }

    /// Welford update of the input statistics (training mode only).
    pub fn observe_input(&mut self, x: &[f64]) {
        self.stats.update(x);
    }

    pub fn standardize(&self, x: &[f64]) -> Vec<f64> {
        self.stats.normalize(x)
    }

    fn head_to_belief(&self, raw: &[f64]) -> GaussianBelief {
        let d = self.dim;
        GaussianBelief {
            mu: raw[..d].to_vec(),
            log_var: raw[d..].iter().map(|s| s.clamp(LOG_VAR_MIN, LOG_VAR_MAX)).collect(),
        }
    }

    /// Belief in scaled coordinates with frozen statistics.
    pub fn forward(&self, x: &[f64]) -> Result<GaussianBelief, StudentError> {
        let raw = self.mlp.forward(&self.standardize(x))?;
        Ok(self.head_to_belief(&raw))
    }

    /// Belief in raw parameter units.
    pub fn forward_physical(&self, x: &[f64]) -> Result<GaussianBelief, StudentError> {
        Ok(self.forward(x)?.to_physical(&self.affine))
    }

    pub fn target(&self, ps: &ParticleSet<f64>) -> Result<DistillTarget, StudentError> {
        DistillTarget::from_particles(ps, &self.affine)
    }

    /// Mean loss over the batch and its gradient w.r.t. the flat parameters.
    pub fn loss_and_grad(&self, batch: &[(Vec<f64>, DistillTarget)]) -> Result<(f64, Vec<f64>), StudentError> {
        if batch.is_empty() {
            return Err(StudentError::EmptyBatch);
        }
        let mut grads = vec![0.0; self.mlp.num_params()];
        let mut loss = 0.0;
        let inv_n = 1.0 / batch.len() as f64;
        for (x, target) in batch {
            let (raw, trace) = self.mlp.forward_traced(&self.standardize(x))?;
            loss += distill_loss_target(&self.head_to_belief(&raw), target)?;
            let g: Vec<f64> = loss_grad_head(&raw, target).into_iter().map(|v| v * inv_n).collect();
            self.mlp.backward(&trace, &g, &mut grads);
        }
        Ok((loss * inv_n, grads))
    }

    /// One Adam step on the batch; returns the pre-step mean loss. A
    /// non-finite loss or gradient leaves the network untouched.
    pub fn train_step(&mut self, batch: &[(Vec<f64>, DistillTarget)], lr: f64) -> Result<f64, StudentError> {
        let (loss, grads) = self.loss_and_grad(batch)?;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            warn!("student: non-finite loss {loss}; skipping update");
            return Err(StudentError::NonFiniteLoss);
        }
        self.adam.step(self.mlp.params_mut(), &grads, lr);
        Ok(loss)
    }

    pub fn save(&self, path: &Path) -> Result<(), StudentError> {
        let header = CheckpointHeader {
            kind: "student".into(),
            layers: self.mlp.sizes().to_vec(),
            n_values: self.mlp.num_params(),
            meta: serde_json::json!({
                "window": self.window,
                "pose_dim": self.pose_dim,
                "log_var_clip": [LOG_VAR_MIN, LOG_VAR_MAX],
                "stats_count": self.stats.count,
                "stats_mean": self.stats.mean,
                "stats_var": self.stats.var(),
                "affine": self.affine,
            }),
        };
        nn::write_checkpoint(path, &header, self.mlp.params())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, StudentError> {
        let (header, values) = nn::read_checkpoint(path)?;
        if header.kind != "student" {
            return Err(CheckpointError::Format(format!("expected a student checkpoint, found `{}`", header.kind)).into());
        }
        let meta: StudentMeta = serde_json::from_value(header.meta).map_err(CheckpointError::Header)?;
        let mlp = Mlp::from_params(header.layers, values)?;
        let dim = mlp.output_dim() / 2;
        if meta.affine.dim() != dim || mlp.input_dim() != meta.window * (1 + meta.pose_dim) {
            return Err(CheckpointError::Format("student header inconsistent with layer shapes".into()).into());
        }
        let adam = Adam::new(mlp.num_params());
        Ok(Self {
            window: meta.window,
            pose_dim: meta.pose_dim,
            dim,
            stats: RunningStats::from_parts(meta.stats_count, meta.stats_mean, meta.stats_var),
            affine: meta.affine,
            mlp,
            adam,
        })
    }
}

#[derive(Deserialize)]
struct StudentMeta {
    window: usize,
    pose_dim: usize,
    stats_count: u64,
    stats_mean: Vec<f64>,
    stats_var: Vec<f64>,
    affine: Affine,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_net(seed: u64, dim: usize) -> StudentNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = StudentConfig { window: 3, hidden: 16, ..Default::default() };
        StudentNet::new(&cfg, 2, Affine::identity(dim), &mut rng)
    }

    #[test]
    fn clip_constants() {
        assert_relative_eq!(LOG_VAR_MIN, (1e-3f64 * 1e-3).ln(), max_relative = 1e-15);
        assert_relative_eq!(LOG_VAR_MAX, 100f64.ln(), max_relative = 1e-15);
    }

    #[test]
    fn nll_at_mean_unit_variance() {
        let b = GaussianBelief { mu: vec![0.5; 7], log_var: vec![0.0; 7] };
        // Two coincident particles act as a single atom.
        let ps = ParticleSet::uniform(7, vec![0.5; 14]).unwrap();
        let l = distill_loss(&b, &ps).unwrap();
        assert_relative_eq!(l, 3.5 * (2.0 * std::f64::consts::PI).ln(), max_relative = 1e-12);
        assert_relative_eq!(l, 6.432570, epsilon = 1e-6);
        assert_relative_eq!(b.nll(&[0.5; 7]), l, max_relative = 1e-14);
    }

    #[test]
    fn loss_is_weight_scale_invariant_and_stationary_at_mle() {
        let thetas = vec![0.0, 1.0, 2.0, -1.0, 4.0, 0.5];
        let a = ParticleSet::new(2, thetas.clone(), vec![0.2, 0.3, 0.5]).unwrap();
        let b = GaussianBelief { mu: vec![0.3, 0.1], log_var: vec![0.2, -0.4] };
        let t = DistillTarget::from_particles(&a, &Affine::identity(2)).unwrap();
        let l1 = distill_loss_target(&b, &t).unwrap();
        // Doubling then renormalizing reproduces the same weights exactly.
        let doubled: Vec<f64> = [0.4, 0.6, 1.0].iter().map(|w| w / 2.0).collect();
        let c = ParticleSet::new(2, thetas, doubled).unwrap();
        let t2 = DistillTarget::from_particles(&c, &Affine::identity(2)).unwrap();
        assert_relative_eq!(l1, distill_loss_target(&b, &t2).unwrap(), max_relative = 1e-14);

        let raw: Vec<f64> = t.mean.iter().copied().chain(t.var.iter().map(|v| v.ln())).collect();
        for g in loss_grad_head(&raw, &t) {
            assert!(g.abs() < 1e-8);
        }
    }

    #[test]
    fn constant_head_and_clip_ceiling() {
        let mut net = small_net(3, 2);
        net.mlp.zero_output_weights();
        let off = net.mlp.output_bias_offset();
        net.mlp.params_mut()[off..off + 4].copy_from_slice(&[1.5, -2.0, 100.0, -100.0]);
        for x in [vec![0.0; 9], vec![3.0; 9]] {
            let b = net.forward(&x).unwrap();
            assert_eq!(b.mu, vec![1.5, -2.0]);
            assert_eq!(b.log_var, vec![LOG_VAR_MAX, LOG_VAR_MIN]);
        }
    }

    #[test]
    fn batch_gradient_matches_finite_differences() {
        let mut net = small_net(4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch: Vec<(Vec<f64>, DistillTarget)> = (0..4)
            .map(|_| {
                let x: Vec<f64> = (0..9).map(|_| rng.random_range(-2.0..2.0)).collect();
                let t = DistillTarget {
                    mean: (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    var: (0..3).map(|_| rng.random_range(0.1..2.0)).collect(),
                };
                (x, t)
            })
            .collect();
        for (x, _) in &batch {
            net.observe_input(x);
        }
        let (_, grads) = net.loss_and_grad(&batch).unwrap();
        let h = 1e-6;
        for _ in 0..10 {
            let i = rng.random_range(0..net.mlp.num_params());
            let mut p = net.clone();
            p.mlp.params_mut()[i] += h;
            let mut m = net.clone();
            m.mlp.params_mut()[i] -= h;
            let fd = (p.loss_and_grad(&batch).unwrap().0 - m.loss_and_grad(&batch).unwrap().0) / (2.0 * h);
            let denom = fd.abs().max(grads[i].abs()).max(1e-6);
            assert!((fd - grads[i]).abs() / denom < 1e-4, "coord {i}: fd {fd} vs {}", grads[i]);
        }
    }

    #[test]
    fn zero_lr_is_noop() {
        let mut net = small_net(6, 2);
        let before = net.mlp.clone();
        let batch = vec![(vec![0.5; 9], DistillTarget { mean: vec![1.0, 2.0], var: vec![0.5, 0.5] })];
        net.train_step(&batch, 0.0).unwrap();
        assert_eq!(net.mlp, before);
    }

    #[test]
    fn window_is_most_recent_first_and_padded() {
        let mut w = InputWindow::new(2, 2);
        assert_eq!(w.flatten(), vec![0.0; 6]);
        w.push(0.0, &[1.0, 2.0]);
        assert_eq!(w.flatten(), vec![0.0, 1.0, 2.0, 0.0, 0.0, 0.0]);
        w.push(std::f64::consts::E - 1.0, &[3.0, 4.0]);
        w.push(-(std::f64::consts::E - 1.0), &[5.0, 6.0]);
        let f = w.flatten();
        assert_relative_eq!(f[0], -1.0, max_relative = 1e-15);
        assert_eq!(&f[1..3], &[5.0, 6.0]);
        assert_relative_eq!(f[3], 1.0, max_relative = 1e-15);
    }

    #[test]
    fn physical_mapping_of_scaled_belief() {
        let prior = BoxPrior::new(vec![0.0, 10.0], vec![12f64.sqrt(), 10.0 + 2.0 * 12f64.sqrt()]).unwrap();
        let aff = Affine::from_prior(&prior);
        assert_relative_eq!(aff.scale[0], 1.0, max_relative = 1e-14);
        assert_relative_eq!(aff.scale[1], 2.0, max_relative = 1e-14);
        let b = GaussianBelief { mu: vec![1.0, -1.0], log_var: vec![0.0, 0.0] };
        let p = b.to_physical(&aff);
        assert_relative_eq!(p.mu[1], 10.0 + 12f64.sqrt() - 2.0, max_relative = 1e-14);
        assert_relative_eq!(p.std()[1], 2.0, max_relative = 1e-14);
        let back = aff.forward(&p.mu);
        assert_relative_eq!(back[0], 1.0, max_relative = 1e-14);
    }

    #[test]
    fn checkpoint_roundtrip_preserves_forward() {
        let mut net = small_net(7, 2);
        net.affine = Affine { offset: vec![1.0, 2.0], scale: vec![3.0, 4.0] };
        for k in 0..5 {
            net.observe_input(&[k as f64; 9]);
        }
        let dir = std::env::temp_dir().join(format!("plumeseek-student-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("student.ckpt");
        net.save(&path).unwrap();
        let loaded = StudentNet::load(&path).unwrap();
        let x = [0.7; 9];
        let a = net.forward_physical(&x).unwrap();
        let b = loaded.forward_physical(&x).unwrap();
        for (u, v) in a.mu.iter().zip(&b.mu) {
            assert_relative_eq!(u, v, max_relative = 1e-12);
        }
        std::fs::remove_dir_all(&dir).ok();
    }
}
