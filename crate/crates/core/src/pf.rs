//! Particle-filter teacher over the full parameter vector.
//!
//! The parameters are static within an episode, so the bootstrap filter
//! reduces to pure reweighting by the sensor likelihood. Weight degeneracy is
//! handled by systematic resampling when the effective sample size drops
//! below `tau_ess · N`, followed by a Metropolis–Hastings random-walk move
//! that targets the exact posterior given the whole observation history.

use std::cell::Cell;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::ForwardModel;
use crate::scalar::Scalar;
use crate::sensor::{self, SensorParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PfError {
    #[error("invalid prior bounds for dimension {dim}: [{lo}, {hi}]")]
    InvalidBounds { dim: usize, lo: f64, hi: f64 },
    #[error("need at least 2 particles, got {0}")]
    TooFewParticles(usize),
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("every particle has zero likelihood for the reading")]
    DegenerateUpdate,
    #[error("observation steps must be non-decreasing ({prev} then {next})")]
    HistoryOrder { prev: usize, next: usize },
}

thread_local! {
    static CONSTRUCTED: Cell<u64> = const { Cell::new(0) };
}

/// Number of particle sets built on the current thread. Lets tests assert
/// that a code path never touches the filter.
pub fn sets_constructed_on_thread() -> u64 {
    CONSTRUCTED.with(|c| c.get())
}

fn note_construction() {
    CONSTRUCTED.with(|c| c.set(c.get() + 1));
}

/// Independent uniform prior on each coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxPrior<T> {
    pub lo: Vec<T>,
    pub hi: Vec<T>,
}

impl<T: Scalar> BoxPrior<T> {
    pub fn new(lo: Vec<T>, hi: Vec<T>) -> Result<Self, PfError> {
        if lo.len() != hi.len() {
            return Err(PfError::LengthMismatch { expected: lo.len(), got: hi.len() });
        }
        for (dim, (&l, &h)) in lo.iter().zip(&hi).enumerate() {
            if !(l.is_finite() && h.is_finite() && l <= h) {
                return Err(PfError::InvalidBounds { dim, lo: l.f64(), hi: h.f64() });
            }
        }
        Ok(Self { lo, hi })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn width(&self, j: usize) -> T {
        self.hi[j] - self.lo[j]
    }

    pub fn midpoint(&self, j: usize) -> T {
        (self.hi[j] + self.lo[j]) / T::c(2.0)
    }

    pub fn contains(&self, theta: &[T]) -> bool {
        theta.iter().zip(self.lo.iter().zip(&self.hi)).all(|(&t, (&l, &h))| t >= l && t <= h)
    }

    /// One draw, appended to `out`.
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut Vec<T>) {
        for (&l, &h) in self.lo.iter().zip(&self.hi) {
            let u: f64 = rng.random();
            out.push(l + (h - l) * T::c(u));
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<T> {
        let mut v = Vec::with_capacity(self.dim());
        self.sample_into(rng, &mut v);
        v
    }
}

impl BoxPrior<f64> {
    /// Training distribution of the planar plume parameters,
    /// ordered as [`crate::field::ThetaVector`].
    pub fn plume_training() -> Self {
        Self {
            lo: vec![5.0, 10.0, 10.0, 0.0, 0.0, 1.0, 0.0],
            hi: vec![20.0, 20.0, 3000.0, 6.0, 6.0, 5.0, 8.0],
        }
    }

    /// 3D analogue ordered as [`crate::field::ThetaVector3D`]; the altitude and
    /// vertical wind ranges are local choices.
    pub fn plume3d_training() -> Self {
        Self {
            lo: vec![5.0, 10.0, 1.0, 10.0, 0.0, 0.0, -1.0, 1.0, 0.0],
            hi: vec![20.0, 20.0, 10.0, 3000.0, 6.0, 6.0, 1.0, 5.0, 8.0],
        }
    }
}

/// Weighted particle approximation of the posterior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleSet<T> {
    dim: usize,
    /// Row-major `N × dim` parameter matrix.
    thetas: Vec<T>,
    weights: Vec<T>,
    pub step: usize,
    /// Normalized weights right after the last reweight, before any resampling.
    pub pre_resample_weights: Option<Vec<T>>,
}

impl<T: Scalar> ParticleSet<T> {
    pub fn new(dim: usize, thetas: Vec<T>, weights: Vec<T>) -> Result<Self, PfError> {
        let n = weights.len();
        if n < 2 {
            return Err(PfError::TooFewParticles(n));
        }
        if thetas.len() != n * dim {
            return Err(PfError::LengthMismatch { expected: n * dim, got: thetas.len() });
        }
        note_construction();
        Ok(Self { dim, thetas, weights, step: 0, pre_resample_weights: None })
    }

    /// Equally weighted set.
    pub fn uniform(dim: usize, thetas: Vec<T>) -> Result<Self, PfError> {
        let n = if dim == 0 { 0 } else { thetas.len() / dim };
        let w = T::one() / T::c(n.max(1) as f64);
        Self::new(dim, thetas, vec![w; n])
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn theta(&self, i: usize) -> &[T] {
        &self.thetas[i * self.dim..(i + 1) * self.dim]
    }

    pub fn thetas(&self) -> &[T] {
        &self.thetas
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[T], T)> + '_ {
        self.thetas.chunks_exact(self.dim).zip(self.weights.iter().copied())
    }

    pub fn reset_uniform(&mut self) {
        let w = T::one() / T::c(self.len() as f64);
        self.weights.iter_mut().for_each(|x| *x = w);
    }

    pub fn ess(&self) -> T {
        ess(&self.weights)
    }
}

/// Ordered `(z, pose)` readings of the current episode.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ObservationHistory<T> {
    entries: Vec<sensor::Observation<T>>,
}

impl<T: Scalar> ObservationHistory<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn push(&mut self, obs: sensor::Observation<T>) -> Result<(), PfError> {
        if let Some(last) = self.entries.last() {
            if obs.step < last.step {
                return Err(PfError::HistoryOrder { prev: last.step, next: obs.step });
            }
        }
        self.entries.push(obs);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[sensor::Observation<T>] {
        &self.entries
    }

    /// Sum of log-likelihoods of every reading under `theta`.
    pub fn log_likelihood<M: ForwardModel<T> + ?Sized>(&self, theta: &[T], model: &M, sp: &SensorParams<T>) -> T {
        self.entries.iter().map(|o| sensor::log_likelihood(o.z, &o.pose, theta, model, sp)).sum()
    }
}

/// I.i.d. draws from the prior with weights `1/N`.
pub fn init_particles<T: Scalar, R: Rng + ?Sized>(
    prior: &BoxPrior<T>,
    n: usize,
    rng: &mut R,
) -> Result<ParticleSet<T>, PfError> {
    BoxPrior::new(prior.lo.clone(), prior.hi.clone())?;
    if n < 2 {
        return Err(PfError::TooFewParticles(n));
    }
    let mut thetas = Vec::with_capacity(n * prior.dim());
    for _ in 0..n {
        prior.sample_into(rng, &mut thetas);
    }
    ParticleSet::uniform(prior.dim(), thetas)
}

/// Multiplies each weight by its likelihood ratio and renormalizes.
///
/// `likelihoods` must hold one nonnegative value per particle. The normalizer
/// is stabilized by `eps`; an all-zero product is reported as
/// [`PfError::DegenerateUpdate`] and leaves `ps` untouched.
pub fn reweight_with<T: Scalar>(ps: &mut ParticleSet<T>, likelihoods: &[T], eps: T) -> Result<(), PfError> {
    if likelihoods.len() != ps.len() {
        return Err(PfError::LengthMismatch { expected: ps.len(), got: likelihoods.len() });
    }
    let products: Vec<T> = ps.weights.iter().zip(likelihoods).map(|(&w, &l)| w * l).collect();
    let total: T = products.iter().copied().sum();
    if !(total > T::zero()) || !total.is_finite() {
        return Err(PfError::DegenerateUpdate);
    }
    let denom = total + eps;
    ps.weights = products.into_iter().map(|p| p / denom).collect();
    ps.pre_resample_weights = Some(ps.weights.clone());
    ps.step += 1;
    Ok(())
}

/// Bayes update of `ps` by one reading `z` taken at `pose`.
pub fn reweight<T: Scalar, M: ForwardModel<T> + ?Sized>(
    ps: &ParticleSet<T>,
    z: T,
    pose: &[T],
    model: &M,
    sp: &SensorParams<T>,
    eps: T,
) -> Result<ParticleSet<T>, PfError> {
    let likelihoods: Vec<T> = ps.thetas.chunks_exact(ps.dim).map(|th| sensor::likelihood(z, pose, th, model, sp)).collect();
    let mut next = ps.clone();
    reweight_with(&mut next, &likelihoods, eps)?;
    Ok(next)
}

/// Effective sample size `1 / Σ w²`.
pub fn ess<T: Scalar>(weights: &[T]) -> T {
    T::one() / weights.iter().map(|&w| w * w).sum::<T>()
}

/// Whether the set should be resampled at threshold fraction `tau_ess`.
pub fn needs_resample<T: Scalar>(ps: &ParticleSet<T>, tau_ess: T) -> bool {
    ps.ess() < tau_ess * T::c(ps.len() as f64)
}

/// Ancestor indices for systematic resampling with offset `u ∈ [0, 1)`
/// (the first pointer sits at `u/N`, later ones at stride `1/N`).
pub fn systematic_indices<T: Scalar>(weights: &[T], u: T) -> Vec<usize> {
    let n = weights.len();
    let nf = T::c(n as f64);
    let mut out = Vec::with_capacity(n);
    let mut cumulative = weights[0];
    let mut i = 0;
    for k in 0..n {
        let pointer = (T::c(k as f64) + u) / nf;
        while pointer >= cumulative && i + 1 < n {
            i += 1;
            cumulative = cumulative + weights[i];
        }
        out.push(i);
    }
    out
}

/// Resamples with the given ancestor indices and resets weights to `1/N`.
pub fn resample_from_indices<T: Scalar>(ps: &ParticleSet<T>, indices: &[usize]) -> ParticleSet<T> {
    let mut thetas = Vec::with_capacity(ps.thetas.len());
    for &i in indices {
        thetas.extend_from_slice(ps.theta(i));
    }
    let mut out = ParticleSet::uniform(ps.dim, thetas).expect("resampled set keeps its size");
    out.step = ps.step;
    out.pre_resample_weights = ps.pre_resample_weights.clone();
    out
}

pub fn systematic_resample<T: Scalar, R: Rng + ?Sized>(ps: &ParticleSet<T>, rng: &mut R) -> ParticleSet<T> {
    let u: f64 = rng.random();
    resample_from_indices(ps, &systematic_indices(&ps.weights, T::c(u)))
}

/// Weighted mean and biased weighted covariance (row-major `dim × dim`).
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub mean: Vec<T>,
    pub cov: Vec<T>,
}

impl<T: Scalar> Moments<T> {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn cov_at(&self, i: usize, j: usize) -> T {
        self.cov[i * self.dim() + j]
    }

    /// Trace of the covariance restricted to `indices`.
    pub fn block_trace(&self, indices: &[usize]) -> T {
        indices.iter().map(|&i| self.cov_at(i, i)).sum()
    }
}

pub fn weighted_moments<T: Scalar>(ps: &ParticleSet<T>) -> Moments<T> {
    let d = ps.dim;
    let mut mean = vec![T::zero(); d];
    for (th, w) in ps.iter() {
        for (m, &x) in mean.iter_mut().zip(th) {
            *m = *m + w * x;
        }
    }
    let mut cov = vec![T::zero(); d * d];
    let mut dev = vec![T::zero(); d];
    for (th, w) in ps.iter() {
        for j in 0..d {
            dev[j] = th[j] - mean[j];
        }
        for a in 0..d {
            let wa = w * dev[a];
            for b in a..d {
                cov[a * d + b] = cov[a * d + b] + wa * dev[b];
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            cov[a * d + b] = cov[b * d + a];
        }
    }
    Moments { mean, cov }
}

/// Settings of the rejuvenation move.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MhConfig {
    /// Proposal scale `h_t` applied to the covariance square root.
    pub step_scale: f64,
    pub n_moves: usize,
    /// Use a Cholesky factor of the full covariance instead of the diagonal.
    pub full_covariance: bool,
    /// Floor on the per-coordinate proposal root, as a fraction of the prior
    /// width. Keeps a collapsed set from freezing.
    pub min_rel_scale: f64,
}

impl Default for MhConfig {
    fn default() -> Self {
        Self { step_scale: 0.5, n_moves: 1, full_covariance: false, min_rel_scale: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MhStats {
    pub proposed: usize,
    pub accepted: usize,
}

impl MhStats {
    pub fn acceptance_rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }
}

/// Lower Cholesky factor; non-positive pivots are replaced by `floor²`.
fn cholesky<T: Scalar>(cov: &[T], d: usize, floor: &[T]) -> Vec<T> {
    let mut l = vec![T::zero(); d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = cov[i * d + j];
            for k in 0..j {
                s = s - l[i * d + k] * l[j * d + k];
            }
            if i == j {
                let fl = floor[i] * floor[i];
                l[i * d + i] = if s > fl { s.sqrt() } else { floor[i] };
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    l
}

/// Random-walk MH over an arbitrary log-target restricted to the prior box.
///
/// The proposal covariance is computed once from the current weighted set and
/// held fixed across the `n_moves` sweeps. Proposals outside the prior
/// support are rejected.
pub fn mh_move<T, R, F>(
    ps: &ParticleSet<T>,
    log_target: F,
    prior: &BoxPrior<T>,
    cfg: &MhConfig,
    rng: &mut R,
) -> (ParticleSet<T>, MhStats)
where
    T: Scalar,
    R: Rng + ?Sized,
    F: Fn(&[T]) -> T,
{
    let d = ps.dim;
    let moments = weighted_moments(ps);
    let rel = T::c(cfg.min_rel_scale.max(1e-8));
    let floor: Vec<T> = (0..d).map(|j| rel * prior.width(j).max(T::c(1e-300))).collect();
    let h = T::c(cfg.step_scale);
    let factor: Vec<T> = if cfg.full_covariance {
        cholesky(&moments.cov, d, &floor)
    } else {
        let mut diag = vec![T::zero(); d * d];
        for j in 0..d {
            diag[j * d + j] = moments.cov_at(j, j).max(T::zero()).sqrt().max(floor[j]);
        }
        diag
    };

    let mut out = ps.clone();
    let mut stats = MhStats::default();
    let mut current_lp: Vec<T> = out.thetas.chunks_exact(d).map(&log_target).collect();
    let mut proposal = vec![T::zero(); d];
    let mut xi = vec![T::zero(); d];
    for _ in 0..cfg.n_moves {
        for i in 0..out.len() {
            for x in xi.iter_mut() {
                let n: f64 = rng.sample(StandardNormal);
                *x = T::c(n);
            }
            let cur = &out.thetas[i * d..(i + 1) * d];
            for a in 0..d {
                let mut step = T::zero();
                for b in 0..=a {
                    step = step + factor[a * d + b] * xi[b];
                }
                proposal[a] = cur[a] + h * step;
            }
            let u: f64 = rng.random();
            stats.proposed += 1;
            if !prior.contains(&proposal) {
                continue;
            }
            let lp = log_target(&proposal);
            let log_ratio = lp - current_lp[i];
            if log_ratio.is_nan() {
                continue;
            }
            if log_ratio >= T::zero() || T::c(u.ln()) < log_ratio {
                out.thetas[i * d..(i + 1) * d].copy_from_slice(&proposal);
                current_lp[i] = lp;
                stats.accepted += 1;
            }
        }
    }
    (out, stats)
}

/// Rejuvenation targeting `prior(Θ) · Π_k ℓ(z_k | p_k, Θ)` over the history.
pub fn mh_rejuvenate<T, M, R>(
    ps: &ParticleSet<T>,
    hist: &ObservationHistory<T>,
    prior: &BoxPrior<T>,
    model: &M,
    sp: &SensorParams<T>,
    cfg: &MhConfig,
    rng: &mut R,
) -> (ParticleSet<T>, MhStats)
where
    T: Scalar,
    M: ForwardModel<T> + ?Sized,
    R: Rng + ?Sized,
{
    mh_move(ps, |th| hist.log_likelihood(th, model, sp), prior, cfg, rng)
}
