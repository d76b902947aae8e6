//! Baseline agents: greedy expected-KL planner and random walk.

use rand::Rng;

use crate::pf::ParticleSet;
use crate::reward::{kl_weights, KL_EPS};
use crate::sensor::sample_observation;

use super::config::ScenarioConfig;
use super::teacher::scaled_likelihoods;

/// Displacements of length `l_step`: eight compass directions starting east
/// and turning counter-clockwise; in 3D followed by straight up and down.
pub fn compass_candidates(pose_dim: usize, l_step: f64) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = (0..8)
        .map(|k| {
            let a = k as f64 * std::f64::consts::FRAC_PI_4;
            let mut v = vec![l_step * a.cos(), l_step * a.sin()];
            v.resize(pose_dim, 0.0);
            v
        })
        .collect();
    if pose_dim == 3 {
        out.push(vec![0.0, 0.0, l_step]);
        out.push(vec![0.0, 0.0, -l_step]);
    }
    out
}

/// Index drawn from a normalized weight vector by inverse CDF.
pub fn sample_index<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Monte Carlo estimate of `E_z[KL(w'(z) ‖ w)]`: draw a hypothesis
/// `i ~ w`, a reading `z | i`, reweight hypothetically and score the KL.
pub fn expected_information_gain<R, D, L>(weights: &[f64], samples: usize, mut draw_z: D, likelihoods: L, rng: &mut R) -> f64
where
    R: Rng + ?Sized,
    D: FnMut(usize, &mut R) -> f64,
    L: Fn(f64) -> Vec<f64>,
{
    let mut total = 0.0;
    for _ in 0..samples {
        let i = sample_index(weights, rng);
        let z = draw_z(i, rng);
        let lik = likelihoods(z);
        let prod: Vec<f64> = weights.iter().zip(&lik).map(|(w, l)| w * l).collect();
        let norm: f64 = prod.iter().sum();
        if !(norm > 0.0 && norm.is_finite()) {
            continue;
        }
        let post: Vec<f64> = prod.iter().map(|p| p / norm).collect();
        total += kl_weights(&post, weights, KL_EPS).expect("equal lengths");
    }
    total / samples.max(1) as f64
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Greedy one-step expected-KL choice among the compass candidates.
/// Candidates share random numbers so their scores differ only through the
/// candidate pose. Returns the displacement and its candidate index.
pub fn greedy_planner_step<R: Rng + Clone>(
    ps: &ParticleSet<f64>,
    pose: &[f64],
    cfg: &ScenarioConfig,
    rng: &mut R,
) -> (Vec<f64>, usize) {
    let cands = compass_candidates(cfg.pose_dim(), cfg.step_length);
    let idx = greedy_among(ps, pose, &cands, cfg, rng);
    (cands[idx].clone(), idx)
}

pub fn greedy_among<R: Rng + Clone>(
    ps: &ParticleSet<f64>,
    pose: &[f64],
    cands: &[Vec<f64>],
    cfg: &ScenarioConfig,
    rng: &mut R,
) -> usize {
    if cands.len() <= 1 {
        return 0;
    }
    let model = cfg.model();
    let sp = cfg.sensor;
    let base = rng.clone();
    let scores: Vec<f64> = cands
        .iter()
        .map(|d| {
            let target: Vec<f64> = pose.iter().zip(d).map(|(p, a)| p + a).collect();
            let mut r = base.clone();
            expected_information_gain(
                ps.weights(),
                cfg.planner_samples,
                |i, r: &mut R| sample_observation(model.eval_clamped(&target, ps.theta(i)), &sp, r),
                |z| scaled_likelihoods(ps, z, &target, model, &sp),
                &mut r,
            )
        })
        .collect();
    // Advance the caller's stream past the shared draws.
    let _: u64 = rng.random();
    argmax_first(&scores)
}

/// Uniformly random compass move.
pub fn random_walk_step<R: Rng + ?Sized>(cfg: &ScenarioConfig, rng: &mut R) -> Vec<f64> {
    let cands = compass_candidates(cfg.pose_dim(), cfg.step_length);
    let k = rng.random_range(0..cands.len());
    cands[k].clone()
}
