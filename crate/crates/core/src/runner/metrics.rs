//! Episode metrics and post-hoc teacher audit of recorded trajectories.

use serde::{Deserialize, Serialize};

use super::config::ScenarioConfig;
use super::episode::{stream_rng, RunError, DOMAIN_INIT};
use super::record::EpisodeRecord;
use super::teacher::Teacher;

/// Aggregates over a set of episodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub episodes: usize,
    /// Fraction of episodes ended by the certificate.
    pub sr: f64,
    /// Mean number of steps.
    pub te: f64,
    /// Source localization error of the posterior-mean location.
    pub sle_mean: f64,
    pub sle_std: f64,
    /// Per-record root-mean-square error over all parameters, averaged.
    pub fpe_rmse: f64,
    /// Per-record mean absolute error over all parameters, averaged.
    pub fpe_mae: f64,
    /// Mean negative log density of the true parameters under the terminal
    /// belief.
    pub uq_nll: f64,
}

pub fn localization_error(rec: &EpisodeRecord, location: &[usize]) -> f64 {
    location.iter().map(|&j| (rec.estimate[j] - rec.theta_true[j]).powi(2)).sum::<f64>().sqrt()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// `None` for an empty record set. Reduces in record order.
pub fn compute_metrics(records: &[EpisodeRecord], location: &[usize]) -> Option<MetricsSummary> {
    if records.is_empty() {
        return None;
    }
    let n = records.len() as f64;
    let sle: Vec<f64> = records.iter().map(|r| localization_error(r, location)).collect();
    let sle_mean = mean(&sle);
    let sle_std = (sle.iter().map(|e| (e - sle_mean).powi(2)).sum::<f64>() / n).sqrt();
    let rmse: Vec<f64> = records
        .iter()
        .map(|r| {
            let d = r.estimate.len() as f64;
            (r.estimate.iter().zip(&r.theta_true).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / d).sqrt()
        })
        .collect();
    let mae: Vec<f64> = records
        .iter()
        .map(|r| r.estimate.iter().zip(&r.theta_true).map(|(a, b)| (a - b).abs()).sum::<f64>() / r.estimate.len() as f64)
        .collect();
    let nll: Vec<f64> = records.iter().map(|r| r.terminal_belief.nll(&r.theta_true)).collect();
    Some(MetricsSummary {
        episodes: records.len(),
        sr: records.iter().filter(|r| r.success()).count() as f64 / n,
        te: mean(&records.iter().map(|r| r.stop_step as f64).collect::<Vec<_>>()),
        sle_mean,
        sle_std,
        fpe_rmse: mean(&rmse),
        fpe_mae: mean(&mae),
        uq_nll: mean(&nll),
    })
}

/// Filters the recorded readings of `rec` with a fresh teacher of
/// `n_particles` and returns its final location spread. Lets teacher-free
/// deployment episodes be scored against the Bayes posterior afterwards.
pub fn audit_teacher_spread(cfg: &ScenarioConfig, rec: &EpisodeRecord, n_particles: usize) -> Result<f64, RunError> {
    let mut rng = stream_rng(rec.seed, DOMAIN_INIT, 1_000_000 + rec.index);
    let mut teacher = Teacher::new(cfg, n_particles, &mut rng)?;
    for (t, s) in rec.steps.iter().enumerate() {
        teacher.assimilate(s.z, &s.pose, t + 1, &mut rng);
    }
    Ok(teacher.spread(cfg.location()))
}
