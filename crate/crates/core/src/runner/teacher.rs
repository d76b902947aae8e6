//! The particle-filter teacher as used inside an episode.

use log::debug;
use rand::Rng;

use crate::field::ForwardModel;
use crate::pf::{
    init_particles, mh_rejuvenate, needs_resample, reweight_with, systematic_resample, BoxPrior, MhConfig,
    ObservationHistory, ParticleSet, PfError,
};
use crate::reward::{kl_weights, KL_EPS};
use crate::sensor::{mixture_log_density, Observation, SensorParams};
use crate::stopping::spread_particles;

use super::config::{FieldKind, ScenarioConfig};

/// Normalizer stabilizer of the reweight.
pub const NORMALIZER_EPS: f64 = 1e-300;

/// What one assimilation did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TeacherStep {
    /// `KL(w_t ‖ w_{t-1})` over the weights entering and leaving the
    /// reweight, both before any resampling.
    pub kl: f64,
    pub degenerate: bool,
    pub resampled: bool,
    pub mh_acceptance: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Teacher {
    pub ps: ParticleSet<f64>,
    pub hist: ObservationHistory<f64>,
    prior: BoxPrior<f64>,
    kind: FieldKind,
    sensor: SensorParams<f64>,
    tau_ess: f64,
    mh: Option<MhConfig>,
}

/// Per-particle likelihoods divided by their maximum. The normalized
/// posterior is unchanged; the scaling only keeps sharp likelihoods from
/// underflowing to an all-zero vector.
pub fn scaled_likelihoods(
    ps: &ParticleSet<f64>,
    z: f64,
    pose: &[f64],
    model: &dyn ForwardModel<f64>,
    sp: &SensorParams<f64>,
) -> Vec<f64> {
    let logs: Vec<f64> =
        ps.thetas().chunks_exact(ps.dim()).map(|th| mixture_log_density(z, model.eval_clamped(pose, th), sp)).collect();
    let hi = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !hi.is_finite() {
        return vec![0.0; logs.len()];
    }
    logs.iter().map(|l| (l - hi).exp()).collect()
}

impl Teacher {
    pub fn new<R: Rng + ?Sized>(cfg: &ScenarioConfig, n: usize, rng: &mut R) -> Result<Self, PfError> {
        let prior = cfg.prior();
        let ps = init_particles(&prior, n, rng)?;
        Ok(Self {
            ps,
            hist: ObservationHistory::new(),
            prior,
            kind: cfg.model,
            sensor: cfg.sensor,
            tau_ess: cfg.tau_ess,
            mh: if cfg.ablation.no_mh { None } else { Some(cfg.mh) },
        })
    }

    pub fn spread(&self, location: &[usize]) -> f64 {
        spread_particles(&self.ps, location)
    }

    /// Reweight, reward, then resample and rejuvenate when the ESS drops
    /// below `τ_ESS·N`.
    pub fn assimilate<R: Rng + ?Sized>(&mut self, z: f64, pose: &[f64], step: usize, rng: &mut R) -> TeacherStep {
        let w_old = self.ps.weights().to_vec();
        let lik = scaled_likelihoods(&self.ps, z, pose, self.kind.model(), &self.sensor);
        let (kl, degenerate) = match reweight_with(&mut self.ps, &lik, NORMALIZER_EPS) {
            Ok(()) => (kl_weights(self.ps.weights(), &w_old, KL_EPS).expect("equal lengths"), false),
            Err(PfError::DegenerateUpdate) => {
                debug!("teacher: degenerate update at step {step}; resetting weights");
                self.ps.reset_uniform();
                (0.0, true)
            }
            Err(e) => panic!("reweight failed: {e}"),
        };
        self.hist
            .push(Observation { z, pose: pose.to_vec(), step })
            .expect("steps are pushed in order");
        let mut out = TeacherStep { kl, degenerate, resampled: false, mh_acceptance: None };
        if needs_resample(&self.ps, self.tau_ess) {
            self.ps = systematic_resample(&self.ps, rng);
            out.resampled = true;
            if let Some(mh) = &self.mh {
                let (moved, stats) = mh_rejuvenate(&self.ps, &self.hist, &self.prior, self.kind.model(), &self.sensor, mh, rng);
                self.ps = moved;
                out.mh_acceptance = Some(stats.acceptance_rate());
            }
        }
        out
    }
}
