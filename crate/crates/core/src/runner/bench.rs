//! Per-step latency of the deployment loop with and without the filter.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::policy::{policy_state, BeliefFeatures, Policy};
use crate::student::StudentNet;

use super::config::ScenarioConfig;
use super::episode::{episode_rngs, sample_scenario, RunError, DOMAIN_EVAL};
use super::teacher::Teacher;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMode {
    /// Student forward pass and actor.
    Student,
    /// Particle-filter update and actor.
    PfAtTest,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub mode: BenchMode,
    pub n_particles: usize,
    pub steps: usize,
    /// Median wall time of one loop iteration, in microseconds.
    pub median_us: f64,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Times `steps` loop iterations per particle budget. Episodes restart at
/// the horizon and never stop on the certificate, so every budget sees the
/// same number of updates. `steps = 0` yields an empty table.
pub fn bench_latency(
    cfg: &ScenarioConfig,
    student: &StudentNet,
    policy: &Policy,
    mode: BenchMode,
    budgets: &[usize],
    steps: usize,
) -> Result<Vec<LatencyRow>, RunError> {
    if steps == 0 {
        return Ok(Vec::new());
    }
    let model = cfg.model();
    let loc = cfg.location();
    let with_spread = !cfg.ablation.no_spread_feature;
    let mut rows = Vec::with_capacity(budgets.len());
    for &n in budgets {
        let mut times = Vec::with_capacity(steps);
        let mut episode = 0u64;
        let mut done = 0;
        while done < steps {
            let mut rngs = episode_rngs(cfg.seed, DOMAIN_EVAL, episode);
            episode += 1;
            let sc = sample_scenario(cfg, &mut rngs.env);
            let mut pose = sc.start;
            let mut window = student.new_window();
            let mut teacher = match mode {
                BenchMode::PfAtTest => Some(Teacher::new(cfg, n, &mut rngs.teacher)?),
                BenchMode::Student => None,
            };
            for t in 1..=cfg.horizon {
                if done == steps {
                    break;
                }
                let h = model.eval_clamped(&pose, &sc.theta);
                let z = crate::sensor::sample_observation(h, &cfg.sensor, &mut rngs.env);
                let start = Instant::now();
                let feats = match teacher.as_mut() {
                    Some(tc) => {
                        tc.assimilate(z, &pose, t, &mut rngs.teacher);
                        BeliefFeatures::from_particles(&tc.ps, loc)
                    }
                    None => {
                        window.push(z, &pose);
                        BeliefFeatures::from_gaussian(&student.forward_physical(&window.flatten())?, loc)
                    }
                };
                let psi = policy_state(z, &pose, &feats, with_spread);
                let a = policy.mean_action(&policy.prepare(&psi))?;
                times.push(start.elapsed().as_secs_f64() * 1e6);
                for (p, d) in pose.iter_mut().zip(&a) {
                    *p += d;
                }
                done += 1;
            }
        }
        rows.push(LatencyRow { mode, n_particles: n, steps, median_us: median(times) });
    }
    Ok(rows)
}
