//! PPO training over teacher-in-the-loop episodes.

use log::info;

use crate::policy::{policy_state_dim, Policy, PpoStats, Rollout};
use crate::reward::RewardState;
use crate::student::{Affine, StudentNet};

use super::config::ScenarioConfig;
use super::episode::{run_training_episode, stream_rng, Learner, Replay, RunError, Tracer, DOMAIN_INIT};
use super::record::EpisodeRecord;

/// Fresh networks for `cfg`, initialized from `seed`.
pub fn new_learner(cfg: &ScenarioConfig, seed: u64) -> Result<Learner, RunError> {
    let mut rng = stream_rng(seed, DOMAIN_INIT, 0);
    let pose_dim = cfg.pose_dim();
    let student = StudentNet::new(&cfg.student, pose_dim, Affine::from_prior(&cfg.prior()), &mut rng);
    let state_dim = policy_state_dim(pose_dim, cfg.location().len(), !cfg.ablation.no_spread_feature);
    let policy = Policy::new(state_dim, pose_dim, cfg.step_length, &cfg.ppo, &mut rng);
    let reward_state = RewardState::new(cfg.reward_clip_window, cfg.reward_clip_quantile)
        .map_err(|e| super::config::ConfigError { field: "reward_clip_window".into(), message: e.to_string() })?;
    Ok(Learner { student, policy, replay: Replay::new(cfg.student.buffer), reward_state })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub learner: Learner,
    pub records: Vec<EpisodeRecord>,
    pub updates: Vec<PpoStats>,
    pub env_steps: usize,
}

/// Optional hooks of [`train`].
#[derive(Default)]
pub struct TrainOptions<'a> {
    /// End training right after this episode index.
    pub stop_after_episode: Option<u64>,
    pub tracer: Option<Tracer<'a>>,
}

/// Runs episodes until `cfg.train_steps` readings have been taken, with a
/// PPO update whenever `cfg.ppo.rollout` transitions have accumulated.
pub fn train(cfg: &ScenarioConfig, seed: u64, mut opts: TrainOptions<'_>) -> Result<TrainOutcome, RunError> {
    let mut learner = new_learner(cfg, seed)?;
    let mut ppo_rng = stream_rng(seed, DOMAIN_INIT, 1);
    let mut records = Vec::new();
    let mut updates = Vec::new();
    let mut batch = Rollout::default();
    let mut env_steps = 0;
    let mut index = 0u64;
    while env_steps < cfg.train_steps {
        let progress = env_steps as f64 / cfg.train_steps as f64;
        let (rec, ro) = run_training_episode(cfg, &mut learner, progress, index, seed, opts.tracer.as_mut())?;
        env_steps += rec.stop_step;
        batch.append(ro);
        records.push(rec);
        if opts.stop_after_episode == Some(index) {
            break;
        }
        index += 1;
        if batch.len() >= cfg.ppo.rollout {
            let stats = learner.policy.ppo_update(&batch, &cfg.ppo, &mut ppo_rng)?;
            let recent = &records[records.len().saturating_sub(50)..];
            let sr = recent.iter().filter(|r| r.success()).count() as f64 / recent.len() as f64;
            info!(
                "update {}: steps {env_steps}, episodes {}, recent SR {sr:.2}, policy loss {:.4}, value loss {:.4}, entropy {:.3}",
                updates.len() + 1,
                index + 1,
                stats.policy_loss,
                stats.value_loss,
                stats.entropy
            );
            updates.push(stats);
            batch = Rollout::default();
        }
    }
    Ok(TrainOutcome { learner, records, updates, env_steps })
}
