//! Episode loops: teacher-in-the-loop training, teacher-free deployment and
//! the particle-filter baselines.

use std::collections::VecDeque;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::pf::{weighted_moments, ParticleSet, PfError};
use crate::policy::{policy_state, BeliefFeatures, Policy, PolicyError, Rollout};
use crate::reward::{clip_reward, gaussian_kl_diag, terminal_reward, RewardState};
use crate::sensor::sample_observation;
use crate::stopping::{should_stop, BeliefSource};
use crate::student::{DistillTarget, GaussianBelief, StudentError, StudentNet, LOG_VAR_MIN};

use super::config::{ConfigError, ScenarioConfig};
use super::planner::{greedy_planner_step, random_walk_step};
use super::record::{EpisodeKind, EpisodeRecord, StepRecord, StopCause};
use super::teacher::Teacher;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("particle filter: {0}")]
    Pf(#[from] PfError),
    #[error("student: {0}")]
    Student(#[from] StudentError),
    #[error("policy: {0}")]
    Policy(#[from] PolicyError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl RunError {
    /// Numeric failures as opposed to bad input.
    pub fn is_numeric(&self) -> bool {
        !matches!(self, RunError::Config(_) | RunError::Io(_))
    }
}

/// Seed domains keep training, evaluation and initialization streams apart.
pub const DOMAIN_TRAIN: u64 = 0x7472_6169_6e00_0001;
pub const DOMAIN_EVAL: u64 = 0x6576_616c_0000_0002;
pub const DOMAIN_INIT: u64 = 0x696e_6974_0000_0003;

pub fn domain_of(kind: EpisodeKind) -> u64 {
    match kind {
        EpisodeKind::Training => DOMAIN_TRAIN,
        _ => DOMAIN_EVAL,
    }
}

/// Independent random streams of one episode.
#[derive(Debug, Clone)]
pub struct EpisodeRngs {
    /// Scenario draw and sensor noise. Shared by every agent evaluated on the
    /// same `(seed, index)`, so they face identical scenarios.
    pub env: ChaCha8Rng,
    /// Particle initialization, resampling and MH moves.
    pub teacher: ChaCha8Rng,
    /// Action sampling, planner draws and replay minibatches.
    pub agent: ChaCha8Rng,
}

pub fn stream_rng(seed: u64, domain: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ domain);
    r.set_stream(stream);
    r
}

pub fn episode_rngs(seed: u64, domain: u64, index: u64) -> EpisodeRngs {
    EpisodeRngs {
        env: stream_rng(seed, domain, 3 * index),
        teacher: stream_rng(seed, domain, 3 * index + 1),
        agent: stream_rng(seed, domain, 3 * index + 2),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub theta: Vec<f64>,
    pub start: Vec<f64>,
}

/// True parameters from the prior box, start pose uniform in the start box.
pub fn sample_scenario<R: Rng + ?Sized>(cfg: &ScenarioConfig, rng: &mut R) -> Scenario {
    let theta = cfg.prior().sample(rng);
    let (lo, hi) = cfg.start_box();
    let start = lo
        .iter()
        .zip(&hi)
        .map(|(&l, &h)| {
            let u: f64 = rng.random();
            l + (h - l) * u
        })
        .collect();
    Scenario { theta, start }
}

/// Spread of the uniform prior over the location block.
pub fn prior_spread(cfg: &ScenarioConfig) -> f64 {
    let p = cfg.prior();
    cfg.location().iter().map(|&j| p.width(j).powi(2) / 12.0).sum::<f64>().sqrt()
}

/// Diagonal Gaussian matching the particle mean and marginal variances.
/// Variances are floored at the student's lower clip.
pub fn moment_gaussian(ps: &ParticleSet<f64>) -> GaussianBelief {
    let m = weighted_moments(ps);
    let log_var = (0..ps.dim()).map(|j| m.cov_at(j, j).max(0.0).ln().max(LOG_VAR_MIN)).collect();
    GaussianBelief { mu: m.mean, log_var }
}

struct Env {
    theta: Vec<f64>,
    pose: Vec<f64>,
    rng: ChaCha8Rng,
}

impl Env {
    fn new(cfg: &ScenarioConfig, mut rng: ChaCha8Rng) -> Self {
        let sc = sample_scenario(cfg, &mut rng);
        Self { theta: sc.theta, pose: sc.start, rng }
    }

    fn observe(&mut self, cfg: &ScenarioConfig) -> f64 {
        let h = cfg.model().eval_clamped(&self.pose, &self.theta);
        sample_observation(h, &cfg.sensor, &mut self.rng)
    }

    fn step(&mut self, action: &[f64]) {
        for (p, a) in self.pose.iter_mut().zip(action) {
            *p += a;
        }
    }
}

fn certificate(cfg: &ScenarioConfig, spread: f64) -> bool {
    !cfg.ablation.no_spread_stop && should_stop(spread, cfg.zeta)
}

struct Finish {
    stop_step: usize,
    stop_cause: StopCause,
    estimate: Vec<f64>,
    terminal_belief: GaussianBelief,
    belief_source: BeliefSource,
}

fn record(
    cfg: &ScenarioConfig,
    kind: EpisodeKind,
    index: u64,
    seed: u64,
    theta_true: Vec<f64>,
    steps: Vec<StepRecord>,
    f: Finish,
) -> EpisodeRecord {
    EpisodeRecord {
        index,
        seed,
        kind,
        ablation: cfg.ablation.label().to_string(),
        theta_true,
        steps,
        stop_step: f.stop_step,
        stop_cause: f.stop_cause,
        estimate: f.estimate,
        terminal_belief: f.terminal_belief,
        belief_source: f.belief_source,
        initial_spread: prior_spread(cfg),
    }
}

/// Particle-set snapshot taken during an episode.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Snapshot {
    pub episode: u64,
    pub step: usize,
    pub dim: usize,
    pub thetas: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Receives a teacher snapshot every `every` steps (and on the last step).
pub struct Tracer<'a> {
    pub every: usize,
    pub sink: &'a mut dyn FnMut(&Snapshot),
}

impl Tracer<'_> {
    fn offer(&mut self, episode: u64, step: usize, last: bool, ps: &ParticleSet<f64>) {
        if self.every > 0 && (step % self.every == 0 || last) {
            (self.sink)(&Snapshot {
                episode,
                step,
                dim: ps.dim(),
                thetas: ps.thetas().to_vec(),
                weights: ps.weights().to_vec(),
            });
        }
    }
}

/// Agents that act on the particle filter's belief.
#[derive(Debug, Clone, Copy)]
pub enum PfAgent<'a> {
    Greedy,
    Random,
    /// Trained actor fed with teacher features (the PF-at-test ablation).
    Policy(&'a Policy),
}

impl PfAgent<'_> {
    pub fn kind(&self) -> EpisodeKind {
        match self {
            PfAgent::Greedy => EpisodeKind::Greedy,
            PfAgent::Random => EpisodeKind::Random,
            PfAgent::Policy(_) => EpisodeKind::PfPolicy,
        }
    }
}

/// Evaluation episode in which the particle filter supplies belief,
/// certificate and estimate.
pub fn run_pf_episode(
    cfg: &ScenarioConfig,
    agent: PfAgent<'_>,
    n_particles: usize,
    index: u64,
    seed: u64,
    mut tracer: Option<&mut Tracer<'_>>,
) -> Result<EpisodeRecord, RunError> {
    let kind = agent.kind();
    let mut rngs = episode_rngs(seed, domain_of(kind), index);
    let mut env = Env::new(cfg, rngs.env.clone());
    let mut teacher = Teacher::new(cfg, n_particles, &mut rngs.teacher)?;
    let loc = cfg.location();
    let mut steps = Vec::with_capacity(cfg.horizon);
    let mut cause = StopCause::Horizon;
    for t in 1..=cfg.horizon {
        let pose = env.pose.clone();
        let z = env.observe(cfg);
        let ts = teacher.assimilate(z, &pose, t, &mut rngs.teacher);
        let spread = teacher.spread(loc);
        let stop = certificate(cfg, spread);
        if let Some(tr) = tracer.as_deref_mut() {
            tr.offer(index, t, stop || t == cfg.horizon, &teacher.ps);
        }
        let mut rec = StepRecord {
            pose: pose.clone(),
            z,
            action: None,
            reward: None,
            teacher_spread: Some(spread),
            student_spread: None,
            degenerate: ts.degenerate,
        };
        if stop {
            cause = StopCause::Certificate;
            steps.push(rec);
            break;
        }
        if t == cfg.horizon {
            steps.push(rec);
            break;
        }
        let action = match agent {
            PfAgent::Greedy => greedy_planner_step(&teacher.ps, &pose, cfg, &mut rngs.agent).0,
            PfAgent::Random => random_walk_step(cfg, &mut rngs.agent),
            PfAgent::Policy(p) => {
                let feats = BeliefFeatures::from_particles(&teacher.ps, loc);
                let psi = policy_state(z, &pose, &feats, !cfg.ablation.no_spread_feature);
                p.mean_action(&p.prepare(&psi))?
            }
        };
        env.step(&action);
        rec.action = Some(action);
        steps.push(rec);
    }
    let g = moment_gaussian(&teacher.ps);
    let f = Finish {
        stop_step: steps.len(),
        stop_cause: cause,
        estimate: g.mu.clone(),
        terminal_belief: g,
        belief_source: BeliefSource::Teacher,
    };
    Ok(record(cfg, kind, index, seed, env.theta, steps, f))
}

/// Teacher-free evaluation: student belief, student certificate and the
/// actor's mean action. Nothing on this path builds a particle set.
pub fn run_deployment_episode(
    cfg: &ScenarioConfig,
    student: &StudentNet,
    policy: &Policy,
    index: u64,
    seed: u64,
) -> Result<EpisodeRecord, RunError> {
    let sets_before = crate::pf::sets_constructed_on_thread();
    let rngs = episode_rngs(seed, DOMAIN_EVAL, index);
    let mut env = Env::new(cfg, rngs.env);
    let loc = cfg.location();
    let mut window = student.new_window();
    let mut steps = Vec::with_capacity(cfg.horizon);
    let mut cause = StopCause::Horizon;
    let mut belief = None;
    for t in 1..=cfg.horizon {
        let pose = env.pose.clone();
        let z = env.observe(cfg);
        window.push(z, &pose);
        let b = student.forward_physical(&window.flatten())?;
        let feats = BeliefFeatures::from_gaussian(&b, loc);
        let mut rec = StepRecord {
            pose: pose.clone(),
            z,
            action: None,
            reward: None,
            teacher_spread: None,
            student_spread: Some(feats.spread),
            degenerate: false,
        };
        let stop = certificate(cfg, feats.spread);
        belief = Some(b);
        if stop {
            cause = StopCause::Certificate;
        }
        if stop || t == cfg.horizon {
            steps.push(rec);
            break;
        }
        let psi = policy_state(z, &pose, &feats, !cfg.ablation.no_spread_feature);
        let action = policy.mean_action(&policy.prepare(&psi))?;
        env.step(&action);
        rec.action = Some(action);
        steps.push(rec);
    }
    debug_assert_eq!(crate::pf::sets_constructed_on_thread(), sets_before, "deployment built a particle set");
    let b = belief.expect("horizon >= 1");
    let f = Finish {
        stop_step: steps.len(),
        stop_cause: cause,
        estimate: b.mu.clone(),
        terminal_belief: b,
        belief_source: BeliefSource::Student,
    };
    Ok(record(cfg, EpisodeKind::Deployment, index, seed, env.theta, steps, f))
}

/// Bounded FIFO of student training pairs.
#[derive(Debug, Clone, Default)]
pub struct Replay {
    items: VecDeque<(Vec<f64>, DistillTarget)>,
    capacity: usize,
}

impl Replay {
    pub fn new(capacity: usize) -> Self {
        Self { items: VecDeque::with_capacity(capacity.min(1 << 16)), capacity: capacity.max(1) }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, x: Vec<f64>, target: DistillTarget) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back((x, target));
    }

    /// The newest pair plus up to `batch − 1` distinct older ones.
    pub fn minibatch<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<(Vec<f64>, DistillTarget)> {
        let n = self.items.len();
        if n == 0 || batch == 0 {
            return Vec::new();
        }
        let mut out = vec![self.items[n - 1].clone()];
        let k = (batch - 1).min(n - 1);
        if k > 0 {
            for i in sample_indices(rng, n - 1, k).iter() {
                out.push(self.items[i].clone());
            }
        }
        out
    }
}

/// Networks and running state carried across training episodes.
#[derive(Debug, Clone)]
pub struct Learner {
    pub student: StudentNet,
    pub policy: Policy,
    pub replay: Replay,
    pub reward_state: RewardState,
}

/// One training episode. The teacher assimilates each reading, supplies the
/// intrinsic reward and the distillation target; the student is updated,
/// then supplies the policy features; the certificate is checked before an
/// action is sampled. Returns the record and the episode's transitions.
pub fn run_training_episode(
    cfg: &ScenarioConfig,
    learner: &mut Learner,
    progress: f64,
    index: u64,
    seed: u64,
    mut tracer: Option<&mut Tracer<'_>>,
) -> Result<(EpisodeRecord, Rollout), RunError> {
    let ab = cfg.ablation;
    let mut rngs = episode_rngs(seed, DOMAIN_TRAIN, index);
    let mut env = Env::new(cfg, rngs.env.clone());
    let mut teacher = if ab.student_only { None } else { Some(Teacher::new(cfg, cfg.n_particles, &mut rngs.teacher)?) };
    let (stop_source, feature_source) =
        if teacher.is_none() { (BeliefSource::Student, BeliefSource::Student) } else { (cfg.stop_source, cfg.feature_source) };
    let loc = cfg.location();
    let true_scaled = learner.student.affine.forward(&env.theta);
    let mut window = learner.student.new_window();
    let mut ro = Rollout::default();
    let mut steps: Vec<StepRecord> = Vec::with_capacity(cfg.horizon);
    let mut prev_student: Option<GaussianBelief> = None;
    let mut cause = StopCause::Horizon;
    let mut last_student = None;
    for t in 1..=cfg.horizon {
        let pose = env.pose.clone();
        let z = env.observe(cfg);

        // Inference layer.
        let ts = teacher.as_mut().map(|tc| tc.assimilate(z, &pose, t, &mut rngs.teacher));
        window.push(z, &pose);
        let x = window.flatten();
        learner.student.observe_input(&x);
        let target = match &teacher {
            Some(tc) => learner.student.target(&tc.ps)?,
            None => DistillTarget::point(true_scaled.clone()),
        };
        learner.replay.push(x.clone(), target);
        let batch = learner.replay.minibatch(cfg.student.batch, &mut rngs.agent);
        match learner.student.train_step(&batch, cfg.student.lr) {
            Ok(_) | Err(StudentError::NonFiniteLoss) => {}
            Err(e) => return Err(e.into()),
        }
        let scaled = learner.student.forward(&x)?;
        let physical = scaled.to_physical(&learner.student.affine);
        let s_feats = BeliefFeatures::from_gaussian(&physical, loc);

        // Reward of the transition that led here.
        let r_ig = match (&ts, ab.reward_from_student || teacher.is_none()) {
            (Some(ts), false) => ts.kl,
            _ => prev_student
                .as_ref()
                .map(|p| gaussian_kl_diag(&scaled.mu, &scaled.log_var, &p.mu, &p.log_var))
                .unwrap_or(0.0),
        };
        prev_student = Some(scaled);
        if t > 1 {
            let r = if cfg.reward_mode.dense() { clip_reward(r_ig, &mut learner.reward_state) } else { 0.0 };
            ro.rewards.push(r);
            ro.dones.push(false);
            if let Some(prev) = steps.last_mut() {
                prev.reward = Some(r);
            }
        }

        let t_spread = teacher.as_ref().map(|tc| tc.spread(loc));
        let stop_spread = match stop_source {
            BeliefSource::Teacher => t_spread.expect("teacher present"),
            BeliefSource::Student => s_feats.spread,
        };
        let mut rec = StepRecord {
            pose: pose.clone(),
            z,
            action: None,
            reward: None,
            teacher_spread: t_spread,
            student_spread: Some(s_feats.spread),
            degenerate: ts.is_some_and(|s| s.degenerate),
        };
        let stop = certificate(cfg, stop_spread);
        if let (Some(tr), Some(tc)) = (tracer.as_deref_mut(), teacher.as_ref()) {
            tr.offer(index, t, stop || t == cfg.horizon, &tc.ps);
        }
        if stop {
            cause = StopCause::Certificate;
        }
        if stop || t == cfg.horizon {
            // Reaching the horizon is treated as terminal as well.
            if let (Some(r), Some(d), Some(prev)) = (ro.rewards.last_mut(), ro.dones.last_mut(), steps.last_mut()) {
                *r += terminal_reward(stop, cfg.reward_mode, progress);
                *d = true;
                prev.reward = Some(*r);
            }
            last_student = Some(physical);
            steps.push(rec);
            break;
        }

        // Execution layer.
        let feats = match (feature_source, teacher.as_ref()) {
            (BeliefSource::Teacher, Some(tc)) => BeliefFeatures::from_particles(&tc.ps, loc),
            _ => s_feats,
        };
        let psi = policy_state(z, &pose, &feats, !ab.no_spread_feature);
        learner.policy.observe(&psi);
        let xp = learner.policy.prepare(&psi);
        let a = learner.policy.sample(&xp, &mut rngs.agent)?;
        let v = learner.policy.value(&xp)?;
        ro.psi.push(xp);
        ro.u.push(a.u);
        ro.log_prob.push(a.log_prob);
        ro.values.push(v);
        env.step(&a.action);
        rec.action = Some(a.action);
        steps.push(rec);
    }
    ro.bootstrap = 0.0;
    ro.check()?;
    let (estimate, terminal_belief, belief_source) = match &teacher {
        Some(tc) => {
            let g = moment_gaussian(&tc.ps);
            (g.mu.clone(), g, BeliefSource::Teacher)
        }
        None => {
            let b = last_student.expect("horizon >= 1");
            (b.mu.clone(), b, BeliefSource::Student)
        }
    };
    let f = Finish { stop_step: steps.len(), stop_cause: cause, estimate, terminal_belief, belief_source };
    Ok((record(cfg, EpisodeKind::Training, index, seed, env.theta, steps, f), ro))
}
