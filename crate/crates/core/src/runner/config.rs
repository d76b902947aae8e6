//! Scenario configuration, validation and TOML round-tripping.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{ForwardModel, Green3d, HalfSpace3d, Plume2d};
use crate::pf::{BoxPrior, MhConfig};
use crate::policy::PpoConfig;
use crate::reward::RewardMode;
use crate::sensor::SensorParams;
use crate::stopping::BeliefSource;
use crate::student::StudentConfig;

/// Validation failure naming the offending field path.
#[derive(Debug, Clone, PartialEq, Error)]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "`{}`: {}", self.field, self.message)
    }
}

fn bad(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError { field: field.into(), message: message.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    #[default]
    Plume2d,
    Green3d,
    Halfspace3d,
}

static PLUME2D: Plume2d = Plume2d;
static GREEN3D: Green3d = Green3d;
static HALFSPACE3D: HalfSpace3d = HalfSpace3d;

impl FieldKind {
    pub fn model(self) -> &'static dyn ForwardModel<f64> {
        match self {
            FieldKind::Plume2d => &PLUME2D,
            FieldKind::Green3d => &GREEN3D,
            FieldKind::Halfspace3d => &HALFSPACE3D,
        }
    }

    pub fn pose_dim(self) -> usize {
        self.model().pose_dim()
    }

    pub fn default_prior(self) -> BoxPrior<f64> {
        match self {
            FieldKind::Plume2d => BoxPrior::plume_training(),
            _ => BoxPrior::plume3d_training(),
        }
    }
}

/// Switches reproducing the component ablations. Each variant is exactly one
/// flag; all false is the full method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Intrinsic reward from consecutive student Gaussians instead of the
    /// teacher weights.
    pub reward_from_student: bool,
    /// Keep the particle filter at deployment and act on its features.
    pub pf_at_test: bool,
    /// No teacher at all: the student is fit to the true parameters and the
    /// reward comes from the student.
    pub student_only: bool,
    /// Policy input keeps only the location mean of the belief.
    pub no_spread_feature: bool,
    /// Never stop on the certificate; episodes run to the horizon.
    pub no_spread_stop: bool,
    /// Skip the MH rejuvenation move after resampling.
    pub no_mh: bool,
}

impl Ablation {
    pub fn label(&self) -> &'static str {
        match (
            self.reward_from_student,
            self.pf_at_test,
            self.student_only,
            self.no_spread_feature,
            self.no_spread_stop,
            self.no_mh,
        ) {
            (false, false, false, false, false, false) => "full",
            (true, false, false, false, false, false) => "reward_from_student",
            (false, true, false, false, false, false) => "pf_at_test",
            (false, false, true, false, false, false) => "student_only",
            (false, false, false, true, false, false) => "no_spread_feature",
            (false, false, false, false, true, false) => "no_spread_stop",
            (false, false, false, false, false, true) => "no_mh",
            _ => "custom",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub model: FieldKind,
    /// Prior box; the model's training table when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prior_lo: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prior_hi: Option<Vec<f64>>,
    pub sensor: SensorParams<f64>,
    pub horizon: usize,
    pub step_length: f64,
    /// Start-region box; `[0, 5]` per axis when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub start_lo: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub start_hi: Option<Vec<f64>>,
    pub zeta: f64,
    pub n_particles: usize,
    pub tau_ess: f64,
    pub mh: MhConfig,
    pub reward_mode: RewardMode,
    pub reward_clip_window: usize,
    pub reward_clip_quantile: f64,
    /// Belief whose spread ends a training episode.
    pub stop_source: BeliefSource,
    /// Belief whose features feed the actor during training.
    pub feature_source: BeliefSource,
    pub ablation: Ablation,
    pub student: StudentConfig,
    pub ppo: PpoConfig,
    /// Environment steps of PPO training.
    pub train_steps: usize,
    pub eval_episodes: usize,
    /// Monte Carlo samples per candidate in the greedy planner.
    pub planner_samples: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: FieldKind::Plume2d,
            prior_lo: None,
            prior_hi: None,
            sensor: SensorParams { sigma_rel: 0.5, ..SensorParams::default() },
            horizon: 100,
            step_length: 1.0,
            start_lo: None,
            start_hi: None,
            zeta: 0.05,
            n_particles: 200,
            tau_ess: 0.5,
            mh: MhConfig { n_moves: 5, min_rel_scale: 0.01, ..MhConfig::default() },
            reward_mode: RewardMode::Kl,
            reward_clip_window: 1000,
            reward_clip_quantile: 0.99,
            stop_source: BeliefSource::Teacher,
            feature_source: BeliefSource::Student,
            ablation: Ablation::default(),
            student: StudentConfig::default(),
            ppo: PpoConfig::default(),
            train_steps: 200_000,
            eval_episodes: 100,
            planner_samples: 16,
        }
    }
}

impl ScenarioConfig {
    /// Parses a (possibly partial) config. Keys absent from `s`, including
    /// keys of partially given tables such as `[sensor]`, keep the values of
    /// [`ScenarioConfig::default`].
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let user: toml::Table = toml::from_str(s).map_err(|e| {
            let field = e.span().map(|sp| s[sp].trim().to_string()).unwrap_or_default();
            ConfigError { field, message: e.message().to_string() }
        })?;
        let mut merged = toml::Table::try_from(Self::default()).expect("default config serializes");
        merge_tables(&mut merged, user);
        let cfg: Self = merged.try_into().map_err(|e: toml::de::Error| {
            // Name the offending key when the message quotes one.
            let msg = e.message().to_string();
            let field = msg.split('`').nth(1).unwrap_or("config").to_string();
            ConfigError { field, message: msg }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| bad("config", format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn model(&self) -> &'static dyn ForwardModel<f64> {
        self.model.model()
    }

    pub fn pose_dim(&self) -> usize {
        self.model.pose_dim()
    }

    pub fn location(&self) -> &'static [usize] {
        self.model().location_indices()
    }

    pub fn prior(&self) -> BoxPrior<f64> {
        let d = self.model.default_prior();
        BoxPrior {
            lo: self.prior_lo.clone().unwrap_or(d.lo),
            hi: self.prior_hi.clone().unwrap_or(d.hi),
        }
    }

    pub fn start_box(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.pose_dim();
        (self.start_lo.clone().unwrap_or(vec![0.0; n]), self.start_hi.clone().unwrap_or(vec![5.0; n]))
    }

    /// Checks every invariant and names the first offending field.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let theta_dim = self.model().theta_dim();
        let prior = self.prior();
        for (name, v) in [("prior_lo", &prior.lo), ("prior_hi", &prior.hi)] {
            if v.len() != theta_dim {
                return Err(bad(name, format!("expected {theta_dim} entries, got {}", v.len())));
            }
        }
        for (j, (lo, hi)) in prior.lo.iter().zip(&prior.hi).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(bad(&format!("prior_lo[{j}]"), format!("need finite lo <= hi, got [{lo}, {hi}]")));
            }
        }
        if let Err(e) = self.sensor.validate() {
            let field = match e {
                crate::sensor::SensorError::DetectionProbability(_) => "sensor.p_d".to_string(),
                crate::sensor::SensorError::NonPositiveStd { name, .. } => format!("sensor.{name}"),
                crate::sensor::SensorError::RelativeNoise(_) => "sensor.sigma_rel".to_string(),
            };
            return Err(bad(&field, e.to_string()));
        }
        if self.horizon < 1 {
            return Err(bad("horizon", "must be >= 1"));
        }
        if !(self.step_length.is_finite() && self.step_length > 0.0) {
            return Err(bad("step_length", format!("must be finite and > 0, got {}", self.step_length)));
        }
        let (slo, shi) = self.start_box();
        for (name, v) in [("start_lo", &slo), ("start_hi", &shi)] {
            if v.len() != self.pose_dim() {
                return Err(bad(name, format!("expected {} entries, got {}", self.pose_dim(), v.len())));
            }
        }
        if slo.iter().zip(&shi).any(|(a, b)| !(a.is_finite() && b.is_finite() && a <= b)) {
            return Err(bad("start_lo", "need finite lo <= hi per axis"));
        }
        if self.zeta.is_nan() || self.zeta < 0.0 {
            return Err(bad("zeta", format!("must be >= 0, got {}", self.zeta)));
        }
        if self.n_particles < 2 {
            return Err(bad("n_particles", format!("must be >= 2, got {}", self.n_particles)));
        }
        if !(self.tau_ess > 0.0 && self.tau_ess < 1.0) {
            return Err(bad("tau_ess", format!("must lie in (0, 1), got {}", self.tau_ess)));
        }
        if !(self.mh.step_scale.is_finite() && self.mh.step_scale >= 0.0) {
            return Err(bad("mh.step_scale", "must be finite and >= 0"));
        }
        if self.reward_clip_window == 0 {
            return Err(bad("reward_clip_window", "must be >= 1"));
        }
        if !(self.reward_clip_quantile > 0.0 && self.reward_clip_quantile <= 1.0) {
            return Err(bad("reward_clip_quantile", "must lie in (0, 1]"));
        }
        if self.student.window == 0 || self.student.hidden == 0 || self.student.batch == 0 {
            return Err(bad("student", "window, hidden and batch must be >= 1"));
        }
        if !(self.student.lr.is_finite() && self.student.lr >= 0.0) {
            return Err(bad("student.lr", "must be finite and >= 0"));
        }
        let p = &self.ppo;
        if !(0.0..=1.0).contains(&p.gamma) {
            return Err(bad("ppo.gamma", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&p.lam) {
            return Err(bad("ppo.lam", "must lie in [0, 1]"));
        }
        if !(p.clip > 0.0 && p.clip < 1.0) {
            return Err(bad("ppo.clip", "must lie in (0, 1)"));
        }
        if p.epochs == 0 || p.minibatch == 0 || p.rollout == 0 || p.hidden == 0 {
            return Err(bad("ppo", "epochs, minibatch, rollout and hidden must be >= 1"));
        }
        if self.planner_samples == 0 {
            return Err(bad("planner_samples", "must be >= 1"));
        }
        Ok(())
    }
}

fn merge_tables(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// `SEED` from the environment wins over the configured seed.
pub fn effective_seed(config_seed: u64, env_seed: Option<&str>) -> Result<u64, ConfigError> {
    match env_seed {
        None => Ok(config_seed),
        Some(s) => s.trim().parse().map_err(|_| bad("SEED", format!("not an unsigned integer: `{s}`"))),
    }
}
