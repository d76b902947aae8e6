//! Episode machinery: scenarios, the training and deployment loops, PF
//! baselines, metrics and latency benchmarks.

pub mod config;
pub mod planner;
pub mod record;
pub mod teacher;

pub use config::{effective_seed, Ablation, ConfigError, FieldKind, ScenarioConfig};
pub use record::{EpisodeKind, EpisodeRecord, StepRecord, StopCause};
pub mod episode;
pub mod bench;
pub mod metrics;
pub mod train;
