//! Command-line front end: argument parsing, config loading and dispatch.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;
use thiserror::Error;

use plumeseek::policy::Policy;
use plumeseek::runner::bench::{bench_latency, BenchMode, LatencyRow};
use plumeseek::runner::episode::{run_deployment_episode, run_pf_episode, PfAgent, RunError, Snapshot, Tracer};
use plumeseek::runner::metrics::{compute_metrics, MetricsSummary};
use plumeseek::runner::record::{read_jsonl, to_json_line, write_jsonl};
use plumeseek::runner::train::{new_learner, train, TrainOptions};
use plumeseek::runner::{effective_seed, ConfigError, EpisodeKind, EpisodeRecord, ScenarioConfig};
use plumeseek::student::StudentNet;

pub const STUDENT_CKPT: &str = "student.ckpt";
pub const POLICY_CKPT: &str = "policy.ckpt";

#[derive(Debug, Parser)]
#[command(name = "plumeseek", version, about = "Active source localization with a distilled belief")]
pub struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Scenario config (TOML). Defaults apply when omitted.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Seed override; the `SEED` environment variable takes precedence.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(short, long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AgentArg {
    /// Student and actor, no particle filter.
    Deployment,
    /// Trained actor on particle-filter features.
    PfPolicy,
    Greedy,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BenchArg {
    Student,
    PfAtTest,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train student and actor with the particle-filter teacher.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dump teacher particle snapshots every K steps.
        #[arg(long, value_name = "K")]
        trace: Option<usize>,
    },
    /// Evaluate an agent over fresh episodes.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Directory holding `student.ckpt` and `policy.ckpt`.
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "deployment")]
        agent: AgentArg,
        /// Episode count; the config value when omitted.
        #[arg(long)]
        episodes: Option<usize>,
        /// Particle budget of filter-based agents; the config value when omitted.
        #[arg(long)]
        particles: Option<usize>,
        #[arg(long, value_name = "K")]
        trace: Option<usize>,
    },
    /// Median per-step latency across particle budgets.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "pf-at-test")]
        mode: BenchArg,
        #[arg(long, value_delimiter = ',', default_values_t = vec![50, 200, 2000])]
        n: Vec<usize>,
        #[arg(long, default_value_t = 200)]
        steps: usize,
    },
    /// Sensitivity grid over particle budget and resampling threshold.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "greedy")]
        agent: AgentArg,
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![50, 100, 200, 500])]
        n: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.3, 0.5, 0.7])]
        tau: Vec<f64>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Regenerate a recorded episode and compare it byte for byte.
    Replay {
        #[command(flatten)]
        common: Common,
        /// `episodes.jsonl` to read.
        #[arg(long)]
        record: PathBuf,
        /// Zero-based line of the record to replay.
        #[arg(long, default_value_t = 0)]
        line: usize,
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        /// Particle budget the record was produced with.
        #[arg(long)]
        particles: Option<usize>,
    },
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Run(#[from] RunError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("replayed record differs from line {0}")]
    ReplayMismatch(usize),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    /// 2 for bad input, 3 for numeric failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::Run(e) if e.is_numeric() => 3,
            CliError::Run(RunError::Config(_)) => 2,
            CliError::ReplayMismatch(_) => 3,
            _ => 1,
        }
    }
}

/// Loads and validates the config, then applies the seed precedence
/// `SEED` env > `--seed` > config file.
pub fn load_config(common: &Common, env_seed: Option<&str>) -> Result<ScenarioConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => ScenarioConfig::from_path(p)?,
        None => ScenarioConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.seed = effective_seed(cfg.seed, env_seed)?;
    cfg.validate()?;
    Ok(cfg)
}

fn echo_config(cfg: &ScenarioConfig, out: &Path) -> Result<(), CliError> {
    let text = cfg.to_toml_string();
    info!("effective config:\n{text}");
    fs::write(out.join("config.toml"), text)?;
    Ok(())
}

fn load_checkpoints(dir: Option<&Path>) -> Result<(StudentNet, Policy), CliError> {
    let dir = dir.ok_or_else(|| CliError::Usage("--checkpoints is required for this agent".into()))?;
    let student = StudentNet::load(&dir.join(STUDENT_CKPT)).map_err(RunError::from)?;
    let policy = Policy::load(&dir.join(POLICY_CKPT)).map_err(RunError::from)?;
    Ok((student, policy))
}

#[derive(Debug, Serialize)]
struct MetricsRow<'a> {
    label: &'a str,
    n_particles: usize,
    tau_ess: f64,
    zeta: f64,
    episodes: usize,
    sr: f64,
    te: f64,
    sle_mean: f64,
    sle_std: f64,
    fpe_rmse: f64,
    fpe_mae: f64,
    uq_nll: f64,
}

fn write_metrics(path: &Path, rows: &[(String, usize, f64, f64, MetricsSummary)]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    for (label, n, tau, zeta, m) in rows {
        w.serialize(MetricsRow {
            label,
            n_particles: *n,
            tau_ess: *tau,
            zeta: *zeta,
            episodes: m.episodes,
            sr: m.sr,
            te: m.te,
            sle_mean: m.sle_mean,
            sle_std: m.sle_std,
            fpe_rmse: m.fpe_rmse,
            fpe_mae: m.fpe_mae,
            uq_nll: m.uq_nll,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Tidy per-step series for plotting: spreads, rewards and poses.
pub fn write_series(dir: &Path, records: &[EpisodeRecord]) -> Result<(), CliError> {
    let mut spread = csv::Writer::from_path(dir.join("spread.csv"))?;
    spread.write_record(["episode", "step", "teacher_spread", "student_spread"])?;
    let mut reward = csv::Writer::from_path(dir.join("reward.csv"))?;
    reward.write_record(["episode", "step", "reward"])?;
    let mut traj = csv::Writer::from_path(dir.join("trajectory.csv"))?;
    traj.write_record(["episode", "step", "x", "y", "z"])?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.17e}")).unwrap_or_default();
    for r in records {
        for (k, s) in r.steps.iter().enumerate() {
            let (ep, st) = (r.index.to_string(), (k + 1).to_string());
            spread.write_record([ep.as_str(), &st, &opt(s.teacher_spread), &opt(s.student_spread)])?;
            if s.reward.is_some() {
                reward.write_record([ep.as_str(), &st, &opt(s.reward)])?;
            }
            let c = |j: usize| s.pose.get(j).map(|v| format!("{v:.17e}")).unwrap_or_default();
            traj.write_record([ep.as_str(), &st, &c(0), &c(1), &c(2)])?;
        }
    }
    spread.flush()?;
    reward.flush()?;
    traj.flush()?;
    Ok(())
}

/// Streams snapshots to `trace.jsonl`.
struct TraceFile {
    out: std::io::BufWriter<fs::File>,
    err: Option<std::io::Error>,
}

impl TraceFile {
    fn create(dir: &Path) -> Result<Self, CliError> {
        Ok(Self { out: std::io::BufWriter::new(fs::File::create(dir.join("trace.jsonl"))?), err: None })
    }

    fn write(&mut self, s: &Snapshot) {
        if self.err.is_none() {
            if let Err(e) = writeln!(self.out, "{}", to_json_line(s)) {
                self.err = Some(e);
            }
        }
    }

    fn finish(mut self) -> Result<(), CliError> {
        if let Some(e) = self.err.take() {
            return Err(e.into());
        }
        self.out.flush()?;
        Ok(())
    }
}

fn eval_records(
    cfg: &ScenarioConfig,
    agent: AgentArg,
    nets: Option<&(StudentNet, Policy)>,
    n_particles: usize,
    episodes: usize,
    mut tracer: Option<&mut Tracer<'_>>,
) -> Result<Vec<EpisodeRecord>, CliError> {
    let mut out = Vec::with_capacity(episodes);
    for i in 0..episodes as u64 {
        let rec = match agent {
            AgentArg::Deployment => {
                let (s, p) = nets.expect("checked by caller");
                run_deployment_episode(cfg, s, p, i, cfg.seed)?
            }
            AgentArg::PfPolicy => {
                let (_, p) = nets.expect("checked by caller");
                run_pf_episode(cfg, PfAgent::Policy(p), n_particles, i, cfg.seed, tracer.as_deref_mut())?
            }
            AgentArg::Greedy => run_pf_episode(cfg, PfAgent::Greedy, n_particles, i, cfg.seed, tracer.as_deref_mut())?,
            AgentArg::Random => run_pf_episode(cfg, PfAgent::Random, n_particles, i, cfg.seed, tracer.as_deref_mut())?,
        };
        out.push(rec);
    }
    Ok(out)
}

fn needs_nets(agent: AgentArg) -> bool {
    matches!(agent, AgentArg::Deployment | AgentArg::PfPolicy)
}

fn finish_episodes(cfg: &ScenarioConfig, out: &Path, label: &str, records: &[EpisodeRecord]) -> Result<(), CliError> {
    write_jsonl(&out.join("episodes.jsonl"), records)?;
    write_series(out, records)?;
    if let Some(m) = compute_metrics(records, cfg.location()) {
        println!(
            "{label}: episodes {} SR {:.3} TE {:.1} SLE {:.3}±{:.3} FPE-RMSE {:.3} FPE-MAE {:.3} UQ {:.3}",
            m.episodes, m.sr, m.te, m.sle_mean, m.sle_std, m.fpe_rmse, m.fpe_mae, m.uq_nll
        );
        write_metrics(&out.join("metrics.csv"), &[(label.to_string(), cfg.n_particles, cfg.tau_ess, cfg.zeta, m)])?;
    }
    Ok(())
}

fn label_of(agent: AgentArg, cfg: &ScenarioConfig) -> String {
    let a = match agent {
        AgentArg::Deployment => "deployment",
        AgentArg::PfPolicy => "pf_policy",
        AgentArg::Greedy => "greedy",
        AgentArg::Random => "random",
    };
    format!("{a}/{}", cfg.ablation.label())
}

pub fn run(cli: Cli, env_seed: Option<&str>) -> Result<(), CliError> {
    match cli.command {
        Command::Train { common, trace } => {
            let cfg = load_config(&common, env_seed)?;
            fs::create_dir_all(&common.out)?;
            echo_config(&cfg, &common.out)?;
            let mut trace_file = trace.map(|_| TraceFile::create(&common.out)).transpose()?;
            let mut sink = |s: &Snapshot| {
                if let Some(t) = trace_file.as_mut() {
                    t.write(s)
                }
            };
            let tracer = trace.map(|every| Tracer { every, sink: &mut sink });
            let outcome = train(&cfg, cfg.seed, TrainOptions { stop_after_episode: None, tracer })?;
            if let Some(t) = trace_file {
                t.finish()?;
            }
            let l = &outcome.learner;
            l.student.save(&common.out.join(STUDENT_CKPT)).map_err(RunError::from)?;
            l.policy.save(&common.out.join(POLICY_CKPT)).map_err(RunError::from)?;
            info!("{} PPO updates over {} environment steps", outcome.updates.len(), outcome.env_steps);
            finish_episodes(&cfg, &common.out, &format!("training/{}", cfg.ablation.label()), &outcome.records)
        }
        Command::Eval { common, checkpoints, agent, episodes, particles, trace } => {
            let cfg = load_config(&common, env_seed)?;
            let agent = if cfg.ablation.pf_at_test && agent == AgentArg::Deployment { AgentArg::PfPolicy } else { agent };
            let nets = if needs_nets(agent) { Some(load_checkpoints(checkpoints.as_deref())?) } else { None };
            fs::create_dir_all(&common.out)?;
            echo_config(&cfg, &common.out)?;
            let mut trace_file = trace.map(|_| TraceFile::create(&common.out)).transpose()?;
            let mut sink = |s: &Snapshot| {
                if let Some(t) = trace_file.as_mut() {
                    t.write(s)
                }
            };
            let mut tracer = trace.map(|every| Tracer { every, sink: &mut sink });
            let n = particles.unwrap_or(cfg.n_particles);
            let records =
                eval_records(&cfg, agent, nets.as_ref(), n, episodes.unwrap_or(cfg.eval_episodes), tracer.as_mut())?;
            drop(tracer);
            if let Some(t) = trace_file {
                t.finish()?;
            }
            finish_episodes(&cfg, &common.out, &label_of(agent, &cfg), &records)
        }
        Command::Bench { common, checkpoints, mode, n, steps } => {
            let cfg = load_config(&common, env_seed)?;
            let (student, policy) = match checkpoints {
                Some(dir) => load_checkpoints(Some(&dir))?,
                None => {
                    let l = new_learner(&cfg, cfg.seed)?;
                    (l.student, l.policy)
                }
            };
            fs::create_dir_all(&common.out)?;
            echo_config(&cfg, &common.out)?;
            let mode = match mode {
                BenchArg::Student => BenchMode::Student,
                BenchArg::PfAtTest => BenchMode::PfAtTest,
            };
            let rows = bench_latency(&cfg, &student, &policy, mode, &n, steps)?;
            write_latency(&common.out.join("latency.csv"), &rows)?;
            for r in &rows {
                println!("{:?} N={} median {:.1} us/step", r.mode, r.n_particles, r.median_us);
            }
            Ok(())
        }
        Command::Sweep { common, agent, checkpoints, n, tau, episodes } => {
            let base = load_config(&common, env_seed)?;
            let nets = if needs_nets(agent) { Some(load_checkpoints(checkpoints.as_deref())?) } else { None };
            fs::create_dir_all(&common.out)?;
            echo_config(&base, &common.out)?;
            let eps = episodes.unwrap_or(base.eval_episodes);
            let mut rows = Vec::new();
            let mut all = Vec::new();
            for &np in &n {
                for &t in &tau {
                    let cfg = ScenarioConfig { n_particles: np, tau_ess: t, ..base.clone() };
                    cfg.validate()?;
                    let recs = eval_records(&cfg, agent, nets.as_ref(), np, eps, None)?;
                    if let Some(m) = compute_metrics(&recs, cfg.location()) {
                        println!("N={np} tau_ess={t}: SR {:.3} TE {:.1} SLE {:.3}", m.sr, m.te, m.sle_mean);
                        rows.push((label_of(agent, &cfg), np, t, cfg.zeta, m));
                    }
                    all.extend(recs);
                }
            }
            write_jsonl(&common.out.join("episodes.jsonl"), &all)?;
            write_metrics(&common.out.join("metrics.csv"), &rows)
        }
        Command::Replay { common, record, line, checkpoints, particles } => {
            let cfg = load_config(&common, env_seed)?;
            let text = fs::read_to_string(&record)?;
            let original = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .nth(line)
                .ok_or_else(|| CliError::Usage(format!("{} has no line {line}", record.display())))?;
            let rec = read_jsonl(&record)?.into_iter().nth(line).expect("line exists");
            let cfg = ScenarioConfig { seed: rec.seed, ..cfg };
            let n = particles.unwrap_or(cfg.n_particles);
            let again = match rec.kind {
                EpisodeKind::Training => {
                    let o = train(&cfg, rec.seed, TrainOptions { stop_after_episode: Some(rec.index), tracer: None })?;
                    o.records.into_iter().find(|r| r.index == rec.index).ok_or(CliError::ReplayMismatch(line))?
                }
                EpisodeKind::Deployment => {
                    let (s, p) = load_checkpoints(checkpoints.as_deref())?;
                    run_deployment_episode(&cfg, &s, &p, rec.index, rec.seed)?
                }
                EpisodeKind::PfPolicy => {
                    let (_, p) = load_checkpoints(checkpoints.as_deref())?;
                    run_pf_episode(&cfg, PfAgent::Policy(&p), n, rec.index, rec.seed, None)?
                }
                EpisodeKind::Greedy => run_pf_episode(&cfg, PfAgent::Greedy, n, rec.index, rec.seed, None)?,
                EpisodeKind::Random => run_pf_episode(&cfg, PfAgent::Random, n, rec.index, rec.seed, None)?,
            };
            if to_json_line(&again) == original.trim_end() {
                println!("replay of line {line} (episode {}) is byte-identical", rec.index);
                Ok(())
            } else {
                Err(CliError::ReplayMismatch(line))
            }
        }
    }
}

fn write_latency(path: &Path, rows: &[LatencyRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(["mode", "n_particles", "steps", "median_us"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
