//! Episode records and their byte-stable JSON Lines encoding.
//!
//! Every float is written as `{:.16e}` (17 significant digits), which
//! round-trips `f64` exactly and does not depend on the shortest-repr
//! algorithm of the JSON library. Non-finite floats become `null`.

use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use serde::ser::Serialize;
use serde::Deserialize;
use serde_json::ser::Formatter;

use crate::stopping::BeliefSource;
use crate::student::GaussianBelief;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopCause {
    Certificate,
    Horizon,
}

/// Which loop produced a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeKind {
    /// Teacher-in-the-loop training episode.
    Training,
    /// Student and actor only.
    Deployment,
    /// Trained actor driven by the particle filter's features.
    PfPolicy,
    Greedy,
    Random,
}

/// One loop iteration: the reading taken at `pose`, the beliefs after
/// assimilating it, and the action taken afterwards (absent on the last step).
#[derive(Debug, Clone, PartialEq, serde::Serialize, Deserialize)]
pub struct StepRecord {
    pub pose: Vec<f64>,
    pub z: f64,
    pub action: Option<Vec<f64>>,
    /// Reward credited to the transition taken at this step.
    pub reward: Option<f64>,
    pub teacher_spread: Option<f64>,
    pub student_spread: Option<f64>,
    /// The teacher hit an all-zero likelihood and was reset.
    #[serde(default)]
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub index: u64,
    pub seed: u64,
    pub kind: EpisodeKind,
    /// Ablation variant label of the producing config.
    pub ablation: String,
    pub theta_true: Vec<f64>,
    pub steps: Vec<StepRecord>,
    /// 1-based index of the last step.
    pub stop_step: usize,
    pub stop_cause: StopCause,
    /// Posterior mean of the full parameter vector at termination.
    pub estimate: Vec<f64>,
    /// Diagonal Gaussian used for UQ scoring, in raw units.
    pub terminal_belief: GaussianBelief,
    pub belief_source: BeliefSource,
    /// Spread of the prior over the location block.
    pub initial_spread: f64,
}

impl EpisodeRecord {
    pub fn final_teacher_spread(&self) -> Option<f64> {
        self.steps.last().and_then(|s| s.teacher_spread)
    }

    pub fn final_student_spread(&self) -> Option<f64> {
        self.steps.last().and_then(|s| s.student_spread)
    }

    pub fn success(&self) -> bool {
        self.stop_cause == StopCause::Certificate
    }
}

/// Compact JSON with fixed 17-significant-digit floats.
#[derive(Debug, Clone, Copy, Default)]
pub struct FixedFloatFormatter;

impl Formatter for FixedFloatFormatter {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        write!(writer, "{:.16e}", value as f64)
    }
}

pub fn to_json_line<T: Serialize>(value: &T) -> String {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, FixedFloatFormatter);
    value.serialize(&mut ser).expect("records serialize");
    String::from_utf8(buf).expect("JSON is UTF-8")
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> io::Result<()> {
    let mut out = io::BufWriter::new(fs::File::create(path)?);
    for it in items {
        out.write_all(to_json_line(it).as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_jsonl(path: &Path) -> io::Result<Vec<EpisodeRecord>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("line {}: {e}", n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}
