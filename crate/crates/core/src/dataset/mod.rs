//! Forecasting datasets: stratified balancing, sliding windows, the
//! trajectory-disjoint split, instruction formatting and Q&A mixing.

mod balance;
mod format;
mod mix;
mod split;
mod windows;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bins::BinError;
use crate::species_graph::CanonicalFormula;

pub use balance::{balance, stratum_counts, Stratum};
pub use format::{
    format_instructions, render_history, render_output, DatasetRecord, TemplateSet,
};
pub use mix::{interleave_qa, InstructionRecord, MixedRecord};
pub use split::{split_disjoint, window_key, SplitOutcome, SplitReport};
pub use windows::{build_windows, slide_windows, SkipReport, Window, WindowOutcome};

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("stratum cap must be positive")]
    ZeroCap,
    #[error(transparent)]
    Bin(#[from] BinError),
    #[error("history length range [{min}, {max}] is invalid; need 1 <= min <= max")]
    InvalidHistoryRange { min: usize, max: usize },
    #[error("unknown task {0:?}; expected forward_1, forward_2, backward or potential_k")]
    UnknownTask(String),
    #[error("unknown split {0:?}; expected train or test")]
    UnknownSplit(String),
    #[error("split needs at least 2 trajectories, found {found}")]
    TooFewTrajectories { found: usize },
    #[error("test fraction must lie strictly between 0 and 1, got {0}")]
    InvalidFraction(f64),
    #[error("sample {sample_id}: empty history")]
    EmptyHistory { sample_id: String },
    #[error("sample {sample_id}: task {task} needs {expected} target(s), found {found}")]
    TargetCount {
        sample_id: String,
        task: Task,
        expected: usize,
        found: usize,
    },
    #[error("sample {sample_id} has not been assigned a split")]
    Unsplit { sample_id: String },
    #[error("mixing ratio must be a finite non-negative number, got {0}")]
    InvalidRatio(f64),
    #[error("ratio {requested} needs {needed} Q&A records but only {available} were supplied; the maximum attainable ratio is {max_ratio}")]
    RatioUnattainable {
        requested: f64,
        needed: usize,
        available: usize,
        max_ratio: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[serde(rename = "forward_1")]
    Forward1,
    #[serde(rename = "forward_2")]
    Forward2,
    Backward,
    PotentialK,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Forward1, Task::Forward2, Task::Backward, Task::PotentialK];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Forward1 => "forward_1",
            Task::Forward2 => "forward_2",
            Task::Backward => "backward",
            Task::PotentialK => "potential_k",
        }
    }

    pub fn target_len(self) -> usize {
        match self {
            Task::Forward2 => 2,
            _ => 1,
        }
    }

    pub fn is_backward(self) -> bool {
        self == Task::Backward
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = DatasetError;

    /// Accepts both `forward_1` and `forward1` spellings.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('_', "").to_ascii_lowercase().as_str() {
            "forward1" => Ok(Task::Forward1),
            "forward2" => Ok(Task::Forward2),
            "backward" => Ok(Task::Backward),
            "potentialk" => Ok(Task::PotentialK),
            _ => Err(DatasetError::UnknownTask(s.to_owned())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(DatasetError::UnknownSplit(s.to_owned())),
        }
    }
}

/// One `(formula, duration)` element; serialized as a two-element array.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "(CanonicalFormula, u64)", into = "(CanonicalFormula, u64)")]
pub struct Step {
    pub formula: CanonicalFormula,
    pub duration_ps: u64,
}

impl Step {
    pub fn new(formula: CanonicalFormula, duration_ps: u64) -> Self {
        Self {
            formula,
            duration_ps,
        }
    }
}

impl From<(CanonicalFormula, u64)> for Step {
    fn from((formula, duration_ps): (CanonicalFormula, u64)) -> Self {
        Self::new(formula, duration_ps)
    }
}

impl From<Step> for (CanonicalFormula, u64) {
    fn from(step: Step) -> Self {
        (step.formula, step.duration_ps)
    }
}

impl From<&crate::MolecularEvent> for Step {
    fn from(e: &crate::MolecularEvent) -> Self {
        Self::new(e.formula.clone(), e.duration_ps)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionSample {
    pub sample_id: String,
    pub task: Task,
    pub trajectory_id: String,
    pub lineage_id: u64,
    pub history: Vec<Step>,
    pub targets: Vec<Step>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

/// Inclusive range of history lengths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryRange {
    min: usize,
    max: usize,
}

impl HistoryRange {
    pub fn new(min: usize, max: usize) -> Result<Self, DatasetError> {
        if min == 0 || min > max {
            return Err(DatasetError::InvalidHistoryRange { min, max });
        }
        Ok(Self { min, max })
    }

    pub fn fixed(len: usize) -> Result<Self, DatasetError> {
        Self::new(len, len)
    }

    pub fn min(&self) -> usize {
        self.min
    }

    pub fn max(&self) -> usize {
        self.max
    }
}

impl Default for HistoryRange {
    fn default() -> Self {
        Self { min: 3, max: 5 }
    }
}
