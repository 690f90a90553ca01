//! Scoring of prediction files: output parsing, accuracy and missing rate,
//! potential-k hit rates, per-step accuracy, duration error, confusion
//! matrices and the kinetic mismatch taxonomy.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetRecord, PredictionSample, Split, Step, Task};
use crate::jsonl::{self, JsonlError};
use crate::species_graph::{parse_formula, CanonicalFormula, ParseMode};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("sample {0} has more than one prediction")]
    DuplicateSample(String),
    #[error("prediction for unknown sample {0}")]
    UnknownSample(String),
    #[error("ground truth lists sample {0} twice")]
    DuplicateTruth(String),
    #[error("prediction and truth are the same species {0}; not a mismatch")]
    NotAMismatch(String),
    #[error("k must be positive")]
    ZeroK,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseFailure {
    /// No `( ... , ... )` tuple in the text.
    NoTuple,
    /// Tuple found but the formula is not canonical.
    BadFormula,
    /// Tuple found but the duration is not a positive integer.
    BadDuration,
    /// A valid tuple surrounded by other text.
    ExtraText,
    /// No prediction was supplied for the sample, or fewer elements than
    /// the task needs.
    Missing,
}

/// Parses one `(formula, duration)` tuple. Total over all inputs.
pub fn parse_prediction(raw: &str) -> Result<Step, ParseFailure> {
    let text = raw.trim();
    let Some(open) = text.find('(') else {
        return Err(ParseFailure::NoTuple);
    };
    let Some(close_rel) = text[open..].find(')') else {
        return Err(ParseFailure::NoTuple);
    };
    let close = open + close_rel;
    let inner = &text[open + 1..close];
    let mut parts = inner.split(',');
    let (Some(formula), Some(duration), None) = (parts.next(), parts.next(), parts.next()) else {
        return Err(ParseFailure::NoTuple);
    };
    let formula = parse_formula(formula.trim(), ParseMode::Strict).map_err(|_| ParseFailure::BadFormula)?;
    let duration = duration.trim();
    if duration.is_empty() || !duration.bytes().all(|b| b.is_ascii_digit()) {
        return Err(ParseFailure::BadDuration);
    }
    let duration: u64 = duration.parse().map_err(|_| ParseFailure::BadDuration)?;
    if duration == 0 {
        return Err(ParseFailure::BadDuration);
    }
    if open != 0 || close != text.len() - 1 {
        return Err(ParseFailure::ExtraText);
    }
    Ok(Step::new(formula, duration))
}

/// Parses `n` tuples separated by `;`. Missing elements come back as
/// [`ParseFailure::Missing`]; surplus elements make the last one fail with
/// [`ParseFailure::ExtraText`].
pub fn parse_sequence(raw: &str, n: usize) -> Vec<Result<Step, ParseFailure>> {
    let parts: Vec<&str> = if raw.trim().is_empty() {
        Vec::new()
    } else {
        raw.split(';').collect()
    };
    let mut out: Vec<Result<Step, ParseFailure>> = (0..n)
        .map(|k| parts.get(k).map_or(Err(ParseFailure::Missing), |p| parse_prediction(p)))
        .collect();
    if parts.len() > n && n > 0 {
        out[n - 1] = Err(ParseFailure::ExtraText);
    }
    out
}

/// One line of `predictions.jsonl`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionEntry {
    pub sample_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<Vec<String>>,
}

impl PredictionEntry {
    pub fn output(sample_id: impl Into<String>, output: impl Into<String>) -> Self {
        Self {
            sample_id: sample_id.into(),
            output: Some(output.into()),
            candidates: None,
        }
    }

    pub fn candidates(sample_id: impl Into<String>, candidates: Vec<String>) -> Self {
        Self {
            sample_id: sample_id.into(),
            output: None,
            candidates: Some(candidates),
        }
    }

    /// Ranked candidate texts; a plain output counts as one candidate.
    fn candidate_texts(&self) -> Vec<&str> {
        match (&self.candidates, &self.output) {
            (Some(c), _) => c.iter().map(String::as_str).collect(),
            (None, Some(o)) => vec![o.as_str()],
            (None, None) => Vec::new(),
        }
    }

    /// Text holding the model's main answer.
    fn primary(&self) -> Option<&str> {
        self.output
            .as_deref()
            .or_else(|| self.candidates.as_ref().and_then(|c| c.first().map(String::as_str)))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TruthItem {
    pub sample_id: String,
    pub targets: Vec<Step>,
}

/// Test-split records of `task` from a dataset file.
pub fn truth_from_dataset(records: &[DatasetRecord], task: Task) -> Vec<TruthItem> {
    records
        .iter()
        .filter(|r| r.task == task && r.split == Split::Test)
        .map(|r| TruthItem {
            sample_id: r.sample_id.clone(),
            targets: r.targets.clone(),
        })
        .collect()
}

/// Test-split samples of `task`, for scoring without a formatted dataset.
pub fn truth_from_samples(samples: &[PredictionSample], task: Task) -> Vec<TruthItem> {
    samples
        .iter()
        .filter(|s| s.task == task && s.split == Some(Split::Test))
        .map(|s| TruthItem {
            sample_id: s.sample_id.clone(),
            targets: s.targets.clone(),
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MismatchClass {
    UnderSulfidation,
    OverSulfidation,
    OxygenDeviation,
    Other,
}

impl MismatchClass {
    pub const ALL: [MismatchClass; 4] = [
        MismatchClass::UnderSulfidation,
        MismatchClass::OverSulfidation,
        MismatchClass::OxygenDeviation,
        MismatchClass::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MismatchClass::UnderSulfidation => "under_sulfidation",
            MismatchClass::OverSulfidation => "over_sulfidation",
            MismatchClass::OxygenDeviation => "oxygen_deviation",
            MismatchClass::Other => "other",
        }
    }
}

/// Elements driving the mismatch taxonomy.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaxonomyElements {
    pub primary: String,
    pub secondary: String,
}

impl Default for TaxonomyElements {
    fn default() -> Self {
        Self {
            primary: "S".into(),
            secondary: "O".into(),
        }
    }
}

pub fn classify_mismatch(
    pred: &CanonicalFormula,
    truth: &CanonicalFormula,
    elements: &TaxonomyElements,
) -> Result<MismatchClass, EvalError> {
    if pred == truth {
        return Err(EvalError::NotAMismatch(pred.to_string()));
    }
    let (ps, ts) = (pred.count(&elements.primary), truth.count(&elements.primary));
    Ok(if ps < ts {
        MismatchClass::UnderSulfidation
    } else if ps > ts {
        MismatchClass::OverSulfidation
    } else if pred.count(&elements.secondary) != truth.count(&elements.secondary) {
        MismatchClass::OxygenDeviation
    } else {
        MismatchClass::Other
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    /// Largest k for potential-k hit rates.
    pub k: usize,
    pub duration_tolerance_ps: u64,
    pub taxonomy: TaxonomyElements,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            k: 5,
            duration_tolerance_ps: 50,
            taxonomy: TaxonomyElements::default(),
        }
    }
}

pub const UNPARSEABLE: &str = "UNPARSEABLE";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    /// Row labels: ground-truth species.
    pub rows: Vec<String>,
    /// Column labels: predicted species, then [`UNPARSEABLE`].
    pub columns: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn diagonal(&self) -> u64 {
        self.rows
            .iter()
            .enumerate()
            .filter_map(|(r, label)| {
                self.columns.iter().position(|c| c == label).map(|c| self.counts[r][c])
            })
            .sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }
}

/// Builds the matrix from `(truth, prediction)` pairs; `None` predictions
/// land in the unparseable column.
pub fn confusion_matrix<'a>(
    pairs: impl IntoIterator<Item = (&'a CanonicalFormula, Option<&'a CanonicalFormula>)>,
) -> ConfusionMatrix {
    let pairs: Vec<_> = pairs.into_iter().collect();
    let rows: BTreeSet<&str> = pairs.iter().map(|(t, _)| t.as_str()).collect();
    let cols: BTreeSet<&str> = pairs.iter().filter_map(|(_, p)| p.map(CanonicalFormula::as_str)).collect();
    let rows: Vec<String> = rows.into_iter().map(str::to_owned).collect();
    let mut columns: Vec<String> = cols.into_iter().map(str::to_owned).collect();
    columns.push(UNPARSEABLE.to_owned());
    let row_idx: HashMap<&str, usize> = rows.iter().enumerate().map(|(k, r)| (r.as_str(), k)).collect();
    let col_idx: HashMap<&str, usize> = columns.iter().enumerate().map(|(k, c)| (c.as_str(), k)).collect();
    let mut counts = vec![vec![0; columns.len()]; rows.len()];
    for (truth, pred) in pairs {
        let c = col_idx[pred.map_or(UNPARSEABLE, CanonicalFormula::as_str)];
        counts[row_idx[truth.as_str()]][c] += 1;
    }
    ConfusionMatrix {
        rows,
        columns,
        counts,
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaxonomyReport {
    /// Wrong-but-valid first-step predictions classified below.
    pub wrong_valid: u64,
    pub counts: BTreeMap<MismatchClass, u64>,
    /// Percent of `wrong_valid`.
    pub shares: BTreeMap<MismatchClass, f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: Option<Task>,
    pub samples: u64,
    /// Samples whose every predicted species matches.
    pub hits: u64,
    /// Samples that parsed but miss at least one species.
    pub wrong_valid: u64,
    /// Samples with any unparseable element.
    pub parse_failures: u64,
    pub failure_categories: BTreeMap<ParseFailure, u64>,
    /// Percent of samples.
    pub accuracy: f64,
    pub missing_rate: f64,
    /// Percent of samples with a species hit at each step.
    pub step_accuracy: Vec<f64>,
    /// Mean of `step_accuracy`.
    pub nstep_accuracy: f64,
    /// Percent of samples whose truth appears among the first k parsed
    /// candidates, for k = 1..=K.
    pub potential_k: Vec<f64>,
    /// Mean absolute duration error over species-correct steps.
    pub duration_mae_ps: Option<f64>,
    /// Fraction of species-correct steps within the duration tolerance.
    pub duration_within_tolerance: Option<f64>,
    pub confusion: ConfusionMatrix,
    pub taxonomy: TaxonomyReport,
}

fn percent(n: u64, d: u64) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64 * 100.0
    }
}

#[derive(Default)]
struct Tally {
    hits: u64,
    wrong_valid: u64,
    failures: u64,
    categories: BTreeMap<ParseFailure, u64>,
    step_hits: Vec<u64>,
    topk_hits: Vec<u64>,
    abs_errors: Vec<u64>,
    mismatches: BTreeMap<MismatchClass, u64>,
    wrong_valid_first: u64,
}

impl Tally {
    fn new(steps: usize, k: usize) -> Self {
        Self {
            step_hits: vec![0; steps],
            topk_hits: vec![0; k],
            ..Self::default()
        }
    }

    fn merge(mut self, other: Self) -> Self {
        self.hits += other.hits;
        self.wrong_valid += other.wrong_valid;
        self.failures += other.failures;
        for (k, v) in other.categories {
            *self.categories.entry(k).or_insert(0) += v;
        }
        self.step_hits.iter_mut().zip(other.step_hits).for_each(|(a, b)| *a += b);
        self.topk_hits.iter_mut().zip(other.topk_hits).for_each(|(a, b)| *a += b);
        self.abs_errors.extend(other.abs_errors);
        for (k, v) in other.mismatches {
            *self.mismatches.entry(k).or_insert(0) += v;
        }
        self.wrong_valid_first += other.wrong_valid_first;
        self
    }
}

/// Scores predictions against ground truth. Every truth sample counts in
/// the denominator; absent predictions count as parse failures.
pub fn score_task(
    entries: &[PredictionEntry],
    truth: &[TruthItem],
    task: Option<Task>,
    config: &ScoreConfig,
) -> Result<TaskReport, EvalError> {
    if config.k == 0 {
        return Err(EvalError::ZeroK);
    }
    let mut by_id: HashMap<&str, &PredictionEntry> = HashMap::with_capacity(entries.len());
    let truth_ids: HashMap<&str, usize> = {
        let mut ids = HashMap::with_capacity(truth.len());
        for (k, t) in truth.iter().enumerate() {
            if ids.insert(t.sample_id.as_str(), k).is_some() {
                return Err(EvalError::DuplicateTruth(t.sample_id.clone()));
            }
        }
        ids
    };
    for e in entries {
        if !truth_ids.contains_key(e.sample_id.as_str()) {
            return Err(EvalError::UnknownSample(e.sample_id.clone()));
        }
        if by_id.insert(e.sample_id.as_str(), e).is_some() {
            return Err(EvalError::DuplicateSample(e.sample_id.clone()));
        }
    }
    let steps = truth.iter().map(|t| t.targets.len()).max().unwrap_or(1).max(1);
    let k = config.k;

    struct Scored {
        tally: Tally,
        first_pred: Option<CanonicalFormula>,
    }

    let scored: Vec<Scored> = truth
        .par_iter()
        .map(|item| {
            let mut tally = Tally::new(steps, k);
            let entry = by_id.get(item.sample_id.as_str());
            let n = item.targets.len();
            let parsed = match entry.and_then(|e| e.primary()) {
                Some(text) => parse_sequence(text, n),
                None => vec![Err(ParseFailure::Missing); n],
            };
            let mut all_hit = true;
            let mut failure = None;
            for (j, (p, t)) in parsed.iter().zip(&item.targets).enumerate() {
                match p {
                    Ok(step) if step.formula == t.formula => {
                        tally.step_hits[j] += 1;
                        tally.abs_errors.push(step.duration_ps.abs_diff(t.duration_ps));
                    }
                    Ok(_) => all_hit = false,
                    Err(f) => {
                        all_hit = false;
                        failure.get_or_insert(*f);
                    }
                }
            }
            if let Some(f) = failure {
                tally.failures += 1;
                *tally.categories.entry(f).or_insert(0) += 1;
            } else if all_hit {
                tally.hits += 1;
            } else {
                tally.wrong_valid += 1;
            }
            let first_pred = parsed.first().and_then(|p| p.as_ref().ok()).map(|s| s.formula.clone());
            if let (Some(pred), Some(t)) = (&first_pred, item.targets.first()) {
                if pred != &t.formula {
                    tally.wrong_valid_first += 1;
                    let class = classify_mismatch(pred, &t.formula, &config.taxonomy)
                        .expect("species differ");
                    *tally.mismatches.entry(class).or_insert(0) += 1;
                }
            }
            // potential-k over the first target
            if let (Some(e), Some(t)) = (entry, item.targets.first()) {
                let candidates = e.candidate_texts();
                if let Some(rank) = candidates
                    .iter()
                    .take(k)
                    .position(|c| parse_prediction(c).is_ok_and(|s| s.formula == t.formula))
                {
                    for slot in &mut tally.topk_hits[rank..] {
                        *slot += 1;
                    }
                }
            }
            Scored { tally, first_pred }
        })
        .collect();

    let confusion = confusion_matrix(
        truth
            .iter()
            .zip(&scored)
            .filter_map(|(t, s)| t.targets.first().map(|f| (&f.formula, s.first_pred.as_ref()))),
    );
    let tally = scored
        .into_iter()
        .map(|s| s.tally)
        .fold(Tally::new(steps, k), Tally::merge);

    let total = truth.len() as u64;
    let step_accuracy: Vec<f64> = tally.step_hits.iter().map(|&h| percent(h, total)).collect();
    let nstep_accuracy = step_accuracy.iter().sum::<f64>() / step_accuracy.len() as f64;
    let (duration_mae_ps, duration_within_tolerance) = if tally.abs_errors.is_empty() {
        (None, None)
    } else {
        let n = tally.abs_errors.len() as f64;
        let mae = tally.abs_errors.iter().sum::<u64>() as f64 / n;
        let within = tally
            .abs_errors
            .iter()
            .filter(|&&e| e <= config.duration_tolerance_ps)
            .count() as f64
            / n;
        (Some(mae), Some(within))
    };
    let mut counts = BTreeMap::new();
    let mut shares = BTreeMap::new();
    for class in MismatchClass::ALL {
        let c = tally.mismatches.get(&class).copied().unwrap_or(0);
        counts.insert(class, c);
        shares.insert(class, percent(c, tally.wrong_valid_first));
    }
    Ok(TaskReport {
        task,
        samples: total,
        hits: tally.hits,
        wrong_valid: tally.wrong_valid,
        parse_failures: tally.failures,
        failure_categories: tally.categories,
        accuracy: percent(tally.hits, total),
        missing_rate: percent(tally.failures, total),
        step_accuracy,
        nstep_accuracy,
        potential_k: tally.topk_hits.iter().map(|&h| percent(h, total)).collect(),
        duration_mae_ps,
        duration_within_tolerance,
        confusion,
        taxonomy: TaxonomyReport {
            wrong_valid: tally.wrong_valid_first,
            counts,
            shares,
        },
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tasks: Vec<TaskReport>,
    /// Present when several prediction files were scored for one task.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub across_seeds: Option<SeedSummary>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub runs: usize,
    pub accuracy: MeanStd,
    pub missing_rate: MeanStd,
    pub nstep_accuracy: MeanStd,
}

pub fn summarize_seeds(reports: &[TaskReport]) -> Option<SeedSummary> {
    if reports.is_empty() {
        return None;
    }
    let pick = |f: fn(&TaskReport) -> f64| MeanStd::of(&reports.iter().map(f).collect::<Vec<_>>());
    Some(SeedSummary {
        runs: reports.len(),
        accuracy: pick(|r| r.accuracy),
        missing_rate: pick(|r| r.missing_rate),
        nstep_accuracy: pick(|r| r.nstep_accuracy),
    })
}

fn task_label(r: &TaskReport) -> &'static str {
    r.task.map_or("all", Task::as_str)
}

fn write_file(dir: &Path, name: &str, text: &str) -> Result<(), EvalError> {
    let path = dir.join(name);
    fs::write(&path, text).map_err(|source| EvalError::Io { path, source })
}

/// Human-readable summary with percentages at two decimals.
pub fn render_summary(report: &EvalReport) -> String {
    let mut out = String::new();
    for r in &report.tasks {
        let _ = writeln!(out, "task {}: {} samples", task_label(r), r.samples);
        let _ = writeln!(out, "  accuracy      {:.2}%", r.accuracy);
        let _ = writeln!(out, "  missing rate  {:.2}%", r.missing_rate);
        let steps: Vec<String> = r.step_accuracy.iter().map(|a| format!("{a:.2}%")).collect();
        let _ = writeln!(out, "  per step      {} (mean {:.2}%)", steps.join(" "), r.nstep_accuracy);
        let pk: Vec<String> = r
            .potential_k
            .iter()
            .enumerate()
            .map(|(k, a)| format!("k={}:{a:.2}%", k + 1))
            .collect();
        let _ = writeln!(out, "  potential-k   {}", pk.join(" "));
        if let (Some(mae), Some(within)) = (r.duration_mae_ps, r.duration_within_tolerance) {
            let _ = writeln!(out, "  duration MAE  {mae:.2} ps ({:.2}% within tolerance)", within * 100.0);
        }
        let shares: Vec<String> = MismatchClass::ALL
            .iter()
            .map(|c| format!("{} {:.2}%", c.as_str(), r.taxonomy.shares.get(c).copied().unwrap_or(0.0)))
            .collect();
        let _ = writeln!(out, "  mismatches    {} of {}", shares.join(", "), r.taxonomy.wrong_valid);
    }
    if let Some(s) = &report.across_seeds {
        let _ = writeln!(
            out,
            "across {} runs: accuracy {:.2} +/- {:.2}%, missing {:.2} +/- {:.2}%",
            s.runs, s.accuracy.mean, s.accuracy.std, s.missing_rate.mean, s.missing_rate.std
        );
    }
    out
}

/// Writes `report.json`, `confusion.csv`, `nstep_decay.csv`,
/// `error_taxonomy.csv` and `summary.txt` into `dir`.
pub fn emit_report(report: &EvalReport, dir: &Path) -> Result<(), EvalError> {
    fs::create_dir_all(dir).map_err(|source| EvalError::Io {
        path: dir.to_owned(),
        source,
    })?;
    jsonl::write_json(&dir.join("report.json"), report)?;

    let mut confusion = String::from("task,truth,predicted,count\n");
    let mut nstep = String::from("task,step,accuracy\n");
    let mut taxonomy = String::from("task,class,count,share\n");
    for r in &report.tasks {
        let label = task_label(r);
        for (i, row) in r.confusion.rows.iter().enumerate() {
            for (j, col) in r.confusion.columns.iter().enumerate() {
                let _ = writeln!(confusion, "{label},{row},{col},{}", r.confusion.counts[i][j]);
            }
        }
        for (j, a) in r.step_accuracy.iter().enumerate() {
            let _ = writeln!(nstep, "{label},{},{a}", j + 1);
        }
        for class in MismatchClass::ALL {
            let _ = writeln!(
                taxonomy,
                "{label},{},{},{}",
                class.as_str(),
                r.taxonomy.counts.get(&class).copied().unwrap_or(0),
                r.taxonomy.shares.get(&class).copied().unwrap_or(0.0)
            );
        }
    }
    write_file(dir, "confusion.csv", &confusion)?;
    write_file(dir, "nstep_decay.csv", &nstep)?;
    write_file(dir, "error_taxonomy.csv", &taxonomy)?;
    write_file(dir, "summary.txt", &render_summary(report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn f(s: &str) -> CanonicalFormula {
        s.parse().unwrap()
    }

    fn truth(id: &str, formula: &str, d: u64) -> TruthItem {
        TruthItem {
            sample_id: id.into(),
            targets: vec![Step::new(f(formula), d)],
        }
    }

    #[test]
    fn parses_published_prediction() {
        assert_eq!(parse_prediction("(MoS3, 106)"), Ok(Step::new(f("MoS3"), 106)));
        assert_eq!(parse_prediction("  (MoS3,106)\n"), Ok(Step::new(f("MoS3"), 106)));
    }

    #[test]
    fn failure_categories() {
        assert_eq!(parse_prediction("MoS3 at about 100ps I think"), Err(ParseFailure::NoTuple));
        assert_eq!(parse_prediction("(SMo3, 10)"), Err(ParseFailure::BadFormula));
        assert_eq!(parse_prediction("(MoS3, 0)"), Err(ParseFailure::BadDuration));
        assert_eq!(parse_prediction("(MoS3, 1.5)"), Err(ParseFailure::BadDuration));
        assert_eq!(parse_prediction("(MoS3, -4)"), Err(ParseFailure::BadDuration));
        assert_eq!(parse_prediction("Answer: (MoS3, 106)"), Err(ParseFailure::ExtraText));
        assert_eq!(parse_prediction("(MoS3, 106) ps"), Err(ParseFailure::ExtraText));
        assert_eq!(parse_prediction("(MoS3)"), Err(ParseFailure::NoTuple));
        assert_eq!(parse_prediction(""), Err(ParseFailure::NoTuple));
    }

    #[test]
    fn sequences_split_on_semicolons() {
        let two = parse_sequence("(MoS3, 106); (MoS4, 20)", 2);
        assert_eq!(two, vec![Ok(Step::new(f("MoS3"), 106)), Ok(Step::new(f("MoS4"), 20))]);
        assert_eq!(parse_sequence("(MoS3, 106)", 2)[1], Err(ParseFailure::Missing));
        assert_eq!(parse_sequence("(MoS3, 1); (MoS, 2); (MoO, 3)", 2)[1], Err(ParseFailure::ExtraText));
    }

    proptest! {
        #[test]
        fn parser_is_total(raw in ".*") {
            let _ = parse_prediction(&raw);
            let _ = parse_sequence(&raw, 3);
        }

        #[test]
        fn parser_is_total_on_bytes(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let _ = parse_prediction(&String::from_utf8_lossy(&bytes));
        }
    }

    #[test]
    fn taxonomy_classes() {
        let el = TaxonomyElements::default();
        assert_eq!(classify_mismatch(&f("MoS3"), &f("MoS4"), &el).unwrap(), MismatchClass::UnderSulfidation);
        assert_eq!(classify_mismatch(&f("MoS5"), &f("MoS4"), &el).unwrap(), MismatchClass::OverSulfidation);
        assert_eq!(classify_mismatch(&f("MoO2S2"), &f("MoOS2"), &el).unwrap(), MismatchClass::OxygenDeviation);
        assert_eq!(classify_mismatch(&f("Mo2S2"), &f("MoS2"), &el).unwrap(), MismatchClass::Other);
        assert!(classify_mismatch(&f("MoS2"), &f("MoS2"), &el).is_err());
    }

    #[test]
    fn four_sample_arithmetic() {
        let t = vec![truth("a", "MoS", 10), truth("b", "MoS2", 10), truth("c", "MoS3", 10), truth("d", "MoS4", 10)];
        let e = vec![
            PredictionEntry::output("a", "(MoS, 10)"),
            PredictionEntry::output("b", "(MoS2, 20)"),
            PredictionEntry::output("c", "(MoS4, 10)"),
            PredictionEntry::output("d", "no idea"),
        ];
        let r = score_task(&e, &t, Some(Task::Forward1), &ScoreConfig::default()).unwrap();
        assert_eq!(format!("{:.2}", r.accuracy), "50.00");
        assert_eq!(format!("{:.2}", r.missing_rate), "25.00");
        assert_eq!(r.hits + r.wrong_valid + r.parse_failures, r.samples);
        assert_eq!(r.duration_mae_ps, Some(5.0));
        assert_eq!(r.taxonomy.counts[&MismatchClass::OverSulfidation], 1);
    }

    #[test]
    fn perfect_and_missing_predictions() {
        let t = vec![truth("a", "MoS", 10), truth("b", "MoS2", 30)];
        let e = vec![PredictionEntry::output("a", "(MoS, 10)"), PredictionEntry::output("b", "(MoS2, 30)")];
        let r = score_task(&e, &t, None, &ScoreConfig::default()).unwrap();
        assert_eq!((r.accuracy, r.missing_rate, r.duration_mae_ps), (100.0, 0.0, Some(0.0)));
        assert_eq!(r.confusion.diagonal(), 2);

        let r = score_task(&e[..1], &t, None, &ScoreConfig::default()).unwrap();
        assert_eq!(r.failure_categories[&ParseFailure::Missing], 1);
        assert_eq!(r.missing_rate, 50.0);
    }

    #[test]
    fn duplicate_and_unknown_ids_are_errors() {
        let t = vec![truth("a", "MoS", 10)];
        let dup = vec![PredictionEntry::output("a", "(MoS, 1)"), PredictionEntry::output("a", "(MoS, 1)")];
        assert!(matches!(score_task(&dup, &t, None, &ScoreConfig::default()), Err(EvalError::DuplicateSample(_))));
        let unknown = vec![PredictionEntry::output("z", "(MoS, 1)")];
        assert!(matches!(score_task(&unknown, &t, None, &ScoreConfig::default()), Err(EvalError::UnknownSample(_))));
    }

    #[test]
    fn constant_predictor_fills_one_column() {
        let t: Vec<_> = ["MoS", "MoS2", "MoS3", "MoS2"].iter().enumerate().map(|(k, s)| truth(&k.to_string(), s, 10)).collect();
        let e: Vec<_> = (0..4).map(|k| PredictionEntry::output(k.to_string(), "(MoO, 10)")).collect();
        let r = score_task(&e, &t, None, &ScoreConfig::default()).unwrap();
        assert_eq!(r.confusion.columns, vec!["MoO".to_string(), UNPARSEABLE.to_string()]);
        let row_sums: Vec<u64> = r.confusion.counts.iter().map(|row| row.iter().sum()).collect();
        assert_eq!(row_sums, vec![1, 2, 1]);
        assert!(r.confusion.counts.iter().all(|row| row[1] == 0));
    }

    #[test]
    fn potential_k_is_monotone_and_skips_bad_candidates() {
        let t = vec![truth("a", "MoS3", 10), truth("b", "MoS", 10)];
        let e = vec![
            PredictionEntry::candidates("a", vec!["(MoS, 1)".into(), "junk".into(), "(MoS3, 4)".into()]),
            PredictionEntry::candidates("b", vec!["(MoS, 1)".into()]),
        ];
        let r = score_task(&e, &t, Some(Task::PotentialK), &ScoreConfig::default()).unwrap();
        assert_eq!(r.potential_k, vec![50.0, 50.0, 100.0, 100.0, 100.0]);
        assert_eq!(r.accuracy, 50.0);
    }

    #[test]
    fn two_step_scores_per_step() {
        let t = vec![TruthItem {
            sample_id: "a".into(),
            targets: vec![Step::new(f("MoS"), 10), Step::new(f("MoS2"), 10)],
        }];
        let e = vec![PredictionEntry::output("a", "(MoS, 10); (MoS3, 10)")];
        let r = score_task(&e, &t, Some(Task::Forward2), &ScoreConfig::default()).unwrap();
        assert_eq!(r.step_accuracy, vec![100.0, 0.0]);
        assert_eq!(r.nstep_accuracy, 50.0);
        assert_eq!(r.wrong_valid, 1);
    }

    #[test]
    fn report_files_round_trip() {
        let t = vec![truth("a", "MoS", 10), truth("b", "MoS4", 10)];
        let e = vec![PredictionEntry::output("a", "(MoS, 10)"), PredictionEntry::output("b", "(MoS3, 10)")];
        let r = score_task(&e, &t, Some(Task::Forward1), &ScoreConfig::default()).unwrap();
        let report = EvalReport {
            tasks: vec![r.clone(), r],
            across_seeds: None,
        };
        let dir = tempfile::tempdir().unwrap();
        emit_report(&report, dir.path()).unwrap();
        let back: EvalReport = jsonl::read_json(&dir.path().join("report.json")).unwrap();
        assert_eq!(back, report);
        let csv = fs::read_to_string(dir.path().join("error_taxonomy.csv")).unwrap();
        let share_sum: f64 = csv
            .lines()
            .skip(1)
            .take(4)
            .map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap())
            .sum();
        assert!((share_sum - 100.0).abs() < 0.01);
        let summary = fs::read_to_string(dir.path().join("summary.txt")).unwrap();
        assert!(summary.contains("accuracy      50.00%"));
    }

    #[test]
    fn seed_summary_statistics() {
        let mk = |acc: f64| TaskReport {
            accuracy: acc,
            ..TaskReport::default()
        };
        let s = summarize_seeds(&[mk(50.0), mk(60.0), mk(70.0)]).unwrap();
        assert_eq!(s.accuracy.mean, 60.0);
        assert!((s.accuracy.std - 10.0).abs() < 1e-12);
        assert!(summarize_seeds(&[]).is_none());
    }
}
