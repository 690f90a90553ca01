//! Statistical next-species predictors: unigram frequency, order-n Markov
//! and semi-Markov count models with back-off, and a ridge regressor over
//! composition vectors.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bins::BinEdges;
use crate::dataset::{PredictionSample, Step};
use crate::jsonl::{self, JsonlError};
use crate::species_graph::{composition_vector, CanonicalFormula, ElementUniverse, FormulaError, Vocabulary};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum BaselineError {
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("history is empty")]
    EmptyHistory,
    #[error("k must be positive")]
    ZeroK,
    #[error("rollout length must be positive")]
    ZeroSteps,
    #[error("training samples mix forward and backward tasks")]
    MixedDirections,
    #[error("model was fitted for {found} prediction; this call needs {expected}")]
    WrongDirection { expected: Direction, found: Direction },
    #[error("normal matrix is singular at lambda = {lambda}; use a positive ridge penalty (lambda > 0)")]
    Singular { lambda: f64 },
    #[error("{0} models do not produce a probability distribution")]
    NoDistribution(ModelKind),
    #[error("invalid hyperparameter: {0}")]
    Hyperparams(String),
    #[error("unknown model kind {0:?}; expected freq, markov, semimarkov or regressor")]
    UnknownKind(String),
    #[error("model file has format version {found}, this build reads {FORMAT_VERSION}")]
    Version { found: u32 },
    #[error(transparent)]
    Formula(#[from] FormulaError),
    #[error(transparent)]
    Io(#[from] JsonlError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Freq,
    Markov,
    Semimarkov,
    Regressor,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Freq => "freq",
            ModelKind::Markov => "markov",
            ModelKind::Semimarkov => "semimarkov",
            ModelKind::Regressor => "regressor",
        })
    }
}

impl FromStr for ModelKind {
    type Err = BaselineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "freq" | "frequency" => Ok(ModelKind::Freq),
            "markov" => Ok(ModelKind::Markov),
            "semimarkov" => Ok(ModelKind::Semimarkov),
            "regressor" => Ok(ModelKind::Regressor),
            _ => Err(BaselineError::UnknownKind(s.to_owned())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Forward => "forward",
            Direction::Backward => "backward",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Context length in events for count models.
    pub order: usize,
    /// Additive smoothing.
    pub alpha: f64,
    /// Ridge penalty for the regressor.
    pub lambda: f64,
    /// Duration bins used by the semi-Markov tokens.
    pub duration_bins: BinEdges,
    /// History events fed to the regressor.
    pub window: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            order: 1,
            alpha: 0.1,
            lambda: 1e-3,
            duration_bins: BinEdges::default_strata(),
            window: 3,
        }
    }
}

impl Hyperparams {
    fn validate(&self, kind: ModelKind) -> Result<(), BaselineError> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(BaselineError::Hyperparams(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(BaselineError::Hyperparams(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if matches!(kind, ModelKind::Markov | ModelKind::Semimarkov) && self.order == 0 {
            return Err(BaselineError::Hyperparams("order must be at least 1".into()));
        }
        if kind == ModelKind::Regressor && self.window == 0 {
            return Err(BaselineError::Hyperparams("window must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct NgramEntry {
    context: Vec<u32>,
    counts: Vec<u64>,
}

/// Context tuple to per-species target counts. Serialized as entries
/// sorted by context.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<NgramEntry>", into = "Vec<NgramEntry>")]
struct NgramTable(HashMap<Vec<u32>, Vec<u64>>);

impl From<Vec<NgramEntry>> for NgramTable {
    fn from(entries: Vec<NgramEntry>) -> Self {
        Self(entries.into_iter().map(|e| (e.context, e.counts)).collect())
    }
}

impl From<NgramTable> for Vec<NgramEntry> {
    fn from(table: NgramTable) -> Self {
        let mut entries: Vec<NgramEntry> = table
            .0
            .into_iter()
            .map(|(context, counts)| NgramEntry { context, counts })
            .collect();
        entries.sort_by(|a, b| a.context.len().cmp(&b.context.len()).then(a.context.cmp(&b.context)));
        entries
    }
}

impl NgramTable {
    fn merge(mut self, other: Self) -> Self {
        for (context, counts) in other.0 {
            match self.0.get_mut(&context) {
                Some(mine) => mine.iter_mut().zip(counts).for_each(|(a, b)| *a += b),
                None => {
                    self.0.insert(context, counts);
                }
            }
        }
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Regressor {
    universe: ElementUniverse,
    /// `(window * |universe| + 1) x |universe|`, bias row last.
    weights: Vec<Vec<f64>>,
    train_residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub format_version: u32,
    pub kind: ModelKind,
    pub direction: Direction,
    pub hyperparams: Hyperparams,
    pub seed: u64,
    pub vocabulary: Vec<CanonicalFormula>,
    /// Target-duration histogram per vocabulary entry.
    durations: Vec<BTreeMap<u64, u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ngrams: Option<NgramTable>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    regressor: Option<Regressor>,
}

/// A sample laid out in the model's reading order, with the index of the
/// first target.
fn ordered(sample: &PredictionSample, direction: Direction) -> (Vec<&Step>, usize) {
    let h = sample.history.len();
    match direction {
        Direction::Forward => (sample.history.iter().chain(&sample.targets).collect(), h),
        Direction::Backward => (
            sample.history.iter().rev().chain(sample.targets.iter().rev()).collect(),
            h,
        ),
    }
}

fn median(histogram: &BTreeMap<u64, u64>) -> Option<u64> {
    let total: u64 = histogram.values().sum();
    if total == 0 {
        return None;
    }
    let nth = |rank: u64| -> u64 {
        let mut seen = 0;
        for (&d, &c) in histogram {
            seen += c;
            if seen > rank {
                return d;
            }
        }
        unreachable!("rank below total")
    };
    if total % 2 == 1 {
        Some(nth(total / 2))
    } else {
        let (a, b) = (nth(total / 2 - 1), nth(total / 2));
        Some(((a + b) as f64 / 2.0).round() as u64)
    }
}

/// Cholesky solve of `a x = b` for each column of `b`; `None` when `a` is
/// not numerically positive definite.
fn cholesky_solve(a: &[Vec<f64>], b: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let scale = (0..n).map(|i| a[i][i].abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = a[i][i] - s;
                if d <= 1e-12 * scale {
                    return None;
                }
                l[i][i] = d.sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    let cols = b.first().map_or(0, Vec::len);
    let mut x = vec![vec![0.0; cols]; n];
    for c in 0..cols {
        let mut y = vec![0.0; n];
        for i in 0..n {
            let s: f64 = (0..i).map(|k| l[i][k] * y[k]).sum();
            y[i] = (b[i][c] - s) / l[i][i];
        }
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|k| l[k][i] * x[k][c]).sum();
            x[i][c] = (y[i] - s) / l[i][i];
        }
    }
    Some(x)
}

/// Fits a model on prediction samples. Backward samples produce a model
/// over the time-reversed chain; forward and backward samples cannot be
/// mixed.
pub fn fit(
    kind: ModelKind,
    samples: &[PredictionSample],
    hyperparams: &Hyperparams,
    seed: u64,
) -> Result<Model, BaselineError> {
    hyperparams.validate(kind)?;
    if samples.is_empty() {
        return Err(BaselineError::EmptyTrainSet);
    }
    let direction = if samples[0].task.is_backward() {
        Direction::Backward
    } else {
        Direction::Forward
    };
    if samples.iter().any(|s| s.task.is_backward() != (direction == Direction::Backward)) {
        return Err(BaselineError::MixedDirections);
    }

    let mut vocabulary: Vec<CanonicalFormula> = samples
        .iter()
        .flat_map(|s| s.history.iter().chain(&s.targets))
        .map(|step| step.formula.clone())
        .collect();
    vocabulary.sort();
    vocabulary.dedup();

    let mut model = Model {
        format_version: FORMAT_VERSION,
        kind,
        direction,
        hyperparams: hyperparams.clone(),
        seed,
        durations: vec![BTreeMap::new(); vocabulary.len()],
        vocabulary,
        ngrams: None,
        regressor: None,
    };
    for s in samples {
        for t in &s.targets {
            let y = model.index_of(&t.formula).expect("vocabulary covers targets");
            *model.durations[y].entry(t.duration_ps).or_insert(0) += 1;
        }
    }
    match kind {
        ModelKind::Regressor => model.regressor = Some(model.fit_regressor(samples)?),
        _ => model.ngrams = Some(model.count_ngrams(samples)),
    }
    Ok(model)
}

impl Model {
    pub fn save(&self, path: &Path) -> Result<(), BaselineError> {
        Ok(jsonl::write_json(path, self)?)
    }

    pub fn load(path: &Path) -> Result<Self, BaselineError> {
        let raw: serde_json::Value = jsonl::read_json(path)?;
        let found = raw.get("format_version").and_then(serde_json::Value::as_u64).unwrap_or(0) as u32;
        if found != FORMAT_VERSION {
            return Err(BaselineError::Version { found });
        }
        Ok(jsonl::read_json(path)?)
    }

    fn index_of(&self, formula: &CanonicalFormula) -> Option<usize> {
        self.vocabulary.binary_search(formula).ok()
    }

    fn order(&self) -> usize {
        match self.kind {
            ModelKind::Freq => 0,
            _ => self.hyperparams.order,
        }
    }

    fn token(&self, step: &Step) -> Option<u32> {
        let species = self.index_of(&step.formula)? as u32;
        Some(match self.kind {
            ModelKind::Semimarkov => {
                let bins = &self.hyperparams.duration_bins;
                species * bins.len() as u32 + bins.clamped_index(step.duration_ps) as u32
            }
            _ => species,
        })
    }

    fn count_ngrams(&self, samples: &[PredictionSample]) -> NgramTable {
        let order = self.order();
        let v = self.vocabulary.len();
        samples
            .par_iter()
            .fold(NgramTable::default, |mut table, sample| {
                let (seq, first_target) = ordered(sample, self.direction);
                let tokens: Vec<Option<u32>> = seq.iter().map(|s| self.token(s)).collect();
                for p in first_target..seq.len() {
                    let y = self.index_of(&seq[p].formula).expect("vocabulary covers targets");
                    for k in 0..=order.min(p) {
                        let context: Option<Vec<u32>> = tokens[p - k..p].iter().copied().collect();
                        let context = context.expect("vocabulary covers samples");
                        table.0.entry(context).or_insert_with(|| vec![0; v])[y] += 1;
                    }
                }
                table
            })
            .reduce(NgramTable::default, NgramTable::merge)
    }

    fn features(&self, universe: &ElementUniverse, context: &[&Step]) -> Result<Vec<f64>, FormulaError> {
        let w = self.hyperparams.window;
        let u = universe.len();
        let mut x = vec![0.0; w * u + 1];
        let tail = &context[context.len().saturating_sub(w)..];
        let offset = w - tail.len();
        for (k, step) in tail.iter().enumerate() {
            let v = composition_vector(&step.formula, universe)?;
            for (e, c) in v.into_iter().enumerate() {
                x[(offset + k) * u + e] = f64::from(c);
            }
        }
        x[w * u] = 1.0;
        Ok(x)
    }

    fn fit_regressor(&self, samples: &[PredictionSample]) -> Result<Regressor, BaselineError> {
        let universe = ElementUniverse::covering(&self.vocabulary);
        let u = universe.len();
        let d = self.hyperparams.window * u + 1;
        let mut rows: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
        for sample in samples {
            let (seq, first_target) = ordered(sample, self.direction);
            for p in first_target..seq.len() {
                let x = self.features(&universe, &seq[..p])?;
                let y = composition_vector(&seq[p].formula, &universe)?
                    .into_iter()
                    .map(f64::from)
                    .collect();
                rows.push((x, y));
            }
        }
        let mut a = vec![vec![0.0; d]; d];
        let mut b = vec![vec![0.0; u]; d];
        for (x, y) in &rows {
            for i in 0..d {
                if x[i] == 0.0 {
                    continue;
                }
                for j in 0..d {
                    a[i][j] += x[i] * x[j];
                }
                for j in 0..u {
                    b[i][j] += x[i] * y[j];
                }
            }
        }
        let lambda = self.hyperparams.lambda;
        // bias is unpenalized
        for (i, row) in a.iter_mut().enumerate().take(d - 1) {
            row[i] += lambda;
        }
        let weights = cholesky_solve(&a, &b).ok_or(BaselineError::Singular { lambda })?;
        let mut sq = 0.0;
        for (x, y) in &rows {
            for j in 0..u {
                let pred: f64 = (0..d).map(|i| x[i] * weights[i][j]).sum();
                sq += (pred - y[j]).powi(2);
            }
        }
        let train_residual = (sq / (rows.len() * u).max(1) as f64).sqrt();
        Ok(Regressor {
            universe,
            weights,
            train_residual,
        })
    }

    /// Root-mean-square training error of the regressor.
    pub fn train_residual(&self) -> Option<f64> {
        self.regressor.as_ref().map(|r| r.train_residual)
    }

    /// Next-species probabilities given a context in reading order, using
    /// the longest context seen in training.
    fn distribution_in_order(&self, context: &[&Step]) -> Result<Vec<f64>, BaselineError> {
        let table = self.ngrams.as_ref().ok_or(BaselineError::NoDistribution(self.kind))?;
        let v = self.vocabulary.len();
        let alpha = self.hyperparams.alpha;
        let tokens: Vec<Option<u32>> = context.iter().map(|s| self.token(s)).collect();
        for k in (0..=self.order().min(tokens.len())).rev() {
            let Some(key) = tokens[tokens.len() - k..].iter().copied().collect::<Option<Vec<u32>>>() else {
                continue;
            };
            if let Some(counts) = table.0.get(&key) {
                let total: u64 = counts.iter().sum();
                if total > 0 {
                    let denom = total as f64 + alpha * v as f64;
                    return Ok(counts.iter().map(|&c| (c as f64 + alpha) / denom).collect());
                }
            }
        }
        Ok(vec![1.0 / v as f64; v])
    }

    fn reading_order<'a>(&self, steps: &'a [Step]) -> Vec<&'a Step> {
        match self.direction {
            Direction::Forward => steps.iter().collect(),
            Direction::Backward => steps.iter().rev().collect(),
        }
    }

    /// Probabilities over [`Model::vocabulary`] for the element next to
    /// `window` (after it for forward models, before it for backward ones).
    /// `window` is chronological either way.
    pub fn distribution(&self, window: &[Step]) -> Result<Vec<f64>, BaselineError> {
        if window.is_empty() {
            return Err(BaselineError::EmptyHistory);
        }
        self.distribution_in_order(&self.reading_order(window))
    }

    fn ranked(&self, context: &[&Step]) -> Result<Vec<usize>, BaselineError> {
        match &self.regressor {
            Some(reg) => {
                let x = self.features(&reg.universe, context)?;
                let u = reg.universe.len();
                let y: Vec<f64> = (0..u)
                    .map(|j| x.iter().zip(&reg.weights).map(|(xi, w)| xi * w[j]).sum())
                    .collect();
                let vocab = Vocabulary::new(self.vocabulary.clone(), reg.universe.clone())?;
                Ok(vocab.rank_by_distance(&y).into_iter().map(|(k, _)| k).collect())
            }
            None => {
                let p = self.distribution_in_order(context)?;
                let mut idx: Vec<usize> = (0..p.len()).collect();
                idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
                Ok(idx)
            }
        }
    }

    /// Median training duration of the species, or of all targets when the
    /// species never appeared as a target.
    pub fn duration_for(&self, species: usize) -> u64 {
        median(&self.durations[species]).unwrap_or_else(|| {
            let mut all = BTreeMap::new();
            for h in &self.durations {
                for (&d, &c) in h {
                    *all.entry(d).or_insert(0) += c;
                }
            }
            median(&all).unwrap_or(0)
        })
    }

    fn expect(&self, direction: Direction) -> Result<(), BaselineError> {
        if self.direction == direction {
            Ok(())
        } else {
            Err(BaselineError::WrongDirection {
                expected: direction,
                found: self.direction,
            })
        }
    }

    /// Up to `k` candidates for the next element, best first; ties go to
    /// the earlier vocabulary entry.
    pub fn predict_topk(&self, history: &[Step], k: usize) -> Result<Vec<Step>, BaselineError> {
        self.expect(Direction::Forward)?;
        self.topk(history, k)
    }

    fn topk(&self, window: &[Step], k: usize) -> Result<Vec<Step>, BaselineError> {
        if window.is_empty() {
            return Err(BaselineError::EmptyHistory);
        }
        if k == 0 {
            return Err(BaselineError::ZeroK);
        }
        Ok(self
            .ranked(&self.reading_order(window))?
            .into_iter()
            .take(k)
            .map(|s| Step::new(self.vocabulary[s].clone(), self.duration_for(s)))
            .collect())
    }

    /// Most likely element preceding `window`.
    pub fn predict_backward(&self, window: &[Step]) -> Result<Step, BaselineError> {
        self.expect(Direction::Backward)?;
        Ok(self.topk(window, 1)?.remove(0))
    }

    /// Backward counterpart of [`Model::predict_topk`].
    pub fn predict_backward_topk(&self, window: &[Step], k: usize) -> Result<Vec<Step>, BaselineError> {
        self.expect(Direction::Backward)?;
        self.topk(window, k)
    }

    /// Greedy autoregressive rollout of `n` elements.
    pub fn rollout_nstep(&self, history: &[Step], n: usize) -> Result<Vec<Step>, BaselineError> {
        self.expect(Direction::Forward)?;
        if n == 0 {
            return Err(BaselineError::ZeroSteps);
        }
        let mut context = history.to_vec();
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let next = self.topk(&context, 1)?.remove(0);
            context.push(next.clone());
            out.push(next);
        }
        Ok(out)
    }
}
