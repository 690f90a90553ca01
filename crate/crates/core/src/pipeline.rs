//! End-to-end runs driven by one TOML config.
//!
//! Stages run in dependency order and communicate only through files in
//! `out_dir`. Each stage is keyed by its name, its parameters and the
//! hashes of its input files; a stage whose key matches the previous run
//! and whose outputs still hash to the recorded values is skipped.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::baselines::{self, Hyperparams, Model, ModelKind};
use crate::bins::BinEdges;
use crate::dataset::{
    self, DatasetRecord, HistoryRange, InstructionRecord, PredictionSample, Split, Task,
    TemplateSet,
};
use crate::eval::{self, EvalReport, PredictionEntry, ScoreConfig};
use crate::event_stream::{self, FilterBand, MolecularEvent, StageCounts, StageReport};
use crate::jsonl;
use crate::kmc::{self, ReactionNetwork};
use crate::seed;
use crate::trajectory_io::{self, BondThreshold, TrajectoryManifest};
use crate::Error;

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid config: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl PipelineError {
    pub fn is_validation(&self) -> bool {
        matches!(self, PipelineError::Parse { .. } | PipelineError::Invalid(_))
    }
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_owned(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub kind: ModelKind,
    pub order: usize,
    pub alpha: f64,
    pub lambda: f64,
    pub window: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        let h = Hyperparams::default();
        Self {
            kind: ModelKind::Markov,
            order: h.order,
            alpha: h.alpha,
            lambda: h.lambda,
            window: h.window,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub out_dir: PathBuf,
    /// Frames file to ingest. Exactly one of `frames` and `network`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frames: Option<PathBuf>,
    /// Reaction network to simulate.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub network: Option<PathBuf>,
    pub trajectories: usize,
    pub events_per: usize,
    pub bo_min: f64,
    pub tau_min: u64,
    pub tau_max: u64,
    pub bin_edges: Vec<u64>,
    pub cap: usize,
    pub history_min: usize,
    pub history_max: usize,
    pub test_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub qa: Option<PathBuf>,
    pub qa_ratio: f64,
    /// Root seed; falls back to `EVOMD_SEED`, then the built-in default.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub k: usize,
    pub dur_tol: u64,
    pub tasks: Vec<Task>,
    pub baseline: BaselineConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("out"),
            frames: None,
            network: None,
            trajectories: 10,
            events_per: 200,
            bo_min: 0.3,
            tau_min: 10,
            tau_max: 500,
            bin_edges: BinEdges::default_strata().edges().to_vec(),
            cap: 200,
            history_min: 3,
            history_max: 5,
            test_fraction: 0.2,
            qa: None,
            qa_ratio: 0.0,
            seed: None,
            k: 5,
            dur_tol: 50,
            tasks: Task::ALL.to_vec(),
            baseline: BaselineConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Reads a TOML config. Relative paths are taken relative to the
    /// config file's directory.
    pub fn from_path(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(io_error(path))?;
        let mut config: Self = toml::from_str(&text).map_err(|e| PipelineError::Parse {
            path: path.to_owned(),
            reason: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut config.out_dir);
        config.frames.as_mut().map(resolve);
        config.network.as_mut().map(resolve);
        config.qa.as_mut().map(resolve);
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config fields always serialize")
    }

    pub fn root_seed(&self) -> u64 {
        self.seed
            .or_else(seed::from_env)
            .unwrap_or(seed::DEFAULT_ROOT_SEED)
    }

    pub fn band(&self) -> Result<FilterBand, PipelineError> {
        FilterBand::new(self.tau_min, self.tau_max).map_err(|e| PipelineError::Invalid(e.to_string()))
    }

    pub fn bins(&self) -> Result<BinEdges, PipelineError> {
        BinEdges::new(self.bin_edges.clone()).map_err(|e| PipelineError::Invalid(e.to_string()))
    }

    pub fn history(&self) -> Result<HistoryRange, PipelineError> {
        HistoryRange::new(self.history_min, self.history_max)
            .map_err(|e| PipelineError::Invalid(e.to_string()))
    }

    pub fn hyperparams(&self) -> Result<Hyperparams, PipelineError> {
        Ok(Hyperparams {
            order: self.baseline.order,
            alpha: self.baseline.alpha,
            lambda: self.baseline.lambda,
            duration_bins: self.bins()?,
            window: self.baseline.window,
        })
    }

    /// Checks every stage precondition before anything runs.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let invalid = |msg: String| Err(PipelineError::Invalid(msg));
        match (&self.frames, &self.network) {
            (Some(_), Some(_)) => return invalid("set only one of frames and network".into()),
            (None, None) => return invalid("set frames or network".into()),
            _ => {}
        }
        if self.network.is_some() && (self.trajectories < 2 || self.events_per == 0) {
            return invalid(format!(
                "simulation needs at least 2 trajectories and 1 event each, got {} x {}",
                self.trajectories, self.events_per
            ));
        }
        BondThreshold::new(self.bo_min).map_err(|e| PipelineError::Invalid(e.to_string()))?;
        let band = self.band()?;
        let bins = self.bins()?;
        if bins.lower() > band.tau_min_ps() || bins.upper() < band.tau_max_ps() {
            return invalid(format!(
                "bin edges {:?} do not cover [{}, {}]",
                self.bin_edges, self.tau_min, self.tau_max
            ));
        }
        if self.cap == 0 {
            return invalid("cap must be positive".into());
        }
        self.history()?;
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return invalid(format!("test_fraction must lie in (0, 1), got {}", self.test_fraction));
        }
        if !(self.qa_ratio.is_finite() && self.qa_ratio >= 0.0) {
            return invalid(format!("qa_ratio must be non-negative, got {}", self.qa_ratio));
        }
        if self.qa_ratio > 0.0 && self.qa.is_none() {
            return invalid("qa_ratio > 0 needs a qa file".into());
        }
        if self.k == 0 {
            return invalid("k must be positive".into());
        }
        if self.tasks.is_empty() {
            return invalid("no tasks configured".into());
        }
        let mut tasks = self.tasks.clone();
        tasks.sort();
        tasks.dedup();
        if tasks.len() != self.tasks.len() {
            return invalid("tasks are listed twice".into());
        }
        if self.baseline.order == 0 && self.baseline.kind != ModelKind::Freq && self.baseline.kind != ModelKind::Regressor {
            return invalid(format!("{} needs order >= 1", self.baseline.kind));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Complete,
    Invalid,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub key: String,
    pub status: StageStatus,
    /// Output paths relative to `out_dir`, with their SHA-256.
    pub outputs: BTreeMap<String, String>,
    pub counts: BTreeMap<String, u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub stages: Vec<StageRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<StageReport>,
}

impl RunManifest {
    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub manifest: RunManifest,
    pub executed: Vec<String>,
    pub skipped: Vec<String>,
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let mut file = File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

struct StageOutput {
    files: Vec<&'static str>,
    counts: BTreeMap<String, u64>,
}

impl StageOutput {
    fn new(files: &[&'static str]) -> Self {
        Self {
            files: files.to_vec(),
            counts: BTreeMap::new(),
        }
    }

    fn count(mut self, name: impl Into<String>, value: usize) -> Self {
        self.counts.insert(name.into(), value as u64);
        self
    }
}

struct Runner<'a> {
    config: &'a PipelineConfig,
    out: PathBuf,
    seed: u64,
    previous: BTreeMap<String, StageRecord>,
    records: Vec<StageRecord>,
    executed: Vec<String>,
    skipped: Vec<String>,
}

impl Runner<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn stage_key(&self, name: &str, params: &serde_json::Value, inputs: &[PathBuf]) -> Result<String, PipelineError> {
        let mut hasher = Sha256::new();
        hasher.update(name.as_bytes());
        hasher.update([0]);
        hasher.update(params.to_string().as_bytes());
        for input in inputs {
            let digest = sha256_file(input).map_err(io_error(input))?;
            hasher.update([0]);
            hasher.update(digest.as_bytes());
        }
        Ok(hex::encode(hasher.finalize()))
    }

    fn reusable(&self, name: &str, key: &str) -> Option<StageRecord> {
        let record = self.previous.get(name)?;
        if record.key != key || record.status != StageStatus::Complete {
            return None;
        }
        let intact = record
            .outputs
            .iter()
            .all(|(file, hash)| sha256_file(&self.path(file)).is_ok_and(|h| &h == hash));
        intact.then(|| record.clone())
    }

    fn hash_outputs(&self, files: &[&str]) -> BTreeMap<String, String> {
        files
            .iter()
            .filter_map(|f| sha256_file(&self.path(f)).ok().map(|h| ((*f).to_owned(), h)))
            .collect()
    }

    fn write_manifest(&self, report: Option<StageReport>) -> Result<RunManifest, PipelineError> {
        let manifest = RunManifest {
            seed: self.seed,
            stages: self.records.clone(),
            report,
        };
        let path = self.path(RUN_MANIFEST);
        jsonl::write_json(&path, &manifest).map_err(|e| PipelineError::Stage {
            stage: "manifest".into(),
            source: Box::new(e.into()),
        })?;
        Ok(manifest)
    }

    fn stage(
        &mut self,
        name: &str,
        params: serde_json::Value,
        inputs: &[PathBuf],
        expected: &[&'static str],
        body: impl FnOnce(&Self) -> Result<StageOutput, Error>,
    ) -> Result<(), PipelineError> {
        let key = self.stage_key(name, &params, inputs)?;
        if let Some(record) = self.reusable(name, &key) {
            self.records.push(record);
            self.skipped.push(name.to_owned());
            return Ok(());
        }
        match body(self) {
            Ok(output) => {
                debug_assert_eq!(output.files, expected);
                let outputs = self.hash_outputs(&output.files);
                self.records.push(StageRecord {
                    name: name.to_owned(),
                    key,
                    status: StageStatus::Complete,
                    outputs,
                    counts: output.counts,
                    error: None,
                });
                self.executed.push(name.to_owned());
                Ok(())
            }
            Err(source) => {
                let outputs = self.hash_outputs(expected);
                self.records.push(StageRecord {
                    name: name.to_owned(),
                    key,
                    status: StageStatus::Invalid,
                    outputs,
                    counts: BTreeMap::new(),
                    error: Some(source.to_string()),
                });
                self.write_manifest(None)?;
                Err(PipelineError::Stage {
                    stage: name.to_owned(),
                    source: Box::new(source),
                })
            }
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| {
        PipelineError::Io {
            path: path.to_owned(),
            source,
        }
        .into()
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    fs::write(path, text).map_err(io_err(path))
}

fn ordered_tasks(config: &PipelineConfig) -> Vec<Task> {
    Task::ALL.iter().copied().filter(|t| config.tasks.contains(t)).collect()
}

/// Task whose train samples fit the model of the given direction.
fn training_task(tasks: &[Task], backward: bool) -> Option<Task> {
    if backward {
        tasks.contains(&Task::Backward).then_some(Task::Backward)
    } else {
        [Task::Forward1, Task::Forward2, Task::PotentialK]
            .into_iter()
            .find(|t| tasks.contains(t))
    }
}

fn predictions_file(task: Task) -> &'static str {
    match task {
        Task::Forward1 => "predictions/forward_1.jsonl",
        Task::Forward2 => "predictions/forward_2.jsonl",
        Task::Backward => "predictions/backward.jsonl",
        Task::PotentialK => "predictions/potential_k.jsonl",
    }
}

/// The prediction a baseline makes for one sample of `task`: the top-1
/// tuple, a two-step rollout, the preceding element, or `k` ranked
/// candidates.
pub fn predict_entry(
    model: &Model,
    task: Task,
    sample: &PredictionSample,
    k: usize,
) -> Result<PredictionEntry, baselines::BaselineError> {
    let id = &sample.sample_id;
    let h = &sample.history;
    Ok(match task {
        Task::Forward1 => PredictionEntry::output(id, dataset::render_output(&model.predict_topk(h, 1)?)),
        Task::Forward2 => PredictionEntry::output(id, dataset::render_output(&model.rollout_nstep(h, 2)?)),
        Task::Backward => PredictionEntry::output(id, dataset::render_output(&[model.predict_backward(h)?])),
        Task::PotentialK => PredictionEntry::candidates(
            id,
            model
                .predict_topk(h, k)?
                .into_iter()
                .map(|s| dataset::render_output(&[s]))
                .collect(),
        ),
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StratumCount {
    pub formula: String,
    pub bin: usize,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskCounts {
    pub train: usize,
    pub test: usize,
}

/// Contents of the dataset `manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub tau_min: u64,
    pub tau_max: u64,
    pub bin_edges: Vec<u64>,
    pub cap: usize,
    pub history_min: usize,
    pub history_max: usize,
    pub test_fraction: f64,
    pub stage_counts: StageCounts,
    pub strata_before: Vec<StratumCount>,
    pub strata_after: Vec<StratumCount>,
    pub tasks: BTreeMap<Task, TaskCounts>,
    pub records: usize,
    pub mixed_records: usize,
    pub template_hashes: BTreeMap<String, String>,
}

fn strata_list(events: &[MolecularEvent], bins: &BinEdges) -> Result<Vec<StratumCount>, Error> {
    Ok(dataset::stratum_counts(events, bins)?
        .into_iter()
        .map(|(s, count)| StratumCount {
            formula: s.formula.to_string(),
            bin: s.bin,
            count,
        })
        .collect())
}

/// Runs every stage, reusing up-to-date outputs of an earlier run in the
/// same `out_dir`.
pub fn run_pipeline(config: &PipelineConfig) -> Result<RunSummary, PipelineError> {
    config.validate()?;
    let band = config.band()?;
    let bins = config.bins()?;
    let history = config.history()?;
    let hyperparams = config.hyperparams()?;
    let threshold = BondThreshold::new(config.bo_min).map_err(|e| PipelineError::Invalid(e.to_string()))?;
    let tasks = ordered_tasks(config);
    let out = config.out_dir.clone();
    for dir in [out.clone(), out.join("models"), out.join("predictions"), out.join("eval")] {
        fs::create_dir_all(&dir).map_err(io_error(&dir))?;
    }
    let previous = jsonl::read_json::<RunManifest>(&out.join(RUN_MANIFEST))
        .map(|m| m.stages.into_iter().map(|s| (s.name.clone(), s)).collect())
        .unwrap_or_default();
    let seed = config.root_seed();
    let mut r = Runner {
        config,
        out,
        seed,
        previous,
        records: Vec::new(),
        executed: Vec::new(),
        skipped: Vec::new(),
    };

    let frames_path = match (&config.frames, &config.network) {
        (Some(frames), _) => frames.clone(),
        (None, Some(network_path)) => {
            r.stage(
                "simulate",
                json!({"trajectories": config.trajectories, "events_per": config.events_per, "seed": seed}),
                std::slice::from_ref(network_path),
                &["frames.jsonl", "generated.jsonl"],
                |r| {
                    let network = ReactionNetwork::from_path(network_path)?;
                    let maps = network.atom_maps()?;
                    let trajectories =
                        kmc::generate_many(&network, r.config.trajectories, r.config.events_per, seed)?;
                    let frames_out = r.path("frames.jsonl");
                    let mut writer = BufWriter::new(File::create(&frames_out).map_err(io_err(&frames_out))?);
                    let mut frames = 0;
                    for t in &trajectories {
                        let expanded = kmc::expand_to_frames(t, &network, &maps)?;
                        frames += expanded.len();
                        trajectory_io::write_frames(&mut writer, &expanded).map_err(io_err(&frames_out))?;
                    }
                    writer.flush().map_err(io_err(&frames_out))?;
                    let events: Vec<&MolecularEvent> = trajectories.iter().flat_map(|t| &t.events).collect();
                    jsonl::write(&r.path("generated.jsonl"), events.iter().copied())?;
                    Ok(StageOutput::new(&["frames.jsonl", "generated.jsonl"])
                        .count("trajectories", trajectories.len())
                        .count("events", events.len())
                        .count("frames", frames))
                },
            )?;
            r.path("frames.jsonl")
        }
        (None, None) => unreachable!("validated"),
    };

    r.stage("ingest", json!({}), std::slice::from_ref(&frames_path), &["trajectories.json"], |r| {
        let manifests = trajectory_io::ingest(trajectory_io::parse_frames(&frames_path, threshold)?)?;
        jsonl::write_json(&r.path("trajectories.json"), &manifests)?;
        let frames: usize = manifests.iter().map(|m: &TrajectoryManifest| m.frame_count).sum();
        Ok(StageOutput::new(&["trajectories.json"])
            .count("trajectories", manifests.len())
            .count("frames", frames))
    })?;

    r.stage(
        "extract",
        json!({"bo_min": config.bo_min}),
        std::slice::from_ref(&frames_path),
        &["events.jsonl"],
        |r| {
            let events = event_stream::extract_events(trajectory_io::parse_frames(&frames_path, threshold)?)?;
            jsonl::write(&r.path("events.jsonl"), &events)?;
            Ok(StageOutput::new(&["events.jsonl"]).count("events", events.len()))
        },
    )?;

    r.stage(
        "filter",
        json!({"tau_min": config.tau_min, "tau_max": config.tau_max}),
        &[r.path("events.jsonl")],
        &["filtered.jsonl", "stats.json"],
        |r| {
            let events: Vec<MolecularEvent> = jsonl::read(&r.path("events.jsonl"))?;
            let filtered = event_stream::bandpass_filter(&events, band);
            let counts = StageCounts::from_events(&events, band);
            jsonl::write(&r.path("filtered.jsonl"), &filtered)?;
            jsonl::write_json(&r.path("stats.json"), &event_stream::pipeline_stats(counts, &filtered))?;
            Ok(StageOutput::new(&["filtered.jsonl", "stats.json"])
                .count("raw", counts.raw as usize)
                .count("extracted", counts.extracted as usize)
                .count("filtered", counts.filtered as usize))
        },
    )?;

    r.stage(
        "balance",
        json!({"bin_edges": config.bin_edges, "cap": config.cap, "seed": seed}),
        &[r.path("filtered.jsonl")],
        &["balanced.jsonl"],
        |r| {
            let events: Vec<MolecularEvent> = jsonl::read(&r.path("filtered.jsonl"))?;
            let balanced = dataset::balance(&events, &bins, r.config.cap, seed)?;
            jsonl::write(&r.path("balanced.jsonl"), &balanced)?;
            Ok(StageOutput::new(&["balanced.jsonl"]).count("balanced", balanced.len()))
        },
    )?;

    r.stage(
        "windows",
        json!({"tasks": tasks, "history": [config.history_min, config.history_max], "seed": seed}),
        &[r.path("balanced.jsonl")],
        &["windows.jsonl"],
        |r| {
            let events: Vec<MolecularEvent> = jsonl::read(&r.path("balanced.jsonl"))?;
            let sequences = event_stream::group_sequences(&events);
            let mut samples = Vec::new();
            let mut output = StageOutput::new(&["windows.jsonl"]);
            for &task in &tasks {
                let outcome = dataset::build_windows(&sequences, task, history, seed);
                output = output
                    .count(format!("{task}"), outcome.windows.len())
                    .count(format!("{task}_sequences_skipped"), outcome.skipped.sequences_skipped);
                samples.extend(outcome.windows);
            }
            jsonl::write(&r.path("windows.jsonl"), &samples)?;
            Ok(output.count("samples", samples.len()))
        },
    )?;

    r.stage(
        "split",
        json!({"test_fraction": config.test_fraction, "seed": seed}),
        &[r.path("windows.jsonl")],
        &["split.jsonl", "split_report.json"],
        |r| {
            let samples: Vec<PredictionSample> = jsonl::read(&r.path("windows.jsonl"))?;
            let outcome = dataset::split_disjoint(samples, r.config.test_fraction, seed)?;
            jsonl::write(&r.path("split.jsonl"), outcome.train.iter().chain(&outcome.test))?;
            jsonl::write_json(&r.path("split_report.json"), &outcome.report)?;
            Ok(StageOutput::new(&["split.jsonl", "split_report.json"])
                .count("train", outcome.train.len())
                .count("test", outcome.test.len())
                .count("dropped_duplicates", outcome.report.dropped_duplicates))
        },
    )?;

    r.stage("format", json!({}), &[r.path("split.jsonl")], &["dataset.jsonl"], |r| {
        let samples: Vec<PredictionSample> = jsonl::read(&r.path("split.jsonl"))?;
        let records = dataset::format_instructions(&samples, &TemplateSet::builtin())?;
        jsonl::write(&r.path("dataset.jsonl"), &records)?;
        Ok(StageOutput::new(&["dataset.jsonl"]).count("records", records.len()))
    })?;

    let mut mix_inputs = vec![r.path("dataset.jsonl")];
    mix_inputs.extend(config.qa.clone());
    r.stage(
        "mix",
        json!({"qa_ratio": config.qa_ratio, "seed": seed}),
        &mix_inputs,
        &["mixed.jsonl"],
        |r| {
            let records: Vec<DatasetRecord> = jsonl::read(&r.path("dataset.jsonl"))?;
            let train: Vec<DatasetRecord> = records.into_iter().filter(|rec| rec.split == Split::Train).collect();
            let qa: Vec<InstructionRecord> = match &r.config.qa {
                Some(path) => jsonl::read(path)?,
                None => Vec::new(),
            };
            let forecast = train.len();
            let mixed = dataset::interleave_qa(train, qa, r.config.qa_ratio, seed)?;
            jsonl::write(&r.path("mixed.jsonl"), &mixed)?;
            Ok(StageOutput::new(&["mixed.jsonl"])
                .count("forecast", forecast)
                .count("qa", mixed.len() - forecast))
        },
    )?;

    let forward_task = training_task(&tasks, false);
    let backward_task = training_task(&tasks, true);
    let mut model_files: Vec<&'static str> = Vec::new();
    if forward_task.is_some() {
        model_files.push("models/forward.json");
    }
    if backward_task.is_some() {
        model_files.push("models/backward.json");
    }
    r.stage(
        "fit",
        json!({"baseline": config.baseline, "bin_edges": config.bin_edges, "seed": seed}),
        &[r.path("split.jsonl")],
        &model_files.clone(),
        |r| {
            let samples: Vec<PredictionSample> = jsonl::read(&r.path("split.jsonl"))?;
            let mut output = StageOutput::new(&model_files);
            for (task, file) in [(forward_task, "models/forward.json"), (backward_task, "models/backward.json")] {
                let Some(task) = task else { continue };
                let train: Vec<PredictionSample> = samples
                    .iter()
                    .filter(|s| s.task == task && s.split == Some(Split::Train))
                    .cloned()
                    .collect();
                let model = baselines::fit(r.config.baseline.kind, &train, &hyperparams, seed)?;
                model.save(&r.path(file))?;
                output = output.count(format!("{file}_train_samples"), train.len());
            }
            Ok(output)
        },
    )?;

    let prediction_files: Vec<&'static str> = tasks.iter().map(|&t| predictions_file(t)).collect();
    let mut predict_inputs = vec![r.path("split.jsonl")];
    predict_inputs.extend(model_files.iter().map(|f| r.path(f)));
    r.stage(
        "predict",
        json!({"k": config.k}),
        &predict_inputs,
        &prediction_files.clone(),
        |r| {
            let samples: Vec<PredictionSample> = jsonl::read(&r.path("split.jsonl"))?;
            let forward = forward_task.map(|_| Model::load(&r.path("models/forward.json"))).transpose()?;
            let backward = backward_task.map(|_| Model::load(&r.path("models/backward.json"))).transpose()?;
            let mut output = StageOutput::new(&prediction_files);
            for &task in &tasks {
                let model = if task.is_backward() { &backward } else { &forward };
                let model = model.as_ref().expect("a model exists for every configured direction");
                let test: Vec<&PredictionSample> = samples
                    .iter()
                    .filter(|s| s.task == task && s.split == Some(Split::Test))
                    .collect();
                let entries = test
                    .iter()
                    .map(|s| predict_entry(model, task, s, r.config.k))
                    .collect::<Result<Vec<_>, _>>()?;
                jsonl::write(&r.path(predictions_file(task)), &entries)?;
                output = output.count(format!("{task}"), entries.len());
            }
            Ok(output)
        },
    )?;

    const EVAL_FILES: [&str; 5] = [
        "eval/report.json",
        "eval/confusion.csv",
        "eval/nstep_decay.csv",
        "eval/error_taxonomy.csv",
        "eval/summary.txt",
    ];
    let mut eval_inputs = vec![r.path("dataset.jsonl")];
    eval_inputs.extend(prediction_files.iter().map(|f| r.path(f)));
    r.stage(
        "eval",
        json!({"k": config.k, "dur_tol": config.dur_tol}),
        &eval_inputs,
        &EVAL_FILES,
        |r| {
            let records: Vec<DatasetRecord> = jsonl::read(&r.path("dataset.jsonl"))?;
            let score = ScoreConfig {
                k: r.config.k,
                duration_tolerance_ps: r.config.dur_tol,
                ..ScoreConfig::default()
            };
            let mut report = EvalReport::default();
            for &task in &tasks {
                let entries: Vec<PredictionEntry> = jsonl::read(&r.path(predictions_file(task)))?;
                let truth = eval::truth_from_dataset(&records, task);
                report.tasks.push(eval::score_task(&entries, &truth, Some(task), &score)?);
            }
            eval::emit_report(&report, &r.path("eval"))?;
            let mut output = StageOutput::new(&EVAL_FILES);
            for t in &report.tasks {
                output = output.count(format!("{}_samples", t.task.map_or("all", Task::as_str)), t.samples as usize);
            }
            Ok(output)
        },
    )?;

    let manifest_inputs = [
        r.path("stats.json"),
        r.path("filtered.jsonl"),
        r.path("balanced.jsonl"),
        r.path("split.jsonl"),
        r.path("dataset.jsonl"),
        r.path("mixed.jsonl"),
    ];
    r.stage(
        "manifest",
        json!({"seed": seed, "bin_edges": config.bin_edges, "cap": config.cap}),
        &manifest_inputs,
        &["manifest.json", "stage_report.json", "stage_report.txt"],
        |r| {
            let stats: StageReport = jsonl::read_json(&r.path("stats.json"))?;
            let filtered: Vec<MolecularEvent> = jsonl::read(&r.path("filtered.jsonl"))?;
            let balanced: Vec<MolecularEvent> = jsonl::read(&r.path("balanced.jsonl"))?;
            let samples: Vec<PredictionSample> = jsonl::read(&r.path("split.jsonl"))?;
            let records: Vec<DatasetRecord> = jsonl::read(&r.path("dataset.jsonl"))?;
            let mixed: Vec<serde_json::Value> = jsonl::read(&r.path("mixed.jsonl"))?;
            let stage_count = |name: &str| stats.stages.iter().find(|l| l.stage == name).map_or(0, |l| l.count);
            let counts = StageCounts {
                raw: stage_count("Raw MD"),
                extracted: stage_count("Extracted"),
                filtered: stage_count("Filtered"),
                balanced: Some(balanced.len() as u64),
            };
            let mut per_task: BTreeMap<Task, TaskCounts> = BTreeMap::new();
            for s in &samples {
                let c = per_task.entry(s.task).or_insert(TaskCounts { train: 0, test: 0 });
                match s.split {
                    Some(Split::Train) => c.train += 1,
                    Some(Split::Test) => c.test += 1,
                    None => {}
                }
            }
            let manifest = DatasetManifest {
                seed,
                tau_min: r.config.tau_min,
                tau_max: r.config.tau_max,
                bin_edges: r.config.bin_edges.clone(),
                cap: r.config.cap,
                history_min: r.config.history_min,
                history_max: r.config.history_max,
                test_fraction: r.config.test_fraction,
                stage_counts: counts,
                strata_before: strata_list(&filtered, &bins)?,
                strata_after: strata_list(&balanced, &bins)?,
                tasks: per_task,
                records: records.len(),
                mixed_records: mixed.len(),
                template_hashes: TemplateSet::builtin().hashes(),
            };
            jsonl::write_json(&r.path("manifest.json"), &manifest)?;
            let report = event_stream::pipeline_stats(counts, &filtered);
            jsonl::write_json(&r.path("stage_report.json"), &report)?;
            write_text(&r.path("stage_report.txt"), &report.render())?;
            Ok(StageOutput::new(&["manifest.json", "stage_report.json", "stage_report.txt"])
                .count("records", records.len())
                .count("mixed_records", mixed.len()))
        },
    )?;

    let report: Option<StageReport> = jsonl::read_json(&r.path("stage_report.json")).ok();
    let manifest = r.write_manifest(report)?;
    Ok(RunSummary {
        manifest,
        executed: r.executed,
        skipped: r.skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kmc::DurationPmf;

    fn network() -> ReactionNetwork {
        let species = ["MoO", "MoOS2", "MoS", "MoS2"].map(|s| s.parse().unwrap()).to_vec();
        let p = vec![
            vec![0.0, 0.6, 0.2, 0.2],
            vec![0.1, 0.0, 0.7, 0.2],
            vec![0.2, 0.1, 0.0, 0.7],
            vec![0.5, 0.3, 0.2, 0.0],
        ];
        let d = vec![
            DurationPmf::uniform(10, 40),
            DurationPmf::uniform(5, 60),
            DurationPmf::uniform(20, 80),
            DurationPmf::uniform(10, 30),
        ];
        ReactionNetwork::first_order("net", species, p, d, 500).unwrap()
    }

    fn setup(dir: &Path) -> PipelineConfig {
        jsonl::write_json(&dir.join("network.json"), &network()).unwrap();
        
        PipelineConfig {
            out_dir: dir.join("out"),
            network: Some(dir.join("network.json")),
            trajectories: 5,
            events_per: 60,
            cap: 40,
            seed: Some(11),
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn config_round_trips_through_toml() {
        let config = PipelineConfig {
            network: Some("net.json".into()),
            seed: Some(5),
            qa: Some("qa.jsonl".into()),
            qa_ratio: 0.5,
            ..PipelineConfig::default()
        };
        let back: PipelineConfig = toml::from_str(&config.to_toml()).unwrap();
        assert_eq!(back, config);
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "network = \"net.json\"\nout_dir = \"o\"\n[baseline]\nkind = \"semimarkov\"\n").unwrap();
        let config = PipelineConfig::from_path(&path).unwrap();
        assert_eq!(config.network.unwrap(), dir.path().join("net.json"));
        assert_eq!(config.out_dir, dir.path().join("o"));
        assert_eq!(config.baseline.kind, ModelKind::Semimarkov);
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let base = PipelineConfig {
            network: Some("n.json".into()),
            ..PipelineConfig::default()
        };
        let cases = [
            PipelineConfig { tau_min: 600, ..base.clone() },
            PipelineConfig { frames: Some("f".into()), ..base.clone() },
            PipelineConfig { network: None, ..base.clone() },
            PipelineConfig { cap: 0, ..base.clone() },
            PipelineConfig { test_fraction: 1.0, ..base.clone() },
            PipelineConfig { history_min: 6, ..base.clone() },
            PipelineConfig { qa_ratio: 1.0, ..base.clone() },
            PipelineConfig { bin_edges: vec![20, 50, 500], ..base.clone() },
            PipelineConfig { tasks: vec![], ..base.clone() },
            PipelineConfig { k: 0, ..base.clone() },
        ];
        for c in cases {
            assert!(c.validate().unwrap_err().is_validation(), "{c:?}");
        }
        assert!(base.validate().is_ok());
        let err = run_pipeline(&PipelineConfig { tau_min: 600, ..base }).unwrap_err();
        assert!(err.is_validation());
    }

    #[test]
    fn full_run_counts_match_recount() {
        let dir = tempfile::tempdir().unwrap();
        let config = setup(dir.path());
        let summary = run_pipeline(&config).unwrap();
        assert!(summary.skipped.is_empty());
        let m = &summary.manifest;
        assert!(m.stages.iter().all(|s| s.status == StageStatus::Complete));
        let out = &config.out_dir;

        let generated: Vec<MolecularEvent> = jsonl::read(&out.join("generated.jsonl")).unwrap();
        let events: Vec<MolecularEvent> = jsonl::read(&out.join("events.jsonl")).unwrap();
        let hub: Vec<MolecularEvent> = events.iter().filter(|e| e.lineage_id == 0).cloned().collect();
        assert_eq!(hub, generated);
        assert_eq!(m.stage("extract").unwrap().counts["events"], events.len() as u64);

        let filtered: Vec<MolecularEvent> = jsonl::read(&out.join("filtered.jsonl")).unwrap();
        let recount = events.iter().filter(|e| (10..=500).contains(&e.duration_ps)).count();
        assert_eq!(filtered.len(), recount);
        assert_eq!(m.stage("filter").unwrap().counts["filtered"], recount as u64);

        let balanced: Vec<MolecularEvent> = jsonl::read(&out.join("balanced.jsonl")).unwrap();
        assert_eq!(m.stage("balance").unwrap().counts["balanced"], balanced.len() as u64);
        let strata = dataset::stratum_counts(&balanced, &BinEdges::default_strata()).unwrap();
        assert!(strata.values().all(|&c| c <= 40));

        let samples: Vec<PredictionSample> = jsonl::read(&out.join("split.jsonl")).unwrap();
        let split = m.stage("split").unwrap();
        let test = samples.iter().filter(|s| s.split == Some(Split::Test)).count() as u64;
        assert_eq!(split.counts["test"], test);
        assert_eq!(split.counts["train"], samples.len() as u64 - test);

        let records: Vec<DatasetRecord> = jsonl::read(&out.join("dataset.jsonl")).unwrap();
        assert_eq!(records.len(), samples.len());
        let ds: DatasetManifest = jsonl::read_json(&out.join("manifest.json")).unwrap();
        assert_eq!(ds.records, records.len());
        assert_eq!(ds.stage_counts.balanced, Some(balanced.len() as u64));
        assert_eq!(ds.template_hashes, TemplateSet::builtin().hashes());
        let report: EvalReport = jsonl::read_json(&out.join("eval/report.json")).unwrap();
        assert_eq!(report.tasks.len(), 4);
        for t in &report.tasks {
            let task = t.task.unwrap();
            assert_eq!(t.samples as usize, ds.tasks[&task].test);
            assert_eq!(t.missing_rate, 0.0);
        }
        assert_eq!(m.report.as_ref().unwrap().stages.len(), 4);
    }

    #[test]
    fn rerun_skips_everything_and_repairs_damage() {
        let dir = tempfile::tempdir().unwrap();
        let config = setup(dir.path());
        let first = run_pipeline(&config).unwrap();
        let manifest_bytes = fs::read(config.out_dir.join(RUN_MANIFEST)).unwrap();
        let second = run_pipeline(&config).unwrap();
        assert!(second.executed.is_empty(), "{:?}", second.executed);
        assert_eq!(second.manifest, first.manifest);
        assert_eq!(fs::read(config.out_dir.join(RUN_MANIFEST)).unwrap(), manifest_bytes);

        fs::write(config.out_dir.join("balanced.jsonl"), "").unwrap();
        let third = run_pipeline(&config).unwrap();
        assert_eq!(third.executed, vec!["balance".to_string()]);
        assert_eq!(fs::read(config.out_dir.join(RUN_MANIFEST)).unwrap(), manifest_bytes);

        let changed = PipelineConfig { cap: 10, ..config };
        let fourth = run_pipeline(&changed).unwrap();
        assert!(fourth.executed.contains(&"balance".to_string()));
        assert!(fourth.skipped.contains(&"extract".to_string()));
    }

    #[test]
    fn stage_failure_is_recorded() {
        let dir = tempfile::tempdir().unwrap();
        let frames = dir.path().join("frames.jsonl");
        fs::write(&frames, "not json\n").unwrap();
        let config = PipelineConfig {
            out_dir: dir.path().join("out"),
            frames: Some(frames),
            ..PipelineConfig::default()
        };
        let err = run_pipeline(&config).unwrap_err();
        assert!(matches!(&err, PipelineError::Stage { stage, .. } if stage == "ingest"));
        assert!(!err.is_validation());
        let m: RunManifest = jsonl::read_json(&config.out_dir.join(RUN_MANIFEST)).unwrap();
        assert_eq!(m.stages.last().unwrap().status, StageStatus::Invalid);
        assert!(m.stages.last().unwrap().error.as_deref().unwrap().contains("line 1"));
    }
}
