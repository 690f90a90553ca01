//! Per-frame partitions to duration-annotated molecular events.
//!
//! Components are linked across frames into lineages by greedy maximum
//! atom overlap. Each lineage's frame-wise formula stream is run-length
//! encoded: a maximal run of identical formulas becomes one event whose
//! duration is run length times the frame interval.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::species_graph::{connected_components, CanonicalFormula, Component};
use crate::trajectory_io::{Frame, TrajectoryError};

#[derive(Debug, thiserror::Error)]
pub enum EventError {
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error("frame interval must be positive")]
    ZeroInterval,
    #[error("lineage samples are not spaced by {interval_ps} ps: t={previous_ps} then t={time_ps}")]
    IrregularSamples {
        interval_ps: u64,
        previous_ps: u64,
        time_ps: u64,
    },
    #[error("filter band needs 0 < tau_min <= tau_max, got ({tau_min_ps}, {tau_max_ps})")]
    InvalidBand { tau_min_ps: u64, tau_max_ps: u64 },
}

/// One maximal run of a lineage in a single species.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MolecularEvent {
    pub trajectory_id: String,
    pub lineage_id: u64,
    pub formula: CanonicalFormula,
    pub start_ps: u64,
    pub duration_ps: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventSequence {
    pub trajectory_id: String,
    pub lineage_id: u64,
    pub events: Vec<MolecularEvent>,
}

/// Groups events by `(trajectory_id, lineage_id)` in first-seen order and
/// sorts each group by start time.
pub fn group_sequences(events: &[MolecularEvent]) -> Vec<EventSequence> {
    let mut index: HashMap<(&str, u64), usize> = HashMap::new();
    let mut out: Vec<EventSequence> = Vec::new();
    for e in events {
        let key = (e.trajectory_id.as_str(), e.lineage_id);
        let slot = *index.entry(key).or_insert_with(|| {
            out.push(EventSequence {
                trajectory_id: e.trajectory_id.clone(),
                lineage_id: e.lineage_id,
                events: Vec::new(),
            });
            out.len() - 1
        });
        out[slot].events.push(e.clone());
    }
    for seq in &mut out {
        seq.events.sort_by_key(|e| e.start_ps);
    }
    out
}

#[derive(Clone, Debug)]
struct Lineage {
    id: u64,
    atoms: Vec<usize>,
}

/// Outcome of matching one frame's components to the live lineages.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LineageStep {
    /// `(lineage_id, component)` in component order.
    pub assigned: Vec<(u64, Component)>,
    /// Lineages that found no component this frame.
    pub terminated: Vec<u64>,
    /// Lineages opened this frame.
    pub started: Vec<u64>,
}

/// Greedy maximum-overlap lineage matcher for a single trajectory.
///
/// Candidate `(lineage, component)` pairs with nonzero atom overlap are
/// taken in order of decreasing overlap, then smaller component minimum
/// atom index, then smaller lineage id. Unmatched components open new
/// lineages (ids ascending in component order); unmatched lineages end.
#[derive(Debug, Default)]
pub struct LineageTracker {
    live: Vec<Lineage>,
    next_id: u64,
    owner: Vec<usize>,
}

impl LineageTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&mut self, components: Vec<Component>) -> LineageStep {
        const NONE: usize = usize::MAX;
        let atom_count = components
            .iter()
            .flat_map(|c| c.atoms.iter())
            .map(|&a| a + 1)
            .max()
            .unwrap_or(0)
            .max(self.live.iter().flat_map(|l| l.atoms.iter()).map(|&a| a + 1).max().unwrap_or(0));
        if self.owner.len() < atom_count {
            self.owner.resize(atom_count, NONE);
        }
        for (slot, lineage) in self.live.iter().enumerate() {
            for &a in &lineage.atoms {
                self.owner[a] = slot;
            }
        }

        // (overlap, component min atom, lineage id, component idx, lineage slot)
        let mut pairs: Vec<(usize, usize, u64, usize, usize)> = Vec::new();
        let mut slots = Vec::new();
        for (ci, comp) in components.iter().enumerate() {
            slots.clear();
            slots.extend(comp.atoms.iter().map(|&a| self.owner[a]).filter(|&s| s != NONE));
            slots.sort_unstable();
            let mut k = 0;
            while k < slots.len() {
                let slot = slots[k];
                let run = slots[k..].iter().take_while(|&&s| s == slot).count();
                pairs.push((run, comp.min_atom(), self.live[slot].id, ci, slot));
                k += run;
            }
        }
        for lineage in &self.live {
            for &a in &lineage.atoms {
                self.owner[a] = NONE;
            }
        }
        pairs.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

        let mut comp_lineage: Vec<Option<u64>> = vec![None; components.len()];
        let mut slot_taken = vec![false; self.live.len()];
        for &(_, _, id, ci, slot) in &pairs {
            if comp_lineage[ci].is_none() && !slot_taken[slot] {
                comp_lineage[ci] = Some(id);
                slot_taken[slot] = true;
            }
        }

        let terminated = self
            .live
            .iter()
            .zip(&slot_taken)
            .filter(|(_, &taken)| !taken)
            .map(|(l, _)| l.id)
            .collect();

        let mut result = LineageStep {
            terminated,
            ..LineageStep::default()
        };
        let mut live = Vec::with_capacity(components.len());
        for (comp, matched) in components.into_iter().zip(comp_lineage) {
            let id = matched.unwrap_or_else(|| {
                let id = self.next_id;
                self.next_id += 1;
                result.started.push(id);
                id
            });
            live.push(Lineage {
                id,
                atoms: comp.atoms.clone(),
            });
            result.assigned.push((id, comp));
        }
        self.live = live;
        result
    }
}

/// Lineage assignment for every frame of one trajectory.
pub fn track_lineages(frames: &[Frame]) -> Vec<BTreeMap<u64, Component>> {
    let mut tracker = LineageTracker::new();
    frames
        .iter()
        .map(|frame| {
            tracker
                .step(connected_components(frame))
                .assigned
                .into_iter()
                .collect()
        })
        .collect()
}

/// Run-length encodes a lineage's `(time_ps, formula)` samples.
pub fn rle_encode(
    trajectory_id: &str,
    lineage_id: u64,
    samples: &[(u64, CanonicalFormula)],
    interval_ps: u64,
) -> Result<Vec<MolecularEvent>, EventError> {
    if interval_ps == 0 {
        return Err(EventError::ZeroInterval);
    }
    for w in samples.windows(2) {
        if w[1].0 != w[0].0 + interval_ps {
            return Err(EventError::IrregularSamples {
                interval_ps,
                previous_ps: w[0].0,
                time_ps: w[1].0,
            });
        }
    }
    let mut events: Vec<MolecularEvent> = Vec::new();
    for (time, formula) in samples {
        match events.last_mut() {
            Some(last) if &last.formula == formula => last.duration_ps += interval_ps,
            _ => events.push(MolecularEvent {
                trajectory_id: trajectory_id.to_owned(),
                lineage_id,
                formula: formula.clone(),
                start_ps: *time,
                duration_ps: interval_ps,
            }),
        }
    }
    Ok(events)
}

/// Expands events back into per-frame samples.
pub fn rle_decode(events: &[MolecularEvent], interval_ps: u64) -> Vec<(u64, CanonicalFormula)> {
    let mut out = Vec::new();
    for e in events {
        let frames = e.duration_ps / interval_ps;
        for k in 0..frames {
            out.push((e.start_ps + k * interval_ps, e.formula.clone()));
        }
    }
    out
}

#[derive(Debug)]
struct OpenRun {
    formula: CanonicalFormula,
    start_ps: u64,
    frames: u64,
}

#[derive(Debug)]
struct ClosedRun {
    lineage_id: u64,
    formula: CanonicalFormula,
    start_ps: u64,
    frames: u64,
}

#[derive(Debug)]
struct TrajectoryState {
    id: String,
    tracker: LineageTracker,
    atom_count: usize,
    first_ps: u64,
    last_ps: u64,
    frames: usize,
    interval_ps: Option<u64>,
    open: BTreeMap<u64, OpenRun>,
    closed: Vec<ClosedRun>,
}

impl TrajectoryState {
    fn close(&mut self, lineage_id: u64) {
        if let Some(run) = self.open.remove(&lineage_id) {
            self.closed.push(ClosedRun {
                lineage_id,
                formula: run.formula,
                start_ps: run.start_ps,
                frames: run.frames,
            });
        }
    }
}

/// Streaming frames-to-events extractor. Frames of several trajectories
/// may be interleaved; each trajectory must keep a constant atom count and
/// frame interval.
#[derive(Debug, Default)]
pub struct Extractor {
    index: HashMap<String, usize>,
    trajectories: Vec<TrajectoryState>,
}

impl Extractor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, frame: &Frame) -> Result<(), EventError> {
        let slot = match self.index.get(&frame.trajectory_id) {
            Some(&slot) => slot,
            None => {
                self.trajectories.push(TrajectoryState {
                    id: frame.trajectory_id.clone(),
                    tracker: LineageTracker::new(),
                    atom_count: frame.atom_count(),
                    first_ps: frame.time_ps,
                    last_ps: frame.time_ps,
                    frames: 0,
                    interval_ps: None,
                    open: BTreeMap::new(),
                    closed: Vec::new(),
                });
                self.index
                    .insert(frame.trajectory_id.clone(), self.trajectories.len() - 1);
                self.trajectories.len() - 1
            }
        };
        let state = &mut self.trajectories[slot];
        if state.frames > 0 {
            if frame.atom_count() != state.atom_count {
                return Err(TrajectoryError::VaryingAtomCount {
                    trajectory_id: state.id.clone(),
                    expected: state.atom_count,
                    found: frame.atom_count(),
                    time_ps: frame.time_ps,
                }
                .into());
            }
            if frame.time_ps <= state.last_ps {
                return Err(TrajectoryError::NonMonotoneTime {
                    trajectory_id: state.id.clone(),
                    previous_ps: state.last_ps,
                    time_ps: frame.time_ps,
                }
                .into());
            }
            let step = frame.time_ps - state.last_ps;
            match state.interval_ps {
                None => state.interval_ps = Some(step),
                Some(expected) if expected != step => {
                    return Err(TrajectoryError::IrregularInterval {
                        trajectory_id: state.id.clone(),
                        expected_ps: expected,
                        found_ps: step,
                        time_ps: frame.time_ps,
                    }
                    .into())
                }
                Some(_) => {}
            }
        }
        state.last_ps = frame.time_ps;
        state.frames += 1;

        let step = state.tracker.step(connected_components(frame));
        for id in step.terminated {
            state.close(id);
        }
        for (id, comp) in step.assigned {
            let continues = matches!(state.open.get(&id), Some(run) if run.formula == comp.formula);
            if continues {
                state.open.get_mut(&id).expect("open run").frames += 1;
            } else {
                state.close(id);
                state.open.insert(
                    id,
                    OpenRun {
                        formula: comp.formula,
                        start_ps: frame.time_ps,
                        frames: 1,
                    },
                );
            }
        }
        Ok(())
    }

    /// Closes all runs. Events are grouped by trajectory (first-seen
    /// order), then ordered by lineage id and start time.
    pub fn finish(self) -> Result<Vec<MolecularEvent>, EventError> {
        let mut events = Vec::new();
        for mut state in self.trajectories {
            let interval = state.interval_ps.ok_or_else(|| TrajectoryError::TooFewFrames {
                trajectory_id: state.id.clone(),
                count: state.frames,
            })?;
            debug_assert!(state.last_ps >= state.first_ps);
            let open: Vec<u64> = state.open.keys().copied().collect();
            for id in open {
                state.close(id);
            }
            state
                .closed
                .sort_by(|a, b| a.lineage_id.cmp(&b.lineage_id).then(a.start_ps.cmp(&b.start_ps)));
            events.extend(state.closed.into_iter().map(|run| MolecularEvent {
                trajectory_id: state.id.clone(),
                lineage_id: run.lineage_id,
                formula: run.formula,
                start_ps: run.start_ps,
                duration_ps: run.frames * interval,
            }));
        }
        Ok(events)
    }
}

/// Runs the extractor over a frame stream.
pub fn extract_events<I, E>(frames: I) -> Result<Vec<MolecularEvent>, EventError>
where
    I: IntoIterator<Item = Result<Frame, E>>,
    EventError: From<E>,
{
    let mut extractor = Extractor::new();
    for frame in frames {
        extractor.push(&frame?)?;
    }
    extractor.finish()
}

/// Inclusive duration band `[tau_min_ps, tau_max_ps]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterBand {
    tau_min_ps: u64,
    tau_max_ps: u64,
}

impl FilterBand {
    pub fn new(tau_min_ps: u64, tau_max_ps: u64) -> Result<Self, EventError> {
        if tau_min_ps == 0 || tau_min_ps > tau_max_ps {
            return Err(EventError::InvalidBand {
                tau_min_ps,
                tau_max_ps,
            });
        }
        Ok(Self {
            tau_min_ps,
            tau_max_ps,
        })
    }

    /// `(10, 500)` ps.
    pub fn standard() -> Self {
        Self {
            tau_min_ps: 10,
            tau_max_ps: 500,
        }
    }

    /// No upper cutoff.
    pub fn at_least(tau_min_ps: u64) -> Result<Self, EventError> {
        Self::new(tau_min_ps, u64::MAX)
    }

    pub fn tau_min_ps(&self) -> u64 {
        self.tau_min_ps
    }

    pub fn tau_max_ps(&self) -> u64 {
        self.tau_max_ps
    }

    pub fn contains(&self, duration_ps: u64) -> bool {
        (self.tau_min_ps..=self.tau_max_ps).contains(&duration_ps)
    }
}

/// Keeps events whose duration lies in the band. Survivors are not merged.
pub fn bandpass_filter(events: &[MolecularEvent], band: FilterBand) -> Vec<MolecularEvent> {
    events
        .iter()
        .filter(|e| band.contains(e.duration_ps))
        .cloned()
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    /// All extracted events.
    pub raw: u64,
    /// Events at or above the noise cutoff.
    pub extracted: u64,
    /// Events inside the band.
    pub filtered: u64,
    /// Samples after balancing, once known.
    pub balanced: Option<u64>,
}

impl StageCounts {
    pub fn from_events(events: &[MolecularEvent], band: FilterBand) -> Self {
        let raw = events.len() as u64;
        let extracted = events
            .iter()
            .filter(|e| e.duration_ps >= band.tau_min_ps())
            .count() as u64;
        let filtered = events.iter().filter(|e| band.contains(e.duration_ps)).count() as u64;
        Self {
            raw,
            extracted,
            filtered,
            balanced: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageLine {
    pub stage: String,
    pub count: u64,
    /// Share of the previous stage, in percent; `None` for the first stage
    /// or when the previous stage is empty.
    pub retained_pct: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DurationSummary {
    pub formula: String,
    pub count: usize,
    pub min: u64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stages: Vec<StageLine>,
    pub species: Vec<DurationSummary>,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[u64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] as f64 + (sorted[hi] as f64 - sorted[lo] as f64) * frac
}

/// Per-species duration box statistics, sorted by formula.
pub fn duration_summaries(events: &[MolecularEvent]) -> Vec<DurationSummary> {
    let mut by_species: BTreeMap<&CanonicalFormula, Vec<u64>> = BTreeMap::new();
    for e in events {
        by_species.entry(&e.formula).or_default().push(e.duration_ps);
    }
    by_species
        .into_iter()
        .map(|(formula, mut d)| {
            d.sort_unstable();
            DurationSummary {
                formula: formula.to_string(),
                count: d.len(),
                min: d[0],
                q1: quantile(&d, 0.25),
                median: quantile(&d, 0.5),
                q3: quantile(&d, 0.75),
                max: d[d.len() - 1],
            }
        })
        .collect()
}

/// Stage-by-stage counts plus duration summaries of `events`.
pub fn pipeline_stats(counts: StageCounts, events: &[MolecularEvent]) -> StageReport {
    let mut stages = vec![
        ("Raw MD", counts.raw),
        ("Extracted", counts.extracted),
        ("Filtered", counts.filtered),
    ];
    if let Some(balanced) = counts.balanced {
        stages.push(("Balanced", balanced));
    }
    let mut lines = Vec::with_capacity(stages.len());
    let mut previous: Option<u64> = None;
    for (stage, count) in stages {
        let retained_pct = match previous {
            Some(p) if p > 0 => Some(count as f64 / p as f64 * 100.0),
            _ => None,
        };
        lines.push(StageLine {
            stage: stage.to_owned(),
            count,
            retained_pct,
        });
        previous = Some(count);
    }
    StageReport {
        stages: lines,
        species: duration_summaries(events),
    }
}

fn thousands(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (k, ch) in digits.chars().enumerate() {
        if k > 0 && (digits.len() - k).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

impl StageReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        for line in &self.stages {
            let unit = if line.stage == "Balanced" {
                "samples"
            } else {
                "events"
            };
            let _ = write!(out, "{:<10} {:>12} {unit}", line.stage, thousands(line.count));
            if let Some(pct) = line.retained_pct {
                let _ = write!(out, "  ({pct:.2}% of previous)");
            }
            out.push('\n');
        }
        if !self.species.is_empty() {
            out.push_str("\nspecies        n      min       q1   median       q3      max\n");
            for s in &self.species {
                let _ = writeln!(
                    out,
                    "{:<10} {:>5} {:>8} {:>8.1} {:>8.1} {:>8.1} {:>8}",
                    s.formula, s.count, s.min, s.q1, s.median, s.q3, s.max
                );
            }
        }
        out
    }
}
