//! Frame streams: parsing, bond-order thresholding and per-trajectory
//! validation.
//!
//! A frames file holds one JSON record per line:
//!
//! ```text
//! {"trajectory_id": "t0", "time_ps": 0, "elements": ["Mo","S","S"], "bonds": [[0,1,1.2],[0,2,0.9]]}
//! ```
//!
//! The atom index is the position in `elements`. Records of different
//! trajectories may be interleaved; each trajectory must advance in time
//! with a constant frame interval.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::elements::is_valid_symbol;

#[derive(Debug, thiserror::Error)]
pub enum TrajectoryError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed frame record: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("trajectory {trajectory_id}: time {time_ps} ps does not advance past {previous_ps} ps")]
    NonMonotoneTime {
        trajectory_id: String,
        previous_ps: u64,
        time_ps: u64,
    },
    #[error("trajectory {trajectory_id}: frame interval changed from {expected_ps} ps to {found_ps} ps at t={time_ps} ps")]
    IrregularInterval {
        trajectory_id: String,
        expected_ps: u64,
        found_ps: u64,
        time_ps: u64,
    },
    #[error("trajectory {trajectory_id} frame t={time_ps} ps: bond references atom {index} but frame has {atom_count} atoms")]
    DanglingBond {
        trajectory_id: String,
        time_ps: u64,
        index: usize,
        atom_count: usize,
    },
    #[error("trajectory {trajectory_id} frame t={time_ps} ps: {reason}")]
    InvalidFrame {
        trajectory_id: String,
        time_ps: u64,
        reason: String,
    },
    #[error("trajectory {trajectory_id}: atom count changed from {expected} to {found} at t={time_ps} ps")]
    VaryingAtomCount {
        trajectory_id: String,
        expected: usize,
        found: usize,
        time_ps: u64,
    },
    #[error("trajectory {trajectory_id}: {count} frame(s); at least 2 are needed to define an interval")]
    TooFewFrames { trajectory_id: String, count: usize },
    #[error("expected frames of trajectory {expected}, found {found}")]
    MixedTrajectories { expected: String, found: String },
    #[error("no frames")]
    Empty,
    #[error("bond-order threshold must be a positive finite number, got {0}")]
    InvalidThreshold(f64),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Atom {
    pub index: usize,
    pub element: String,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bond {
    pub i: usize,
    pub j: usize,
    pub bond_order: f64,
}

impl Bond {
    pub fn new(i: usize, j: usize, bond_order: f64) -> Self {
        Self { i, j, bond_order }
    }

    fn key(&self) -> (usize, usize) {
        (self.i.min(self.j), self.i.max(self.j))
    }
}

/// One snapshot: atoms plus bond-order weighted edges.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub trajectory_id: String,
    pub time_ps: u64,
    pub atoms: Vec<Atom>,
    pub bonds: Vec<Bond>,
}

impl Frame {
    pub fn new<S: Into<String>>(
        trajectory_id: impl Into<String>,
        time_ps: u64,
        elements: impl IntoIterator<Item = S>,
        bonds: Vec<Bond>,
    ) -> Self {
        let atoms = elements
            .into_iter()
            .enumerate()
            .map(|(index, e)| Atom {
                index,
                element: e.into(),
            })
            .collect();
        Self {
            trajectory_id: trajectory_id.into(),
            time_ps,
            atoms,
            bonds,
        }
    }

    pub fn atom_count(&self) -> usize {
        self.atoms.len()
    }

    /// Checks element symbols, atom indices and the bond list.
    pub fn validate(&self) -> Result<(), TrajectoryError> {
        let invalid = |reason: String| TrajectoryError::InvalidFrame {
            trajectory_id: self.trajectory_id.clone(),
            time_ps: self.time_ps,
            reason,
        };
        for (pos, atom) in self.atoms.iter().enumerate() {
            if atom.index != pos {
                return Err(invalid(format!(
                    "atom at position {pos} carries index {}",
                    atom.index
                )));
            }
            if !is_valid_symbol(&atom.element) {
                return Err(invalid(format!(
                    "atom {pos} has invalid element symbol {:?}",
                    atom.element
                )));
            }
        }
        let n = self.atoms.len();
        let mut seen = HashSet::with_capacity(self.bonds.len());
        for bond in &self.bonds {
            for index in [bond.i, bond.j] {
                if index >= n {
                    return Err(TrajectoryError::DanglingBond {
                        trajectory_id: self.trajectory_id.clone(),
                        time_ps: self.time_ps,
                        index,
                        atom_count: n,
                    });
                }
            }
            if bond.i == bond.j {
                return Err(invalid(format!("self bond on atom {}", bond.i)));
            }
            if !bond.bond_order.is_finite() || bond.bond_order < 0.0 {
                return Err(invalid(format!(
                    "bond ({}, {}) has invalid bond order {}",
                    bond.i, bond.j, bond.bond_order
                )));
            }
            if !seen.insert(bond.key()) {
                return Err(invalid(format!(
                    "bond ({}, {}) listed more than once",
                    bond.i, bond.j
                )));
            }
        }
        Ok(())
    }
}

/// Minimum bond order for a pair to count as bonded (strict `>`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BondThreshold {
    bo_min: f64,
}

impl BondThreshold {
    pub fn new(bo_min: f64) -> Result<Self, TrajectoryError> {
        if bo_min.is_finite() && bo_min > 0.0 {
            Ok(Self { bo_min })
        } else {
            Err(TrajectoryError::InvalidThreshold(bo_min))
        }
    }

    pub fn bo_min(&self) -> f64 {
        self.bo_min
    }

    pub fn is_bonded(&self, bond: &Bond) -> bool {
        bond.bond_order > self.bo_min
    }

    pub fn apply(&self, frame: &mut Frame) {
        frame.bonds.retain(|b| self.is_bonded(b));
    }
}

#[derive(Serialize, Deserialize)]
struct FrameRecord {
    trajectory_id: String,
    time_ps: u64,
    elements: Vec<String>,
    bonds: Vec<(usize, usize, f64)>,
}

impl From<FrameRecord> for Frame {
    fn from(r: FrameRecord) -> Self {
        let bonds = r
            .bonds
            .into_iter()
            .map(|(i, j, bo)| Bond::new(i, j, bo))
            .collect();
        Frame::new(r.trajectory_id, r.time_ps, r.elements, bonds)
    }
}

impl From<&Frame> for FrameRecord {
    fn from(f: &Frame) -> Self {
        FrameRecord {
            trajectory_id: f.trajectory_id.clone(),
            time_ps: f.time_ps,
            elements: f.atoms.iter().map(|a| a.element.clone()).collect(),
            bonds: f.bonds.iter().map(|b| (b.i, b.j, b.bond_order)).collect(),
        }
    }
}

#[derive(Debug, Default)]
struct Clock {
    last_ps: u64,
    interval_ps: Option<u64>,
}

/// Tracks time monotonicity and the frame interval of each trajectory.
#[derive(Debug, Default)]
pub struct IntervalTracker {
    clocks: HashMap<String, Clock>,
    order: Vec<String>,
}

impl IntervalTracker {
    pub fn observe(&mut self, trajectory_id: &str, time_ps: u64) -> Result<(), TrajectoryError> {
        let Some(clock) = self.clocks.get_mut(trajectory_id) else {
            self.order.push(trajectory_id.to_owned());
            self.clocks.insert(
                trajectory_id.to_owned(),
                Clock {
                    last_ps: time_ps,
                    interval_ps: None,
                },
            );
            return Ok(());
        };
        if time_ps <= clock.last_ps {
            return Err(TrajectoryError::NonMonotoneTime {
                trajectory_id: trajectory_id.to_owned(),
                previous_ps: clock.last_ps,
                time_ps,
            });
        }
        let step = time_ps - clock.last_ps;
        match clock.interval_ps {
            None => clock.interval_ps = Some(step),
            Some(expected) if expected != step => {
                return Err(TrajectoryError::IrregularInterval {
                    trajectory_id: trajectory_id.to_owned(),
                    expected_ps: expected,
                    found_ps: step,
                    time_ps,
                })
            }
            Some(_) => {}
        }
        clock.last_ps = time_ps;
        Ok(())
    }

    pub fn interval(&self, trajectory_id: &str) -> Option<u64> {
        self.clocks.get(trajectory_id).and_then(|c| c.interval_ps)
    }

    /// Interval per trajectory in first-seen order; `None` for single-frame
    /// trajectories.
    pub fn intervals(&self) -> Vec<(String, Option<u64>)> {
        self.order
            .iter()
            .map(|id| (id.clone(), self.clocks[id].interval_ps))
            .collect()
    }
}

/// Streaming frame parser. Yields thresholded frames in file order.
pub struct FrameReader<R> {
    lines: std::io::Lines<R>,
    line_no: usize,
    threshold: BondThreshold,
    clocks: IntervalTracker,
    label: PathBuf,
    failed: bool,
}

impl<R: BufRead> FrameReader<R> {
    pub fn new(reader: R, threshold: BondThreshold) -> Self {
        Self {
            lines: reader.lines(),
            line_no: 0,
            threshold,
            clocks: IntervalTracker::default(),
            label: PathBuf::from("<stream>"),
            failed: false,
        }
    }

    pub fn intervals(&self) -> Vec<(String, Option<u64>)> {
        self.clocks.intervals()
    }

    fn next_record(&mut self) -> Option<Result<Frame, TrajectoryError>> {
        loop {
            let line = match self.lines.next()? {
                Ok(line) => line,
                Err(source) => {
                    return Some(Err(TrajectoryError::Io {
                        path: self.label.clone(),
                        source,
                    }))
                }
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            return Some(self.decode(&line));
        }
    }

    fn decode(&mut self, line: &str) -> Result<Frame, TrajectoryError> {
        let record: FrameRecord =
            serde_json::from_str(line).map_err(|e| TrajectoryError::Malformed {
                line: self.line_no,
                reason: e.to_string(),
            })?;
        let mut frame = Frame::from(record);
        frame.validate()?;
        self.clocks.observe(&frame.trajectory_id, frame.time_ps)?;
        self.threshold.apply(&mut frame);
        Ok(frame)
    }
}

impl<R: BufRead> Iterator for FrameReader<R> {
    type Item = Result<Frame, TrajectoryError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        let item = self.next_record()?;
        self.failed = item.is_err();
        Some(item)
    }
}

/// Opens a frames file for streaming. The stream stops after the first error.
pub fn parse_frames(
    path: &Path,
    threshold: BondThreshold,
) -> Result<FrameReader<BufReader<File>>, TrajectoryError> {
    let file = File::open(path).map_err(|source| TrajectoryError::Io {
        path: path.to_owned(),
        source,
    })?;
    let mut reader = FrameReader::new(BufReader::new(file), threshold);
    reader.label = path.to_owned();
    Ok(reader)
}

pub fn write_frame<W: Write>(out: &mut W, frame: &Frame) -> std::io::Result<()> {
    serde_json::to_writer(&mut *out, &FrameRecord::from(frame))?;
    out.write_all(b"\n")
}

pub fn write_frames<'a, W: Write>(
    out: &mut W,
    frames: impl IntoIterator<Item = &'a Frame>,
) -> std::io::Result<()> {
    for frame in frames {
        write_frame(out, frame)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryManifest {
    pub trajectory_id: String,
    pub frame_count: usize,
    pub interval_ps: u64,
    pub atom_count: usize,
}

/// Incremental form of [`validate_trajectory`].
#[derive(Debug)]
pub struct ManifestBuilder {
    trajectory_id: String,
    frame_count: usize,
    atom_count: usize,
    clock: IntervalTracker,
}

impl ManifestBuilder {
    pub fn start(first: &Frame) -> Result<Self, TrajectoryError> {
        first.validate()?;
        let mut clock = IntervalTracker::default();
        clock.observe(&first.trajectory_id, first.time_ps)?;
        Ok(Self {
            trajectory_id: first.trajectory_id.clone(),
            frame_count: 1,
            atom_count: first.atom_count(),
            clock,
        })
    }

    pub fn push(&mut self, frame: &Frame) -> Result<(), TrajectoryError> {
        if frame.trajectory_id != self.trajectory_id {
            return Err(TrajectoryError::MixedTrajectories {
                expected: self.trajectory_id.clone(),
                found: frame.trajectory_id.clone(),
            });
        }
        frame.validate()?;
        if frame.atom_count() != self.atom_count {
            return Err(TrajectoryError::VaryingAtomCount {
                trajectory_id: self.trajectory_id.clone(),
                expected: self.atom_count,
                found: frame.atom_count(),
                time_ps: frame.time_ps,
            });
        }
        self.clock.observe(&frame.trajectory_id, frame.time_ps)?;
        self.frame_count += 1;
        Ok(())
    }

    pub fn finish(self) -> Result<TrajectoryManifest, TrajectoryError> {
        let interval_ps =
            self.clock
                .interval(&self.trajectory_id)
                .ok_or(TrajectoryError::TooFewFrames {
                    trajectory_id: self.trajectory_id.clone(),
                    count: self.frame_count,
                })?;
        Ok(TrajectoryManifest {
            trajectory_id: self.trajectory_id,
            frame_count: self.frame_count,
            interval_ps,
            atom_count: self.atom_count,
        })
    }
}

/// Summarizes one trajectory, enforcing a constant interval and atom count.
pub fn validate_trajectory(frames: &[Frame]) -> Result<TrajectoryManifest, TrajectoryError> {
    let (first, rest) = frames.split_first().ok_or(TrajectoryError::Empty)?;
    let mut builder = ManifestBuilder::start(first)?;
    for frame in rest {
        builder.push(frame)?;
    }
    builder.finish()
}

/// Validates every trajectory of a (possibly interleaved) frame stream.
/// Manifests come back in first-seen order.
pub fn ingest<I>(frames: I) -> Result<Vec<TrajectoryManifest>, TrajectoryError>
where
    I: IntoIterator<Item = Result<Frame, TrajectoryError>>,
{
    let mut order = Vec::new();
    let mut builders: BTreeMap<String, ManifestBuilder> = BTreeMap::new();
    for frame in frames {
        let frame = frame?;
        match builders.get_mut(&frame.trajectory_id) {
            Some(builder) => builder.push(&frame)?,
            None => {
                order.push(frame.trajectory_id.clone());
                builders.insert(frame.trajectory_id.clone(), ManifestBuilder::start(&frame)?);
            }
        }
    }
    if order.is_empty() {
        return Err(TrajectoryError::Empty);
    }
    order
        .into_iter()
        .map(|id| builders.remove(&id).expect("builder exists").finish())
        .collect()
}
