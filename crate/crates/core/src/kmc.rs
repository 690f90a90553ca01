//! Semi-Markov reaction networks: synthetic event generation, expansion
//! into bond-order frames, and analytic accuracy ceilings.
//!
//! A network holds species, a transition matrix with zero diagonal and a
//! duration distribution per species. Optional context bins over durations
//! make the model semi-Markov in two ways: the next species may depend on
//! the bin of the current event's duration (`transition_by_bin`), and a
//! duration may depend on the bin of the previous event's duration
//! (`by_previous_bin`).

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bins::{BinEdges, BinError};
use crate::dataset::Task;
use crate::elements::atomic_weight;
use crate::event_stream::MolecularEvent;
use crate::jsonl::{self, JsonlError};
use crate::seed;
use crate::species_graph::{canonicalize, CanonicalFormula, FormulaError};
use crate::trajectory_io::{Bond, Frame};

const TOLERANCE: f64 = 1e-9;

#[derive(Debug, thiserror::Error)]
pub enum KmcError {
    #[error("network has no species")]
    NoSpecies,
    #[error("species {0} is listed twice")]
    DuplicateSpecies(String),
    #[error("{what}: expected {expected} entries, found {found}")]
    Shape {
        what: String,
        expected: usize,
        found: usize,
    },
    #[error("{what}: probabilities sum to {sum}, not 1")]
    NotNormalized { what: String, sum: f64 },
    #[error("{what}: probability {value} is negative or not finite")]
    BadProbability { what: String, value: f64 },
    #[error("transition row {species} has nonzero self-transition {value}")]
    SelfTransition { species: String, value: f64 },
    #[error("{what}: duration {duration} outside [1, {d_max}]")]
    DurationRange {
        what: String,
        duration: u64,
        d_max: u64,
    },
    #[error("{what}: durations must be strictly increasing")]
    UnsortedDurations { what: String },
    #[error("{0} requires context_bins")]
    MissingContextBins(&'static str),
    #[error("initial species index {index} out of range for {count} species")]
    InitialOutOfRange { index: usize, count: usize },
    #[error("number of events must be positive")]
    ZeroEvents,
    #[error("species {0} has no atom map")]
    MissingAtomMap(String),
    #[error("atom map for {species} spells {found}")]
    AtomMapMismatch { species: String, found: String },
    #[error("no element is shared by every species, so frames have no common hub atom")]
    NoAnchor,
    #[error("transition structure has {closed_classes} closed classes; a unique stationary distribution needs exactly 1")]
    NotErgodic { closed_classes: usize },
    #[error("stationary distribution did not converge within {iterations} iterations")]
    NoConvergence { iterations: usize },
    #[error("no analytic ceiling for task {0}")]
    UnsupportedTask(Task),
    #[error(transparent)]
    Bin(#[from] BinError),
    #[error(transparent)]
    Formula(#[from] FormulaError),
    #[error(transparent)]
    Io(#[from] JsonlError),
}

/// Discrete distribution over integer durations, serialized as
/// `[[duration, probability], ...]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DurationPmf(Vec<(u64, f64)>);

impl DurationPmf {
    pub fn new(support: Vec<(u64, f64)>) -> Self {
        Self(support)
    }

    pub fn constant(duration: u64) -> Self {
        Self(vec![(duration, 1.0)])
    }

    /// Uniform over `lo..=hi`.
    pub fn uniform(lo: u64, hi: u64) -> Self {
        let p = 1.0 / (hi - lo + 1) as f64;
        Self((lo..=hi).map(|d| (d, p)).collect())
    }

    pub fn support(&self) -> &[(u64, f64)] {
        &self.0
    }

    fn validate(&self, what: &str, d_max: u64) -> Result<(), KmcError> {
        let mut sum = 0.0;
        for (k, &(d, p)) in self.0.iter().enumerate() {
            if d == 0 || d > d_max {
                return Err(KmcError::DurationRange {
                    what: what.to_owned(),
                    duration: d,
                    d_max,
                });
            }
            if k > 0 && self.0[k - 1].0 >= d {
                return Err(KmcError::UnsortedDurations {
                    what: what.to_owned(),
                });
            }
            check_probability(what, p)?;
            sum += p;
        }
        check_sum(what, sum)
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> u64 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for &(d, p) in &self.0 {
            acc += p;
            if u < acc {
                return d;
            }
        }
        // rounding left u above the accumulated mass
        self.0.iter().rev().find(|(_, p)| *p > 0.0).map_or(self.0[0].0, |(d, _)| *d)
    }

    /// Probability mass falling in each bin (clamped to the outer bins).
    pub fn bin_mass(&self, bins: &BinEdges) -> Vec<f64> {
        let mut mass = vec![0.0; bins.len()];
        for &(d, p) in &self.0 {
            mass[bins.clamped_index(d)] += p;
        }
        mass
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeciesDurations {
    pub pmf: DurationPmf,
    /// One distribution per context bin of the previous event's duration.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub by_previous_bin: Option<Vec<DurationPmf>>,
}

impl SpeciesDurations {
    pub fn plain(pmf: DurationPmf) -> Self {
        Self {
            pmf,
            by_previous_bin: None,
        }
    }

    fn for_context(&self, previous_bin: Option<usize>) -> &DurationPmf {
        match (&self.by_previous_bin, previous_bin) {
            (Some(per_bin), Some(b)) => &per_bin[b],
            _ => &self.pmf,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReactionNetwork {
    pub id: String,
    pub species: Vec<CanonicalFormula>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_bins: Option<BinEdges>,
    pub transition: Vec<Vec<f64>>,
    /// `transition_by_bin[b][s][t]`: next-species probabilities when the
    /// current event's duration falls in context bin `b`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transition_by_bin: Option<Vec<Vec<Vec<f64>>>>,
    pub durations: Vec<SpeciesDurations>,
    pub d_max: u64,
    /// Element multiset per species, keyed by formula. Derived from the
    /// formula itself when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub atom_maps: Option<BTreeMap<String, Vec<String>>>,
    #[serde(default)]
    pub initial: usize,
}

fn check_probability(what: &str, p: f64) -> Result<(), KmcError> {
    if p.is_finite() && p >= 0.0 {
        Ok(())
    } else {
        Err(KmcError::BadProbability {
            what: what.to_owned(),
            value: p,
        })
    }
}

fn check_sum(what: &str, sum: f64) -> Result<(), KmcError> {
    if (sum - 1.0).abs() <= TOLERANCE {
        Ok(())
    } else {
        Err(KmcError::NotNormalized {
            what: what.to_owned(),
            sum,
        })
    }
}

fn check_len(what: impl Into<String>, expected: usize, found: usize) -> Result<(), KmcError> {
    if expected == found {
        Ok(())
    } else {
        Err(KmcError::Shape {
            what: what.into(),
            expected,
            found,
        })
    }
}

fn sample_row<R: Rng>(row: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (t, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return t;
        }
    }
    row.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

impl ReactionNetwork {
    /// A first-order network: one transition matrix, one duration
    /// distribution per species.
    pub fn first_order(
        id: impl Into<String>,
        species: Vec<CanonicalFormula>,
        transition: Vec<Vec<f64>>,
        durations: Vec<DurationPmf>,
        d_max: u64,
    ) -> Result<Self, KmcError> {
        let network = Self {
            id: id.into(),
            species,
            context_bins: None,
            transition,
            transition_by_bin: None,
            durations: durations.into_iter().map(SpeciesDurations::plain).collect(),
            d_max,
            atom_maps: None,
            initial: 0,
        };
        network.validate()?;
        Ok(network)
    }

    pub fn from_path(path: &Path) -> Result<Self, KmcError> {
        let network: Self = jsonl::read_json(path)?;
        network.validate()?;
        Ok(network)
    }

    pub fn context_bin_count(&self) -> usize {
        self.context_bins.as_ref().map_or(1, BinEdges::len)
    }

    fn context_bin(&self, duration: u64) -> usize {
        self.context_bins.as_ref().map_or(0, |b| b.clamped_index(duration))
    }

    /// Transition matrix in force for context bin `bin`.
    pub fn transition_for(&self, bin: usize) -> &[Vec<f64>] {
        match &self.transition_by_bin {
            Some(per_bin) => &per_bin[bin],
            None => &self.transition,
        }
    }

    fn validate_matrix(&self, label: &str, matrix: &[Vec<f64>]) -> Result<(), KmcError> {
        let n = self.species.len();
        check_len(label, n, matrix.len())?;
        for (s, row) in matrix.iter().enumerate() {
            let what = format!("{label} row {}", self.species[s]);
            check_len(what.clone(), n, row.len())?;
            for &p in row {
                check_probability(&what, p)?;
            }
            if row[s] != 0.0 {
                return Err(KmcError::SelfTransition {
                    species: self.species[s].to_string(),
                    value: row[s],
                });
            }
            check_sum(&what, row.iter().sum())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), KmcError> {
        let n = self.species.len();
        if n == 0 {
            return Err(KmcError::NoSpecies);
        }
        let mut names: Vec<&str> = self.species.iter().map(CanonicalFormula::as_str).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(KmcError::DuplicateSpecies(w[0].to_owned()));
        }
        if self.initial >= n {
            return Err(KmcError::InitialOutOfRange {
                index: self.initial,
                count: n,
            });
        }
        self.validate_matrix("transition", &self.transition)?;
        if let Some(per_bin) = &self.transition_by_bin {
            let bins = self
                .context_bins
                .as_ref()
                .ok_or(KmcError::MissingContextBins("transition_by_bin"))?;
            check_len("transition_by_bin", bins.len(), per_bin.len())?;
            for (b, m) in per_bin.iter().enumerate() {
                self.validate_matrix(&format!("transition_by_bin[{b}]"), m)?;
            }
        }
        check_len("durations", n, self.durations.len())?;
        for (s, d) in self.durations.iter().enumerate() {
            let what = format!("durations of {}", self.species[s]);
            d.pmf.validate(&what, self.d_max)?;
            if let Some(per_bin) = &d.by_previous_bin {
                let bins = self
                    .context_bins
                    .as_ref()
                    .ok_or(KmcError::MissingContextBins("by_previous_bin"))?;
                check_len(what.clone(), bins.len(), per_bin.len())?;
                for (b, pmf) in per_bin.iter().enumerate() {
                    pmf.validate(&format!("{what} after bin {b}"), self.d_max)?;
                }
            }
        }
        Ok(())
    }

    /// Element multiset per species.
    pub fn atom_maps(&self) -> Result<AtomMaps, KmcError> {
        match &self.atom_maps {
            None => Ok(AtomMaps::from_formulas(&self.species)),
            Some(explicit) => {
                let mut maps = BTreeMap::new();
                for species in &self.species {
                    let atoms = explicit
                        .get(species.as_str())
                        .ok_or_else(|| KmcError::MissingAtomMap(species.to_string()))?;
                    maps.insert(species.clone(), atoms.clone());
                }
                AtomMaps::new(maps)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTrajectory {
    pub network_id: String,
    pub generator_seed: u64,
    pub events: Vec<MolecularEvent>,
}

impl SyntheticTrajectory {
    pub fn trajectory_id(&self) -> &str {
        self.events
            .first()
            .map_or("", |e| e.trajectory_id.as_str())
    }
}

/// Draws `n_events` events on lineage 0 of `trajectory_id`, starting at
/// t = 0 in the network's initial species.
pub fn generate_trajectory(
    network: &ReactionNetwork,
    trajectory_id: &str,
    n_events: usize,
    seed: u64,
) -> Result<SyntheticTrajectory, KmcError> {
    if n_events == 0 {
        return Err(KmcError::ZeroEvents);
    }
    let mut rng = seed::rng(seed);
    let mut events = Vec::with_capacity(n_events);
    let mut species = network.initial;
    let mut previous_bin = None;
    let mut clock = 0;
    for _ in 0..n_events {
        let duration = network.durations[species]
            .for_context(previous_bin)
            .sample(&mut rng);
        events.push(MolecularEvent {
            trajectory_id: trajectory_id.to_owned(),
            lineage_id: 0,
            formula: network.species[species].clone(),
            start_ps: clock,
            duration_ps: duration,
        });
        clock += duration;
        let bin = network.context_bin(duration);
        species = sample_row(&network.transition_for(bin)[species], &mut rng);
        previous_bin = Some(bin);
    }
    Ok(SyntheticTrajectory {
        network_id: network.id.clone(),
        generator_seed: seed,
        events,
    })
}

pub fn generate(
    network: &ReactionNetwork,
    n_events: usize,
    seed: u64,
) -> Result<SyntheticTrajectory, KmcError> {
    generate_trajectory(network, &format!("{}-{seed}", network.id), n_events, seed)
}

pub fn trajectory_name(index: usize) -> String {
    format!("traj{index:04}")
}

/// `count` trajectories named `traj0000`, `traj0001`, ..., each seeded by a
/// child of `root_seed`.
pub fn generate_many(
    network: &ReactionNetwork,
    count: usize,
    n_events: usize,
    root_seed: u64,
) -> Result<Vec<SyntheticTrajectory>, KmcError> {
    (0..count)
        .into_par_iter()
        .map(|k| {
            let name = trajectory_name(k);
            let seed = seed::derive(root_seed, &format!("simulate/{name}"));
            generate_trajectory(network, &name, n_events, seed)
        })
        .collect()
}

/// Element multisets for the species of a network.
#[derive(Clone, Debug, PartialEq)]
pub struct AtomMaps(BTreeMap<CanonicalFormula, Vec<String>>);

impl AtomMaps {
    /// Each multiset must spell its formula.
    pub fn new(maps: BTreeMap<CanonicalFormula, Vec<String>>) -> Result<Self, KmcError> {
        for (species, atoms) in &maps {
            let found = canonicalize(atoms.iter())?;
            if &found != species {
                return Err(KmcError::AtomMapMismatch {
                    species: species.to_string(),
                    found: found.to_string(),
                });
            }
        }
        Ok(Self(maps))
    }

    pub fn from_formulas(species: &[CanonicalFormula]) -> Self {
        Self(
            species
                .iter()
                .map(|f| (f.clone(), f.atoms().map(str::to_owned).collect()))
                .collect(),
        )
    }

    pub fn get(&self, species: &CanonicalFormula) -> Option<&[String]> {
        self.0.get(species).map(Vec::as_slice)
    }
}

/// Fixed atom layout shared by all frames of an expanded trajectory.
#[derive(Clone, Debug)]
pub struct FrameLayout {
    elements: Vec<String>,
    bonds: BTreeMap<CanonicalFormula, Vec<Bond>>,
}

/// Bond order of the sub-threshold contact added to every frame.
pub const DECOY_BOND_ORDER: f64 = 0.05;

impl FrameLayout {
    /// Sizes each element block to the largest count any species needs.
    /// Atom 0 is the hub: an atom of the heaviest element that every
    /// species contains. Each species is a star of bond order 1 around the
    /// hub; the hub also carries one sub-threshold contact to the first
    /// atom outside the star, if any.
    pub fn new(species: &[CanonicalFormula], maps: &AtomMaps) -> Result<Self, KmcError> {
        let mut counts: Vec<BTreeMap<&str, usize>> = Vec::with_capacity(species.len());
        for s in species {
            let atoms = maps
                .get(s)
                .ok_or_else(|| KmcError::MissingAtomMap(s.to_string()))?;
            let mut c = BTreeMap::new();
            for a in atoms {
                *c.entry(a.as_str()).or_insert(0) += 1;
            }
            counts.push(c);
        }
        let anchor = counts
            .first()
            .into_iter()
            .flat_map(|c| c.keys().copied())
            .filter(|e| counts.iter().all(|c| c.contains_key(e)))
            .max_by(|a, b| {
                let wa = atomic_weight(a).unwrap_or(0.0);
                let wb = atomic_weight(b).unwrap_or(0.0);
                wa.total_cmp(&wb).then(b.cmp(a))
            })
            .ok_or(KmcError::NoAnchor)?
            .to_owned();

        let mut block_size: BTreeMap<&str, usize> = BTreeMap::new();
        for c in &counts {
            for (&e, &n) in c {
                let slot = block_size.entry(e).or_insert(0);
                *slot = (*slot).max(n);
            }
        }
        let mut order: Vec<&str> = vec![anchor.as_str()];
        order.extend(block_size.keys().copied().filter(|e| *e != anchor));
        let mut block_start = BTreeMap::new();
        let mut elements = Vec::new();
        for e in &order {
            block_start.insert(*e, elements.len());
            elements.extend(std::iter::repeat_n((*e).to_owned(), block_size[e]));
        }

        let mut bonds = BTreeMap::new();
        for (s, c) in species.iter().zip(&counts) {
            let mut used = vec![false; elements.len()];
            let mut star = Vec::new();
            for (&e, &n) in c {
                for k in 0..n {
                    let atom = block_start[e] + k;
                    used[atom] = true;
                    if atom != 0 {
                        star.push(Bond::new(0, atom, 1.0));
                    }
                }
            }
            if let Some(free) = used.iter().position(|u| !u) {
                star.push(Bond::new(0, free, DECOY_BOND_ORDER));
            }
            bonds.insert(s.clone(), star);
        }
        Ok(Self { elements, bonds })
    }

    pub fn elements(&self) -> &[String] {
        &self.elements
    }

    pub fn frame(&self, trajectory_id: &str, time_ps: u64, species: &CanonicalFormula) -> Option<Frame> {
        let bonds = self.bonds.get(species)?.clone();
        Some(Frame::new(trajectory_id, time_ps, self.elements.iter().cloned(), bonds))
    }
}

/// Frames at 1 ps spacing realizing the trajectory: an event of duration
/// `d` becomes `d` identical frames.
pub fn expand_to_frames(
    trajectory: &SyntheticTrajectory,
    network: &ReactionNetwork,
    maps: &AtomMaps,
) -> Result<Vec<Frame>, KmcError> {
    let layout = FrameLayout::new(&network.species, maps)?;
    let total: u64 = trajectory.events.iter().map(|e| e.duration_ps).sum();
    let mut frames = Vec::with_capacity(total as usize);
    for e in &trajectory.events {
        for k in 0..e.duration_ps {
            let frame = layout
                .frame(&e.trajectory_id, e.start_ps + k, &e.formula)
                .ok_or_else(|| KmcError::MissingAtomMap(e.formula.to_string()))?;
            frames.push(frame);
        }
    }
    Ok(frames)
}

/// What a predictor is allowed to condition on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Observation {
    /// The adjacent species only.
    Species,
    /// The adjacent species and the context bin of its duration.
    SpeciesAndBin,
}

/// Chain over `(species, context bin of its duration)`.
struct ExtendedChain {
    n_species: usize,
    n_bins: usize,
    /// Row-major `[state][state]`.
    matrix: Vec<f64>,
}

impl ExtendedChain {
    fn new(network: &ReactionNetwork) -> Self {
        let n_species = network.species.len();
        let n_bins = network.context_bin_count();
        let n = n_species * n_bins;
        let bin_mass = |t: usize, previous: Option<usize>| -> Vec<f64> {
            let pmf = network.durations[t].for_context(previous);
            match &network.context_bins {
                Some(bins) => pmf.bin_mass(bins),
                None => vec![1.0],
            }
        };
        let mut matrix = vec![0.0; n * n];
        for s in 0..n_species {
            for b in 0..n_bins {
                let row = &network.transition_for(b)[s];
                for (t, &p) in row.iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    let context = network.context_bins.as_ref().map(|_| b);
                    for (b2, q) in bin_mass(t, context).into_iter().enumerate() {
                        matrix[(s * n_bins + b) * n + t * n_bins + b2] += p * q;
                    }
                }
            }
        }
        Self {
            n_species,
            n_bins,
            matrix,
        }
    }

    fn states(&self) -> usize {
        self.n_species * self.n_bins
    }

    fn reach(&self, from: usize) -> Vec<bool> {
        let n = self.states();
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([from]);
        seen[from] = true;
        while let Some(i) = queue.pop_front() {
            for j in 0..n {
                if !seen[j] && self.matrix[i * n + j] > 0.0 {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        seen
    }

    fn closed_classes(&self) -> usize {
        let n = self.states();
        let reach: Vec<Vec<bool>> = (0..n).map(|i| self.reach(i)).collect();
        let mut assigned = vec![false; n];
        let mut classes = 0;
        for i in 0..n {
            if assigned[i] {
                continue;
            }
            let recurrent = (0..n).all(|j| !reach[i][j] || reach[j][i]);
            if !recurrent {
                continue;
            }
            classes += 1;
            for j in 0..n {
                if reach[i][j] {
                    assigned[j] = true;
                }
            }
        }
        classes
    }

    /// Lazy power iteration to an L-infinity residual below 1e-12.
    fn stationary(&self) -> Result<Vec<f64>, KmcError> {
        const MAX_ITERATIONS: usize = 2_000_000;
        let closed_classes = self.closed_classes();
        if closed_classes != 1 {
            return Err(KmcError::NotErgodic { closed_classes });
        }
        let n = self.states();
        let mut pi = vec![1.0 / n as f64; n];
        let mut next = vec![0.0; n];
        for _ in 0..MAX_ITERATIONS {
            next.fill(0.0);
            for i in 0..n {
                if pi[i] == 0.0 {
                    continue;
                }
                for j in 0..n {
                    next[j] += pi[i] * self.matrix[i * n + j];
                }
            }
            let residual = next
                .iter()
                .zip(&pi)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if residual < 1e-12 {
                let total: f64 = next.iter().sum();
                return Ok(next.into_iter().map(|p| p / total).collect());
            }
            for (p, q) in pi.iter_mut().zip(&next) {
                *p = 0.5 * (*p + q);
            }
        }
        Err(KmcError::NoConvergence {
            iterations: MAX_ITERATIONS,
        })
    }
}

/// Stationary distribution over species.
pub fn stationary_distribution(network: &ReactionNetwork) -> Result<Vec<f64>, KmcError> {
    let chain = ExtendedChain::new(network);
    let pi = chain.stationary()?;
    Ok(pi
        .chunks(chain.n_bins)
        .map(|c| c.iter().sum())
        .collect())
}

/// Best achievable top-1 accuracy of a predictor conditioning on the
/// species adjacent to the target. For a first-order network and the
/// one-step forward task this is `sum_s pi(s) max_t P[s][t]`; the backward
/// task uses the time-reversed chain.
pub fn bayes_optimal_accuracy(network: &ReactionNetwork, task: Task) -> Result<f64, KmcError> {
    bayes_optimal_accuracy_with(network, task, Observation::Species)
}

pub fn bayes_optimal_accuracy_with(
    network: &ReactionNetwork,
    task: Task,
    observation: Observation,
) -> Result<f64, KmcError> {
    if !matches!(task, Task::Forward1 | Task::Backward) {
        return Err(KmcError::UnsupportedTask(task));
    }
    let chain = ExtendedChain::new(network);
    let pi = chain.stationary()?;
    let (ns, nb) = (chain.n_species, chain.n_bins);
    let n = chain.states();
    // joint[(s,b)][(t,b')] = pi(s,b) M[(s,b)][(t,b')]
    let joint = |i: usize, j: usize| pi[i] * chain.matrix[i * n + j];
    let observed = |species: usize, bin: usize| match observation {
        Observation::Species => species,
        Observation::SpeciesAndBin => species * nb + bin,
    };
    let n_obs = match observation {
        Observation::Species => ns,
        Observation::SpeciesAndBin => n,
    };
    // mass[observation][predicted species]
    let mut mass = vec![vec![0.0; ns]; n_obs];
    for i in 0..n {
        for j in 0..n {
            let p = joint(i, j);
            if p == 0.0 {
                continue;
            }
            let (s, b, t, b2) = (i / nb, i % nb, j / nb, j % nb);
            match task {
                Task::Forward1 => mass[observed(s, b)][t] += p,
                _ => mass[observed(t, b2)][s] += p,
            }
        }
    }
    Ok(mass
        .iter()
        .map(|row| row.iter().copied().fold(0.0, f64::max))
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event_stream::{bandpass_filter, extract_events, EventError, FilterBand};
    use crate::trajectory_io::{BondThreshold, FrameReader};
    use rand::SeedableRng;

    fn species(names: &[&str]) -> Vec<CanonicalFormula> {
        names.iter().map(|n| n.parse().unwrap()).collect()
    }

    fn flip_flop(d: u64) -> ReactionNetwork {
        ReactionNetwork::first_order(
            "flip",
            species(&["MoS", "MoS2"]),
            vec![vec![0.0, 1.0], vec![1.0, 0.0]],
            vec![DurationPmf::constant(d), DurationPmf::constant(d)],
            500,
        )
        .unwrap()
    }

    fn random_network(n: usize, seed: u64) -> ReactionNetwork {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let names = ["MoO", "MoS", "MoS2", "MoS3", "MoOS2", "Mo2S7", "Mo3S13", "MoO3", "MoS4", "MoOS"];
        let transition = (0..n)
            .map(|s| {
                let mut row: Vec<f64> = (0..n).map(|t| if t == s { 0.0 } else { rng.random::<f64>() + 0.05 }).collect();
                let total: f64 = row.iter().sum();
                row.iter_mut().for_each(|p| *p /= total);
                row
            })
            .collect();
        let durations = (0..n).map(|s| DurationPmf::uniform(1, 2 + s as u64)).collect();
        ReactionNetwork::first_order("rand", species(&names[..n]), transition, durations, 500).unwrap()
    }

    #[test]
    fn forced_alternation() {
        let t = generate(&flip_flop(5), 10, 1).unwrap();
        for (k, e) in t.events.iter().enumerate() {
            assert_eq!(e.formula.as_str(), ["MoS", "MoS2"][k % 2]);
            assert_eq!(e.duration_ps, 5);
            assert_eq!(e.start_ps, 5 * k as u64);
        }
    }

    #[test]
    fn generation_is_seeded() {
        let net = random_network(5, 3);
        assert_eq!(generate(&net, 500, 9).unwrap(), generate(&net, 500, 9).unwrap());
        assert_ne!(generate(&net, 500, 9).unwrap(), generate(&net, 500, 10).unwrap());
        assert!(matches!(generate(&net, 0, 1), Err(KmcError::ZeroEvents)));
    }

    #[test]
    fn empirical_transitions_and_occupancy_match_network() {
        let net = random_network(5, 17);
        let t = generate(&net, 100_000, 5).unwrap();
        let idx = |f: &CanonicalFormula| net.species.iter().position(|s| s == f).unwrap();
        let mut counts = vec![vec![0.0; 5]; 5];
        let mut visits = [0.0; 5];
        for w in t.events.windows(2) {
            counts[idx(&w[0].formula)][idx(&w[1].formula)] += 1.0;
        }
        for e in &t.events {
            visits[idx(&e.formula)] += 1.0;
        }
        for s in 0..5 {
            let total: f64 = counts[s].iter().sum();
            for u in 0..5 {
                assert!((counts[s][u] / total - net.transition[s][u]).abs() < 0.02);
            }
        }
        let pi = stationary_distribution(&net).unwrap();
        for s in 0..5 {
            assert!((visits[s] / 100_000.0 - pi[s]).abs() < 0.02);
        }
        assert!(t.events.windows(2).all(|w| w[0].formula != w[1].formula));
    }

    #[test]
    fn validation_catches_bad_networks() {
        let sp = species(&["MoS", "MoS2"]);
        let pmf = || vec![DurationPmf::constant(5), DurationPmf::constant(5)];
        let bad_sum = ReactionNetwork::first_order("x", sp.clone(), vec![vec![0.0, 0.9], vec![1.0, 0.0]], pmf(), 10);
        assert!(matches!(bad_sum, Err(KmcError::NotNormalized { .. })));
        let diag = ReactionNetwork::first_order("x", sp.clone(), vec![vec![0.5, 0.5], vec![1.0, 0.0]], pmf(), 10);
        assert!(matches!(diag, Err(KmcError::SelfTransition { .. })));
        let long = ReactionNetwork::first_order(
            "x",
            sp.clone(),
            vec![vec![0.0, 1.0], vec![1.0, 0.0]],
            vec![DurationPmf::constant(50), DurationPmf::constant(5)],
            10,
        );
        assert!(matches!(long, Err(KmcError::DurationRange { .. })));
        let dup = ReactionNetwork::first_order("x", species(&["MoS", "MoS"]), vec![vec![0.0, 1.0], vec![1.0, 0.0]], pmf(), 10);
        assert!(matches!(dup, Err(KmcError::DuplicateSpecies(_))));
    }

    #[test]
    fn three_event_expansion() {
        let net = flip_flop(3);
        let t = generate(&net, 1, 1).unwrap();
        let frames = expand_to_frames(&t, &net, &net.atom_maps().unwrap()).unwrap();
        assert_eq!(frames.len(), 3);
        assert_eq!(frames[0].bonds, frames[2].bonds);
        assert_eq!(frames.iter().map(|f| f.time_ps).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn anchor_is_heaviest_shared_element() {
        let sp = species(&["MoO", "MoS2", "Mo2S7"]);
        let layout = FrameLayout::new(&sp, &AtomMaps::from_formulas(&sp)).unwrap();
        assert_eq!(layout.elements()[0], "Mo");
        assert_eq!(layout.elements().len(), 2 + 1 + 7);
        let none = species(&["MoO", "S2"]);
        assert!(matches!(
            FrameLayout::new(&none, &AtomMaps::from_formulas(&none)),
            Err(KmcError::NoAnchor)
        ));
    }

    #[test]
    fn missing_or_wrong_atom_maps_are_errors() {
        let mut net = flip_flop(3);
        net.atom_maps = Some(BTreeMap::from([("MoS".to_owned(), vec!["Mo".into(), "S".into()])]));
        assert!(matches!(net.atom_maps(), Err(KmcError::MissingAtomMap(_))));
        net.atom_maps = Some(BTreeMap::from([
            ("MoS".to_owned(), vec!["Mo".into(), "S".into()]),
            ("MoS2".to_owned(), vec!["Mo".into(), "S".into()]),
        ]));
        assert!(matches!(net.atom_maps(), Err(KmcError::AtomMapMismatch { .. })));
    }

    #[test]
    fn round_trip_through_frame_text() {
        let net = random_network(7, 2);
        let t = generate_trajectory(&net, "rt", 400, 4).unwrap();
        let frames = expand_to_frames(&t, &net, &net.atom_maps().unwrap()).unwrap();
        let mut text = Vec::new();
        crate::trajectory_io::write_frames(&mut text, &frames).unwrap();
        let reader = FrameReader::new(text.as_slice(), BondThreshold::new(0.3).unwrap());
        let events = extract_events(reader.map(|r| r.map_err(EventError::from))).unwrap();
        let lineage0: Vec<_> = events.into_iter().filter(|e| e.lineage_id == 0).collect();
        assert_eq!(lineage0, t.events);
        let band = FilterBand::new(3, 6).unwrap();
        assert_eq!(bandpass_filter(&lineage0, band), bandpass_filter(&t.events, band));
    }

    #[test]
    fn ceilings_for_simple_chains() {
        let det = flip_flop(5);
        assert!((bayes_optimal_accuracy(&det, Task::Forward1).unwrap() - 1.0).abs() < 1e-12);
        let third = 1.0 / 3.0;
        let uniform = ReactionNetwork::first_order(
            "u",
            species(&["MoO", "MoS", "MoS2", "MoS3"]),
            (0..4).map(|s| (0..4).map(|t| if s == t { 0.0 } else { third }).collect()).collect(),
            vec![DurationPmf::constant(1); 4],
            10,
        )
        .unwrap();
        assert!((bayes_optimal_accuracy(&uniform, Task::Forward1).unwrap() - third).abs() < 1e-9);
        assert!(matches!(
            bayes_optimal_accuracy(&uniform, Task::Forward2),
            Err(KmcError::UnsupportedTask(_))
        ));
    }

    #[test]
    fn reducible_chain_is_rejected() {
        let net = ReactionNetwork::first_order(
            "split",
            species(&["MoO", "MoS", "MoS2", "MoS3"]),
            vec![
                vec![0.0, 1.0, 0.0, 0.0],
                vec![1.0, 0.0, 0.0, 0.0],
                vec![0.0, 0.0, 0.0, 1.0],
                vec![0.0, 0.0, 1.0, 0.0],
            ],
            vec![DurationPmf::constant(1); 4],
            10,
        )
        .unwrap();
        assert!(matches!(
            bayes_optimal_accuracy(&net, Task::Forward1),
            Err(KmcError::NotErgodic { closed_classes: 2 })
        ));
    }

    #[test]
    fn ceiling_matches_simulation() {
        let net = random_network(6, 8);
        let ceiling = bayes_optimal_accuracy(&net, Task::Forward1).unwrap();
        let best: Vec<usize> = net
            .transition
            .iter()
            .map(|row| (0..6).max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a))).unwrap())
            .collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let mut s = 0;
        let mut hits = 0u64;
        let steps = 1_000_000;
        for _ in 0..steps {
            let next = sample_row(&net.transition[s], &mut rng);
            hits += u64::from(next == best[s]);
            s = next;
        }
        assert!((hits as f64 / steps as f64 - ceiling).abs() < 0.005);
    }

    #[test]
    fn backward_ceiling_uses_reversed_chain() {
        let net = random_network(5, 21);
        let pi = stationary_distribution(&net).unwrap();
        // sum_t pi(t) max_s Ptilde[t][s] with Ptilde[t][s] = pi(s) P[s][t] / pi(t)
        let expected: f64 = (0..5)
            .map(|t| (0..5).map(|s| pi[s] * net.transition[s][t]).fold(0.0, f64::max))
            .sum();
        let got = bayes_optimal_accuracy(&net, Task::Backward).unwrap();
        assert!((got - expected).abs() < 1e-9);
    }

    #[test]
    fn duration_dependent_transitions_raise_the_informed_ceiling() {
        let sp = species(&["MoO", "MoS", "MoS2", "MoS3"]);
        let by_bin = |main: usize| -> Vec<Vec<f64>> {
            (0..4)
                .map(|s| {
                    let mut row = vec![0.05; 4];
                    row[s] = 0.0;
                    row[(s + main) % 4] = 0.9;
                    row
                })
                .collect()
        };
        let pmf = DurationPmf::new(vec![(20, 0.5), (300, 0.5)]);
        let net = ReactionNetwork {
            id: "ctx".into(),
            species: sp,
            context_bins: Some(BinEdges::new(vec![10, 150, 500]).unwrap()),
            transition: by_bin(1),
            transition_by_bin: Some(vec![by_bin(1), by_bin(2)]),
            durations: vec![SpeciesDurations::plain(pmf); 4],
            d_max: 500,
            atom_maps: None,
            initial: 0,
        };
        net.validate().unwrap();
        let informed = bayes_optimal_accuracy_with(&net, Task::Forward1, Observation::SpeciesAndBin).unwrap();
        let blind = bayes_optimal_accuracy_with(&net, Task::Forward1, Observation::Species).unwrap();
        assert!((informed - 0.9).abs() < 1e-9);
        assert!((blind - 0.475).abs() < 1e-9);
    }

    #[test]
    fn network_json_round_trip() {
        let net = random_network(4, 1);
        let json = serde_json::to_string(&net).unwrap();
        let back: ReactionNetwork = serde_json::from_str(&json).unwrap();
        assert_eq!(back, net);
    }
}
