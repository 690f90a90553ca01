//! Connected components of a thresholded frame and their molecular
//! formulas.
//!
//! Formulas are canonical when their element symbols appear in strictly
//! increasing byte order with counts of one omitted, e.g. `MoOS2` or
//! `Mo2S7`.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::elements::is_valid_symbol;
use crate::trajectory_io::Frame;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FormulaError {
    #[error("empty formula")]
    Empty,
    #[error("illegal character {ch:?} at byte {pos} in {text:?}")]
    IllegalCharacter { text: String, ch: char, pos: usize },
    #[error("zero count for {element} in {text:?}")]
    ZeroCount { text: String, element: String },
    #[error("count for {element} in {text:?} is too large")]
    CountOverflow { text: String, element: String },
    #[error("element {element} appears more than once in {text:?}")]
    DuplicateElement { text: String, element: String },
    #[error("{text:?} is not in canonical form (expected {canonical:?})")]
    NotCanonical { text: String, canonical: String },
    #[error("invalid element symbol {0:?}")]
    InvalidSymbol(String),
    #[error("element(s) {0:?} not in the element universe")]
    OutOfUniverse(Vec<String>),
}

/// Molecular formula with elements in lexicographic order.
///
/// Equality, ordering and hashing follow the rendered text, so sorting a
/// vocabulary sorts it alphabetically by name.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct CanonicalFormula {
    terms: Vec<(String, u32)>,
    text: String,
}

impl CanonicalFormula {
    fn from_sorted(terms: Vec<(String, u32)>) -> Self {
        let mut text = String::new();
        for (element, count) in &terms {
            text.push_str(element);
            if *count != 1 {
                text.push_str(&count.to_string());
            }
        }
        Self { terms, text }
    }

    /// Builds a formula from element counts. Zero counts are dropped.
    pub fn from_counts<S: AsRef<str>>(
        counts: impl IntoIterator<Item = (S, u32)>,
    ) -> Result<Self, FormulaError> {
        let mut merged: BTreeMap<String, u32> = BTreeMap::new();
        for (element, count) in counts {
            let element = element.as_ref();
            if !is_valid_symbol(element) {
                return Err(FormulaError::InvalidSymbol(element.to_owned()));
            }
            if count == 0 {
                continue;
            }
            let slot = merged.entry(element.to_owned()).or_insert(0);
            *slot = slot.checked_add(count).ok_or(FormulaError::CountOverflow {
                text: element.to_owned(),
                element: element.to_owned(),
            })?;
        }
        if merged.is_empty() {
            return Err(FormulaError::Empty);
        }
        Ok(Self::from_sorted(merged.into_iter().collect()))
    }

    pub fn terms(&self) -> &[(String, u32)] {
        &self.terms
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn count(&self, element: &str) -> u32 {
        self.terms
            .iter()
            .find(|(e, _)| e == element)
            .map_or(0, |&(_, c)| c)
    }

    pub fn atom_count(&self) -> u32 {
        self.terms.iter().map(|&(_, c)| c).sum()
    }

    /// The formula's atoms as a multiset, in canonical element order.
    pub fn atoms(&self) -> impl Iterator<Item = &str> + '_ {
        self.terms
            .iter()
            .flat_map(|(e, c)| std::iter::repeat_n(e.as_str(), *c as usize))
    }
}

impl PartialEq for CanonicalFormula {
    fn eq(&self, other: &Self) -> bool {
        self.text == other.text
    }
}

impl Eq for CanonicalFormula {}

impl Hash for CanonicalFormula {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.text.hash(state);
    }
}

impl PartialOrd for CanonicalFormula {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for CanonicalFormula {
    fn cmp(&self, other: &Self) -> Ordering {
        self.text.cmp(&other.text)
    }
}

impl fmt::Display for CanonicalFormula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

/// Strict parse: only canonical renderings are accepted.
impl FromStr for CanonicalFormula {
    type Err = FormulaError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_formula(s, ParseMode::Strict)
    }
}

/// Lenient parse, used when reading files written by operators or tools.
impl TryFrom<String> for CanonicalFormula {
    type Error = FormulaError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        parse_formula(&value, ParseMode::Lenient)
    }
}

impl From<CanonicalFormula> for String {
    fn from(value: CanonicalFormula) -> Self {
        value.text
    }
}

/// Formula of an element multiset.
pub fn canonicalize<S: AsRef<str>>(
    elements: impl IntoIterator<Item = S>,
) -> Result<CanonicalFormula, FormulaError> {
    let mut counts: BTreeMap<String, u32> = BTreeMap::new();
    for element in elements {
        let element = element.as_ref();
        if let Some(c) = counts.get_mut(element) {
            *c += 1;
            continue;
        }
        if !is_valid_symbol(element) {
            return Err(FormulaError::InvalidSymbol(element.to_owned()));
        }
        counts.insert(element.to_owned(), 1);
    }
    if counts.is_empty() {
        return Err(FormulaError::Empty);
    }
    Ok(CanonicalFormula::from_sorted(counts.into_iter().collect()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ParseMode {
    /// Reject anything that is not byte-identical to its canonical rendering.
    #[default]
    Strict,
    /// Accept any element order, explicit `1` counts and leading zeros.
    Lenient,
}

/// Parses `(Element Count?)+`.
///
/// In strict mode the text must already be canonical: sorted elements, no
/// explicit `1`, no leading zeros.
pub fn parse_formula(text: &str, mode: ParseMode) -> Result<CanonicalFormula, FormulaError> {
    if text.is_empty() {
        return Err(FormulaError::Empty);
    }
    let bytes = text.as_bytes();
    let mut terms: Vec<(String, u32)> = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        let start = pos;
        if !bytes[pos].is_ascii_uppercase() {
            let ch = text[pos..].chars().next().unwrap_or('?');
            return Err(FormulaError::IllegalCharacter {
                text: text.to_owned(),
                ch,
                pos,
            });
        }
        pos += 1;
        while pos < bytes.len() && bytes[pos].is_ascii_lowercase() {
            pos += 1;
        }
        let element = &text[start..pos];
        let digits_start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        let count = if digits_start == pos {
            1
        } else {
            let digits = &text[digits_start..pos];
            let value: u32 = digits.parse().map_err(|_| FormulaError::CountOverflow {
                text: text.to_owned(),
                element: element.to_owned(),
            })?;
            if value == 0 {
                return Err(FormulaError::ZeroCount {
                    text: text.to_owned(),
                    element: element.to_owned(),
                });
            }
            value
        };
        if terms.iter().any(|(e, _)| e == element) {
            return Err(FormulaError::DuplicateElement {
                text: text.to_owned(),
                element: element.to_owned(),
            });
        }
        terms.push((element.to_owned(), count));
    }
    let mut sorted = terms;
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let formula = CanonicalFormula::from_sorted(sorted);
    if mode == ParseMode::Strict && formula.text != text {
        return Err(FormulaError::NotCanonical {
            text: text.to_owned(),
            canonical: formula.text,
        });
    }
    Ok(formula)
}

/// Ordered element list fixing the layout of composition vectors.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElementUniverse(Vec<String>);

impl ElementUniverse {
    pub fn new<S: Into<String>>(elements: impl IntoIterator<Item = S>) -> Result<Self, FormulaError> {
        let elements: Vec<String> = elements.into_iter().map(Into::into).collect();
        for (k, e) in elements.iter().enumerate() {
            if !is_valid_symbol(e) {
                return Err(FormulaError::InvalidSymbol(e.clone()));
            }
            if elements[..k].contains(e) {
                return Err(FormulaError::DuplicateElement {
                    text: elements.join(","),
                    element: e.clone(),
                });
            }
        }
        Ok(Self(elements))
    }

    /// Sorted union of the elements of `formulas`.
    pub fn covering<'a>(formulas: impl IntoIterator<Item = &'a CanonicalFormula>) -> Self {
        let mut set: Vec<String> = formulas
            .into_iter()
            .flat_map(|f| f.terms().iter().map(|(e, _)| e.clone()))
            .collect();
        set.sort();
        set.dedup();
        Self(set)
    }

    pub fn elements(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Atom counts of `formula` laid out along `universe`.
pub fn composition_vector(
    formula: &CanonicalFormula,
    universe: &ElementUniverse,
) -> Result<Vec<u32>, FormulaError> {
    let mut out = vec![0; universe.len()];
    let mut missing = Vec::new();
    for (element, count) in formula.terms() {
        match universe.0.iter().position(|e| e == element) {
            Some(k) => out[k] = *count,
            None => missing.push(element.clone()),
        }
    }
    if missing.is_empty() {
        Ok(out)
    } else {
        Err(FormulaError::OutOfUniverse(missing))
    }
}

/// A closed set of formulas with precomputed composition vectors, used to
/// decode real-valued compositions back to species.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    universe: ElementUniverse,
    formulas: Vec<CanonicalFormula>,
    vectors: Vec<Vec<f64>>,
}

impl Vocabulary {
    /// Formulas are sorted and deduplicated.
    pub fn new(
        mut formulas: Vec<CanonicalFormula>,
        universe: ElementUniverse,
    ) -> Result<Self, FormulaError> {
        formulas.sort();
        formulas.dedup();
        let vectors = formulas
            .iter()
            .map(|f| {
                composition_vector(f, &universe)
                    .map(|v| v.into_iter().map(f64::from).collect())
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            universe,
            formulas,
            vectors,
        })
    }

    pub fn universe(&self) -> &ElementUniverse {
        &self.universe
    }

    pub fn formulas(&self) -> &[CanonicalFormula] {
        &self.formulas
    }

    pub fn vector(&self, index: usize) -> &[f64] {
        &self.vectors[index]
    }

    /// Vocabulary indices by ascending squared L2 distance to `target`;
    /// ties go to the alphabetically smaller formula.
    pub fn rank_by_distance(&self, target: &[f64]) -> Vec<(usize, f64)> {
        let mut ranked: Vec<(usize, f64)> = self
            .vectors
            .iter()
            .enumerate()
            .map(|(k, v)| {
                let d = v.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum();
                (k, d)
            })
            .collect();
        ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        ranked
    }

    pub fn nearest(&self, target: &[f64]) -> Option<&CanonicalFormula> {
        self.rank_by_distance(target)
            .first()
            .map(|&(k, _)| &self.formulas[k])
    }
}

/// A maximal connected atom set and its formula.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Component {
    pub atoms: Vec<usize>,
    pub formula: CanonicalFormula,
}

impl Component {
    pub fn min_atom(&self) -> usize {
        self.atoms[0]
    }
}

/// Connected components of the frame's bond graph, by depth-first search.
/// Components come back ordered by their smallest atom index, each with
/// sorted atom indices.
pub fn connected_components(frame: &Frame) -> Vec<Component> {
    let n = frame.atoms.len();
    // CSR adjacency
    let mut degree = vec![0usize; n + 1];
    for b in &frame.bonds {
        degree[b.i + 1] += 1;
        degree[b.j + 1] += 1;
    }
    for k in 0..n {
        degree[k + 1] += degree[k];
    }
    let offsets = degree;
    let mut fill = offsets.clone();
    let mut neighbours = vec![0usize; offsets[n]];
    for b in &frame.bonds {
        neighbours[fill[b.i]] = b.j;
        fill[b.i] += 1;
        neighbours[fill[b.j]] = b.i;
        fill[b.j] += 1;
    }

    let mut visited = vec![false; n];
    let mut stack = Vec::new();
    let mut components = Vec::new();
    for start in 0..n {
        if visited[start] {
            continue;
        }
        visited[start] = true;
        stack.push(start);
        let mut atoms = Vec::new();
        while let Some(node) = stack.pop() {
            atoms.push(node);
            for &next in &neighbours[offsets[node]..offsets[node + 1]] {
                if !visited[next] {
                    visited[next] = true;
                    stack.push(next);
                }
            }
        }
        atoms.sort_unstable();
        let formula = canonicalize(atoms.iter().map(|&a| frame.atoms[a].element.as_str()))
            .expect("validated frames carry valid element symbols");
        components.push(Component { atoms, formula });
    }
    components
}
