//! Integer duration bins.
//!
//! Edges `e0 < e1 < ... < en` define `n` bins: `[e_i, e_{i+1})` for all but
//! the last, which is closed `[e_{n-1}, e_n]`.

use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum BinError {
    #[error("bin edges need at least two values, got {0}")]
    TooFewEdges(usize),
    #[error("bin edges must be strictly increasing: {0:?}")]
    NotIncreasing(Vec<u64>),
    #[error("expected {expected} bins, edges {edges:?} define {found}")]
    WrongBinCount {
        expected: usize,
        found: usize,
        edges: Vec<u64>,
    },
    #[error("duration {duration} ps lies outside bins [{lo}, {hi}]")]
    OutOfRange { duration: u64, lo: u64, hi: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u64>", into = "Vec<u64>")]
pub struct BinEdges(Vec<u64>);

impl BinEdges {
    pub fn new(edges: Vec<u64>) -> Result<Self, BinError> {
        if edges.len() < 2 {
            return Err(BinError::TooFewEdges(edges.len()));
        }
        if edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(BinError::NotIncreasing(edges));
        }
        Ok(Self(edges))
    }

    /// Short `[10,50)`, medium `[50,150)`, long `[150,500]` ps.
    pub fn default_strata() -> Self {
        Self(vec![10, 50, 150, 500])
    }

    pub fn edges(&self) -> &[u64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn lower(&self) -> u64 {
        self.0[0]
    }

    pub fn upper(&self) -> u64 {
        self.0[self.0.len() - 1]
    }

    /// Bin index of `duration`, or an error when it falls outside the edges.
    pub fn index(&self, duration: u64) -> Result<usize, BinError> {
        if duration < self.lower() || duration > self.upper() {
            return Err(BinError::OutOfRange {
                duration,
                lo: self.lower(),
                hi: self.upper(),
            });
        }
        Ok(self.clamped_index(duration))
    }

    /// Bin index with out-of-range durations folded into the end bins.
    pub fn clamped_index(&self, duration: u64) -> usize {
        let interior = &self.0[1..self.0.len() - 1];
        interior.partition_point(|&edge| edge <= duration)
    }
}

impl TryFrom<Vec<u64>> for BinEdges {
    type Error = BinError;
    fn try_from(value: Vec<u64>) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<BinEdges> for Vec<u64> {
    fn from(value: BinEdges) -> Self {
        value.0
    }
}

impl fmt::Display for BinEdges {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(u64::to_string).collect();
        f.write_str(&parts.join(","))
    }
}
