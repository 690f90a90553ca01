use std::collections::BTreeMap;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::DatasetError;
use crate::bins::BinEdges;
use crate::event_stream::MolecularEvent;
use crate::seed;
use crate::species_graph::CanonicalFormula;

/// A `(species, duration bin)` cell.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Stratum {
    pub formula: CanonicalFormula,
    pub bin: usize,
}

/// Event count per stratum. Events outside the bin range are an error.
pub fn stratum_counts(
    events: &[MolecularEvent],
    bins: &BinEdges,
) -> Result<BTreeMap<Stratum, usize>, DatasetError> {
    let mut counts = BTreeMap::new();
    for e in events {
        let stratum = Stratum {
            formula: e.formula.clone(),
            bin: bins.index(e.duration_ps)?,
        };
        *counts.entry(stratum).or_insert(0) += 1;
    }
    Ok(counts)
}

/// Caps every stratum at `cap` events by seeded sampling without
/// replacement. Strata at or under the cap are kept whole, and retained
/// events keep their input order.
pub fn balance(
    events: &[MolecularEvent],
    bins: &BinEdges,
    cap: usize,
    seed: u64,
) -> Result<Vec<MolecularEvent>, DatasetError> {
    if cap == 0 {
        return Err(DatasetError::ZeroCap);
    }
    let mut strata: BTreeMap<Stratum, Vec<usize>> = BTreeMap::new();
    for (k, e) in events.iter().enumerate() {
        let stratum = Stratum {
            formula: e.formula.clone(),
            bin: bins.index(e.duration_ps)?,
        };
        strata.entry(stratum).or_default().push(k);
    }
    let mut keep = vec![false; events.len()];
    for (stratum, members) in &strata {
        if members.len() <= cap {
            for &k in members {
                keep[k] = true;
            }
            continue;
        }
        // one stream per stratum so that changing one cell leaves the
        // others' selections untouched
        let mut rng = seed::derived_rng(seed, &format!("balance/{}/{}", stratum.formula, stratum.bin));
        for pick in index::sample(&mut rng, members.len(), cap) {
            keep[members[pick]] = true;
        }
    }
    Ok(events
        .iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(e, _)| e.clone())
        .collect())
}
