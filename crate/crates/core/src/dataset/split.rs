use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{DatasetError, PredictionSample, Split};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitOutcome {
    pub train: Vec<PredictionSample>,
    pub test: Vec<PredictionSample>,
    pub report: SplitReport,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitReport {
    pub train_trajectories: Vec<String>,
    pub test_trajectories: Vec<String>,
    /// Test windows dropped because an identical window exists in train.
    pub dropped_duplicates: usize,
}

/// Serialized `(history, targets)` of a sample; two samples with equal keys
/// present the same window to a model.
pub fn window_key(sample: &PredictionSample) -> String {
    serde_json::to_string(&(&sample.history, &sample.targets)).expect("steps always serialize")
}

/// Assigns whole trajectories to train or test. The test side receives
/// `round(test_fraction * n)` trajectories, clamped so both sides are
/// nonempty. Test windows whose serialized content also occurs in train are
/// dropped.
pub fn split_disjoint(
    samples: Vec<PredictionSample>,
    test_fraction: f64,
    seed: u64,
) -> Result<SplitOutcome, DatasetError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DatasetError::InvalidFraction(test_fraction));
    }
    let ids: BTreeSet<&str> = samples.iter().map(|s| s.trajectory_id.as_str()).collect();
    if ids.len() < 2 {
        return Err(DatasetError::TooFewTrajectories { found: ids.len() });
    }
    let mut ids: Vec<String> = ids.into_iter().map(str::to_owned).collect();
    let n = ids.len();
    let n_test = ((test_fraction * n as f64).round() as usize).clamp(1, n - 1);
    ids.shuffle(&mut seed::derived_rng(seed, "split"));
    let mut test_ids: Vec<String> = ids[..n_test].to_vec();
    let mut train_ids: Vec<String> = ids[n_test..].to_vec();
    test_ids.sort();
    train_ids.sort();
    let test_set: HashSet<&str> = test_ids.iter().map(String::as_str).collect();

    let (mut test, mut train): (Vec<_>, Vec<_>) = samples
        .into_iter()
        .partition(|s| test_set.contains(s.trajectory_id.as_str()));
    let train_keys: HashSet<String> = train.iter().map(window_key).collect();
    let before = test.len();
    test.retain(|s| !train_keys.contains(&window_key(s)));
    let dropped_duplicates = before - test.len();

    for s in &mut train {
        s.split = Some(Split::Train);
    }
    for s in &mut test {
        s.split = Some(Split::Test);
    }
    Ok(SplitOutcome {
        train,
        test,
        report: SplitReport {
            train_trajectories: train_ids,
            test_trajectories: test_ids,
            dropped_duplicates,
        },
    })
}
