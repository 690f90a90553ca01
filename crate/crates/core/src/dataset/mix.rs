use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use super::{DatasetError, DatasetRecord};
use crate::seed;

/// Minimal instruction-tuning record, the shape of operator-supplied Q&A.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub system: String,
    pub instruction: String,
    pub output: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MixedRecord {
    Forecast(DatasetRecord),
    Qa(InstructionRecord),
}

/// Adds `round(ratio * forecast.len())` Q&A records drawn without
/// replacement and shuffles the union. Forecast records pass through
/// unchanged.
pub fn interleave_qa(
    forecast: Vec<DatasetRecord>,
    qa: Vec<InstructionRecord>,
    ratio: f64,
    seed: u64,
) -> Result<Vec<MixedRecord>, DatasetError> {
    if !ratio.is_finite() || ratio < 0.0 {
        return Err(DatasetError::InvalidRatio(ratio));
    }
    let needed = (ratio * forecast.len() as f64).round() as usize;
    if needed > qa.len() {
        return Err(DatasetError::RatioUnattainable {
            requested: ratio,
            needed,
            available: qa.len(),
            max_ratio: if forecast.is_empty() {
                0.0
            } else {
                qa.len() as f64 / forecast.len() as f64
            },
        });
    }
    let mut rng = seed::derived_rng(seed, "mix");
    let mut picks = index::sample(&mut rng, qa.len(), needed).into_vec();
    picks.sort_unstable();
    let mut qa: Vec<Option<InstructionRecord>> = qa.into_iter().map(Some).collect();
    let mut out: Vec<MixedRecord> = forecast.into_iter().map(MixedRecord::Forecast).collect();
    out.extend(
        picks
            .into_iter()
            .map(|k| MixedRecord::Qa(qa[k].take().expect("indices are distinct"))),
    );
    out.shuffle(&mut rng);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Split, Step, Task};

    fn forecast(k: usize) -> DatasetRecord {
        DatasetRecord {
            task: Task::Forward1,
            split: Split::Train,
            trajectory_id: "t".into(),
            system: "s".into(),
            instruction: format!("i{k}"),
            output: "(MoS, 10)".into(),
            history: vec![Step::new("MoO".parse().unwrap(), 10)],
            targets: vec![Step::new("MoS".parse().unwrap(), 10)],
            sample_id: format!("t/0/forward_1/{k}"),
        }
    }

    fn qa(k: usize) -> InstructionRecord {
        InstructionRecord {
            system: "s".into(),
            instruction: format!("q{k}"),
            output: format!("a{k}"),
        }
    }

    #[test]
    fn published_mixture_size() {
        let f: Vec<_> = (0..7321).map(forecast).collect();
        let q: Vec<_> = (0..16000).map(qa).collect();
        let out = interleave_qa(f, q, 15_445.0 / 7_321.0, 1).unwrap();
        assert_eq!(out.len(), 22_766);
    }

    #[test]
    fn zero_ratio_keeps_forecast_only() {
        let out = interleave_qa((0..10).map(forecast).collect(), vec![qa(0)], 0.0, 3).unwrap();
        assert_eq!(out.len(), 10);
        assert!(out.iter().all(|r| matches!(r, MixedRecord::Forecast(_))));
    }

    #[test]
    fn forecast_multiset_is_preserved() {
        let f: Vec<_> = (0..50).map(forecast).collect();
        let out = interleave_qa(f.clone(), (0..200).map(qa).collect(), 2.5, 9).unwrap();
        let mut got: Vec<DatasetRecord> = out
            .into_iter()
            .filter_map(|r| match r {
                MixedRecord::Forecast(f) => Some(f),
                MixedRecord::Qa(_) => None,
            })
            .collect();
        got.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        let mut want = f;
        want.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        assert_eq!(got, want);
    }

    #[test]
    fn unattainable_ratio_reports_maximum() {
        let err = interleave_qa((0..10).map(forecast).collect(), (0..15).map(qa).collect(), 2.0, 1)
            .unwrap_err();
        match err {
            DatasetError::RatioUnattainable { max_ratio, needed, .. } => {
                assert_eq!(needed, 20);
                assert!((max_ratio - 1.5).abs() < 1e-12);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn mixed_records_round_trip_through_json() {
        let out = interleave_qa((0..5).map(forecast).collect(), (0..5).map(qa).collect(), 1.0, 2).unwrap();
        for r in &out {
            let json = serde_json::to_string(r).unwrap();
            assert_eq!(&serde_json::from_str::<MixedRecord>(&json).unwrap(), r);
        }
    }
}
