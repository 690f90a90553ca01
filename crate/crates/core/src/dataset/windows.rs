use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{HistoryRange, PredictionSample, Step, Task};
use crate::event_stream::EventSequence;
use crate::seed;

/// Sequences too short to yield a single window.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipReport {
    pub sequences_used: usize,
    pub sequences_skipped: usize,
    pub events_in_skipped: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Window {
    pub trajectory_id: String,
    pub lineage_id: u64,
    /// Index of the first history event in its sequence.
    pub start: usize,
    pub history: Vec<Step>,
    pub targets: Vec<Step>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowOutcome<T> {
    pub windows: Vec<T>,
    pub skipped: SkipReport,
}

fn windows_of<R: Rng>(
    seq: &EventSequence,
    target_len: usize,
    backward: bool,
    range: HistoryRange,
    rng: &mut R,
) -> Vec<Window> {
    let n = seq.events.len();
    let steps: Vec<Step> = seq.events.iter().map(Step::from).collect();
    let mut out = Vec::new();
    let mut start = usize::from(backward) * target_len;
    loop {
        // longest history that still leaves room for the targets
        let room = if backward {
            n.saturating_sub(start)
        } else {
            n.saturating_sub(start + target_len)
        };
        if room < range.min() {
            break;
        }
        let h = rng.random_range(range.min()..=range.max()).min(room);
        let history = steps[start..start + h].to_vec();
        let targets = if backward {
            steps[start - target_len..start].to_vec()
        } else {
            steps[start + h..start + h + target_len].to_vec()
        };
        out.push(Window {
            trajectory_id: seq.trajectory_id.clone(),
            lineage_id: seq.lineage_id,
            start,
            history,
            targets,
        });
        start += 1;
    }
    out
}

/// Stride-1 sliding windows over every sequence. Each window draws its
/// history length uniformly from `range`, shortened where the sequence end
/// leaves less room. Backward windows take the `target_len` events just
/// before the history as targets. Randomness is derived per sequence from
/// `seed` and `label`, so results do not depend on thread scheduling.
pub fn slide_windows(
    sequences: &[EventSequence],
    target_len: usize,
    backward: bool,
    range: HistoryRange,
    seed: u64,
    label: &str,
) -> WindowOutcome<Window> {
    let per_sequence: Vec<Vec<Window>> = sequences
        .par_iter()
        .map(|seq| {
            let mut rng = seed::derived_rng(
                seed,
                &format!("windows/{}/{}/{}", seq.trajectory_id, seq.lineage_id, label),
            );
            windows_of(seq, target_len, backward, range, &mut rng)
        })
        .collect();
    let mut skipped = SkipReport::default();
    let mut windows = Vec::new();
    for (seq, w) in sequences.iter().zip(per_sequence) {
        if w.is_empty() {
            skipped.sequences_skipped += 1;
            skipped.events_in_skipped += seq.events.len();
        } else {
            skipped.sequences_used += 1;
        }
        windows.extend(w);
    }
    WindowOutcome { windows, skipped }
}

/// Prediction samples for `task`. Potential-k samples share the forward
/// one-step geometry.
pub fn build_windows(
    sequences: &[EventSequence],
    task: Task,
    range: HistoryRange,
    seed: u64,
) -> WindowOutcome<PredictionSample> {
    let outcome = slide_windows(
        sequences,
        task.target_len(),
        task.is_backward(),
        range,
        seed,
        task.as_str(),
    );
    let windows = outcome
        .windows
        .into_iter()
        .map(|w| PredictionSample {
            sample_id: format!("{}/{}/{}/{}", w.trajectory_id, w.lineage_id, task, w.start),
            task,
            trajectory_id: w.trajectory_id,
            lineage_id: w.lineage_id,
            history: w.history,
            targets: w.targets,
            split: None,
        })
        .collect();
    WindowOutcome {
        windows,
        skipped: outcome.skipped,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event_stream::MolecularEvent;
    use proptest::prelude::*;

    const NAMES: [&str; 6] = ["MoO", "MoS", "MoS2", "MoS3", "MoOS2", "Mo2S7"];

    fn sequence(lineage: u64, n: usize) -> EventSequence {
        EventSequence {
            trajectory_id: "t".into(),
            lineage_id: lineage,
            events: (0..n)
                .map(|k| MolecularEvent {
                    trajectory_id: "t".into(),
                    lineage_id: lineage,
                    formula: NAMES[k % NAMES.len()].parse().unwrap(),
                    start_ps: 100 * k as u64,
                    duration_ps: 10 + k as u64,
                })
                .collect(),
        }
    }

    fn names(steps: &[Step]) -> Vec<u64> {
        steps.iter().map(|s| s.duration_ps - 10).collect()
    }

    #[test]
    fn forward_windows_slide_by_one() {
        let out = build_windows(&[sequence(0, 6)], Task::Forward1, HistoryRange::fixed(3).unwrap(), 1);
        let got: Vec<(Vec<u64>, Vec<u64>)> = out
            .windows
            .iter()
            .map(|s| (names(&s.history), names(&s.targets)))
            .collect();
        assert_eq!(
            got,
            vec![
                (vec![0, 1, 2], vec![3]),
                (vec![1, 2, 3], vec![4]),
                (vec![2, 3, 4], vec![5]),
            ]
        );
        assert_eq!(out.windows[0].sample_id, "t/0/forward_1/0");
    }

    #[test]
    fn backward_windows_target_the_preceding_event() {
        let out = build_windows(&[sequence(0, 6)], Task::Backward, HistoryRange::fixed(3).unwrap(), 1);
        let got: Vec<(Vec<u64>, Vec<u64>)> = out
            .windows
            .iter()
            .map(|s| (names(&s.history), names(&s.targets)))
            .collect();
        assert_eq!(
            got,
            vec![
                (vec![1, 2, 3], vec![0]),
                (vec![2, 3, 4], vec![1]),
                (vec![3, 4, 5], vec![2]),
            ]
        );
    }

    #[test]
    fn forward2_takes_two_targets() {
        let out = build_windows(&[sequence(0, 5)], Task::Forward2, HistoryRange::fixed(3).unwrap(), 1);
        assert_eq!(out.windows.len(), 1);
        assert_eq!(names(&out.windows[0].targets), vec![3, 4]);
    }

    #[test]
    fn short_sequences_are_reported() {
        let seqs = [sequence(0, 3), sequence(1, 6)];
        let out = build_windows(&seqs, Task::Forward1, HistoryRange::default(), 9);
        assert_eq!(out.skipped.sequences_skipped, 1);
        assert_eq!(out.skipped.events_in_skipped, 3);
        assert_eq!(out.skipped.sequences_used, 1);
        assert!(out.windows.iter().all(|s| s.lineage_id == 1));
    }

    #[test]
    fn history_lengths_stay_in_range() {
        let out = build_windows(&[sequence(0, 200)], Task::Forward1, HistoryRange::default(), 4);
        let mut seen = [false; 6];
        for s in &out.windows {
            assert!((3..=5).contains(&s.history.len()));
            seen[s.history.len()] = true;
        }
        assert!(seen[3] && seen[4] && seen[5]);
    }

    proptest! {
        #[test]
        fn window_count_matches_closed_form(
            lengths in proptest::collection::vec(0usize..30, 1..20),
            h in 1usize..6,
            task_idx in 0usize..4,
        ) {
            let task = Task::ALL[task_idx];
            let seqs: Vec<_> = lengths.iter().enumerate().map(|(k, &n)| sequence(k as u64, n)).collect();
            let out = build_windows(&seqs, task, HistoryRange::fixed(h).unwrap(), 0);
            let t = task.target_len();
            let expected: usize = lengths.iter().map(|&n| (n + 1).saturating_sub(h + t)).sum();
            prop_assert_eq!(out.windows.len(), expected);
        }

        #[test]
        fn targets_are_adjacent_to_history(lengths in proptest::collection::vec(0usize..30, 1..10), seed in any::<u64>()) {
            let seqs: Vec<_> = lengths.iter().enumerate().map(|(k, &n)| sequence(k as u64, n)).collect();
            for task in Task::ALL {
                for s in build_windows(&seqs, task, HistoryRange::default(), seed).windows {
                    let seq = &seqs[s.lineage_id as usize].events;
                    let pos = |step: &Step| seq.iter().position(|e| e.duration_ps == step.duration_ps).unwrap();
                    let first = pos(&s.history[0]);
                    let last = pos(s.history.last().unwrap());
                    prop_assert_eq!(last + 1 - first, s.history.len());
                    if task.is_backward() {
                        prop_assert_eq!(pos(&s.targets[0]) + 1, first);
                    } else {
                        prop_assert_eq!(pos(&s.targets[0]), last + 1);
                    }
                }
            }
        }

        #[test]
        fn windows_are_deterministic(seed in any::<u64>()) {
            let seqs: Vec<_> = (0..5).map(|k| sequence(k, 20)).collect();
            let a = build_windows(&seqs, Task::Forward1, HistoryRange::default(), seed);
            let b = build_windows(&seqs, Task::Forward1, HistoryRange::default(), seed);
            prop_assert_eq!(a, b);
        }
    }
}
