use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DatasetError, PredictionSample, Split, Step, Task};

const SYSTEM: &str = include_str!("../../templates/system.txt");
const FORWARD_1: &str = include_str!("../../templates/forward_1.txt");
const FORWARD_2: &str = include_str!("../../templates/forward_2.txt");
const BACKWARD: &str = include_str!("../../templates/backward.txt");
const REASONING_SYSTEM: &str = include_str!("../../templates/reasoning_system.txt");
const REASONING_INSTRUCTION: &str = include_str!("../../templates/reasoning_instruction.txt");

const HISTORY_SLOT: &str = "{SEQUENCE_HISTORY}";

/// Prompt texts. The built-in set is compiled in and checked against
/// pinned digests by the build script.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemplateSet {
    pub system: String,
    pub forward_1: String,
    pub forward_2: String,
    pub backward: String,
    pub reasoning_system: String,
    pub reasoning_instruction: String,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}

impl TemplateSet {
    pub fn builtin() -> Self {
        Self {
            system: SYSTEM.to_owned(),
            forward_1: FORWARD_1.to_owned(),
            forward_2: FORWARD_2.to_owned(),
            backward: BACKWARD.to_owned(),
            reasoning_system: REASONING_SYSTEM.to_owned(),
            reasoning_instruction: REASONING_INSTRUCTION.to_owned(),
        }
    }

    /// Instruction template for `task`. Potential-k reuses the one-step
    /// forward wording; candidates are ranked by the model, not the prompt.
    pub fn instruction(&self, task: Task) -> &str {
        match task {
            Task::Forward1 | Task::PotentialK => &self.forward_1,
            Task::Forward2 => &self.forward_2,
            Task::Backward => &self.backward,
        }
    }

    pub fn named(&self) -> [(&'static str, &str); 6] {
        [
            ("backward", &self.backward),
            ("forward_1", &self.forward_1),
            ("forward_2", &self.forward_2),
            ("reasoning_instruction", &self.reasoning_instruction),
            ("reasoning_system", &self.reasoning_system),
            ("system", &self.system),
        ]
    }

    /// Hex SHA-256 of every template.
    pub fn hashes(&self) -> BTreeMap<String, String> {
        self.named()
            .iter()
            .map(|(name, text)| ((*name).to_owned(), hex::encode(Sha256::digest(text.as_bytes()))))
            .collect()
    }

    /// Fills the explanation prompt for one prediction.
    pub fn reasoning_prompt(&self, history: &[Step], prediction: &Step) -> String {
        self.reasoning_instruction
            .replace("{history_seq}", &render_history(history))
            .replace(
                "{predict_res}",
                &format!("{}, {}", prediction.formula, prediction.duration_ps),
            )
            .replace("{duration}", &format!("{} ps", prediction.duration_ps))
    }
}

/// `(MoO,98); (MoOS2,3); (MoS,182)`
pub fn render_history(history: &[Step]) -> String {
    history
        .iter()
        .map(|s| format!("({},{})", s.formula, s.duration_ps))
        .collect::<Vec<_>>()
        .join("; ")
}

/// `(MoS3, 106)`, with several targets joined by `; `.
pub fn render_output(targets: &[Step]) -> String {
    targets
        .iter()
        .map(|s| format!("({}, {})", s.formula, s.duration_ps))
        .collect::<Vec<_>>()
        .join("; ")
}

/// One line of `dataset.jsonl`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub task: Task,
    pub split: Split,
    pub trajectory_id: String,
    pub system: String,
    pub instruction: String,
    pub output: String,
    pub history: Vec<Step>,
    pub targets: Vec<Step>,
    pub sample_id: String,
}

pub fn format_instructions(
    samples: &[PredictionSample],
    templates: &TemplateSet,
) -> Result<Vec<DatasetRecord>, DatasetError> {
    samples
        .iter()
        .map(|s| {
            if s.history.is_empty() {
                return Err(DatasetError::EmptyHistory {
                    sample_id: s.sample_id.clone(),
                });
            }
            if s.targets.len() != s.task.target_len() {
                return Err(DatasetError::TargetCount {
                    sample_id: s.sample_id.clone(),
                    task: s.task,
                    expected: s.task.target_len(),
                    found: s.targets.len(),
                });
            }
            let split = s.split.ok_or_else(|| DatasetError::Unsplit {
                sample_id: s.sample_id.clone(),
            })?;
            Ok(DatasetRecord {
                task: s.task,
                split,
                trajectory_id: s.trajectory_id.clone(),
                system: templates.system.clone(),
                instruction: templates
                    .instruction(s.task)
                    .replace(HISTORY_SLOT, &render_history(&s.history)),
                output: render_output(&s.targets),
                history: s.history.clone(),
                targets: s.targets.clone(),
                sample_id: s.sample_id.clone(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(f: &str, d: u64) -> Step {
        Step::new(f.parse().unwrap(), d)
    }

    fn sample(task: Task, history: Vec<Step>, targets: Vec<Step>) -> PredictionSample {
        PredictionSample {
            sample_id: "t/0/x/0".into(),
            task,
            trajectory_id: "t".into(),
            lineage_id: 0,
            history,
            targets,
            split: Some(Split::Test),
        }
    }

    #[test]
    fn case_one_renders_like_the_published_example() {
        let s = sample(
            Task::Forward1,
            vec![step("MoO", 98), step("MoOS2", 3), step("MoS", 182)],
            vec![step("MoS3", 106)],
        );
        let rec = &format_instructions(&[s], &TemplateSet::builtin()).unwrap()[0];
        assert_eq!(
            rec.instruction,
            "The history sequence is (MoO,98); (MoOS2,3); (MoS,182), What is the next element? \
             Output ONLY the next element in the format: (molecule, time). No explanation. \
             No code. No extra words!"
        );
        assert_eq!(rec.output, "(MoS3, 106)");
        assert!(rec.system.starts_with("You are an AI assistant to help me predict"));
    }

    #[test]
    fn forward2_output_joins_targets() {
        let s = sample(
            Task::Forward2,
            vec![step("MoO", 98)],
            vec![step("MoS3", 106), step("MoS4", 20)],
        );
        let rec = &format_instructions(&[s], &TemplateSet::builtin()).unwrap()[0];
        assert_eq!(rec.output, "(MoS3, 106); (MoS4, 20)");
        assert!(rec.instruction.contains("What are the next two elements?"));
    }

    #[test]
    fn rejects_empty_history_and_unsplit_samples() {
        let t = TemplateSet::builtin();
        let empty = sample(Task::Forward1, vec![], vec![step("MoS", 1)]);
        assert!(matches!(
            format_instructions(&[empty], &t),
            Err(DatasetError::EmptyHistory { .. })
        ));
        let mut unsplit = sample(Task::Backward, vec![step("MoS", 1)], vec![step("MoO", 1)]);
        unsplit.split = None;
        assert!(matches!(
            format_instructions(&[unsplit], &t),
            Err(DatasetError::Unsplit { .. })
        ));
    }

    #[test]
    fn hashes_cover_every_template() {
        let h = TemplateSet::builtin().hashes();
        assert_eq!(h.len(), 6);
        assert_eq!(
            h["system"],
            "17950d7616895decc8742fe756227e531438760840b6373d867d0deb593f7549"
        );
    }

    #[test]
    fn reasoning_prompt_fills_all_slots() {
        let t = TemplateSet::builtin();
        let p = t.reasoning_prompt(&[step("MoO", 98), step("MoS", 182)], &step("MoS3", 106));
        assert!(p.contains("History Sequence: (MoO,98); (MoS,182)"));
        assert!(p.contains("Your Model Prediction: (MoS3, 106)"));
        assert!(p.contains("predicted duration (106 ps)"));
        assert!(!p.contains('{'));
    }
}
