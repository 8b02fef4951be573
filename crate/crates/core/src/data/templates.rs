//! Prompt/target templates for grounding, dense captioning and multiple
//! choice QA.

use rand::seq::IndexedRandom;
use rand::Rng;

use super::Task;
use crate::error::invalid;
use crate::Result;

pub const TG_PROMPTS: [&str; 4] = [
    "During which frames does {q} happen?",
    "When does {q} happen in the video?",
    "Find the moment when {q}.",
    "Locate the frames in which {q}.",
];

pub const DVC_PROMPTS: [&str; 3] = [
    "Describe the events in the video. Each sentence should begin with the timestamps.",
    "List every event in the video and begin each sentence with its timestamps.",
    "Give a dense caption of the video with each sentence starting with the timestamps.",
];

pub const VQA_PROMPTS: [&str; 3] = [
    "Which of these happens in the video? Options: {options}. Answer with the option text.",
    "What happens in the video? Options: {options}. Answer with the option text.",
    "Pick the event shown in the video. Options: {options}. Answer with the option text.",
];

/// Target of the text-timestamp variant, which names frames instead of
/// emitting `<LOC>`.
pub const TIMESTAMP_TARGET: &str = "From {s} to {e}.";

#[derive(Debug, Clone, PartialEq)]
pub enum TemplateFields {
    Grounding { query: String },
    Captioning { phrases: Vec<String> },
    Choice { options: Vec<String>, answer: usize },
}

/// Picks a paraphrase and fills it. Targets use `<LOC>` placeholders for
/// grounding and captioning, and the answer text for QA.
pub fn render_template(task: Task, fields: &TemplateFields, rng: &mut impl Rng) -> Result<(String, String)> {
    match (task, fields) {
        (Task::Tg, TemplateFields::Grounding { query }) => {
            let t = TG_PROMPTS.choose(rng).expect("non-empty");
            Ok((t.replace("{q}", query), "During <LOC>.".to_string()))
        }
        (Task::Dvc, TemplateFields::Captioning { phrases }) => {
            if phrases.is_empty() {
                return Err(invalid!("captioning needs at least one event"));
            }
            let t = DVC_PROMPTS.choose(rng).expect("non-empty");
            let target: Vec<String> = phrases.iter().map(|p| format!("During <LOC>, {p}.")).collect();
            Ok((t.to_string(), target.join(" ")))
        }
        (Task::Vqa, TemplateFields::Choice { options, answer }) => {
            let a = options
                .get(*answer)
                .ok_or_else(|| invalid!("answer index {answer} outside {} options", options.len()))?;
            let t = VQA_PROMPTS.choose(rng).expect("non-empty");
            let opts: Vec<String> = options
                .iter()
                .enumerate()
                .map(|(i, o)| format!("({}) {o}", (b'A' + i as u8) as char))
                .collect();
            Ok((t.replace("{options}", &opts.join(" ")), format!("{a}.")))
        }
        (task, _) => Err(invalid!("template fields do not match task {task:?}")),
    }
}

pub fn timestamp_target(start: usize, end: usize) -> String {
    TIMESTAMP_TARGET
        .replace("{s}", &start.to_string())
        .replace("{e}", &end.to_string())
}
