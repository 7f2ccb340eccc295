//! Fill-in-the-blank explanation sentences.
//!
//! Each scenario has a fixed template with `{class}` and `{objects}` slots.
//! Object lists are deduplicated in first-occurrence order and joined as
//! "the A", "the A and the B", "the A, the B, and the C".

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::Scenario;

pub const CLASS_SLOT: &str = "{class}";
pub const OBJECTS_SLOT: &str = "{objects}";

pub const DEFAULT_SCENARIO1: &str =
    "This image was classified as {class} because the model focused on {objects}.";
pub const DEFAULT_SCENARIO2: &str =
    "The original prediction was not reliable, so the image was relabeled as {class} based on {objects} detected in the scene.";
pub const DEFAULT_SCENARIO3: &str =
    "The prediction {class} is not reliable, and no objects were detected to support or correct it.";
pub const DEFAULT_UNSUPPORTED: &str =
    "This image was classified as {class}, but no detected object was found in the regions the model focused on.";

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("template for {which} must contain {slot}")]
    MissingSlot {
        which: &'static str,
        slot: &'static str,
    },
    #[error("template for {which} must not contain {slot}")]
    UnexpectedSlot {
        which: &'static str,
        slot: &'static str,
    },
    #[error("scenario {0} needs at least one object to render")]
    EmptyObjectList(u8),
    #[error("{path}: {message}")]
    File { path: String, message: String },
}

/// Sentence templates, one per scenario.
///
/// `unsupported` covers a confident prediction for which no object passed
/// validation; it takes `{class}` only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateSet {
    pub scenario1: String,
    pub scenario2: String,
    pub scenario3: String,
    #[serde(default = "default_unsupported")]
    pub unsupported: String,
    /// Article placed before every listed object.
    #[serde(default = "default_article")]
    pub article: String,
    /// Render repeated objects once as "k ×label" instead of once as "label".
    #[serde(default)]
    pub count_multiplicities: bool,
}

fn default_unsupported() -> String {
    DEFAULT_UNSUPPORTED.to_string()
}

fn default_article() -> String {
    "the".to_string()
}

impl Default for TemplateSet {
    fn default() -> Self {
        TemplateSet {
            scenario1: DEFAULT_SCENARIO1.to_string(),
            scenario2: DEFAULT_SCENARIO2.to_string(),
            scenario3: DEFAULT_SCENARIO3.to_string(),
            unsupported: default_unsupported(),
            article: default_article(),
            count_multiplicities: false,
        }
    }
}

impl TemplateSet {
    pub fn with_counts(mut self, on: bool) -> Self {
        self.count_multiplicities = on;
        self
    }

    pub fn validate(&self) -> Result<(), TemplateError> {
        for (which, t) in [
            ("scenario1", &self.scenario1),
            ("scenario2", &self.scenario2),
        ] {
            for slot in [CLASS_SLOT, OBJECTS_SLOT] {
                if !t.contains(slot) {
                    return Err(TemplateError::MissingSlot { which, slot });
                }
            }
        }
        for (which, t) in [
            ("scenario3", &self.scenario3),
            ("unsupported", &self.unsupported),
        ] {
            if !t.contains(CLASS_SLOT) {
                return Err(TemplateError::MissingSlot {
                    which,
                    slot: CLASS_SLOT,
                });
            }
            if t.contains(OBJECTS_SLOT) {
                return Err(TemplateError::UnexpectedSlot {
                    which,
                    slot: OBJECTS_SLOT,
                });
            }
        }
        Ok(())
    }

    /// Parses a template file: `{"scenario1": .., "scenario2": .., "scenario3": ..}`.
    pub fn from_json(text: &str) -> Result<Self, TemplateError> {
        let set: TemplateSet = serde_json::from_str(text).map_err(|e| TemplateError::File {
            path: "<memory>".into(),
            message: e.to_string(),
        })?;
        set.validate()?;
        Ok(set)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TemplateError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| TemplateError::File {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        TemplateSet::from_json(&text).map_err(|e| match e {
            TemplateError::File { message, .. } => TemplateError::File {
                path: path.display().to_string(),
                message,
            },
            other => other,
        })
    }

    /// Renders the sentence for a scenario, final label and object list.
    pub fn render<S: AsRef<str>>(
        &self,
        scenario: Scenario,
        class: &str,
        objects: &[S],
    ) -> Result<String, TemplateError> {
        let template = match scenario {
            Scenario::Confident if objects.is_empty() => &self.unsupported,
            Scenario::Confident => &self.scenario1,
            Scenario::Corrected => &self.scenario2,
            Scenario::Unreliable => &self.scenario3,
        };
        if template.contains(OBJECTS_SLOT) && objects.is_empty() {
            return Err(TemplateError::EmptyObjectList(scenario.number()));
        }
        Ok(fill_slots(template, class, &self.format_objects(objects)))
    }

    /// "the A", "the A and the B", "the A, the B, and the C".
    pub fn format_objects<S: AsRef<str>>(&self, objects: &[S]) -> String {
        let items: Vec<String> = dedup_with_counts(objects)
            .into_iter()
            .map(|(label, n)| {
                let body = if self.count_multiplicities && n > 1 {
                    format!("{n} \u{d7}{label}")
                } else {
                    label.to_string()
                };
                if self.article.is_empty() {
                    body
                } else {
                    format!("{} {body}", self.article)
                }
            })
            .collect();
        join_english(&items)
    }
}

/// Substitutes both slots in one left-to-right pass, so slot text inside a
/// label or class name is never expanded again.
fn fill_slots(template: &str, class: &str, objects: &str) -> String {
    let mut out = String::with_capacity(template.len() + class.len() + objects.len());
    let mut rest = template;
    loop {
        let next = [(CLASS_SLOT, class), (OBJECTS_SLOT, objects)]
            .into_iter()
            .filter_map(|(slot, value)| rest.find(slot).map(|at| (at, slot, value)))
            .min_by_key(|(at, _, _)| *at);
        match next {
            Some((at, slot, value)) => {
                out.push_str(&rest[..at]);
                out.push_str(value);
                rest = &rest[at + slot.len()..];
            }
            None => {
                out.push_str(rest);
                return out;
            }
        }
    }
}

fn dedup_with_counts<S: AsRef<str>>(objects: &[S]) -> Vec<(&str, usize)> {
    let mut out: Vec<(&str, usize)> = Vec::new();
    for o in objects {
        let o = o.as_ref();
        match out.iter_mut().find(|(l, _)| *l == o) {
            Some((_, n)) => *n += 1,
            None => out.push((o, 1)),
        }
    }
    out
}

fn join_english(items: &[String]) -> String {
    match items {
        [] => String::new(),
        [one] => one.clone(),
        [a, b] => format!("{a} and {b}"),
        [init @ .., last] => format!("{}, and {last}", init.join(", ")),
    }
}
