//! Prompt templates with named slots.
//!
//! A template is plain text containing `{slot}` placeholders. Construction
//! validates that every required slot appears exactly once, so a malformed
//! template file fails loudly at load time instead of producing a silently
//! truncated prompt. Filling is a single pass over the original text, which
//! keeps slot values containing braces (LaTeX, JSON) from being re-expanded.

use std::path::Path;
use thiserror::Error;

/// Default prompt for sampling a step-by-step solution. Slot: `{question}`.
pub const DEFAULT_SOLVE: &str = include_str!("../templates/solve.txt");
/// Default prompt for verifying a candidate solution. Slots: `{question}`, `{solution}`.
pub const DEFAULT_VERIFY: &str = include_str!("../templates/verify.txt");
/// Verification prompt carrying the mock-backend mode marker. Same slots as
/// [`DEFAULT_VERIFY`]; use with the stochastic mock in tests.
pub const DEFAULT_VERIFY_MOCK: &str = include_str!("../templates/verify_mock.txt");
/// Default prompt for model-based answer extraction. Slot: `{response}`.
pub const DEFAULT_EXTRACT: &str = include_str!("../templates/extract.txt");
/// Default prompt for text-only solving from a figure description.
/// Slots: `{description}`, `{question}`.
pub const DEFAULT_BRIDGE: &str = include_str!("../templates/bridge.txt");
/// Default prompt for self-scoring a partial solution. Slots: `{question}`, `{solution}`.
pub const DEFAULT_CRITIQUE: &str = include_str!("../templates/critique.txt");
/// Self-scoring prompt carrying the mock-backend mode marker.
pub const DEFAULT_CRITIQUE_MOCK: &str = include_str!("../templates/critique_mock.txt");

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("template is missing required slot {{{slot}}}")]
    MissingSlot { slot: String },
    #[error("template contains slot {{{slot}}} {count} times, expected exactly once")]
    DuplicateSlot { slot: String, count: usize },
    #[error("failed to read template file: {0}")]
    Io(#[from] std::io::Error),
}

/// A validated prompt template with a fixed set of required slots.
#[derive(Debug, Clone)]
pub struct PromptTemplate {
    text: String,
    slots: Vec<String>,
}

impl PromptTemplate {
    /// Validates that `text` contains each slot in `slots` exactly once.
    pub fn new(text: impl Into<String>, slots: &[&str]) -> Result<Self, TemplateError> {
        let text = text.into();
        for slot in slots {
            let needle = format!("{{{slot}}}");
            let count = text.matches(&needle).count();
            if count == 0 {
                return Err(TemplateError::MissingSlot {
                    slot: slot.to_string(),
                });
            }
            if count > 1 {
                return Err(TemplateError::DuplicateSlot {
                    slot: slot.to_string(),
                    count,
                });
            }
        }
        Ok(Self {
            text,
            slots: slots.iter().map(|s| s.to_string()).collect(),
        })
    }

    /// Loads a template from a file and validates its slots.
    pub fn from_file(path: &Path, slots: &[&str]) -> Result<Self, TemplateError> {
        Self::new(std::fs::read_to_string(path)?, slots)
    }

    /// Substitutes slot values in one pass over the original text.
    ///
    /// `values` must provide every slot the template was constructed with;
    /// a missing value is a programming error and panics.
    pub fn fill(&self, values: &[(&str, &str)]) -> String {
        // Locate each slot in the original text, then splice left to right so
        // substituted values are never rescanned.
        let mut sites: Vec<(usize, usize, &str)> = self
            .slots
            .iter()
            .map(|slot| {
                let needle = format!("{{{slot}}}");
                let start = self.text.find(&needle).expect("slot validated at construction");
                let value = values
                    .iter()
                    .find(|(name, _)| name == slot)
                    .unwrap_or_else(|| panic!("no value supplied for slot {{{slot}}}"))
                    .1;
                (start, needle.len(), value)
            })
            .collect();
        sites.sort_by_key(|&(start, _, _)| start);

        let mut out = String::with_capacity(self.text.len());
        let mut cursor = 0;
        for (start, len, value) in sites {
            out.push_str(&self.text[cursor..start]);
            out.push_str(value);
            cursor = start + len;
        }
        out.push_str(&self.text[cursor..]);
        out
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn slots(&self) -> &[String] {
        &self.slots
    }
}
