//! Text-bridge synthesis of reasoning data for diagram questions.
//!
//! Some corpora carry a textual description of each diagram alongside the
//! image. That description can stand in for the image: the question and
//! description are composed into a text-only prompt, a text reasoner answers
//! it, and attempts whose extracted answer matches the gold answer are kept.
//! Each kept record pairs the reasoning with the *original* question, image
//! included, so the output trains a model that sees the diagram even though
//! no image was ever shown to the reasoner that wrote the solution.
//!
//! The bridge prompt is text-only by construction; requests built here never
//! attach an image. An audit trail records every attempt, kept or not, by
//! content digest.

use crate::answers::{
    answers_equal, canonicalize, extract_answer, AnswerError, CanonicalAnswer, ExtractorConfig,
};
use crate::backend::{complete_batch, Backend, BackendError, GenerationRequest, Message};
use crate::corpus::{CorpusError, Question, SamplerParams, DIAGRAM_DESCRIPTION_KEY};
use crate::templates::{PromptTemplate, TemplateError, DEFAULT_BRIDGE};
use crate::util::{mix_seed, sha256_hex};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BridgeError {
    #[error("backend failure during {phase}: {source}")]
    Backend {
        phase: &'static str,
        #[source]
        source: BackendError,
    },
    #[error("question {id} has no {DIAGRAM_DESCRIPTION_KEY} field")]
    MissingDescription { id: String },
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("golden answer unusable for question {id}: {source}")]
    Answer {
        id: String,
        #[source]
        source: AnswerError,
    },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

/// A question paired with the diagram description that will stand in for
/// its image.
#[derive(Debug, Clone)]
pub struct BridgeItem {
    pub question: Question,
    pub description: String,
}

impl BridgeItem {
    /// Reads the description out of the question's extra fields.
    pub fn from_question(question: &Question) -> Result<Self, BridgeError> {
        let description = question
            .extra
            .get(DIAGRAM_DESCRIPTION_KEY)
            .and_then(|v| v.as_str())
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| BridgeError::MissingDescription {
                id: question.id.clone(),
            })?;
        Ok(Self {
            question: question.clone(),
            description: description.to_string(),
        })
    }
}

/// Renders the text-only prompt: description and question, no image.
pub fn compose_text_prompt(item: &BridgeItem, template: &PromptTemplate) -> String {
    template.fill(&[
        ("description", item.description.as_str()),
        ("question", item.question.prompt_text.as_str()),
    ])
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BridgeConfig {
    /// Reasoning attempts per question.
    pub attempts_per_question: usize,
    /// Prompt with `{description}` and `{question}` slots.
    pub bridge_template: String,
    pub sampler: SamplerParams,
    pub tolerance: f64,
    pub seed: u64,
    /// When true, questions without a description and failed calls are
    /// counted and skipped instead of aborting.
    pub continue_on_error: bool,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        Self {
            attempts_per_question: 4,
            bridge_template: DEFAULT_BRIDGE.to_string(),
            sampler: SamplerParams::default(),
            tolerance: crate::answers::DEFAULT_TOLERANCE,
            seed: 0,
            continue_on_error: false,
        }
    }
}

/// A kept training record: the original multimodal question paired with
/// text-bridged reasoning that reached the gold answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeKept {
    pub question_id: String,
    #[serde(rename = "prompt")]
    pub prompt_text: String,
    #[serde(rename = "image", default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    #[serde(rename = "gold")]
    pub golden_answer: String,
    #[serde(rename = "reasoning")]
    pub reasoning_text: String,
    #[serde(rename = "answer", default, skip_serializing_if = "Option::is_none")]
    pub extracted_answer: Option<CanonicalAnswer>,
    pub attempt_index: u32,
}

/// One row of the audit trail, emitted for every attempt.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BridgeAttempt {
    pub question_id: String,
    pub attempt_index: u32,
    pub matched: bool,
    #[serde(rename = "answer", default, skip_serializing_if = "Option::is_none")]
    pub extracted_answer: Option<CanonicalAnswer>,
    /// SHA-256 of the reasoning text; the text itself lives in the kept
    /// record when the attempt survived.
    pub reasoning_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct BridgeStats {
    pub questions: usize,
    pub attempts: usize,
    pub kept: usize,
    /// Questions with at least one kept attempt.
    pub questions_with_keep: usize,
    pub missing_description: usize,
    pub failed_attempts: usize,
}

#[derive(Debug, Clone)]
pub struct BridgeResult {
    pub kept: Vec<BridgeKept>,
    pub audit: Vec<BridgeAttempt>,
    pub stats: BridgeStats,
}

/// Runs the bridge over a question set. Only questions carrying a diagram
/// description participate; the reasoner never sees an image.
pub fn synthesize_bridge(
    reasoner: &dyn Backend,
    questions: &[Question],
    config: &BridgeConfig,
    extractor: &ExtractorConfig,
) -> Result<BridgeResult, BridgeError> {
    if config.attempts_per_question == 0 {
        return Err(BridgeError::InvalidConfig(
            "attempts_per_question must be >= 1".into(),
        ));
    }
    let template = PromptTemplate::new(&config.bridge_template, &["description", "question"])?;
    let mut stats = BridgeStats::default();
    let mut kept = Vec::new();
    let mut audit = Vec::new();
    for question in questions {
        stats.questions += 1;
        let item = match BridgeItem::from_question(question) {
            Ok(item) => item,
            Err(BridgeError::MissingDescription { .. }) if config.continue_on_error => {
                stats.missing_description += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let gold =
            canonicalize(&question.golden_answer).map_err(|source| BridgeError::Answer {
                id: question.id.clone(),
                source,
            })?;
        let prompt = compose_text_prompt(&item, &template);
        let requests: Vec<GenerationRequest> = (0..config.attempts_per_question)
            .map(|i| GenerationRequest {
                messages: vec![Message::user(prompt.clone())],
                max_new_tokens: config.sampler.max_new_tokens,
                temperature: config.sampler.temperature,
                top_k: config.sampler.top_k,
                repetition_penalty: config.sampler.repetition_penalty,
                num_samples: 1,
                seed: Some(mix_seed(
                    config.seed,
                    &["bridge", &question.id, &i.to_string()],
                )),
            })
            .collect();
        let mut any_kept = false;
        for (i, result) in complete_batch(reasoner, &requests).into_iter().enumerate() {
            stats.attempts += 1;
            let text = match result {
                Ok(response) => response.texts.into_iter().next().unwrap_or_default(),
                Err(e) if config.continue_on_error => {
                    stats.failed_attempts += 1;
                    audit.push(BridgeAttempt {
                        question_id: question.id.clone(),
                        attempt_index: i as u32,
                        matched: false,
                        extracted_answer: None,
                        reasoning_digest: String::new(),
                        error: Some(e.to_string()),
                    });
                    continue;
                }
                Err(e) => {
                    return Err(BridgeError::Backend {
                        phase: "bridge",
                        source: e,
                    })
                }
            };
            let extracted = extract_answer(&text, extractor);
            let matched = extracted
                .as_ref()
                .is_some_and(|a| answers_equal(a, &gold, config.tolerance));
            audit.push(BridgeAttempt {
                question_id: question.id.clone(),
                attempt_index: i as u32,
                matched,
                extracted_answer: extracted.clone(),
                reasoning_digest: sha256_hex(text.as_bytes()),
                error: None,
            });
            if matched {
                kept.push(BridgeKept {
                    question_id: question.id.clone(),
                    prompt_text: question.prompt_text.clone(),
                    image_ref: question.image_ref.clone(),
                    golden_answer: question.golden_answer.clone(),
                    reasoning_text: text,
                    extracted_answer: extracted,
                    attempt_index: i as u32,
                });
                stats.kept += 1;
                any_kept = true;
            }
        }
        if any_kept {
            stats.questions_with_keep += 1;
        }
    }
    Ok(BridgeResult { kept, audit, stats })
}

/// Draws nested subsets of `items` at the given fractions of the full set:
/// every smaller slice is contained in every larger one, because all slices
/// are prefixes of one seeded permutation. Within each slice the original
/// order is preserved. Fractions must lie in (0, 1].
pub fn nested_slices<T: Clone>(
    items: &[T],
    fractions: &[f64],
    seed: u64,
) -> Result<Vec<Vec<T>>, BridgeError> {
    for &f in fractions {
        if !(f > 0.0 && f <= 1.0) {
            return Err(BridgeError::InvalidConfig(format!(
                "slice fraction {f} outside (0, 1]"
            )));
        }
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut crate::util::rng_from_seed(mix_seed(seed, &["slices"])));
    let mut slices = Vec::with_capacity(fractions.len());
    for &f in fractions {
        let take = ((f * items.len() as f64).round() as usize).min(items.len());
        let mut picked: Vec<usize> = order[..take].to_vec();
        picked.sort_unstable();
        slices.push(picked.into_iter().map(|i| items[i].clone()).collect());
    }
    Ok(slices)
}
