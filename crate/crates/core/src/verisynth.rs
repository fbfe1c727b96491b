//! Two-stage synthesis of verification training data.
//!
//! Stage 1 produces, for every question, a batch of candidate solutions
//! (harvested from tree search or drawn directly), has a verifier judge each
//! one, and keeps only the records whose judgment agrees with ground truth:
//! a Correct verdict on a candidate whose answer matches the gold answer, or
//! an Incorrect verdict on one whose answer does not. The two signals are
//! always computed independently, the verdict from parsing the verifier's
//! reply and the match from comparing extracted answers, and a record must
//! win on both to survive.
//!
//! Stage 2 is rejection sampling: draw fresh solutions and keep those that
//! pass a filter, either a verifier's verdict or a plain gold-answer match
//! (the ablation that skips verifier training).
//!
//! Long stage-1 runs checkpoint per question to a JSONL file and resume by
//! skipping question ids already present in it.

use crate::answers::{
    answers_equal, canonicalize, extract_answer, parse_verdict_with, AnswerError, CanonicalAnswer,
    ExtractorConfig, Verdict, VerdictGrammar,
};
use crate::backend::{complete_batch, Backend, BackendError, GenerationRequest, Message};
use crate::corpus::{
    read_records, Candidate, CleanExample, Condition, CorpusError, Question, SamplerParams,
    SftRecord, SftTurn, VerificationRecord,
};
use crate::templates::{PromptTemplate, TemplateError, DEFAULT_SOLVE, DEFAULT_VERIFY};
use crate::treesearch::{run_search, SearchConfig, SearchError};
use crate::util::mix_seed;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VerisynthError {
    #[error("backend failure during {phase}: {source}")]
    Backend {
        phase: &'static str,
        #[source]
        source: BackendError,
    },
    #[error(transparent)]
    Search(#[from] SearchError),
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
    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

/// Where stage-1 candidate solutions come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RolloutSource {
    #[default]
    TreeSearch,
    DirectSampling,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Config {
    pub rollout_source: RolloutSource,
    /// Candidate solutions per question.
    pub candidates_per_question: usize,
    /// Search settings when `rollout_source` is tree search. The harvest
    /// size, seed, tolerance and error policy are overridden by the fields
    /// of this config so one knob governs the whole stage.
    pub search: SearchConfig,
    /// Solve prompt with a `{question}` slot, used for direct sampling.
    pub solve_template: String,
    /// Verification prompt with `{question}` and `{solution}` slots.
    pub verify_template: String,
    pub grammar: VerdictGrammar,
    /// Decode settings for direct sampling.
    pub sampler: SamplerParams,
    pub tolerance: f64,
    pub seed: u64,
    /// When true, failed generations are dropped and failed verifications
    /// become unparseable records instead of aborting the run.
    pub continue_on_error: bool,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            rollout_source: RolloutSource::default(),
            candidates_per_question: 8,
            search: SearchConfig::default(),
            solve_template: DEFAULT_SOLVE.to_string(),
            verify_template: DEFAULT_VERIFY.to_string(),
            grammar: VerdictGrammar::default(),
            sampler: SamplerParams::default(),
            tolerance: crate::answers::DEFAULT_TOLERANCE,
            seed: 0,
            continue_on_error: false,
        }
    }
}

/// Everything stage 1 produced for one question. Checkpoint files hold one
/// of these per line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuestionBatch {
    pub question: Question,
    pub candidates: Vec<Candidate>,
    pub records: Vec<VerificationRecord>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Stage1Stats {
    pub questions: usize,
    pub candidates: usize,
    pub correct_verdicts: usize,
    pub incorrect_verdicts: usize,
    pub unparseable_verdicts: usize,
    pub kept: usize,
    pub kept_confirmed_correct: usize,
    pub kept_confirmed_incorrect: usize,
    /// Questions restored from the checkpoint instead of recomputed.
    pub resumed: usize,
}

#[derive(Debug, Clone)]
pub struct Stage1Result {
    pub batches: Vec<QuestionBatch>,
    pub clean: Vec<CleanExample>,
    pub stats: Stage1Stats,
}

pub(crate) fn solve_message(
    template: &PromptTemplate,
    question: &Question,
) -> Message {
    let mut user = Message::user(template.fill(&[("question", &question.prompt_text)]));
    if let Some(image) = &question.image_ref {
        user = user.with_image(image.clone());
    }
    user
}

pub(crate) fn request_with_params(messages: Vec<Message>, sampler: &SamplerParams) -> GenerationRequest {
    GenerationRequest {
        messages,
        max_new_tokens: sampler.max_new_tokens,
        temperature: sampler.temperature,
        top_k: sampler.top_k,
        repetition_penalty: sampler.repetition_penalty,
        num_samples: 1,
        seed: None,
    }
}

/// Produces the candidate batch for one question, either by harvesting a
/// tree search or by direct sampling. Candidate indices are the slot numbers
/// they were drawn into, so a dropped sample under `continue_on_error`
/// leaves a gap rather than renumbering.
pub fn generate_candidates(
    backend: &dyn Backend,
    question: &Question,
    config: &Stage1Config,
    extractor: &ExtractorConfig,
) -> Result<Vec<Candidate>, VerisynthError> {
    match config.rollout_source {
        RolloutSource::TreeSearch => {
            let search_config = SearchConfig {
                n: config.candidates_per_question,
                seed: config.seed,
                tolerance: config.tolerance,
                continue_on_error: config.continue_on_error,
                ..config.search.clone()
            };
            let rollouts = run_search(backend, question, &search_config, extractor)?;
            Ok(rollouts
                .into_iter()
                .enumerate()
                .map(|(i, rollout)| Candidate {
                    question_id: question.id.clone(),
                    index: i as u32,
                    extracted_answer: extract_answer(&rollout.full_text, extractor),
                    reasoning_text: rollout.full_text,
                    producer: format!("tree_search:{}", backend.id()),
                    sampler_params: SamplerParams::default(),
                })
                .collect())
        }
        RolloutSource::DirectSampling => {
            let template = PromptTemplate::new(&config.solve_template, &["question"])?;
            let user = solve_message(&template, question);
            let requests: Vec<GenerationRequest> = (0..config.candidates_per_question)
                .map(|i| {
                    let seed = mix_seed(
                        config.seed,
                        &["direct", &question.id, &i.to_string()],
                    );
                    let mut request = request_with_params(vec![user.clone()], &config.sampler);
                    request.seed = Some(seed);
                    request
                })
                .collect();
            let mut candidates = Vec::new();
            for (i, result) in complete_batch(backend, &requests).into_iter().enumerate() {
                let text = match result {
                    Ok(response) => response.texts.into_iter().next().unwrap_or_default(),
                    Err(_) if config.continue_on_error => continue,
                    Err(e) => {
                        return Err(VerisynthError::Backend {
                            phase: "sample",
                            source: e,
                        })
                    }
                };
                candidates.push(Candidate {
                    question_id: question.id.clone(),
                    index: i as u32,
                    extracted_answer: extract_answer(&text, extractor),
                    reasoning_text: text,
                    producer: format!("direct:{}", backend.id()),
                    sampler_params: SamplerParams {
                        seed: requests[i].seed,
                        ..config.sampler.clone()
                    },
                });
            }
            Ok(candidates)
        }
    }
}

/// Has the verifier judge every candidate in the batch, one verdict each.
/// The verification prompt sees the diagram when the question has one. With
/// `tolerate_errors`, a failed call yields an unparseable record carrying the
/// error text instead of aborting.
pub fn verify_candidates(
    verifier: &dyn Backend,
    question: &Question,
    candidates: &[Candidate],
    verify_template: &str,
    grammar: &VerdictGrammar,
    base_seed: u64,
    tolerate_errors: bool,
) -> Result<Vec<VerificationRecord>, VerisynthError> {
    let template = PromptTemplate::new(verify_template, &["question", "solution"])?;
    let requests: Vec<GenerationRequest> = candidates
        .iter()
        .map(|candidate| {
            let prompt = template.fill(&[
                ("question", question.prompt_text.as_str()),
                ("solution", candidate.reasoning_text.as_str()),
            ]);
            let mut user = Message::user(prompt);
            if let Some(image) = &question.image_ref {
                user = user.with_image(image.clone());
            }
            GenerationRequest::from_messages(vec![user]).with_seed(mix_seed(
                base_seed,
                &["verify", &question.id, &candidate.index.to_string()],
            ))
        })
        .collect();
    let mut records = Vec::with_capacity(candidates.len());
    for (candidate, result) in candidates.iter().zip(complete_batch(verifier, &requests)) {
        let record = match result {
            Ok(response) => {
                let text = response.texts.into_iter().next().unwrap_or_default();
                VerificationRecord {
                    question_id: question.id.clone(),
                    candidate_index: candidate.index,
                    verdict: parse_verdict_with(grammar, &text),
                    verification_text: text,
                    verifier: verifier.id(),
                }
            }
            Err(e) if tolerate_errors => VerificationRecord {
                question_id: question.id.clone(),
                candidate_index: candidate.index,
                verdict: Verdict::Unparseable,
                verification_text: format!("[verification failed: {e}]"),
                verifier: verifier.id(),
            },
            Err(e) => {
                return Err(VerisynthError::Backend {
                    phase: "verify",
                    source: e,
                })
            }
        };
        records.push(record);
    }
    Ok(records)
}

/// The cleaning rule, one record at a time. Keeps a record only when the
/// verdict and the independent answer match agree: Correct on a matching
/// answer, or Incorrect on a non-matching one. A candidate with no
/// extractable answer never matches, so only an Incorrect verdict can keep
/// it. Unparseable verdicts are always dropped.
pub fn clean_condition(
    gold: &CanonicalAnswer,
    candidate_answer: Option<&CanonicalAnswer>,
    verdict: Verdict,
    tolerance: f64,
) -> Option<Condition> {
    let matches = candidate_answer.is_some_and(|a| answers_equal(a, gold, tolerance));
    match verdict {
        Verdict::Correct if matches => Some(Condition::ConfirmedCorrect),
        Verdict::Incorrect if !matches => Some(Condition::ConfirmedIncorrect),
        _ => None,
    }
}

/// Applies the cleaning rule across whole batches, preserving question order
/// and candidate order within each question.
pub fn clean_stage1(
    batches: &[QuestionBatch],
    tolerance: f64,
) -> Result<Vec<CleanExample>, VerisynthError> {
    let mut clean = Vec::new();
    for batch in batches {
        let gold =
            canonicalize(&batch.question.golden_answer).map_err(|source| VerisynthError::Answer {
                id: batch.question.id.clone(),
                source,
            })?;
        for candidate in &batch.candidates {
            let Some(record) = batch
                .records
                .iter()
                .find(|r| r.candidate_index == candidate.index)
            else {
                continue;
            };
            if let Some(condition) = clean_condition(
                &gold,
                candidate.extracted_answer.as_ref(),
                record.verdict,
                tolerance,
            ) {
                clean.push(CleanExample {
                    question: batch.question.clone(),
                    candidate: candidate.clone(),
                    verification: record.clone(),
                    condition,
                });
            }
        }
    }
    Ok(clean)
}

fn load_checkpoint(path: &Path) -> Result<BTreeMap<String, QuestionBatch>, VerisynthError> {
    if !path.exists() {
        return Ok(BTreeMap::new());
    }
    let batches: Vec<QuestionBatch> = read_records(path)?;
    Ok(batches
        .into_iter()
        .map(|b| (b.question.id.clone(), b))
        .collect())
}

/// Runs stage 1 over a question set: generate, verify, checkpoint, clean.
/// When `checkpoint` names a file, each fresh question is appended to it as
/// soon as its batch is complete, and questions already present in the file
/// are restored instead of recomputed.
pub fn run_stage1(
    reasoner: &dyn Backend,
    verifier: &dyn Backend,
    questions: &[Question],
    config: &Stage1Config,
    extractor: &ExtractorConfig,
    checkpoint: Option<&Path>,
) -> Result<Stage1Result, VerisynthError> {
    if config.candidates_per_question == 0 {
        return Err(VerisynthError::InvalidConfig(
            "candidates_per_question must be >= 1".into(),
        ));
    }
    let mut resumed = match checkpoint {
        Some(path) => load_checkpoint(path)?,
        None => BTreeMap::new(),
    };
    let mut appender = match checkpoint {
        Some(path) => Some(
            std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| VerisynthError::Checkpoint {
                    path: path.to_path_buf(),
                    detail: e.to_string(),
                })?,
        ),
        None => None,
    };

    let mut stats = Stage1Stats::default();
    let mut batches = Vec::with_capacity(questions.len());
    for question in questions {
        let batch = match resumed.remove(&question.id) {
            Some(batch) => {
                stats.resumed += 1;
                batch
            }
            None => {
                let candidates = generate_candidates(reasoner, question, config, extractor)?;
                let records = verify_candidates(
                    verifier,
                    question,
                    &candidates,
                    &config.verify_template,
                    &config.grammar,
                    config.seed,
                    config.continue_on_error,
                )?;
                let batch = QuestionBatch {
                    question: question.clone(),
                    candidates,
                    records,
                };
                if let Some(file) = appender.as_mut() {
                    let line = serde_json::to_string(&batch).map_err(|e| {
                        VerisynthError::Checkpoint {
                            path: checkpoint.unwrap().to_path_buf(),
                            detail: e.to_string(),
                        }
                    })?;
                    writeln!(file, "{line}").and_then(|()| file.flush()).map_err(|e| {
                        VerisynthError::Checkpoint {
                            path: checkpoint.unwrap().to_path_buf(),
                            detail: e.to_string(),
                        }
                    })?;
                }
                batch
            }
        };
        stats.questions += 1;
        stats.candidates += batch.candidates.len();
        for record in &batch.records {
            match record.verdict {
                Verdict::Correct => stats.correct_verdicts += 1,
                Verdict::Incorrect => stats.incorrect_verdicts += 1,
                Verdict::Unparseable => stats.unparseable_verdicts += 1,
            }
        }
        batches.push(batch);
    }

    let clean = clean_stage1(&batches, config.tolerance)?;
    stats.kept = clean.len();
    for example in &clean {
        match example.condition {
            Condition::ConfirmedCorrect => stats.kept_confirmed_correct += 1,
            Condition::ConfirmedIncorrect => stats.kept_confirmed_incorrect += 1,
        }
    }
    Ok(Stage1Result {
        batches,
        clean,
        stats,
    })
}

/// What stage-2 rejection sampling keeps a sample by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KeepRule {
    /// A verifier reads the solution and must conclude it is correct.
    #[default]
    VerifierApproved,
    /// The extracted answer must match the gold answer (no verifier needed).
    GoldMatch,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Config {
    pub samples_per_question: usize,
    pub keep_rule: KeepRule,
    /// Solve prompt with a `{question}` slot.
    pub solve_template: String,
    /// Verification prompt with `{question}` and `{solution}` slots.
    pub verify_template: String,
    pub grammar: VerdictGrammar,
    pub sampler: SamplerParams,
    pub tolerance: f64,
    pub seed: u64,
    pub continue_on_error: bool,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            samples_per_question: 8,
            keep_rule: KeepRule::default(),
            solve_template: DEFAULT_SOLVE.to_string(),
            verify_template: DEFAULT_VERIFY.to_string(),
            grammar: VerdictGrammar::default(),
            sampler: SamplerParams::default(),
            tolerance: crate::answers::DEFAULT_TOLERANCE,
            seed: 0,
            continue_on_error: false,
        }
    }
}

/// A solution that survived stage-2 rejection sampling.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage2Kept {
    pub question_id: String,
    pub sample_index: u32,
    #[serde(rename = "reasoning")]
    pub reasoning_text: String,
    #[serde(rename = "answer", default, skip_serializing_if = "Option::is_none")]
    pub extracted_answer: Option<CanonicalAnswer>,
    /// Verdict that admitted the sample; absent under the gold-match rule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Stage2Stats {
    pub questions: usize,
    pub samples: usize,
    pub kept: usize,
    /// Samples the filter rejected (failed calls are counted separately).
    pub rejected: usize,
    pub failed: usize,
}

#[derive(Debug, Clone)]
pub struct Stage2Result {
    pub kept: Vec<Stage2Kept>,
    pub stats: Stage2Stats,
}

/// Stage 2: draw fresh solutions per question and keep the ones that pass
/// the configured filter. `verifier` is required under
/// [`KeepRule::VerifierApproved`] and ignored otherwise.
pub fn run_stage2(
    reasoner: &dyn Backend,
    verifier: Option<&dyn Backend>,
    questions: &[Question],
    config: &Stage2Config,
    extractor: &ExtractorConfig,
) -> Result<Stage2Result, VerisynthError> {
    if config.samples_per_question == 0 {
        return Err(VerisynthError::InvalidConfig(
            "samples_per_question must be >= 1".into(),
        ));
    }
    if config.keep_rule == KeepRule::VerifierApproved && verifier.is_none() {
        return Err(VerisynthError::InvalidConfig(
            "verifier_approved keep rule needs a verifier backend".into(),
        ));
    }
    let template = PromptTemplate::new(&config.solve_template, &["question"])?;
    let mut stats = Stage2Stats::default();
    let mut kept = Vec::new();
    for question in questions {
        stats.questions += 1;
        let gold =
            canonicalize(&question.golden_answer).map_err(|source| VerisynthError::Answer {
                id: question.id.clone(),
                source,
            })?;
        let user = solve_message(&template, question);
        let requests: Vec<GenerationRequest> = (0..config.samples_per_question)
            .map(|i| {
                let mut request = request_with_params(vec![user.clone()], &config.sampler);
                request.seed = Some(mix_seed(
                    config.seed,
                    &["stage2", &question.id, &i.to_string()],
                ));
                request
            })
            .collect();
        let mut samples = Vec::new();
        for (i, result) in complete_batch(reasoner, &requests).into_iter().enumerate() {
            stats.samples += 1;
            match result {
                Ok(response) => {
                    let text = response.texts.into_iter().next().unwrap_or_default();
                    samples.push((i as u32, text));
                }
                Err(_) if config.continue_on_error => stats.failed += 1,
                Err(e) => {
                    return Err(VerisynthError::Backend {
                        phase: "stage2-sample",
                        source: e,
                    })
                }
            }
        }
        match config.keep_rule {
            KeepRule::GoldMatch => {
                for (index, text) in samples {
                    let extracted = extract_answer(&text, extractor);
                    let matched = extracted
                        .as_ref()
                        .is_some_and(|a| answers_equal(a, &gold, config.tolerance));
                    if matched {
                        kept.push(Stage2Kept {
                            question_id: question.id.clone(),
                            sample_index: index,
                            reasoning_text: text,
                            extracted_answer: extracted,
                            verdict: None,
                        });
                        stats.kept += 1;
                    } else {
                        stats.rejected += 1;
                    }
                }
            }
            KeepRule::VerifierApproved => {
                let candidates: Vec<Candidate> = samples
                    .iter()
                    .map(|(index, text)| Candidate {
                        question_id: question.id.clone(),
                        index: *index,
                        reasoning_text: text.clone(),
                        extracted_answer: extract_answer(text, extractor),
                        producer: format!("stage2:{}", reasoner.id()),
                        sampler_params: config.sampler.clone(),
                    })
                    .collect();
                let records = verify_candidates(
                    verifier.expect("checked above"),
                    question,
                    &candidates,
                    &config.verify_template,
                    &config.grammar,
                    mix_seed(config.seed, &["stage2-verify"]),
                    config.continue_on_error,
                )?;
                for (candidate, record) in candidates.into_iter().zip(records) {
                    if record.verdict == Verdict::Correct {
                        kept.push(Stage2Kept {
                            question_id: candidate.question_id,
                            sample_index: candidate.index,
                            reasoning_text: candidate.reasoning_text,
                            extracted_answer: candidate.extracted_answer,
                            verdict: Some(record.verdict),
                        });
                        stats.kept += 1;
                    } else {
                        stats.rejected += 1;
                    }
                }
            }
        }
    }
    Ok(Stage2Result { kept, stats })
}

/// Formats stage-2 keeps as two-turn training records: the solve prompt
/// (with image) and the kept solution.
pub fn stage2_sft_records(
    questions: &[Question],
    kept: &[Stage2Kept],
    solve_template: &str,
) -> Result<Vec<SftRecord>, VerisynthError> {
    let template = PromptTemplate::new(solve_template, &["question"])?;
    let by_id: BTreeMap<&str, &Question> =
        questions.iter().map(|q| (q.id.as_str(), q)).collect();
    let mut records = Vec::with_capacity(kept.len());
    for item in kept {
        let Some(question) = by_id.get(item.question_id.as_str()) else {
            continue;
        };
        records.push(SftRecord {
            id: format!("{}#{}", item.question_id, item.sample_index),
            messages: vec![
                SftTurn {
                    role: "user".into(),
                    content: template.fill(&[("question", &question.prompt_text)]),
                    image: question.image_ref.clone(),
                },
                SftTurn {
                    role: "assistant".into(),
                    content: item.reasoning_text.clone(),
                    image: None,
                },
            ],
        });
    }
    Ok(records)
}
