//! Best-of-N answer selection and the benchmark harness built on it.
//!
//! Given several candidate solutions to one question, a selection strategy
//! picks the answer to submit. Majority voting groups candidates by answer
//! equivalence and takes the plurality. Verifier voting first asks a
//! verifier to judge each candidate and takes the plurality over the
//! approved ones only, falling back to plain majority when the verifier
//! approves nothing. Ties always resolve toward the answer seen first, which
//! keeps every strategy deterministic.
//!
//! [`simulate_selection`] reproduces the whole pipeline synthetically from
//! four rates (candidate correctness, wrong-answer spread, verifier
//! true/false positive rates), so closed-form expectations can be checked
//! without a model in the loop. [`evaluate`] is the real harness over a
//! question set, and [`evaluate_outcome_judging`] scores a verifier as a
//! standalone correct/incorrect classifier.

use crate::answers::{
    answers_equal, canonicalize, extract_answer, AnswerError, CanonicalAnswer, ExtractorConfig,
    Verdict, VerdictGrammar,
};
use crate::backend::{complete_batch, Backend, BackendError, GenerationRequest};
use crate::corpus::{Candidate, Question, SamplerParams, VerificationRecord};
use crate::templates::{PromptTemplate, TemplateError, DEFAULT_SOLVE, DEFAULT_VERIFY};
use crate::util::{mix_seed, rng_from_seed};
use crate::verisynth::{self, VerisynthError};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SelectError {
    #[error("backend failure during {phase}: {source}")]
    Backend {
        phase: &'static str,
        #[source]
        source: BackendError,
    },
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Verisynth(#[from] VerisynthError),
    #[error("golden answer unusable for question {id}: {source}")]
    Answer {
        id: String,
        #[source]
        source: AnswerError,
    },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

/// Candidates holding equivalent answers, in first-seen order.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerGroup {
    pub representative: CanonicalAnswer,
    /// Positions (into the input slice) of the group's members.
    pub indices: Vec<usize>,
}

/// Groups answers by equivalence under `tolerance`. Entries without an
/// answer are skipped; each group's representative is its earliest member.
pub fn group_answers(answers: &[Option<CanonicalAnswer>], tolerance: f64) -> Vec<AnswerGroup> {
    let mut groups: Vec<AnswerGroup> = Vec::new();
    for (i, answer) in answers.iter().enumerate() {
        let Some(answer) = answer else { continue };
        match groups
            .iter_mut()
            .find(|g| answers_equal(&g.representative, answer, tolerance))
        {
            Some(group) => group.indices.push(i),
            None => groups.push(AnswerGroup {
                representative: answer.clone(),
                indices: vec![i],
            }),
        }
    }
    groups
}

/// The outcome of one selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// Winning answer; `None` when no candidate had an extractable answer.
    pub chosen: Option<CanonicalAnswer>,
    /// Positions of the candidates that voted for the winner.
    pub chosen_indices: Vec<usize>,
    /// True when verifier voting found no approved candidates and fell back
    /// to plain majority over all of them.
    pub fallback_used: bool,
}

fn plurality(groups: &[AnswerGroup]) -> Option<&AnswerGroup> {
    // max_by favors later elements on ties, so scanning in reverse
    // first-seen order makes the earliest group win.
    groups
        .iter()
        .rev()
        .max_by_key(|g| g.indices.len())
}

/// Plain majority voting: plurality over all answers, ties toward the
/// answer that appeared first.
pub fn majority_vote(answers: &[Option<CanonicalAnswer>], tolerance: f64) -> Selection {
    let groups = group_answers(answers, tolerance);
    match plurality(&groups) {
        Some(group) => Selection {
            chosen: Some(group.representative.clone()),
            chosen_indices: group.indices.clone(),
            fallback_used: false,
        },
        None => Selection {
            chosen: None,
            chosen_indices: Vec::new(),
            fallback_used: false,
        },
    }
}

/// Verifier voting over pre-computed verdicts: plurality among the
/// candidates judged correct; when that set is empty, majority over all
/// candidates with `fallback_used` set. Pure, so enumeration tests can
/// drive it over every verdict mask.
pub fn select_with_verdicts(
    answers: &[Option<CanonicalAnswer>],
    verdicts: &[Verdict],
    tolerance: f64,
) -> Selection {
    assert_eq!(
        answers.len(),
        verdicts.len(),
        "one verdict per candidate answer"
    );
    let approved: Vec<Option<CanonicalAnswer>> = answers
        .iter()
        .zip(verdicts)
        .map(|(answer, verdict)| match verdict {
            Verdict::Correct => answer.clone(),
            _ => None,
        })
        .collect();
    let groups = group_answers(&approved, tolerance);
    match plurality(&groups) {
        Some(group) => Selection {
            chosen: Some(group.representative.clone()),
            chosen_indices: group.indices.clone(),
            fallback_used: false,
        },
        None => Selection {
            fallback_used: true,
            ..majority_vote(answers, tolerance)
        },
    }
}

/// Verifier voting end to end: judge every candidate, then select.
/// Returns the verdict records alongside the selection for auditability.
pub fn verifier_select(
    verifier: &dyn Backend,
    question: &Question,
    candidates: &[Candidate],
    verify_template: &str,
    grammar: &VerdictGrammar,
    base_seed: u64,
    tolerance: f64,
    tolerate_errors: bool,
) -> Result<(Selection, Vec<VerificationRecord>), SelectError> {
    let records = verisynth::verify_candidates(
        verifier,
        question,
        candidates,
        verify_template,
        grammar,
        base_seed,
        tolerate_errors,
    )?;
    let answers: Vec<Option<CanonicalAnswer>> = candidates
        .iter()
        .map(|c| c.extracted_answer.clone())
        .collect();
    let verdicts: Vec<Verdict> = records.iter().map(|r| r.verdict).collect();
    Ok((select_with_verdicts(&answers, &verdicts, tolerance), records))
}

/// How the harness picks an answer from N samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    /// Take the first sample's answer (the N=1 baseline).
    Single,
    #[default]
    MajorityVote,
    VerifierVote,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub strategy: SelectionStrategy,
    /// Samples drawn per question (N).
    pub samples_per_question: usize,
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

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            strategy: SelectionStrategy::default(),
            samples_per_question: 8,
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

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CategoryStats {
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuestionOutcome {
    pub question_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chosen: Option<CanonicalAnswer>,
    pub correct: bool,
    pub fallback_used: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Questions where no candidate had an extractable answer (scored as
    /// wrong).
    pub abstentions: usize,
    /// Questions where verifier voting fell back to plain majority.
    pub fallbacks: usize,
    pub by_category: BTreeMap<String, CategoryStats>,
    pub outcomes: Vec<QuestionOutcome>,
}

/// Runs the benchmark: N samples per question, selection by the configured
/// strategy, exact-match scoring against the gold answer. Abstentions count
/// as wrong. `verifier` is required for verifier voting and ignored
/// otherwise.
pub fn evaluate(
    reasoner: &dyn Backend,
    verifier: Option<&dyn Backend>,
    questions: &[Question],
    config: &EvalConfig,
    extractor: &ExtractorConfig,
) -> Result<EvalReport, SelectError> {
    if config.samples_per_question == 0 {
        return Err(SelectError::InvalidConfig(
            "samples_per_question must be >= 1".into(),
        ));
    }
    if config.strategy == SelectionStrategy::VerifierVote && verifier.is_none() {
        return Err(SelectError::InvalidConfig(
            "verifier_vote strategy needs a verifier backend".into(),
        ));
    }
    let template = PromptTemplate::new(&config.solve_template, &["question"])?;
    let samples = match config.strategy {
        SelectionStrategy::Single => 1,
        _ => config.samples_per_question,
    };
    let mut report = EvalReport::default();
    for question in questions {
        let gold = canonicalize(&question.golden_answer).map_err(|source| SelectError::Answer {
            id: question.id.clone(),
            source,
        })?;
        let user = verisynth::solve_message(&template, question);
        let requests: Vec<GenerationRequest> = (0..samples)
            .map(|i| {
                let mut request =
                    verisynth::request_with_params(vec![user.clone()], &config.sampler);
                request.seed = Some(mix_seed(
                    config.seed,
                    &["eval", &question.id, &i.to_string()],
                ));
                request
            })
            .collect();
        let mut candidates = Vec::new();
        for (i, result) in complete_batch(reasoner, &requests).into_iter().enumerate() {
            let text = match result {
                Ok(response) => response.texts.into_iter().next().unwrap_or_default(),
                Err(_) if config.continue_on_error => continue,
                Err(e) => {
                    return Err(SelectError::Backend {
                        phase: "eval-sample",
                        source: e,
                    })
                }
            };
            candidates.push(Candidate {
                question_id: question.id.clone(),
                index: i as u32,
                extracted_answer: extract_answer(&text, extractor),
                reasoning_text: text,
                producer: format!("eval:{}", reasoner.id()),
                sampler_params: config.sampler.clone(),
            });
        }
        let answers: Vec<Option<CanonicalAnswer>> = candidates
            .iter()
            .map(|c| c.extracted_answer.clone())
            .collect();
        let selection = match config.strategy {
            SelectionStrategy::Single => Selection {
                chosen: answers.first().cloned().flatten(),
                chosen_indices: vec![0],
                fallback_used: false,
            },
            SelectionStrategy::MajorityVote => majority_vote(&answers, config.tolerance),
            SelectionStrategy::VerifierVote => {
                let (selection, _records) = verifier_select(
                    verifier.expect("checked above"),
                    question,
                    &candidates,
                    &config.verify_template,
                    &config.grammar,
                    config.seed,
                    config.tolerance,
                    config.continue_on_error,
                )?;
                selection
            }
        };
        let correct = selection
            .chosen
            .as_ref()
            .is_some_and(|a| answers_equal(a, &gold, config.tolerance));
        if selection.chosen.is_none() {
            report.abstentions += 1;
        }
        if selection.fallback_used {
            report.fallbacks += 1;
        }
        report.total += 1;
        report.correct += usize::from(correct);
        let category = question
            .category
            .clone()
            .unwrap_or_else(|| "uncategorized".to_string());
        let entry = report.by_category.entry(category).or_default();
        entry.total += 1;
        entry.correct += usize::from(correct);
        report.outcomes.push(QuestionOutcome {
            question_id: question.id.clone(),
            chosen: selection.chosen,
            correct,
            fallback_used: selection.fallback_used,
        });
    }
    report.accuracy = if report.total == 0 {
        0.0
    } else {
        report.correct as f64 / report.total as f64
    };
    for stats in report.by_category.values_mut() {
        stats.accuracy = stats.correct as f64 / stats.total as f64;
    }
    Ok(report)
}

/// Synthetic model of the selection pipeline, driven by rates instead of a
/// backend.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationSpec {
    /// Probability a candidate answer is correct.
    pub p_correct: f64,
    /// Wrong answers are drawn uniformly from this many distinct values.
    pub wrong_alphabet_size: u32,
    /// Probability the verifier approves a correct candidate.
    pub verify_tpr: f64,
    /// Probability the verifier approves an incorrect candidate.
    pub verify_fpr: f64,
    /// Candidates per trial (N).
    pub n: usize,
    pub trials: usize,
    pub seed: u64,
    pub strategy: SelectionStrategy,
    pub tolerance: f64,
}

impl Default for SimulationSpec {
    fn default() -> Self {
        Self {
            p_correct: 0.5,
            wrong_alphabet_size: 4,
            verify_tpr: 1.0,
            verify_fpr: 0.0,
            n: 8,
            trials: 10_000,
            seed: 0,
            strategy: SelectionStrategy::VerifierVote,
            tolerance: crate::answers::DEFAULT_TOLERANCE,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationReport {
    pub trials: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub fallbacks: usize,
}

/// Gold answer used by the simulation; wrong answers are `2 + j` for
/// `j < wrong_alphabet_size`, so they never collide with it.
fn sim_gold() -> CanonicalAnswer {
    CanonicalAnswer::Numeric(1.0)
}

/// Runs the selection pipeline on synthetic candidates. Per candidate the
/// draw order is fixed (correctness, wrong value if wrong, verdict), so a
/// spec and seed pin the exact outcome.
pub fn simulate_selection(spec: &SimulationSpec) -> Result<SimulationReport, SelectError> {
    for (name, p) in [
        ("p_correct", spec.p_correct),
        ("verify_tpr", spec.verify_tpr),
        ("verify_fpr", spec.verify_fpr),
    ] {
        if !(0.0..=1.0).contains(&p) {
            return Err(SelectError::InvalidConfig(format!(
                "{name} {p} outside [0, 1]"
            )));
        }
    }
    if spec.wrong_alphabet_size == 0 || spec.n == 0 || spec.trials == 0 {
        return Err(SelectError::InvalidConfig(
            "wrong_alphabet_size, n and trials must be >= 1".into(),
        ));
    }
    let gold = sim_gold();
    let mut rng = rng_from_seed(mix_seed(spec.seed, &["simsel"]));
    let mut correct_trials = 0usize;
    let mut fallbacks = 0usize;
    for _ in 0..spec.trials {
        let mut answers = Vec::with_capacity(spec.n);
        let mut verdicts = Vec::with_capacity(spec.n);
        for _ in 0..spec.n {
            let is_correct = rng.random_bool(spec.p_correct);
            let answer = if is_correct {
                gold.clone()
            } else {
                let j = rng.random_range(0..spec.wrong_alphabet_size);
                CanonicalAnswer::Numeric(f64::from(2 + j))
            };
            let approve_p = if is_correct {
                spec.verify_tpr
            } else {
                spec.verify_fpr
            };
            let verdict = if rng.random_bool(approve_p) {
                Verdict::Correct
            } else {
                Verdict::Incorrect
            };
            answers.push(Some(answer));
            verdicts.push(verdict);
        }
        let selection = match spec.strategy {
            SelectionStrategy::Single => Selection {
                chosen: answers[0].clone(),
                chosen_indices: vec![0],
                fallback_used: false,
            },
            SelectionStrategy::MajorityVote => majority_vote(&answers, spec.tolerance),
            SelectionStrategy::VerifierVote => {
                select_with_verdicts(&answers, &verdicts, spec.tolerance)
            }
        };
        if selection.fallback_used {
            fallbacks += 1;
        }
        if selection
            .chosen
            .as_ref()
            .is_some_and(|a| answers_equal(a, &gold, spec.tolerance))
        {
            correct_trials += 1;
        }
    }
    Ok(SimulationReport {
        trials: spec.trials,
        correct: correct_trials,
        accuracy: correct_trials as f64 / spec.trials as f64,
        fallbacks,
    })
}

/// Confusion counts and derived metrics for a verifier used as a standalone
/// correct/incorrect classifier. An unparseable verdict always scores as a
/// wrong prediction: a miss on correct solutions, a false alarm on
/// incorrect ones.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct JudgeReport {
    pub total: usize,
    pub accuracy: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub true_negatives: usize,
    pub false_negatives: usize,
    pub unparseable: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Scores `verifier` as a classifier over labeled candidates: the truth
/// label is whether each candidate's extracted answer matches its question's
/// gold answer.
pub fn evaluate_outcome_judging(
    verifier: &dyn Backend,
    questions: &[Question],
    candidates: &[Candidate],
    verify_template: &str,
    grammar: &VerdictGrammar,
    seed: u64,
    tolerance: f64,
    tolerate_errors: bool,
) -> Result<JudgeReport, SelectError> {
    let by_id: BTreeMap<&str, &Question> = questions.iter().map(|q| (q.id.as_str(), q)).collect();
    let mut report = JudgeReport::default();
    let mut grouped: BTreeMap<&str, Vec<&Candidate>> = BTreeMap::new();
    for candidate in candidates {
        grouped
            .entry(candidate.question_id.as_str())
            .or_default()
            .push(candidate);
    }
    for (question_id, batch) in grouped {
        let Some(question) = by_id.get(question_id) else {
            return Err(SelectError::InvalidConfig(format!(
                "candidate references unknown question {question_id}"
            )));
        };
        let gold = canonicalize(&question.golden_answer).map_err(|source| SelectError::Answer {
            id: question.id.clone(),
            source,
        })?;
        let owned: Vec<Candidate> = batch.into_iter().cloned().collect();
        let records = verisynth::verify_candidates(
            verifier,
            question,
            &owned,
            verify_template,
            grammar,
            seed,
            tolerate_errors,
        )?;
        for (candidate, record) in owned.iter().zip(&records) {
            let label = candidate
                .extracted_answer
                .as_ref()
                .is_some_and(|a| answers_equal(a, &gold, tolerance));
            report.total += 1;
            if record.verdict == Verdict::Unparseable {
                report.unparseable += 1;
            }
            match (label, record.verdict) {
                (true, Verdict::Correct) => report.true_positives += 1,
                (true, _) => report.false_negatives += 1,
                (false, Verdict::Incorrect) => report.true_negatives += 1,
                (false, _) => report.false_positives += 1,
            }
        }
    }
    if report.total > 0 {
        report.accuracy =
            (report.true_positives + report.true_negatives) as f64 / report.total as f64;
    }
    let predicted_positive = report.true_positives + report.false_positives;
    let actual_positive = report.true_positives + report.false_negatives;
    if predicted_positive > 0 {
        report.precision = report.true_positives as f64 / predicted_positive as f64;
    }
    if actual_positive > 0 {
        report.recall = report.true_positives as f64 / actual_positive as f64;
    }
    if report.precision + report.recall > 0.0 {
        report.f1 = 2.0 * report.precision * report.recall / (report.precision + report.recall);
    }
    Ok(report)
}
