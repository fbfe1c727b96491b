//! A seeded mock backend that emulates a model of known skill.
//!
//! Offline pipeline tests need a "model" whose correctness rate, verifier
//! quality, and randomness are all controlled. This backend derives every
//! reply from (profile seed, request content digest, sample index), so
//! replies are independent of call order and thread scheduling, and two runs
//! of a pipeline with the same seed produce identical bytes.
//!
//! # Test-corpus tag grammar
//!
//! The mock learns ground truth from inline tags that test corpora embed in
//! prompt text (see [`toy_questions`]):
//!
//! * `<<gold:VALUE>>` — the question's correct answer.
//! * `<<candidate:VALUE>>` — overrides the candidate answer in verify mode.
//! * `<<verify>>` — marks a verification prompt (emits a verdict).
//! * `<<selfscore>>` — marks a self-rating prompt (emits `Score: x.xx`).
//!
//! Production templates carry none of these markers; the `*_mock` template
//! variants add them. In solve mode the reply states the gold answer with
//! probability `p_correct`, otherwise one of `wrong_alphabet_size` wrong
//! symbols (`W1`, `W2`, ...) chosen uniformly. When the conversation's
//! assistant turns already state a final answer (a completed solution being
//! re-sampled), the mock restates that answer instead of drawing a fresh one,
//! which makes completions conditioned on finished paths deterministic. In
//! verify mode the verdict is drawn with probability `verify_tpr` (candidate
//! matches gold) or `verify_fpr` (it does not). Self-scores are uniform in
//! [0, 1] and deliberately independent of correctness.

use super::{Backend, BackendError, GenerationRequest, GenerationResponse, Role};
use crate::answers::{answers_equal, canonicalize, contains_final_answer_cue, extract_answer,
    CanonicalAnswer, ExtractorConfig, DEFAULT_TOLERANCE};
use crate::corpus::{Question, Source};
use crate::util::{mix_seed, rng_from_material, rng_from_seed};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const VERIFY_MARKER: &str = "<<verify>>";
pub const SELF_SCORE_MARKER: &str = "<<selfscore>>";

fn default_p_correct() -> f64 {
    0.5
}
fn default_alphabet() -> u32 {
    4
}
fn default_tpr() -> f64 {
    1.0
}
fn default_fpr() -> f64 {
    0.0
}

/// Behavior knobs for [`StochasticBackend`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StochasticProfile {
    /// Probability a fresh solve states the gold answer.
    #[serde(default = "default_p_correct")]
    pub p_correct: f64,
    /// How many distinct wrong answers exist.
    #[serde(default = "default_alphabet")]
    pub wrong_alphabet_size: u32,
    /// P(verdict says correct | candidate matches gold).
    #[serde(default = "default_tpr")]
    pub verify_tpr: f64,
    /// P(verdict says correct | candidate does not match gold).
    #[serde(default = "default_fpr")]
    pub verify_fpr: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for StochasticProfile {
    fn default() -> Self {
        Self {
            p_correct: default_p_correct(),
            wrong_alphabet_size: default_alphabet(),
            verify_tpr: default_tpr(),
            verify_fpr: default_fpr(),
            seed: 0,
        }
    }
}

pub struct StochasticBackend {
    profile: StochasticProfile,
    extractor: ExtractorConfig,
}

impl StochasticBackend {
    pub fn new(profile: StochasticProfile) -> Result<Self, BackendError> {
        for (name, p) in [
            ("p_correct", profile.p_correct),
            ("verify_tpr", profile.verify_tpr),
            ("verify_fpr", profile.verify_fpr),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(BackendError::InvalidConfig(format!(
                    "{name} must be in [0, 1], got {p}"
                )));
            }
        }
        if profile.wrong_alphabet_size == 0 {
            return Err(BackendError::InvalidConfig(
                "wrong_alphabet_size must be at least 1".into(),
            ));
        }
        Ok(Self {
            profile,
            extractor: ExtractorConfig::rule_based(),
        })
    }

    fn sample_one(&self, request: &GenerationRequest, index: u32) -> String {
        let digest = request.content_digest();
        let mut rng = rng_from_material(&[
            &self.profile.seed.to_string(),
            &digest,
            &index.to_string(),
        ]);
        let prompt = request.joined_text();
        if prompt.contains(SELF_SCORE_MARKER) {
            let score: f64 = rng.random();
            return format!(
                "Assessing how promising the partial solution is.\n\nScore: {score:.2}"
            );
        }
        if prompt.contains(VERIFY_MARKER) {
            return self.verify_reply(request, &prompt, &mut rng);
        }
        self.solve_reply(request, &prompt, &mut rng)
    }

    fn verify_reply(
        &self,
        _request: &GenerationRequest,
        prompt: &str,
        rng: &mut impl Rng,
    ) -> String {
        let gold = last_tag(prompt, "gold").and_then(|v| canonicalize(&v).ok());
        let candidate: Option<CanonicalAnswer> = last_tag(prompt, "candidate")
            .and_then(|v| canonicalize(&v).ok())
            .or_else(|| extract_answer(prompt, &self.extractor));
        let (Some(gold), Some(candidate)) = (gold, candidate) else {
            return "I checked the submission but could not find a final result to evaluate."
                .to_string();
        };
        let matched = answers_equal(&candidate, &gold, DEFAULT_TOLERANCE);
        let p_yes = if matched {
            self.profile.verify_tpr
        } else {
            self.profile.verify_fpr
        };
        let verdict = if rng.random_bool(p_yes) {
            "correct"
        } else {
            "not correct"
        };
        format!(
            "Checking the proposed solution step by step against the problem.\n\nThe answer is {verdict}."
        )
    }

    fn solve_reply(
        &self,
        request: &GenerationRequest,
        prompt: &str,
        rng: &mut impl Rng,
    ) -> String {
        // A conversation whose assistant turns already reach a final answer is
        // a completed solution being extended; restate its conclusion.
        let assistant_text = request
            .messages
            .iter()
            .filter(|m| m.role == Role::Assistant)
            .map(|m| m.text.as_str())
            .collect::<Vec<_>>()
            .join("\n");
        if contains_final_answer_cue(&assistant_text) {
            if let Some(prev) = extract_answer(&assistant_text, &self.extractor) {
                return format!("The reasoning above is complete.\n\nThe answer is {prev}.");
            }
        }

        let gold = last_tag(prompt, "gold");
        let correct = gold.is_some() && rng.random_bool(self.profile.p_correct);
        let answer = if correct {
            gold.expect("checked above")
        } else {
            format!("W{}", rng.random_range(1..=self.profile.wrong_alphabet_size))
        };
        let fillers = rng.random_range(0..3u32);
        let mut paragraphs = Vec::with_capacity(fillers as usize + 1);
        for step in 0..fillers {
            paragraphs.push(format!(
                "Step {}: relate the given quantities using relation R{}.",
                step + 1,
                rng.random_range(0..1000)
            ));
        }
        paragraphs.push(format!("The answer is {answer}."));
        paragraphs.join("\n\n")
    }
}

impl Backend for StochasticBackend {
    fn complete(&self, request: &GenerationRequest) -> Result<GenerationResponse, BackendError> {
        let n = request.num_samples.max(1);
        let texts = (0..n).map(|i| self.sample_one(request, i)).collect();
        Ok(GenerationResponse {
            texts,
            model_id: self.id(),
            usage: None,
        })
    }

    fn id(&self) -> String {
        let p = &self.profile;
        format!(
            "stochastic(p={},w={},tpr={},fpr={},seed={})",
            p.p_correct, p.wrong_alphabet_size, p.verify_tpr, p.verify_fpr, p.seed
        )
    }
}

/// Finds the value of the last `<<name:value>>` tag in `text`.
fn last_tag(text: &str, name: &str) -> Option<String> {
    let open = format!("<<{name}:");
    let start = text.rfind(&open)?;
    let rest = &text[start + open.len()..];
    let end = rest.find(">>")?;
    Some(rest[..end].trim().to_string())
}

/// Generates a deterministic toy corpus compatible with the mock's tag
/// grammar: each question embeds its gold answer as a `<<gold:...>>` tag in
/// the prompt text, so the stochastic backend can answer it with the
/// configured correctness rate. Categories alternate to exercise per-category
/// reporting.
pub fn toy_questions(count: usize, seed: u64) -> Vec<Question> {
    let mut rng = rng_from_seed(mix_seed(seed, &["toy-corpus"]));
    (0..count)
        .map(|i| {
            let gold: u32 = rng.random_range(10..=999);
            Question {
                id: format!("toy-{i:04}"),
                prompt_text: format!(
                    "Problem {i}: determine the requested value. <<gold:{gold}>>"
                ),
                image_ref: None,
                golden_answer: gold.to_string(),
                choices: None,
                source: Source::Other("toy".into()),
                category: Some(if i % 2 == 0 { "arithmetic" } else { "geometry" }.into()),
                extra: serde_json::Map::new(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::answers::{parse_verdict, Verdict};
    use crate::backend::Message;

    fn backend(profile: StochasticProfile) -> StochasticBackend {
        StochasticBackend::new(profile).unwrap()
    }

    fn extracted(reply: &str) -> CanonicalAnswer {
        extract_answer(reply, &ExtractorConfig::rule_based()).expect("mock replies carry answers")
    }

    #[test]
    fn replies_are_deterministic_per_content_and_index() {
        let b1 = backend(StochasticProfile {
            p_correct: 0.5,
            seed: 3,
            ..Default::default()
        });
        let b2 = backend(StochasticProfile {
            p_correct: 0.5,
            seed: 3,
            ..Default::default()
        });
        let req = GenerationRequest::from_user_text("solve this <<gold:42>>").with_num_samples(6);
        let r1 = b1.complete(&req).unwrap();
        let r2 = b2.complete(&req).unwrap();
        assert_eq!(r1.texts, r2.texts);
        // Asking for fewer samples yields a prefix of the same sequence.
        let shorter = b1
            .complete(&GenerationRequest::from_user_text("solve this <<gold:42>>").with_num_samples(2))
            .unwrap();
        assert_eq!(shorter.texts[..], r1.texts[..2]);
        // A different profile seed changes replies.
        let b3 = backend(StochasticProfile {
            p_correct: 0.5,
            seed: 4,
            ..Default::default()
        });
        assert_ne!(b3.complete(&req).unwrap().texts, r1.texts);
    }

    #[test]
    fn solve_respects_degenerate_rates() {
        let always = backend(StochasticProfile {
            p_correct: 1.0,
            seed: 1,
            ..Default::default()
        });
        let never = backend(StochasticProfile {
            p_correct: 0.0,
            seed: 1,
            ..Default::default()
        });
        let gold = CanonicalAnswer::Numeric(37.0);
        for i in 0..50 {
            let req =
                GenerationRequest::from_user_text("find it <<gold:37>>").with_seed(i);
            let yes = extracted(&always.complete(&req).unwrap().texts[0]);
            assert!(answers_equal(&yes, &gold, 1e-9), "p=1 must answer gold, got {yes:?}");
            let no = extracted(&never.complete(&req).unwrap().texts[0]);
            assert!(!answers_equal(&no, &gold, 1e-9), "p=0 must never answer gold");
        }
    }

    #[test]
    fn solve_rate_concentrates_near_p_correct() {
        let b = backend(StochasticProfile {
            p_correct: 0.6,
            seed: 9,
            ..Default::default()
        });
        let gold = CanonicalAnswer::Numeric(5.0);
        let trials = 10_000u32;
        let mut hits = 0u32;
        for i in 0..trials {
            let req = GenerationRequest::from_user_text("q <<gold:5>>").with_seed(i as u64);
            if answers_equal(&extracted(&b.complete(&req).unwrap().texts[0]), &gold, 1e-9) {
                hits += 1;
            }
        }
        let rate = f64::from(hits) / f64::from(trials);
        let three_sigma = 3.0 * (0.6f64 * 0.4 / f64::from(trials)).sqrt();
        assert!(
            (rate - 0.6).abs() <= three_sigma,
            "rate {rate} outside 0.6 +/- {three_sigma}"
        );
    }

    #[test]
    fn completed_solutions_are_restated_not_redrawn() {
        // p_correct = 0 would never produce 42 on a fresh draw.
        let b = backend(StochasticProfile {
            p_correct: 0.0,
            seed: 2,
            ..Default::default()
        });
        let req = GenerationRequest::from_messages(vec![
            Message::user("solve <<gold:42>>"),
            Message::assistant("Step 1: set it up.\n\nThe answer is 42."),
        ]);
        let reply = b.complete(&req).unwrap().texts[0].clone();
        assert!(
            answers_equal(&extracted(&reply), &CanonicalAnswer::Numeric(42.0), 1e-9),
            "expected restated 42, got {reply:?}"
        );
    }

    #[test]
    fn verify_mode_with_perfect_verifier() {
        let b = backend(StochasticProfile {
            verify_tpr: 1.0,
            verify_fpr: 0.0,
            seed: 5,
            ..Default::default()
        });
        let matching = GenerationRequest::from_user_text(
            "<<verify>> problem <<gold:12>>\n\nProposed solution:\nThe answer is 12.",
        );
        let reply = &b.complete(&matching).unwrap().texts[0];
        assert_eq!(parse_verdict(reply), Verdict::Correct);

        let mismatched = GenerationRequest::from_user_text(
            "<<verify>> problem <<gold:12>>\n\nProposed solution:\nThe answer is W1.",
        );
        let reply = &b.complete(&mismatched).unwrap().texts[0];
        assert_eq!(parse_verdict(reply), Verdict::Incorrect);
    }

    #[test]
    fn verify_mode_respects_candidate_tag_and_noisy_rates() {
        let b = backend(StochasticProfile {
            verify_tpr: 0.9,
            verify_fpr: 0.2,
            seed: 8,
            ..Default::default()
        });
        let trials = 5000u32;
        let mut tp = 0u32;
        let mut fp = 0u32;
        for i in 0..trials {
            let hit = GenerationRequest::from_user_text(format!(
                "<<verify>> q <<gold:3>> <<candidate:3>> case {i}"
            ));
            if parse_verdict(&b.complete(&hit).unwrap().texts[0]) == Verdict::Correct {
                tp += 1;
            }
            let miss = GenerationRequest::from_user_text(format!(
                "<<verify>> q <<gold:3>> <<candidate:W2>> case {i}"
            ));
            if parse_verdict(&b.complete(&miss).unwrap().texts[0]) == Verdict::Correct {
                fp += 1;
            }
        }
        let tpr = f64::from(tp) / f64::from(trials);
        let fpr = f64::from(fp) / f64::from(trials);
        let sigma_t = 3.0 * (0.9f64 * 0.1 / f64::from(trials)).sqrt();
        let sigma_f = 3.0 * (0.2f64 * 0.8 / f64::from(trials)).sqrt();
        assert!((tpr - 0.9).abs() <= sigma_t, "tpr {tpr}");
        assert!((fpr - 0.2).abs() <= sigma_f, "fpr {fpr}");
    }

    #[test]
    fn verify_mode_without_ground_truth_is_unparseable() {
        let b = backend(StochasticProfile::default());
        let req = GenerationRequest::from_user_text("<<verify>> nothing to check here");
        let reply = &b.complete(&req).unwrap().texts[0];
        assert_eq!(parse_verdict(reply), Verdict::Unparseable);
    }

    #[test]
    fn selfscore_mode_emits_bounded_scores() {
        let b = backend(StochasticProfile {
            seed: 6,
            ..Default::default()
        });
        for i in 0..20 {
            let req = GenerationRequest::from_user_text(format!(
                "<<selfscore>> partial solution {i}"
            ));
            let reply = b.complete(&req).unwrap().texts[0].clone();
            let score: f64 = reply
                .rsplit("Score: ")
                .next()
                .unwrap()
                .trim_end_matches('.')
                .trim()
                .parse()
                .unwrap();
            assert!((0.0..=1.0).contains(&score), "score {score} out of range");
        }
    }

    #[test]
    fn invalid_profiles_are_rejected() {
        assert!(StochasticBackend::new(StochasticProfile {
            p_correct: 1.5,
            ..Default::default()
        })
        .is_err());
        assert!(StochasticBackend::new(StochasticProfile {
            wrong_alphabet_size: 0,
            ..Default::default()
        })
        .is_err());
    }

    #[test]
    fn toy_corpus_is_deterministic_and_tagged() {
        let a = toy_questions(20, 42);
        let b = toy_questions(20, 42);
        assert_eq!(a, b);
        assert_ne!(a, toy_questions(20, 43));
        for q in &a {
            assert!(q.prompt_text.contains(&format!("<<gold:{}>>", q.golden_answer)));
        }
        // Unique ids.
        let ids: std::collections::HashSet<_> = a.iter().map(|q| q.id.clone()).collect();
        assert_eq!(ids.len(), a.len());
    }
}
