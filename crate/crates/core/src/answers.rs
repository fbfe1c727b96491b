//! Answer canonicalization, comparison, extraction, and verdict parsing.
//!
//! Free-form model output is reduced to a [`CanonicalAnswer`] so that "The
//! answer is $4,200." and "4200" compare equal. Comparison is exact for
//! choices and normalized text, and tolerance-based for numbers. Verdict
//! parsing reads the tail of a verification response and applies negation
//! before affirmation, so "not correct" never parses as a pass.

use crate::backend::{Backend, GenerationRequest};
use crate::templates::{PromptTemplate, DEFAULT_EXTRACT};
use regex::Regex;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::{Arc, LazyLock};
use thiserror::Error;

/// Default relative tolerance for numeric answer comparison.
pub const DEFAULT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AnswerError {
    #[error("empty answer text")]
    EmptyAnswer,
}

/// A parsed answer in one of three comparable forms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum CanonicalAnswer {
    /// A finite number, including values parsed from fractions and percents.
    Numeric(f64),
    /// A single choice letter, stored uppercase.
    Choice(char),
    /// Anything else, lowercased with whitespace collapsed.
    Text(String),
}

impl fmt::Display for CanonicalAnswer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CanonicalAnswer::Numeric(v) => {
                if v.fract() == 0.0 && v.abs() < 1e15 {
                    write!(f, "{}", *v as i64)
                } else {
                    write!(f, "{v}")
                }
            }
            CanonicalAnswer::Choice(c) => write!(f, "{c}"),
            CanonicalAnswer::Text(s) => write!(f, "{s}"),
        }
    }
}

static THOUSANDS_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^[+-]?\d{1,3}(,\d{3})+(\.\d+)?$").unwrap());
static FRAC_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\\d?frac\{([+-]?[\d.]+)\}\{([+-]?[\d.]+)\}$").unwrap());
static NUM_TOKEN_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"[+-]?\d[\d,]*(?:\.\d+)?(?:\s*/\s*[+-]?\d+(?:\.\d+)?)?(?:[eE][+-]?\d+)?").unwrap()
});
static CHOICE_TOKEN_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\b[A-Z]\b").unwrap());

/// Parses `raw` into its canonical form.
///
/// Priority order: a single (optionally parenthesized) letter is a [`CanonicalAnswer::Choice`];
/// anything that parses as a number, after stripping `$`, `%`, thousands
/// commas, and trailing punctuation, and after evaluating simple fractions,
/// is a [`CanonicalAnswer::Numeric`]; everything else is normalized [`CanonicalAnswer::Text`].
/// Only whitespace (or text that normalizes to nothing) is an error.
pub fn canonicalize(raw: &str) -> Result<CanonicalAnswer, AnswerError> {
    let s = raw.trim().trim_matches(['*', '`']).trim();
    if s.is_empty() {
        return Err(AnswerError::EmptyAnswer);
    }
    if let Some(c) = parse_choice(s) {
        return Ok(CanonicalAnswer::Choice(c));
    }
    if let Some(v) = parse_number(s) {
        return Ok(CanonicalAnswer::Numeric(v));
    }
    let text = normalize_text(s);
    if text.is_empty() {
        return Err(AnswerError::EmptyAnswer);
    }
    Ok(CanonicalAnswer::Text(text))
}

fn parse_choice(s: &str) -> Option<char> {
    let t = s
        .trim_matches(|c: char| matches!(c, '(' | ')' | '[' | ']' | '.' | ',' | ':' | ';') || c.is_whitespace());
    let mut chars = t.chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) if c.is_ascii_alphabetic() => Some(c.to_ascii_uppercase()),
        _ => None,
    }
}

/// Numeric parsing shared by canonicalization and comparison. Returns a
/// finite value or `None`.
fn parse_number(s: &str) -> Option<f64> {
    let mut t = s.trim();
    t = t.trim_end_matches(['.', ',', ';', ':', '!', '?']).trim_end();
    if t.len() >= 2 && t.starts_with('(') && t.ends_with(')') {
        t = t[1..t.len() - 1].trim();
    }
    if let Some(rest) = t.strip_prefix('$') {
        t = rest.trim_start();
    }
    if let Some(rest) = t.strip_suffix('%') {
        t = rest.trim_end();
    }
    if t.is_empty() {
        return None;
    }
    if let Some(caps) = FRAC_RE.captures(t) {
        let num: f64 = caps[1].parse().ok()?;
        let den: f64 = caps[2].parse().ok()?;
        let v = num / den;
        return v.is_finite().then_some(v);
    }
    if let Some((a, b)) = t.split_once('/') {
        if let (Ok(num), Ok(den)) = (a.trim().parse::<f64>(), b.trim().parse::<f64>()) {
            let v = num / den;
            return v.is_finite().then_some(v);
        }
    }
    let cleaned = if THOUSANDS_RE.is_match(t) {
        t.replace(',', "")
    } else {
        t.to_string()
    };
    match cleaned.parse::<f64>() {
        Ok(v) if v.is_finite() => Some(v),
        _ => None,
    }
}

fn normalize_text(s: &str) -> String {
    let collapsed = s.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed
        .to_lowercase()
        .trim_end_matches(['.', '!', '?', ',', ';', ':'])
        .trim()
        .to_string()
}

/// Compares two canonical answers.
///
/// Numbers compare within relative tolerance `tol`, except that when either
/// side is exactly zero the comparison is absolute (a relative bound around
/// zero would accept nothing). Text is compared against numbers by re-parsing,
/// so `Text("4 ")` from one pipeline equals `Numeric(4.0)` from another.
/// Choices only ever equal choices.
pub fn answers_equal(a: &CanonicalAnswer, b: &CanonicalAnswer, tol: f64) -> bool {
    use CanonicalAnswer::*;
    match (a, b) {
        (Numeric(x), Numeric(y)) => numeric_equal(*x, *y, tol),
        (Choice(p), Choice(q)) => p.eq_ignore_ascii_case(q),
        (Text(s), Text(t)) => s == t,
        (Numeric(x), Text(t)) | (Text(t), Numeric(x)) => {
            parse_number(t).is_some_and(|y| numeric_equal(*x, y, tol))
        }
        (Choice(_), _) | (_, Choice(_)) => false,
    }
}

fn numeric_equal(x: f64, y: f64, tol: f64) -> bool {
    if x == y {
        return true;
    }
    let diff = (x - y).abs();
    if x == 0.0 || y == 0.0 {
        return diff <= tol;
    }
    diff <= tol * x.abs().max(y.abs())
}

// ---------------------------------------------------------------------------
// Answer extraction
// ---------------------------------------------------------------------------

/// How [`extract_answer`] pulls an answer out of a reasoning trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorMode {
    /// Boxed expressions, cue phrases, then a final-line fallback.
    #[default]
    RuleBased,
    /// Ask a model to restate the answer, then canonicalize its reply.
    ModelBased,
}

/// Extraction settings. The model handle is only consulted in
/// [`ExtractorMode::ModelBased`]; if it is absent the extractor falls back to
/// rule-based so a misconfigured run degrades loudly in logs, not silently in
/// output shape.
#[derive(Clone)]
pub struct ExtractorConfig {
    pub mode: ExtractorMode,
    pub model: Option<Arc<dyn Backend>>,
    pub template: PromptTemplate,
}

impl fmt::Debug for ExtractorConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ExtractorConfig")
            .field("mode", &self.mode)
            .field("model", &self.model.as_ref().map(|b| b.id()))
            .finish()
    }
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self::rule_based()
    }
}

impl ExtractorConfig {
    pub fn rule_based() -> Self {
        Self {
            mode: ExtractorMode::RuleBased,
            model: None,
            template: PromptTemplate::new(DEFAULT_EXTRACT, &["response"])
                .expect("default extract template is valid"),
        }
    }

    pub fn model_based(model: Arc<dyn Backend>) -> Self {
        Self {
            mode: ExtractorMode::ModelBased,
            model: Some(model),
            template: PromptTemplate::new(DEFAULT_EXTRACT, &["response"])
                .expect("default extract template is valid"),
        }
    }
}

/// Pulls the final answer out of a reasoning trace, or `None` when the trace
/// never states one.
pub fn extract_answer(text: &str, config: &ExtractorConfig) -> Option<CanonicalAnswer> {
    match config.mode {
        ExtractorMode::RuleBased => extract_rule_based(text),
        ExtractorMode::ModelBased => match &config.model {
            Some(model) => extract_model_based(text, model.as_ref(), &config.template),
            None => extract_rule_based(text),
        },
    }
}

/// Whether `text` explicitly states a final answer (a boxed expression or a
/// cue phrase). Deliberately stricter than extraction's last-resort fallback:
/// a step that merely mentions a number is not a conclusion.
pub fn contains_final_answer_cue(text: &str) -> bool {
    if text.contains("\\boxed{") {
        return true;
    }
    text.lines().any(|line| {
        let lower = line.to_lowercase();
        CUES.iter().any(|cue| lower.contains(cue))
    })
}

fn extract_rule_based(text: &str) -> Option<CanonicalAnswer> {
    if let Some(inner) = last_boxed(text) {
        if let Ok(ans) = canonicalize(inner) {
            return Some(ans);
        }
    }
    // Scan lines bottom-up for a final-answer cue or an `=` conclusion.
    for line in text.lines().rev() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(ans) = cue_extract(line) {
            return Some(ans);
        }
        if let Some(ans) = equals_extract(line) {
            return Some(ans);
        }
    }
    // Fallback: the last standalone number or choice letter in the final line.
    let line = text.lines().rev().map(str::trim).find(|l| !l.is_empty())?;
    final_line_fallback(line)
}

fn last_boxed(text: &str) -> Option<&str> {
    let start = text.rfind("\\boxed{")?;
    let inner_start = start + "\\boxed{".len();
    let mut depth = 1usize;
    for (i, ch) in text[inner_start..].char_indices() {
        match ch {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[inner_start..inner_start + i]);
                }
            }
            _ => {}
        }
    }
    None
}

const CUES: [&str; 3] = ["final answer", "answer is", "answer:"];
const TAIL_FILLERS: [&str; 5] = ["approximately ", "about ", "roughly ", "around ", "equal to "];

fn cue_extract(line: &str) -> Option<CanonicalAnswer> {
    // Work entirely on the lowercased line: byte offsets from a lowercase
    // search must never be used to slice the original (lowercasing can change
    // byte lengths outside ASCII), and canonicalization lowercases text anyway.
    let lower = line.to_lowercase();
    let mut best: Option<(usize, usize)> = None;
    for cue in CUES {
        let mut from = 0;
        while let Some(pos) = lower[from..].find(cue) {
            let start = from + pos;
            if best.is_none_or(|(s, _)| start >= s) {
                best = Some((start, start + cue.len()));
            }
            from = start + 1;
        }
    }
    let (_, end) = best?;
    let mut tail = lower[end..].trim_start_matches([':', '=', ' ', '\t']);
    loop {
        let before = tail;
        for filler in TAIL_FILLERS {
            tail = tail.strip_prefix(filler).unwrap_or(tail).trim_start();
        }
        if tail == before {
            break;
        }
    }
    if tail.is_empty() {
        return None;
    }
    let ans = canonicalize(tail).ok()?;
    if let CanonicalAnswer::Text(_) = &ans {
        // "10 meters" or "A because ..." — try the leading token before
        // settling for text.
        if let Some(first) = tail.split_whitespace().next() {
            if let Some(v) = parse_number(first) {
                return Some(CanonicalAnswer::Numeric(v));
            }
            if let Some(c) = parse_choice(first) {
                return Some(CanonicalAnswer::Choice(c));
            }
        }
    }
    Some(ans)
}

fn equals_extract(line: &str) -> Option<CanonicalAnswer> {
    let pos = line.rfind('=')?;
    let rhs = line[pos + 1..].trim();
    if rhs.is_empty() || rhs.len() > 40 {
        return None;
    }
    match canonicalize(rhs) {
        Ok(ans @ (CanonicalAnswer::Numeric(_) | CanonicalAnswer::Choice(_))) => Some(ans),
        _ => None,
    }
}

fn final_line_fallback(line: &str) -> Option<CanonicalAnswer> {
    let number = NUM_TOKEN_RE
        .find_iter(line)
        .filter_map(|m| parse_number(m.as_str()).map(|v| (m.start(), v)))
        .last();
    let choice = CHOICE_TOKEN_RE
        .find_iter(line)
        .last()
        .map(|m| (m.start(), m.as_str().chars().next().unwrap()));
    match (number, choice) {
        (Some((np, v)), Some((cp, _))) if np >= cp => Some(CanonicalAnswer::Numeric(v)),
        (_, Some((_, c))) => Some(CanonicalAnswer::Choice(c)),
        (Some((_, v)), None) => Some(CanonicalAnswer::Numeric(v)),
        (None, None) => None,
    }
}

fn extract_model_based(
    text: &str,
    model: &dyn Backend,
    template: &PromptTemplate,
) -> Option<CanonicalAnswer> {
    let prompt = template.fill(&[("response", text)]);
    let mut req = GenerationRequest::from_user_text(prompt);
    req.temperature = 0.0;
    req.max_new_tokens = 256;
    let response = model.complete(&req).ok()?;
    let reply = response.texts.first()?.trim();
    if reply.is_empty() || reply.eq_ignore_ascii_case("none") {
        return None;
    }
    canonicalize(reply).ok()
}

// ---------------------------------------------------------------------------
// Verdict parsing
// ---------------------------------------------------------------------------

/// Outcome of parsing a verification response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Correct,
    Incorrect,
    Unparseable,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Correct => write!(f, "correct"),
            Verdict::Incorrect => write!(f, "incorrect"),
            Verdict::Unparseable => write!(f, "unparseable"),
        }
    }
}

/// Marker phrases that decide a verdict. Matching is case-insensitive
/// substring search over the final paragraph of the response, and negative
/// markers always win, so a reply containing "not correct" can never parse as
/// [`Verdict::Correct`] no matter what else it says.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerdictGrammar {
    pub negative_markers: Vec<String>,
    pub positive_markers: Vec<String>,
}

impl Default for VerdictGrammar {
    fn default() -> Self {
        Self {
            negative_markers: vec!["not correct".into(), "incorrect".into()],
            positive_markers: vec![
                "is correct".into(),
                "verdict: correct".into(),
                "boxed{correct}".into(),
                "answer: correct".into(),
            ],
        }
    }
}

/// Parses a verdict with the default grammar.
pub fn parse_verdict(text: &str) -> Verdict {
    parse_verdict_with(&VerdictGrammar::default(), text)
}

/// Parses the final non-empty paragraph of `text`: negative markers first,
/// then positive markers, else [`Verdict::Unparseable`]. The result is
/// `Unparseable` if and only if no marker matched.
pub fn parse_verdict_with(grammar: &VerdictGrammar, text: &str) -> Verdict {
    let Some(segment) = final_paragraph(text) else {
        return Verdict::Unparseable;
    };
    let lower = segment.to_lowercase();
    if grammar
        .negative_markers
        .iter()
        .any(|m| lower.contains(&m.to_lowercase()))
    {
        return Verdict::Incorrect;
    }
    if grammar
        .positive_markers
        .iter()
        .any(|m| lower.contains(&m.to_lowercase()))
    {
        return Verdict::Correct;
    }
    Verdict::Unparseable
}

fn final_paragraph(text: &str) -> Option<&str> {
    static PARA_SPLIT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\n\s*\n").unwrap());
    PARA_SPLIT
        .split(text)
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .last()
}

#[cfg(test)]
mod tests {
    use super::*;
    use CanonicalAnswer::{Choice, Numeric, Text};

    #[test]
    fn canonicalize_choice_forms() {
        assert_eq!(canonicalize("(B)").unwrap(), Choice('B'));
        assert_eq!(canonicalize("b").unwrap(), Choice('B'));
        assert_eq!(canonicalize(" [c] ").unwrap(), Choice('C'));
        assert_eq!(canonicalize("D.").unwrap(), Choice('D'));
    }

    #[test]
    fn canonicalize_numeric_forms() {
        assert_eq!(canonicalize("  4,200 ").unwrap(), Numeric(4200.0));
        assert_eq!(canonicalize("3/4").unwrap(), Numeric(0.75));
        assert_eq!(canonicalize("$12.5").unwrap(), Numeric(12.5));
        assert_eq!(canonicalize("50%").unwrap(), Numeric(50.0));
        assert_eq!(canonicalize("-2.5e3").unwrap(), Numeric(-2500.0));
        assert_eq!(canonicalize("(42)").unwrap(), Numeric(42.0));
        assert_eq!(canonicalize("12.").unwrap(), Numeric(12.0));
        assert_eq!(canonicalize(r"\frac{3}{4}").unwrap(), Numeric(0.75));
    }

    #[test]
    fn canonicalize_rejects_non_finite() {
        assert_eq!(canonicalize("inf").unwrap(), Text("inf".into()));
        assert_eq!(canonicalize("NaN").unwrap(), Text("nan".into()));
        assert_eq!(canonicalize("1/0").unwrap(), Text("1/0".into()));
    }

    #[test]
    fn canonicalize_text_normalizes() {
        assert_eq!(canonicalize("yes").unwrap(), Text("yes".into()));
        assert_eq!(
            canonicalize("  The   Train  leaves. ").unwrap(),
            Text("the train leaves".into())
        );
        assert_eq!(canonicalize("").unwrap_err(), AnswerError::EmptyAnswer);
        assert_eq!(canonicalize("   ").unwrap_err(), AnswerError::EmptyAnswer);
    }

    #[test]
    fn equality_relative_tolerance() {
        let a = Numeric(100.0);
        let b = Numeric(100.0000002);
        assert!(answers_equal(&a, &b, 1e-6));
        assert!(!answers_equal(&a, &b, 1e-9));
    }

    #[test]
    fn equality_absolute_near_zero() {
        assert!(answers_equal(&Numeric(0.0), &Numeric(1e-9), 1e-6));
        assert!(!answers_equal(&Numeric(0.0), &Numeric(1e-3), 1e-6));
    }

    #[test]
    fn equality_across_kinds() {
        assert!(answers_equal(&Choice('b'), &Choice('B'), 1e-6));
        assert!(answers_equal(&Numeric(4.0), &Text("4".into()), 1e-6));
        assert!(answers_equal(&Text("0.5".into()), &Numeric(0.5), 1e-6));
        assert!(!answers_equal(&Choice('B'), &Text("b".into()), 1e-6));
        assert!(!answers_equal(&Choice('C'), &Numeric(3.0), 1e-6));
        assert!(answers_equal(&Text("yes".into()), &Text("yes".into()), 1e-6));
        assert!(!answers_equal(&Text("yes".into()), &Text("no".into()), 1e-6));
    }

    #[test]
    fn equality_is_symmetric_on_random_pairs() {
        use rand::Rng;
        let mut rng = crate::util::rng_from_seed(7);
        let pool: Vec<CanonicalAnswer> = (0..40)
            .map(|i| match i % 4 {
                0 => Numeric(rng.random_range(-50.0..50.0)),
                1 => Choice((b'A' + rng.random_range(0..6u8)) as char),
                2 => Text(format!("w{}", rng.random_range(0..5u8))),
                _ => Numeric(0.0),
            })
            .collect();
        for a in &pool {
            for b in &pool {
                assert_eq!(
                    answers_equal(a, b, 1e-6),
                    answers_equal(b, a, 1e-6),
                    "asymmetry for {a:?} vs {b:?}"
                );
            }
        }
    }

    #[test]
    fn display_round_trips_through_canonicalize() {
        for ans in [Numeric(4200.0), Numeric(0.75), Choice('B'), Text("yes".into())] {
            let shown = ans.to_string();
            let back = canonicalize(&shown).unwrap();
            assert!(answers_equal(&ans, &back, 1e-9), "{ans:?} -> {shown} -> {back:?}");
        }
    }

    #[test]
    fn extraction_prefers_last_boxed() {
        let cfg = ExtractorConfig::rule_based();
        let text = "Try \\boxed{10}. Correcting: \\boxed{12}";
        assert_eq!(extract_answer(text, &cfg).unwrap(), Numeric(12.0));
        let nested = "so \\boxed{\\frac{3}{4}} holds";
        assert_eq!(extract_answer(nested, &cfg).unwrap(), Numeric(0.75));
    }

    #[test]
    fn extraction_cue_lines_scan_bottom_up() {
        let cfg = ExtractorConfig::rule_based();
        let text = "The answer is 10.\nWait, recheck.\nThe answer is 12.";
        assert_eq!(extract_answer(text, &cfg).unwrap(), Numeric(12.0));
    }

    #[test]
    fn extraction_equals_conclusion() {
        let cfg = ExtractorConfig::rule_based();
        assert_eq!(extract_answer("Area = 16", &cfg).unwrap(), Numeric(16.0));
        assert_eq!(
            extract_answer("x + y = 3, so x = 2", &cfg).unwrap(),
            Numeric(2.0)
        );
    }

    #[test]
    fn extraction_final_line_fallback() {
        let cfg = ExtractorConfig::rule_based();
        assert_eq!(
            extract_answer("Therefore the total is 18 apples", &cfg).unwrap(),
            Numeric(18.0)
        );
        assert_eq!(
            extract_answer("The correct option is B", &cfg).unwrap(),
            Choice('B')
        );
        assert_eq!(
            extract_answer("Option B gives 42", &cfg).unwrap(),
            Numeric(42.0)
        );
        assert_eq!(extract_answer("No conclusion here.", &cfg), None);
    }

    // A small hand-labeled corpus pinning rule-based extraction behavior.
    // The gate is agreement on at least 45 of the 50 texts, leaving room for
    // deliberate judgment calls to move without breaking the build.
    #[test]
    fn extraction_agrees_with_labeled_corpus() {
        fn n(v: f64) -> Option<CanonicalAnswer> {
            Some(Numeric(v))
        }
        fn c(ch: char) -> Option<CanonicalAnswer> {
            Some(Choice(ch))
        }
        fn t(s: &str) -> Option<CanonicalAnswer> {
            Some(Text(s.into()))
        }
        let corpus: Vec<(&str, Option<CanonicalAnswer>)> = vec![
            ("We compute the area.\n\nThus \\boxed{42}.", n(42.0)),
            ("First try \\boxed{10}, but correcting: \\boxed{12}", n(12.0)),
            ("\\boxed{\\frac{3}{4}}", n(0.75)),
            ("The value is \\boxed{B}", c('B')),
            ("So \\boxed{3.5} cm.", n(3.5)),
            ("\\boxed{-7}", n(-7.0)),
            ("Answer: \\boxed{1/2}", n(0.5)),
            ("hence \\boxed{yes}", t("yes")),
            ("Step 1: count.\nThe answer is 42.", n(42.0)),
            ("long derivation\nThe answer is (B).", c('B')),
            ("Final answer: 3/4", n(0.75)),
            ("The final answer is $12.50.", n(12.5)),
            ("Thus the answer is approximately 6.28", n(6.28)),
            ("So the final answer is B", c('B')),
            ("Answer: 100", n(100.0)),
            ("My answer is the train leaves at noon", t("the train leaves at noon")),
            ("The answer is 4,200", n(4200.0)),
            ("The answer is 50%", n(50.0)),
            ("The answer is 10.\nWait.\nThe answer is 12.", n(12.0)),
            ("the ANSWER IS: 7", n(7.0)),
            ("Final Answer\n42", n(42.0)),
            ("The answer is -3/4.", n(-0.75)),
            ("Final answer: (d)", c('D')),
            ("a naïve check: the answer is 5", n(5.0)),
            ("The answer is 10 meters", n(10.0)),
            ("The answer is A because of symmetry", c('A')),
            ("Note 22/7 is close. The answer is 22/7.", n(22.0 / 7.0)),
            ("The answer is yes.", t("yes")),
            ("Thus the answer is 0", n(0.0)),
            ("The answer is 2e3", n(2000.0)),
            ("Area = 16", n(16.0)),
            ("To conclude: z = 9", n(9.0)),
            ("x + y = 3, so x = 2", n(2.0)),
            ("radius = 2.5", n(2.5)),
            ("area = 2*5 = 10", n(10.0)),
            ("Therefore the total is 18 apples", n(18.0)),
            ("Thus we get 3.14 for the circle", n(3.14)),
            ("Counting gives 7", n(7.0)),
            ("So there are 12 ways", n(12.0)),
            ("The correct option is B", c('B')),
            ("Best choice: C", c('C')),
            ("After simplification we obtain -5", n(-5.0)),
            ("Probability 1/2", n(0.5)),
            ("It must be 2e3", n(2000.0)),
            ("Roughly 6,000 students", n(6000.0)),
            ("I cannot determine the result.", None),
            ("Need more information", None),
            ("The diagram is unclear, sorry.", None),
            ("Let x be the unknown.", None),
            ("B", c('B')),
        ];
        assert_eq!(corpus.len(), 50);
        let cfg = ExtractorConfig::rule_based();
        let mut agree = 0;
        let mut misses = Vec::new();
        for (text, expected) in &corpus {
            let got = extract_answer(text, &cfg);
            let ok = match (&got, expected) {
                (None, None) => true,
                (Some(g), Some(e)) => answers_equal(g, e, 1e-9),
                _ => false,
            };
            if ok {
                agree += 1;
            } else {
                misses.push(format!("{text:?}: got {got:?}, want {expected:?}"));
            }
        }
        assert!(
            agree >= 45,
            "only {agree}/50 agreed; misses:\n{}",
            misses.join("\n")
        );
    }

    #[test]
    fn verdict_basic_markers() {
        assert_eq!(
            parse_verdict("Checked every step.\n\nThe answer is correct."),
            Verdict::Correct
        );
        assert_eq!(
            parse_verdict("Checked every step.\n\nThe answer is not correct."),
            Verdict::Incorrect
        );
        assert_eq!(parse_verdict("Hard to say."), Verdict::Unparseable);
        assert_eq!(parse_verdict(""), Verdict::Unparseable);
        assert_eq!(parse_verdict("VERDICT: CORRECT"), Verdict::Correct);
        assert_eq!(parse_verdict("VERDICT: INCORRECT"), Verdict::Incorrect);
        assert_eq!(parse_verdict("so \\boxed{correct}"), Verdict::Correct);
    }

    #[test]
    fn verdict_reads_only_final_paragraph() {
        let text = "The answer is correct.\n\nOn reflection, the answer is not correct.";
        assert_eq!(parse_verdict(text), Verdict::Incorrect);
        let text2 = "The answer is not correct.\n\nRevised: the answer is correct.";
        assert_eq!(parse_verdict(text2), Verdict::Correct);
    }

    #[test]
    fn verdict_negation_beats_affirmation() {
        assert_eq!(
            parse_verdict("The answer is correct? No: the answer is not correct."),
            Verdict::Incorrect
        );
        assert_eq!(
            parse_verdict("The answer is incorrect, though step 1 is correct."),
            Verdict::Incorrect
        );
    }

    #[test]
    fn verdict_custom_grammar() {
        let grammar = VerdictGrammar {
            negative_markers: vec!["reject".into()],
            positive_markers: vec!["accept".into()],
        };
        assert_eq!(parse_verdict_with(&grammar, "ACCEPT"), Verdict::Correct);
        assert_eq!(parse_verdict_with(&grammar, "accept, but reject"), Verdict::Incorrect);
        assert_eq!(
            parse_verdict_with(&grammar, "the answer is correct"),
            Verdict::Unparseable
        );
    }
}
