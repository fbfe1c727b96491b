//! Corpus record types and JSONL storage.
//!
//! Every dataset this crate reads or writes is a JSONL file: one JSON object
//! per line, UTF-8, no blank lines. Serialization is canonical (struct fields
//! in declaration order, unknown keys sorted), so re-serializing a loaded
//! record reproduces it byte for byte and output files diff cleanly across
//! runs. Unknown keys on questions are preserved in an `extra` map rather
//! than dropped, which is how auxiliary fields like stored figure
//! descriptions travel through pipelines that do not interpret them.

use crate::answers::{canonicalize, CanonicalAnswer, Verdict};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use thiserror::Error;

/// Reserved `extra` key holding a textual figure description, consumed by the
/// text-bridge pipeline.
pub const DIAGRAM_DESCRIPTION_KEY: &str = "diagram_description";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {detail}")]
    MalformedRecord {
        path: PathBuf,
        line: usize,
        detail: String,
    },
    #[error("{path}:{line}: duplicate question id {id:?}")]
    DuplicateId {
        path: PathBuf,
        line: usize,
        id: String,
    },
    #[error("source {source_name} has {available} questions, {requested} requested")]
    InsufficientSource {
        source_name: String,
        available: usize,
        requested: usize,
    },
    #[error("no file path configured for source {source_name}")]
    MissingSourcePath { source_name: String },
    #[error("refusing to write an empty dataset to {path}")]
    EmptyInput { path: PathBuf },
}

fn io_err(path: &Path, source: std::io::Error) -> CorpusError {
    CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Identifies which dataset a question came from.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Source {
    Geometry3K,
    FigureQA,
    Geos,
    SuperClevr,
    TabMwp,
    MavisGeo,
    Other(String),
}

impl Source {
    /// Stable lowercase key used in files and config.
    pub fn key(&self) -> &str {
        match self {
            Source::Geometry3K => "geometry3k",
            Source::FigureQA => "figureqa",
            Source::Geos => "geos",
            Source::SuperClevr => "super_clevr",
            Source::TabMwp => "tabmwp",
            Source::MavisGeo => "mavis_geo",
            Source::Other(s) => s,
        }
    }
}

impl FromStr for Source {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_lowercase();
        Ok(match norm.as_str() {
            "geometry3k" => Source::Geometry3K,
            "figureqa" => Source::FigureQA,
            "geos" => Source::Geos,
            "superclevr" => Source::SuperClevr,
            "tabmwp" => Source::TabMwp,
            "mavisgeo" => Source::MavisGeo,
            _ => Source::Other(s.to_string()),
        })
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Geometry3K => write!(f, "Geometry3K"),
            Source::FigureQA => write!(f, "FigureQA"),
            Source::Geos => write!(f, "GEOS"),
            Source::SuperClevr => write!(f, "Super-CLEVR"),
            Source::TabMwp => write!(f, "TabMWP"),
            Source::MavisGeo => write!(f, "MAVIS-Geo"),
            Source::Other(s) => write!(f, "{s}"),
        }
    }
}

impl Serialize for Source {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.key())
    }
}

impl<'de> Deserialize<'de> for Source {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Ok(Source::from_str(&s).expect("infallible"))
    }
}

/// One benchmark or training question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    #[serde(rename = "prompt")]
    pub prompt_text: String,
    #[serde(rename = "image", default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    #[serde(rename = "answer")]
    pub golden_answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<String>>,
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

/// Decoding parameters recorded alongside each sampled candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerParams {
    pub max_new_tokens: u32,
    pub temperature: f64,
    pub top_k: u32,
    pub repetition_penalty: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for SamplerParams {
    fn default() -> Self {
        Self {
            max_new_tokens: 4096,
            temperature: 0.3,
            top_k: 5,
            repetition_penalty: 1.05,
            seed: None,
        }
    }
}

/// One sampled solution attempt for a question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub question_id: String,
    /// Position of this candidate within its question's batch.
    pub index: u32,
    #[serde(rename = "reasoning")]
    pub reasoning_text: String,
    #[serde(rename = "answer", default, skip_serializing_if = "Option::is_none")]
    pub extracted_answer: Option<CanonicalAnswer>,
    /// Which component produced the trace (backend id, search, etc.).
    pub producer: String,
    #[serde(rename = "params")]
    pub sampler_params: SamplerParams,
}

/// The verdict a verifier model returned for one candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationRecord {
    pub question_id: String,
    pub candidate_index: u32,
    pub verdict: Verdict,
    #[serde(rename = "text")]
    pub verification_text: String,
    /// Backend id of the verifier that produced this record.
    pub verifier: String,
}

/// Why a cleaned example was kept: the verifier confirmed a matching answer,
/// or rejected a non-matching one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    ConfirmedCorrect,
    ConfirmedIncorrect,
}

/// A verification example that survived rule-based cleaning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanExample {
    pub question: Question,
    pub candidate: Candidate,
    pub verification: VerificationRecord,
    pub condition: Condition,
}

/// Input schema for [`load_questions`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CorpusSchema {
    /// Files written by this crate.
    #[default]
    Native,
    /// Description-annotated geometry questions: `question`, `diagram_description`,
    /// `answer`, plus optional `image`/`choices`/`category`.
    MavisBridge,
}

#[derive(Debug, Deserialize)]
struct MavisBridgeRecord {
    id: String,
    question: String,
    diagram_description: String,
    answer: String,
    #[serde(default)]
    image: Option<String>,
    #[serde(default)]
    choices: Option<Vec<String>>,
    #[serde(default)]
    category: Option<String>,
    #[serde(default)]
    source: Option<Source>,
}

impl From<MavisBridgeRecord> for Question {
    fn from(r: MavisBridgeRecord) -> Self {
        let mut extra = serde_json::Map::new();
        extra.insert(
            DIAGRAM_DESCRIPTION_KEY.to_string(),
            serde_json::Value::String(r.diagram_description),
        );
        Question {
            id: r.id,
            prompt_text: r.question,
            image_ref: r.image,
            golden_answer: r.answer,
            choices: r.choices,
            source: r.source.unwrap_or(Source::MavisGeo),
            category: r.category,
            extra,
        }
    }
}

/// Loads questions from a JSONL file, validating ids and choice answers.
///
/// An empty file loads as an empty list. Line numbers in errors are 1-based.
pub fn load_questions(path: &Path, schema: CorpusSchema) -> Result<Vec<Question>, CorpusError> {
    let questions: Vec<Question> = match schema {
        CorpusSchema::Native => read_records(path)?,
        CorpusSchema::MavisBridge => read_records::<MavisBridgeRecord>(path)?
            .into_iter()
            .map(Question::from)
            .collect(),
    };
    let mut seen = std::collections::HashSet::new();
    for (i, q) in questions.iter().enumerate() {
        let line = i + 1;
        if q.id.trim().is_empty() {
            return Err(CorpusError::MalformedRecord {
                path: path.to_path_buf(),
                line,
                detail: "empty question id".into(),
            });
        }
        if !seen.insert(q.id.clone()) {
            return Err(CorpusError::DuplicateId {
                path: path.to_path_buf(),
                line,
                id: q.id.clone(),
            });
        }
        if let Some(choices) = &q.choices {
            let ok = matches!(
                canonicalize(&q.golden_answer),
                Ok(CanonicalAnswer::Choice(c))
                    if (c as usize) >= ('A' as usize)
                        && ((c as usize) - ('A' as usize)) < choices.len()
            );
            if !ok {
                return Err(CorpusError::MalformedRecord {
                    path: path.to_path_buf(),
                    line,
                    detail: format!(
                        "choice question {:?} has golden answer {:?}, expected a letter within its {} choices",
                        q.id,
                        q.golden_answer,
                        choices.len()
                    ),
                });
            }
        }
    }
    Ok(questions)
}

/// Reads any JSONL record type, with 1-based line numbers in errors.
pub fn read_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CorpusError> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| CorpusError::MalformedRecord {
            path: path.to_path_buf(),
            line: i + 1,
            detail: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

/// Writes records as JSONL with canonical serialization and returns how many
/// lines were written. The parent directory must already exist.
pub fn write_records<T: Serialize>(path: &Path, records: &[T]) -> Result<usize, CorpusError> {
    let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut writer = BufWriter::new(file);
    for record in records {
        let line = serde_json::to_string(record).map_err(|e| CorpusError::MalformedRecord {
            path: path.to_path_buf(),
            line: 0,
            detail: e.to_string(),
        })?;
        writer.write_all(line.as_bytes()).map_err(|e| io_err(path, e))?;
        writer.write_all(b"\n").map_err(|e| io_err(path, e))?;
    }
    writer.flush().map_err(|e| io_err(path, e))?;
    Ok(records.len())
}

/// How many questions to draw from each source, and the draw seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub counts: BTreeMap<Source, usize>,
    pub seed: u64,
}

impl PoolSpec {
    /// The reference multi-source training mix shipped with the toolkit:
    /// 59,772 questions across the five standard sources.
    pub fn reference_mix(seed: u64) -> Self {
        Self {
            counts: BTreeMap::from([
                (Source::Geometry3K, 20_226),
                (Source::FigureQA, 10_800),
                (Source::Geos, 882),
                (Source::SuperClevr, 14_446),
                (Source::TabMwp, 13_418),
            ]),
            seed,
        }
    }

    /// Total questions the spec will draw.
    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }
}

/// Assembles a training pool by sampling, without replacement, the requested
/// number of questions from each source file.
///
/// Sampling for each source uses an independent RNG derived from the pool
/// seed and the source key, so adding or removing one source never changes
/// which questions are drawn from the others. Within a source, drawn
/// questions keep their file order; sources are emitted in the order of the
/// spec's count map.
pub fn assemble_pool(
    source_paths: &BTreeMap<Source, PathBuf>,
    spec: &PoolSpec,
) -> Result<Vec<Question>, CorpusError> {
    let mut pool = Vec::new();
    for (source, &requested) in &spec.counts {
        let path = source_paths
            .get(source)
            .ok_or_else(|| CorpusError::MissingSourcePath {
                source_name: source.key().to_string(),
            })?;
        let questions = load_questions(path, CorpusSchema::Native)?;
        if requested > questions.len() {
            return Err(CorpusError::InsufficientSource {
                source_name: source.key().to_string(),
                available: questions.len(),
                requested,
            });
        }
        let seed = crate::util::mix_seed(spec.seed, &["pool", source.key()]);
        let mut rng = crate::util::rng_from_seed(seed);
        let mut picked = rand::seq::index::sample(&mut rng, questions.len(), requested).into_vec();
        picked.sort_unstable();
        for idx in picked {
            pool.push(questions[idx].clone());
        }
    }
    Ok(pool)
}

/// One conversational fine-tuning record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SftRecord {
    pub id: String,
    pub messages: Vec<SftTurn>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SftTurn {
    pub role: String,
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
}

/// Converts cleaned verification examples into a conversational SFT dataset:
/// the user turn presents the question and candidate solution (with the
/// question image when present), the assistant turn is the verification text.
pub fn emit_sft_dataset(examples: &[CleanExample], path: &Path) -> Result<usize, CorpusError> {
    if examples.is_empty() {
        return Err(CorpusError::EmptyInput {
            path: path.to_path_buf(),
        });
    }
    let records: Vec<SftRecord> = examples
        .iter()
        .map(|ex| SftRecord {
            id: format!("{}#{}", ex.question.id, ex.candidate.index),
            messages: vec![
                SftTurn {
                    role: "user".into(),
                    content: format!(
                        "{}\n\nProposed solution:\n{}",
                        ex.question.prompt_text, ex.candidate.reasoning_text
                    ),
                    image: ex.question.image_ref.clone(),
                },
                SftTurn {
                    role: "assistant".into(),
                    content: ex.verification.verification_text.clone(),
                    image: None,
                },
            ],
        })
        .collect();
    write_records(path, &records)
}
