//! Synthetic instruction-dataset generation.
//!
//! Per source chunk: ask the chat model for one question, then for a
//! chain-of-thought answer whose cited quotes are validated verbatim
//! against the chunk, then assemble an instruction example mixing the
//! source ("golden") document with sampled distractors — sometimes
//! leaving the golden document out so the reader learns to ignore
//! irrelevant context. Failures skip the chunk, never the run.

pub mod templates;

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clients::{ChatClient, ChatMessage, ChatRequest};
use crate::corpus::{Corpus, DocumentChunk};
use crate::seeded::{self, bernoulli, rng_for, sample_indices, shuffle};

/// Marks the final answer inside a chain-of-thought generation.
pub const ANSWER_DELIMITER: &str = "<ANSWER>:";
/// Opens a verbatim citation span.
pub const QUOTE_BEGIN: &str = "##begin_quote##";
/// Closes a verbatim citation span.
pub const QUOTE_END: &str = "##end_quote##";

const QUESTION_MAX_TOKENS: u32 = 128;
const ANSWER_MAX_TOKENS: u32 = 1024;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("unknown template version \"{requested}\" (known versions: {known})")]
    UnknownTemplateVersion { requested: String, known: String },
    #[error("chunk {chunk_id} skipped at {stage} stage after {attempts} attempts: {detail}")]
    ChunkSkipped {
        chunk_id: String,
        stage: Stage,
        attempts: u32,
        detail: String,
    },
    #[error("distractor pool too small: {required} distractors required, {available} available")]
    PoolTooSmall { required: usize, available: usize },
    #[error("distractor pool contains the golden chunk {chunk_id}")]
    PoolContainsGolden { chunk_id: String },
    #[error("chunk {chunk_id} is not in the distractor pool corpus")]
    ChunkNotInPool { chunk_id: String },
    #[error("chunk {chunk_id} has empty text")]
    EmptyChunkText { chunk_id: String },
    #[error("invalid generation config: {message}")]
    InvalidConfig { message: String },
    #[error("dataset I/O at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

/// Pipeline stage a skipped chunk failed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Question,
    Answer,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Question => "question",
            Stage::Answer => "answer",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    /// Distractor documents sampled per example; every example carries
    /// `num_distractors + 1` documents total.
    pub num_distractors: usize,
    /// Probability the golden document is included in its example.
    pub p_golden: f64,
    pub question_temperature: f64,
    pub answer_temperature: f64,
    /// Extra attempts per chunk and stage after the first one.
    pub max_retries_per_chunk: u32,
    pub seed: u64,
    pub template_version: String,
    /// Bounded in-flight chat requests during `run_datagen`.
    pub concurrency: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            num_distractors: 3,
            p_golden: 0.8,
            question_temperature: 0.7,
            answer_temperature: 0.2,
            max_retries_per_chunk: 2,
            seed: 0,
            template_version: "v1".to_string(),
            concurrency: 4,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), DatagenError> {
        if !(0.0..=1.0).contains(&self.p_golden) {
            return Err(DatagenError::InvalidConfig {
                message: format!("p_golden {} outside [0, 1]", self.p_golden),
            });
        }
        if self.concurrency == 0 {
            return Err(DatagenError::InvalidConfig {
                message: "concurrency must be at least 1".to_string(),
            });
        }
        templates::ensure_version(&self.template_version)
            .map_err(|e| DatagenError::InvalidConfig { message: e.to_string() })
    }
}

/// Chain-of-thought training target: reasoning with verbatim citation
/// spans, plus the extracted final answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CotAnswer {
    pub reasoning: String,
    pub final_answer: String,
}

impl CotAnswer {
    /// The citation spans embedded in the reasoning, in order.
    pub fn quote_spans(&self) -> Vec<&str> {
        let mut spans = Vec::new();
        let mut rest = self.reasoning.as_str();
        while let Some(start) = rest.find(QUOTE_BEGIN) {
            let after = &rest[start + QUOTE_BEGIN.len()..];
            match after.find(QUOTE_END) {
                Some(end) => {
                    spans.push(&after[..end]);
                    rest = &after[end + QUOTE_END.len()..];
                }
                None => break,
            }
        }
        spans
    }
}

/// One document as stored in an instruction example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaftDocument {
    pub id: String,
    pub text: String,
}

/// One training instruction: question, document mix, and CoT target.
/// Field order here is the on-disk JSON-lines field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaftExample {
    #[serde(rename = "id")]
    pub example_id: String,
    pub question: String,
    pub documents: Vec<RaftDocument>,
    pub golden_present: bool,
    /// Chunk the question/answer pair was generated from, whether or not
    /// it appears among `documents`.
    pub oracle_chunk_id: String,
    pub cot_answer: CotAnswer,
    pub instruction: String,
}

impl RaftExample {
    /// Id of the golden document when it is present in `documents`.
    pub fn golden_id(&self) -> Option<&str> {
        self.golden_present.then_some(self.oracle_chunk_id.as_str())
    }

    /// Structural invariants every emitted example satisfies.
    pub fn check_invariants(&self) -> Result<(), String> {
        let ids: BTreeSet<&str> = self.documents.iter().map(|d| d.id.as_str()).collect();
        if ids.len() != self.documents.len() {
            return Err(format!("duplicate document id in example {}", self.example_id));
        }
        let contains_oracle = ids.contains(self.oracle_chunk_id.as_str());
        if contains_oracle != self.golden_present {
            return Err(format!(
                "example {}: golden_present={} but oracle chunk membership={}",
                self.example_id, self.golden_present, contains_oracle
            ));
        }
        Ok(())
    }
}

fn parse_question(raw: &str) -> Result<String, String> {
    let q = raw.trim();
    if q.is_empty() {
        return Err("empty question output".to_string());
    }
    if q.matches('?').count() > 1 {
        return Err("output contains more than one question".to_string());
    }
    Ok(q.to_string())
}

fn parse_cot(raw: &str, chunk_text: &str) -> Result<CotAnswer, String> {
    let at = raw
        .rfind(ANSWER_DELIMITER)
        .ok_or_else(|| format!("missing \"{ANSWER_DELIMITER}\" delimiter"))?;
    let final_answer = raw[at + ANSWER_DELIMITER.len()..].trim().to_string();
    if final_answer.is_empty() {
        return Err("empty final answer".to_string());
    }
    let reasoning = raw[..at].trim().to_string();
    // Walk the citation spans and insist each is verbatim in the source.
    let mut rest = reasoning.as_str();
    while let Some(start) = rest.find(QUOTE_BEGIN) {
        let after = &rest[start + QUOTE_BEGIN.len()..];
        let end = after
            .find(QUOTE_END)
            .ok_or_else(|| "unterminated quote span".to_string())?;
        let span = &after[..end];
        if !chunk_text.contains(span) {
            let head: String = span.chars().take(40).collect();
            return Err(format!("quote not verbatim in source chunk: \"{head}\""));
        }
        rest = &after[end + QUOTE_END.len()..];
    }
    Ok(CotAnswer {
        reasoning,
        final_answer,
    })
}

fn chat_once(
    client: &dyn ChatClient,
    prompt: &str,
    temperature: f64,
    max_tokens: u32,
    seed: u64,
) -> Result<String, String> {
    let request = ChatRequest {
        messages: vec![ChatMessage::user(prompt)],
        temperature,
        max_tokens,
        seed: Some(seed),
    };
    client
        .chat(&request)
        .map(|r| r.content)
        .map_err(|e| e.to_string())
}

/// Asks for one question grounded in `chunk`, retrying on invalid output.
pub fn generate_question(
    chunk: &DocumentChunk,
    client: &dyn ChatClient,
    cfg: &GenerationConfig,
) -> Result<String, DatagenError> {
    if chunk.text.trim().is_empty() {
        return Err(DatagenError::EmptyChunkText {
            chunk_id: chunk.id.clone(),
        });
    }
    let prompt = templates::question_prompt(&cfg.template_version, &chunk.text)?;
    let attempts = cfg.max_retries_per_chunk + 1;
    let mut last = String::new();
    for attempt in 1..=attempts {
        let seed = seeded::derive_u64(cfg.seed, &format!("datagen.question/{}/{attempt}", chunk.id));
        match chat_once(client, &prompt, cfg.question_temperature, QUESTION_MAX_TOKENS, seed) {
            Ok(raw) => match parse_question(&raw) {
                Ok(q) => return Ok(q),
                Err(detail) => last = detail,
            },
            Err(detail) => last = detail,
        }
    }
    Err(DatagenError::ChunkSkipped {
        chunk_id: chunk.id.clone(),
        stage: Stage::Question,
        attempts,
        detail: last,
    })
}

/// Asks for a cited chain-of-thought answer, retrying when the output
/// fails quote verification or lacks the final-answer delimiter.
pub fn generate_cot_answer(
    chunk: &DocumentChunk,
    question: &str,
    client: &dyn ChatClient,
    cfg: &GenerationConfig,
) -> Result<CotAnswer, DatagenError> {
    if question.trim().is_empty() {
        return Err(DatagenError::InvalidConfig {
            message: "generate_cot_answer requires a non-empty question".to_string(),
        });
    }
    let prompt = templates::answer_prompt(&cfg.template_version, &chunk.text, question)?;
    let attempts = cfg.max_retries_per_chunk + 1;
    let mut last = String::new();
    for attempt in 1..=attempts {
        let seed = seeded::derive_u64(cfg.seed, &format!("datagen.answer/{}/{attempt}", chunk.id));
        match chat_once(client, &prompt, cfg.answer_temperature, ANSWER_MAX_TOKENS, seed) {
            Ok(raw) => match parse_cot(&raw, &chunk.text) {
                Ok(cot) => return Ok(cot),
                Err(detail) => last = detail,
            },
            Err(detail) => last = detail,
        }
    }
    Err(DatagenError::ChunkSkipped {
        chunk_id: chunk.id.clone(),
        stage: Stage::Answer,
        attempts,
        detail: last,
    })
}

/// Mixes the golden document with sampled distractors into one example.
///
/// With probability `p_golden` the golden document is included alongside
/// `num_distractors` distractors; otherwise one extra distractor takes
/// its place, so every example carries the same document count and
/// comparable context length.
pub fn assemble_raft_example(
    golden: &DocumentChunk,
    question: &str,
    answer: &CotAnswer,
    pool: &[&DocumentChunk],
    cfg: &GenerationConfig,
    draw: &mut ChaCha8Rng,
) -> Result<RaftExample, DatagenError> {
    if pool.iter().any(|c| c.id == golden.id) {
        return Err(DatagenError::PoolContainsGolden {
            chunk_id: golden.id.clone(),
        });
    }
    let required = cfg.num_distractors + 1;
    if pool.len() < required {
        return Err(DatagenError::PoolTooSmall {
            required,
            available: pool.len(),
        });
    }
    let golden_present = bernoulli(draw, cfg.p_golden);
    let n_distractors = if golden_present {
        cfg.num_distractors
    } else {
        cfg.num_distractors + 1
    };
    let picked = sample_indices(draw, pool.len(), n_distractors);
    let mut documents: Vec<RaftDocument> = Vec::with_capacity(cfg.num_distractors + 1);
    if golden_present {
        documents.push(RaftDocument {
            id: golden.id.clone(),
            text: golden.text.clone(),
        });
    }
    for i in picked {
        documents.push(RaftDocument {
            id: pool[i].id.clone(),
            text: pool[i].text.clone(),
        });
    }
    shuffle(draw, &mut documents);
    let mut example = RaftExample {
        example_id: format!("raft-{}", golden.id),
        question: question.to_string(),
        documents,
        golden_present,
        oracle_chunk_id: golden.id.clone(),
        cot_answer: answer.clone(),
        instruction: String::new(),
    };
    example.instruction = format_instruction(&example, &cfg.template_version)?;
    debug_assert!(example.check_invariants().is_ok());
    Ok(example)
}

/// Renders the stored documents and question into the training prompt.
/// Byte-deterministic; the identical renderer drives reader prompts at
/// evaluation time.
pub fn format_instruction(example: &RaftExample, template_version: &str) -> Result<String, DatagenError> {
    let docs: Vec<(&str, &str)> = example
        .documents
        .iter()
        .map(|d| (d.id.as_str(), d.text.as_str()))
        .collect();
    templates::render_reader_prompt(template_version, &docs, &example.question)
}

/// Reason a chunk produced no example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub chunk_id: String,
    pub stage: Stage,
    pub detail: String,
}

/// Audit record written next to every generated dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatagenManifest {
    pub config: GenerationConfig,
    pub seed: u64,
    pub client_identity: String,
    pub sampler_id: String,
    pub requested: usize,
    pub generated: usize,
    pub skipped: usize,
    pub skips: Vec<SkipRecord>,
    /// Set when more than half the requested chunks were skipped.
    pub failed: bool,
}

/// Generates at most one example per input chunk; skips are recorded in
/// the manifest, and output order is by oracle chunk id so concurrent
/// generation is schedule-independent.
pub fn run_datagen(
    chunks: &[DocumentChunk],
    pool: &Corpus,
    client: &dyn ChatClient,
    cfg: &GenerationConfig,
) -> Result<(Vec<RaftExample>, DatagenManifest), DatagenError> {
    cfg.validate()?;
    for chunk in chunks {
        if pool.chunk_by_id(&chunk.id).is_none() {
            return Err(DatagenError::ChunkNotInPool {
                chunk_id: chunk.id.clone(),
            });
        }
    }
    let worst_case_pool = pool.chunks.len().saturating_sub(1);
    if worst_case_pool < cfg.num_distractors + 1 {
        return Err(DatagenError::PoolTooSmall {
            required: cfg.num_distractors + 1,
            available: worst_case_pool,
        });
    }

    let per_chunk = |chunk: &DocumentChunk| -> Result<Result<RaftExample, SkipRecord>, DatagenError> {
        let skip_of = |e: DatagenError| -> Result<SkipRecord, DatagenError> {
            match e {
                DatagenError::ChunkSkipped {
                    chunk_id,
                    stage,
                    attempts,
                    detail,
                } => Ok(SkipRecord {
                    chunk_id,
                    stage,
                    detail: format!("after {attempts} attempts: {detail}"),
                }),
                hard => Err(hard),
            }
        };
        let question = match generate_question(chunk, client, cfg) {
            Ok(q) => q,
            Err(e) => return skip_of(e).map(Err),
        };
        let answer = match generate_cot_answer(chunk, &question, client, cfg) {
            Ok(a) => a,
            Err(e) => return skip_of(e).map(Err),
        };
        let distractor_pool: Vec<&DocumentChunk> = pool
            .chunks
            .iter()
            .filter(|c| c.id != chunk.id)
            .collect();
        let mut draw = rng_for(cfg.seed, &format!("datagen.assemble/{}", chunk.id));
        assemble_raft_example(chunk, &question, &answer, &distractor_pool, cfg, &mut draw).map(Ok)
    };

    let thread_pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.concurrency)
        .build()
        .map_err(|e| DatagenError::InvalidConfig {
            message: format!("cannot build worker pool: {e}"),
        })?;
    let outcomes: Result<Vec<_>, DatagenError> =
        thread_pool.install(|| chunks.par_iter().map(per_chunk).collect());

    let mut examples = Vec::new();
    let mut skips = Vec::new();
    for outcome in outcomes? {
        match outcome {
            Ok(example) => examples.push(example),
            Err(skip) => skips.push(skip),
        }
    }
    examples.sort_by(|a, b| a.oracle_chunk_id.cmp(&b.oracle_chunk_id));
    skips.sort_by(|a, b| a.chunk_id.cmp(&b.chunk_id));

    let manifest = DatagenManifest {
        config: cfg.clone(),
        seed: cfg.seed,
        client_identity: client.identity(),
        sampler_id: seeded::SAMPLER_ID.to_string(),
        requested: chunks.len(),
        generated: examples.len(),
        skipped: skips.len(),
        skips,
        failed: 2 * (chunks.len() - examples.len()) > chunks.len(),
    };
    Ok((examples, manifest))
}

/// Writes one JSON object per line, LF-terminated.
pub fn write_dataset(path: &Path, examples: &[RaftExample]) -> Result<(), DatagenError> {
    let io_err = |source| DatagenError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = std::fs::File::create(path).map_err(io_err)?;
    let mut w = std::io::BufWriter::new(file);
    for example in examples {
        let line = serde_json::to_string(example).map_err(|e| DatagenError::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })?;
        w.write_all(line.as_bytes()).map_err(io_err)?;
        w.write_all(b"\n").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn read_dataset(path: &Path) -> Result<Vec<RaftExample>, DatagenError> {
    let file = std::fs::File::open(path).map_err(|source| DatagenError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut examples = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| DatagenError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let example: RaftExample =
            serde_json::from_str(&line).map_err(|e| DatagenError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
        example.check_invariants().map_err(|message| DatagenError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        })?;
        examples.push(example);
    }
    Ok(examples)
}

pub fn write_manifest(path: &Path, manifest: &DatagenManifest) -> Result<(), DatagenError> {
    let io_err = |source| DatagenError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut text = serde_json::to_string_pretty(manifest).map_err(|e| DatagenError::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })?;
    text.push('\n');
    std::fs::write(path, text).map_err(io_err)
}
