//! Reader evaluation: answer normalization, token-multiset F1, final
//! answer extraction from chain-of-thought output, and the harness that
//! grades a reader in golden-context or retrieve-read mode.
//!
//! Grading follows the SQuAD convention — lowercase, strip punctuation,
//! drop articles, compare token multisets, take the best F1 over the
//! reference answers — applied uniformly across datasets. Predictions
//! are graded on the extracted final answer only, so verbose reasoning
//! neither helps nor hurts.

pub mod report;

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clients::{ChatClient, ChatMessage, ChatRequest, EmbeddingClient};
use crate::corpus::{sample_eval, Corpus, CorpusError, QARecord};
use crate::datagen::templates::render_reader_prompt;
use crate::datagen::{DatagenError, ANSWER_DELIMITER};
use crate::rag::{retrieve, RagError, VectorIndex, READER_MAX_TOKENS};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid evaluation config: {message}")]
    InvalidConfig { message: String },
    #[error("rag mode requires a vector index and embedding client")]
    MissingIndex,
    #[error("golden mode requires golden_chunk_id on record \"{record_id}\"")]
    MissingGoldenChunk { record_id: String },
    #[error("record \"{record_id}\" references chunk \"{chunk_id}\" missing from the corpus")]
    DanglingChunk {
        record_id: String,
        chunk_id: String,
    },
    #[error("index returned chunk \"{chunk_id}\" that has no text in the corpus")]
    IndexCorpusMismatch { chunk_id: String },
    #[error(transparent)]
    Sample(#[from] CorpusError),
    #[error(transparent)]
    Template(#[from] DatagenError),
    #[error("no reports to render")]
    NoReports,
    #[error("cannot render a mixed list of evaluation and training reports")]
    MixedReportKinds,
    #[error("two reports fill the same table cell: {label} / {mode} / {dataset}")]
    DuplicateCell {
        label: String,
        mode: String,
        dataset: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Golden,
    Rag,
}

impl EvalMode {
    /// Row-name suffix used in rendered tables.
    pub fn table_suffix(self) -> &'static str {
        match self {
            EvalMode::Golden => "Golden",
            EvalMode::Rag => "RAG",
        }
    }
}

impl std::fmt::Display for EvalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EvalMode::Golden => "golden",
            EvalMode::Rag => "rag",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub mode: EvalMode,
    pub top_k: usize,
    /// Evaluate at most this many records, sampled without replacement
    /// when the split is larger.
    pub subsample: usize,
    pub seed: u64,
    pub model_label: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mode: EvalMode::Golden,
            top_k: 5,
            subsample: 1000,
            seed: 0,
            model_label: "model".to_string(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |message: String| Err(EvalError::InvalidConfig { message });
        if self.top_k == 0 {
            return bad("top_k must be at least 1".into());
        }
        if self.subsample == 0 {
            return bad("subsample must be at least 1".into());
        }
        if self.model_label.trim().is_empty() {
            return bad("model_label must be non-empty".into());
        }
        Ok(())
    }
}

/// Lowercases, strips ASCII punctuation, drops the articles a/an/the,
/// and splits on whitespace.
pub fn normalize_answer(text: &str) -> Vec<String> {
    let stripped: String = text
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect::<String>()
        .to_lowercase();
    stripped
        .split_whitespace()
        .filter(|t| !matches!(*t, "a" | "an" | "the"))
        .map(str::to_string)
        .collect()
}

/// Token-multiset F1 between normalized prediction and gold. Both empty
/// after normalization → 1; exactly one empty → 0.
pub fn f1_score(prediction: &str, gold: &str) -> f64 {
    let pred = normalize_answer(prediction);
    let gold = normalize_answer(gold);
    match (pred.is_empty(), gold.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        (false, false) => {}
    }
    let mut budget: BTreeMap<&str, usize> = BTreeMap::new();
    for token in &gold {
        *budget.entry(token).or_insert(0) += 1;
    }
    let mut overlap = 0usize;
    for token in &pred {
        if let Some(left) = budget.get_mut(token.as_str()) {
            if *left > 0 {
                *left -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / pred.len() as f64;
    let recall = overlap as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Text after the last "<ANSWER>:", trimmed; the whole generation
/// (trimmed) when the delimiter is absent.
pub fn extract_final_answer(generation: &str) -> &str {
    match generation.rfind(ANSWER_DELIMITER) {
        Some(pos) => generation[pos + ANSWER_DELIMITER.len()..].trim(),
        None => generation.trim(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerExample {
    pub record_id: String,
    pub prediction: String,
    /// Best F1 over the record's gold answers, in [0, 1].
    pub best_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSkip {
    pub record_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_label: String,
    pub mode: EvalMode,
    pub dataset: String,
    /// Records graded successfully.
    pub n: usize,
    pub skipped: usize,
    /// Set when more than 20% of requested records were skipped; the
    /// macro score is then not comparable across runs.
    pub invalid: bool,
    /// 100 × mean per-example best F1 over the n graded records.
    pub macro_f1: f64,
    pub latency_mean_s: f64,
    pub latency_p95_s: f64,
    pub per_example: Vec<PerExample>,
    pub skips: Vec<EvalSkip>,
}

impl EvalReport {
    /// Clears wall-clock fields so two runs over identical inputs
    /// serialize byte-identically.
    pub fn zero_latency(&mut self) {
        self.latency_mean_s = 0.0;
        self.latency_p95_s = 0.0;
    }
}

/// Retrieval half of a retrieve-read evaluation.
pub struct RagBackend<'a, S: Scalar> {
    pub index: &'a VectorIndex<S>,
    pub embed_client: &'a dyn EmbeddingClient,
}

/// Grades `records` against the reader. Golden mode prompts with each
/// record's golden chunk alone; rag mode retrieves `top_k` chunks per
/// question. Client failures skip the record with a reason; more than
/// 20% skips flag the report invalid.
pub fn evaluate<S: Scalar>(
    records: &[QARecord],
    corpus: &Corpus,
    cfg: &EvalConfig,
    chat_client: &dyn ChatClient,
    rag_backend: Option<RagBackend<'_, S>>,
    template_version: &str,
) -> Result<EvalReport, EvalError> {
    cfg.validate()?;
    let selected: Vec<QARecord> = if records.len() > cfg.subsample {
        sample_eval(records, cfg.subsample, cfg.seed)?
    } else {
        records.to_vec()
    };
    let requested = selected.len();
    if cfg.mode == EvalMode::Rag && rag_backend.is_none() {
        return Err(EvalError::MissingIndex);
    }
    if cfg.mode == EvalMode::Golden {
        for record in &selected {
            let chunk_id =
                record
                    .golden_chunk_id
                    .as_deref()
                    .ok_or_else(|| EvalError::MissingGoldenChunk {
                        record_id: record.id.clone(),
                    })?;
            if corpus.chunk_by_id(chunk_id).is_none() {
                return Err(EvalError::DanglingChunk {
                    record_id: record.id.clone(),
                    chunk_id: chunk_id.to_string(),
                });
            }
        }
    }

    let mut per_example = Vec::with_capacity(requested);
    let mut skips = Vec::new();
    let mut reader_seconds = Vec::with_capacity(requested);
    for record in &selected {
        let prompt = match build_prompt(record, corpus, cfg, &rag_backend, template_version) {
            Ok(prompt) => prompt,
            Err(PromptFailure::Skip(reason)) => {
                skips.push(EvalSkip {
                    record_id: record.id.clone(),
                    reason,
                });
                continue;
            }
            Err(PromptFailure::Fatal(e)) => return Err(e),
        };
        let request = ChatRequest {
            messages: vec![ChatMessage::user(prompt)],
            temperature: 0.0,
            max_tokens: READER_MAX_TOKENS,
            seed: None,
        };
        let started = Instant::now();
        let response = chat_client.chat(&request);
        reader_seconds.push(started.elapsed().as_secs_f64());
        let content = match response {
            Ok(response) => response.content,
            Err(e) => {
                skips.push(EvalSkip {
                    record_id: record.id.clone(),
                    reason: format!("reader call failed: {e}"),
                });
                continue;
            }
        };
        let prediction = extract_final_answer(&content).to_string();
        let best_f1 = record
            .gold_answers
            .iter()
            .map(|gold| f1_score(&prediction, gold))
            .fold(0.0f64, f64::max);
        per_example.push(PerExample {
            record_id: record.id.clone(),
            prediction,
            best_f1,
        });
    }

    per_example.sort_by(|a, b| a.record_id.cmp(&b.record_id));
    skips.sort_by(|a, b| a.record_id.cmp(&b.record_id));
    let n = per_example.len();
    let skipped = skips.len();
    let macro_f1 = if n == 0 {
        0.0
    } else {
        100.0 * per_example.iter().map(|e| e.best_f1).sum::<f64>() / n as f64
    };
    let (latency_mean_s, latency_p95_s) = latency_stats(&mut reader_seconds);
    Ok(EvalReport {
        model_label: cfg.model_label.clone(),
        mode: cfg.mode,
        dataset: corpus.name.clone(),
        n,
        skipped,
        invalid: skipped * 5 > requested,
        macro_f1,
        latency_mean_s,
        latency_p95_s,
        per_example,
        skips,
    })
}

/// Golden-mode evaluation without retrieval machinery.
pub fn evaluate_golden(
    records: &[QARecord],
    corpus: &Corpus,
    cfg: &EvalConfig,
    chat_client: &dyn ChatClient,
    template_version: &str,
) -> Result<EvalReport, EvalError> {
    evaluate::<f32>(records, corpus, cfg, chat_client, None, template_version)
}

enum PromptFailure {
    Skip(String),
    Fatal(EvalError),
}

fn build_prompt<S: Scalar>(
    record: &QARecord,
    corpus: &Corpus,
    cfg: &EvalConfig,
    rag_backend: &Option<RagBackend<'_, S>>,
    template_version: &str,
) -> Result<String, PromptFailure> {
    let documents: Vec<(String, String)> = match cfg.mode {
        EvalMode::Golden => {
            // Presence was validated up front.
            let chunk_id = record.golden_chunk_id.as_deref().expect("validated");
            let chunk = corpus.chunk_by_id(chunk_id).expect("validated");
            vec![(chunk.id.clone(), chunk.text.clone())]
        }
        EvalMode::Rag => {
            let backend = rag_backend.as_ref().expect("checked in evaluate");
            let trace =
                match retrieve(backend.index, &record.question, backend.embed_client, cfg.top_k) {
                    Ok(trace) => trace,
                    Err(e @ (RagError::Embed(_) | RagError::EmptyQuery)) => {
                        return Err(PromptFailure::Skip(format!("retrieval failed: {e}")));
                    }
                    Err(e) => {
                        return Err(PromptFailure::Fatal(EvalError::InvalidConfig {
                            message: format!("retrieval setup error: {e}"),
                        }));
                    }
                };
            let mut documents = Vec::with_capacity(trace.len());
            for result in &trace {
                let chunk = corpus.chunk_by_id(&result.chunk_id).ok_or_else(|| {
                    PromptFailure::Fatal(EvalError::IndexCorpusMismatch {
                        chunk_id: result.chunk_id.clone(),
                    })
                })?;
                documents.push((chunk.id.clone(), chunk.text.clone()));
            }
            documents
        }
    };
    let doc_refs: Vec<(&str, &str)> = documents
        .iter()
        .map(|(id, text)| (id.as_str(), text.as_str()))
        .collect();
    render_reader_prompt(template_version, &doc_refs, &record.question)
        .map_err(|e| PromptFailure::Fatal(EvalError::Template(e)))
}

/// Mean and nearest-rank 95th percentile; zeros for an empty sample.
fn latency_stats(seconds: &mut [f64]) -> (f64, f64) {
    if seconds.is_empty() {
        return (0.0, 0.0);
    }
    let mean = seconds.iter().sum::<f64>() / seconds.len() as f64;
    seconds.sort_by(|a, b| a.partial_cmp(b).expect("finite latencies"));
    let rank = ((0.95 * seconds.len() as f64).ceil() as usize).clamp(1, seconds.len());
    (mean, seconds[rank - 1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clients::{MockChatClient, MockEmbeddingClient, MockScript};
    use crate::corpus::DocumentChunk;
    use crate::rag::build_index;

    #[test]
    fn normalization_applies_all_four_rules() {
        assert_eq!(normalize_answer("The Cat!"), vec!["cat"]);
        assert_eq!(normalize_answer("a  b"), vec!["b"]);
        assert_eq!(normalize_answer("U.S.A."), vec!["usa"]);
        assert_eq!(normalize_answer(""), Vec::<String>::new());
        assert_eq!(normalize_answer("the an a"), Vec::<String>::new());
    }

    #[test]
    fn f1_hand_cases() {
        assert_eq!(f1_score("Paris", "Paris"), 1.0);
        assert!((f1_score("the cat sat", "cat sat down") - 0.8).abs() < 1e-12);
        assert_eq!(f1_score("", "cat"), 0.0);
        assert_eq!(f1_score("cat", ""), 0.0);
        assert_eq!(f1_score("", ""), 1.0);
        assert_eq!(f1_score("the", "a"), 1.0);
    }

    #[test]
    fn f1_is_invariant_under_case_articles_and_punctuation() {
        let base = f1_score("green bottles", "ten green bottles on the wall");
        assert_eq!(f1_score("The GREEN bottles!", "ten green bottles on wall"), base);
        assert_eq!(f1_score("green, bottles.", "a ten green bottles on wall"), base);
        assert_eq!(f1_score("anything", "anything"), 1.0);
    }

    #[test]
    fn f1_respects_token_multiplicity() {
        // pred {b,b}, gold {b}: overlap 1, P=1/2, R=1 → F1 = 2/3.
        assert!((f1_score("b b", "b") - 2.0 / 3.0).abs() < 1e-12);
        // pred {b}, gold {b,b}: symmetric.
        assert!((f1_score("b", "b b") - 2.0 / 3.0).abs() < 1e-12);
    }

    /// Independent F1 reference sharing no code with the implementation:
    /// its own normalization pass and a sorted-vector overlap count.
    fn reference_f1(prediction: &str, gold: &str) -> f64 {
        fn tokens(text: &str) -> Vec<String> {
            let mut out = Vec::new();
            for raw in text.split_whitespace() {
                let mut word = String::new();
                for c in raw.chars() {
                    if !c.is_ascii_punctuation() {
                        word.extend(c.to_lowercase());
                    }
                }
                if !word.is_empty() && word != "a" && word != "an" && word != "the" {
                    out.push(word);
                }
            }
            out
        }
        let mut p = tokens(prediction);
        let mut g = tokens(gold);
        if p.is_empty() && g.is_empty() {
            return 1.0;
        }
        if p.is_empty() || g.is_empty() {
            return 0.0;
        }
        p.sort();
        g.sort();
        let (mut i, mut j, mut overlap) = (0usize, 0usize, 0usize);
        while i < p.len() && j < g.len() {
            match p[i].cmp(&g[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    overlap += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        if overlap == 0 {
            return 0.0;
        }
        let prec = overlap as f64 / p.len() as f64;
        let rec = overlap as f64 / g.len() as f64;
        2.0 * prec * rec / (prec + rec)
    }

    #[test]
    fn fifty_pair_fixture_matches_independent_reference() {
        let words = [
            "cat", "sat", "down", "Paris", "the", "a", "an", "U.S.A.", "blue-green", "42",
            "onion", "onion", "tower", "eiffel", "of", "north", "CAT!", "sat.", "d'eau",
        ];
        let mut pairs: Vec<(String, String)> = Vec::new();
        // Deterministic fixture: vary lengths, offsets, and repetition.
        for k in 0..47 {
            let pred: Vec<&str> = (0..(k % 5) + 1)
                .map(|j| words[(k * 3 + j * 2) % words.len()])
                .collect();
            let gold: Vec<&str> = (0..(k % 4) + 1)
                .map(|j| words[(k * 5 + j * 3 + 1) % words.len()])
                .collect();
            pairs.push((pred.join(" "), gold.join(" ")));
        }
        pairs.push((String::new(), String::new()));
        pairs.push((String::new(), "answer".into()));
        pairs.push(("the cat sat".into(), "cat sat down".into()));
        assert_eq!(pairs.len(), 50);
        for (pred, gold) in &pairs {
            let got = f1_score(pred, gold);
            let want = reference_f1(pred, gold);
            assert!(
                (got - want).abs() < 1e-9,
                "({pred:?}, {gold:?}): {got} vs {want}"
            );
            assert!((0.0..=1.0).contains(&got));
        }
    }

    #[test]
    fn final_answer_extraction_rules() {
        assert_eq!(extract_final_answer("because X... <ANSWER>: Paris"), "Paris");
        assert_eq!(extract_final_answer("no delimiter here"), "no delimiter here");
        assert_eq!(extract_final_answer("x <ANSWER>: A y <ANSWER>: B"), "B");
        assert_eq!(extract_final_answer("  padded  "), "padded");
        assert_eq!(extract_final_answer("<ANSWER>:   "), "");
    }

    fn chunk(id: &str, text: &str) -> DocumentChunk {
        DocumentChunk {
            id: id.into(),
            text: text.into(),
            token_count: text.split_whitespace().count(),
            source_dataset: "test".into(),
            meta: Default::default(),
        }
    }

    fn record(id: &str, question: &str, gold: &str, chunk_id: &str) -> QARecord {
        QARecord {
            id: id.into(),
            question: question.into(),
            gold_answers: vec![gold.into()],
            golden_chunk_id: Some(chunk_id.into()),
        }
    }

    fn fixture_corpus() -> Corpus {
        Corpus {
            name: "fixture".into(),
            chunks: vec![
                chunk("ch-a", "the albatross nests on cliff ledges"),
                chunk("ch-b", "basalt columns form when lava cools slowly"),
                chunk("ch-c", "the canal opened to shipping in spring"),
                chunk("ch-d", "dune grass anchors the northern shore"),
            ],
            records: vec![
                record("r1", "where does the albatross nest?", "cliff ledges", "ch-a"),
                record("r2", "when do basalt columns form?", "when lava cools slowly", "ch-b"),
                record("r3", "when did the canal open?", "in spring", "ch-c"),
                record("r4", "what anchors the shore?", "dune grass", "ch-d"),
            ],
        }
    }

    fn perfect_reader(corpus: &Corpus) -> MockChatClient {
        let mut script = MockScript::default();
        for r in &corpus.records {
            script.push_all_of(
                &[&r.question],
                format!("reasoning... <ANSWER>: {}", r.gold_answers[0]),
            );
        }
        MockChatClient::new(script)
    }

    #[test]
    fn perfect_reader_scores_one_hundred_in_golden_mode() {
        let corpus = fixture_corpus();
        let chat = perfect_reader(&corpus);
        let cfg = EvalConfig {
            model_label: "oracle".into(),
            ..EvalConfig::default()
        };
        let report = evaluate_golden(&corpus.records, &corpus, &cfg, &chat, "v1").unwrap();
        assert_eq!(report.n, 4);
        assert_eq!(report.skipped, 0);
        assert!(!report.invalid);
        assert!((report.macro_f1 - 100.0).abs() < 1e-9);
        assert_eq!(report.dataset, "fixture");
    }

    #[test]
    fn scripted_f1_mix_averages_to_57_5() {
        let corpus = Corpus {
            name: "mix".into(),
            chunks: vec![
                chunk("c1", "one"),
                chunk("c2", "two"),
                chunk("c3", "three"),
                chunk("c4", "four"),
            ],
            records: vec![
                record("m1", "q one?", "paris", "c1"),
                record("m2", "q two?", "cat sat down", "c2"),
                record("m3", "q three?", "y z", "c3"),
                record("m4", "q four?", "else", "c4"),
            ],
        };
        let mut script = MockScript::default();
        script.push_all_of(&["q one?"], "<ANSWER>: paris"); // F1 1.0
        script.push_all_of(&["q two?"], "<ANSWER>: the cat sat"); // F1 0.8
        script.push_all_of(&["q three?"], "<ANSWER>: x y"); // F1 0.5
        script.push_all_of(&["q four?"], "<ANSWER>: nothing"); // F1 0.0
        let chat = MockChatClient::new(script);
        let report =
            evaluate_golden(&corpus.records, &corpus, &EvalConfig::default(), &chat, "v1").unwrap();
        assert!((report.macro_f1 - 57.5).abs() < 1e-9);
        let recomputed =
            100.0 * report.per_example.iter().map(|e| e.best_f1).sum::<f64>() / report.n as f64;
        assert!((report.macro_f1 - recomputed).abs() < 1e-9);
    }

    #[test]
    fn reader_failures_skip_and_flag_invalid_past_twenty_percent() {
        let corpus = fixture_corpus();
        // Script answers only two of four questions; the rest miss.
        let mut script = MockScript::default();
        script.push_all_of(&["albatross"], "<ANSWER>: cliff ledges");
        script.push_all_of(&["canal"], "<ANSWER>: in spring");
        let chat = MockChatClient::new(script);
        let report =
            evaluate_golden(&corpus.records, &corpus, &EvalConfig::default(), &chat, "v1").unwrap();
        assert_eq!(report.n, 2);
        assert_eq!(report.skipped, 2);
        assert_eq!(report.n + report.skipped, 4);
        assert!(report.invalid, "50% skips must flag the report");
        assert!((report.macro_f1 - 100.0).abs() < 1e-9, "graded half was perfect");
        assert_eq!(report.skips.len(), 2);
        assert!(report.skips.iter().all(|s| s.reason.contains("reader call failed")));
    }

    #[test]
    fn exactly_twenty_percent_skips_is_still_valid() {
        let mut corpus = fixture_corpus();
        corpus.chunks.push(chunk("ch-e", "estuary mud holds five species"));
        corpus.records.push(record("r5", "what holds species?", "estuary mud", "ch-e"));
        let mut script = MockScript::default();
        for r in &corpus.records[..4] {
            script.push_all_of(&[&r.question], format!("<ANSWER>: {}", r.gold_answers[0]));
        }
        let chat = MockChatClient::new(script);
        let report =
            evaluate_golden(&corpus.records, &corpus, &EvalConfig::default(), &chat, "v1").unwrap();
        assert_eq!((report.n, report.skipped), (4, 1));
        assert!(!report.invalid, "exactly 20% is within tolerance");
    }

    #[test]
    fn golden_mode_requires_golden_chunk_ids() {
        let corpus = fixture_corpus();
        let mut records = corpus.records.clone();
        records[2].golden_chunk_id = None;
        let chat = MockChatClient::new(MockScript::with_default("<ANSWER>: x"));
        match evaluate_golden(&records, &corpus, &EvalConfig::default(), &chat, "v1").unwrap_err() {
            EvalError::MissingGoldenChunk { record_id } => assert_eq!(record_id, "r3"),
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn rag_mode_without_index_is_an_error() {
        let corpus = fixture_corpus();
        let chat = MockChatClient::new(MockScript::with_default("<ANSWER>: x"));
        let cfg = EvalConfig {
            mode: EvalMode::Rag,
            ..EvalConfig::default()
        };
        assert!(matches!(
            evaluate::<f32>(&corpus.records, &corpus, &cfg, &chat, None, "v1").unwrap_err(),
            EvalError::MissingIndex
        ));
    }

    #[test]
    fn rag_mode_retrieves_and_grades() {
        let corpus = fixture_corpus();
        let embed = MockEmbeddingClient::new(8, 41);
        let index = build_index::<f32>(&corpus.chunks, &embed).unwrap();
        let chat = perfect_reader(&corpus);
        let cfg = EvalConfig {
            mode: EvalMode::Rag,
            top_k: 2,
            model_label: "rag-oracle".into(),
            ..EvalConfig::default()
        };
        let backend = RagBackend {
            index: &index,
            embed_client: &embed,
        };
        let report =
            evaluate(&corpus.records, &corpus, &cfg, &chat, Some(backend), "v1").unwrap();
        assert_eq!(report.n, 4);
        assert_eq!(report.skipped, 0);
        assert!((report.macro_f1 - 100.0).abs() < 1e-9);
    }

    #[test]
    fn subsampling_caps_requested_records() {
        let corpus = fixture_corpus();
        let chat = perfect_reader(&corpus);
        let cfg = EvalConfig {
            subsample: 2,
            seed: 9,
            ..EvalConfig::default()
        };
        let report = evaluate_golden(&corpus.records, &corpus, &cfg, &chat, "v1").unwrap();
        assert_eq!(report.n + report.skipped, 2);
    }

    #[test]
    fn evaluation_is_deterministic_after_latency_zeroing() {
        let corpus = fixture_corpus();
        let chat = perfect_reader(&corpus);
        let cfg = EvalConfig {
            subsample: 3,
            seed: 4,
            ..EvalConfig::default()
        };
        let mut a = evaluate_golden(&corpus.records, &corpus, &cfg, &chat, "v1").unwrap();
        let mut b = evaluate_golden(&corpus.records, &corpus, &cfg, &chat, "v1").unwrap();
        a.zero_latency();
        b.zero_latency();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn per_example_entries_are_sorted_by_record_id() {
        let corpus = fixture_corpus();
        let mut shuffled = corpus.records.clone();
        shuffled.reverse();
        let chat = perfect_reader(&corpus);
        let report =
            evaluate_golden(&shuffled, &corpus, &EvalConfig::default(), &chat, "v1").unwrap();
        let ids: Vec<&str> = report.per_example.iter().map(|e| e.record_id.as_str()).collect();
        assert_eq!(ids, vec!["r1", "r2", "r3", "r4"]);
    }

    #[test]
    fn latency_stats_use_nearest_rank_p95() {
        let mut s: Vec<f64> = (1..=100).map(|i| i as f64 / 100.0).collect();
        let (mean, p95) = latency_stats(&mut s);
        assert!((mean - 0.505).abs() < 1e-12);
        assert!((p95 - 0.95).abs() < 1e-12);
        let (zero_mean, zero_p95) = latency_stats(&mut []);
        assert_eq!((zero_mean, zero_p95), (0.0, 0.0));
    }
}
