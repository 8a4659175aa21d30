//! The six pipeline subcommands.
//!
//! Each command reads its inputs, writes its artifacts under the config's
//! output directory, and drops a `<artifact>.meta.json` sidecar (config
//! hash, seed, versions) so any artifact can be traced back to an exact
//! rerun command. No command mutates its inputs; reruns with identical
//! inputs and seeds produce byte-identical artifacts when the config is
//! deterministic.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use craft_core::adapters::{
    save_adapter, train_adapter, train_full, AdapterError, TrainMode, TrainingReport,
};
use craft_core::corpus::{
    chunk_documents, load_corpus, sampler_id, save_corpus, Corpus, QARecord,
};
use craft_core::datagen::{run_datagen, write_dataset, write_manifest, DatagenError};
use craft_core::eval::report::{render_report, AnyReport, ResourceColumn};
use craft_core::eval::{evaluate, EvalError, EvalMode, EvalReport, RagBackend};
use craft_core::rag::{build_index, load_index, save_index, RagError};
use craft_core::token::HashSegmentTokenizer;
use craft_core::TinyBackend32;

use crate::config::ResolvedConfig;
use crate::CliError;

fn validation(message: impl Into<String>) -> CliError {
    CliError::Validation(message.into())
}

fn runtime(message: impl Into<String>) -> CliError {
    CliError::Runtime(message.into())
}

/// Normalizes raw documents (and optional QA records) into the corpus
/// artifact every later stage reads.
pub fn cmd_ingest(cfg: &ResolvedConfig) -> Result<(), CliError> {
    let ingest = cfg
        .raw
        .ingest
        .as_ref()
        .ok_or_else(|| validation("the ingest command needs an [ingest] config section"))?;
    let raw_docs_path = cfg.resolve(&ingest.raw_docs);
    require_input(&raw_docs_path, "raw documents file not found")?;

    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct RawDoc {
        id: String,
        text: String,
    }
    let docs: Vec<RawDoc> = read_jsonl(&raw_docs_path)?;
    let documents: Vec<(String, String)> = docs.into_iter().map(|d| (d.id, d.text)).collect();
    let tokenizer = HashSegmentTokenizer::new(cfg.tiny_config().vocab_size as u32);
    let outcome = chunk_documents(
        &documents,
        ingest.chunk_size_tokens,
        &cfg.raw.run.name,
        &tokenizer,
    );

    let mut corpus = Corpus {
        name: cfg.raw.run.name.clone(),
        chunks: outcome.chunks,
        records: Vec::new(),
    };
    if let Some(qa_rel) = &ingest.qa {
        let qa_path = cfg.resolve(qa_rel);
        require_input(&qa_path, "QA records file not found")?;

        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct RawQa {
            id: String,
            question: String,
            gold_answers: Vec<String>,
            #[serde(default)]
            golden_chunk_id: Option<String>,
        }
        let records: Vec<RawQa> = read_jsonl(&qa_path)?;
        corpus.records = records
            .into_iter()
            .map(|r| QARecord {
                id: r.id,
                question: r.question,
                gold_answers: r.gold_answers,
                golden_chunk_id: r.golden_chunk_id,
            })
            .collect();
    }
    corpus
        .validate()
        .map_err(|e| validation(format!("ingested corpus is invalid: {e}")))?;

    ensure_parent(&cfg.corpus_path)?;
    save_corpus(&corpus, &cfg.corpus_path)
        .map_err(|e| runtime(format!("cannot write corpus: {e}")))?;
    write_sidecar(
        cfg,
        "ingest",
        &cfg.corpus_path,
        [
            ("chunks", corpus.chunks.len().to_string()),
            ("records", corpus.records.len().to_string()),
            ("skipped_empty_docs", outcome.skipped_empty.to_string()),
            (
                "chunk_size_tokens",
                ingest.chunk_size_tokens.to_string(),
            ),
        ],
    )?;
    println!(
        "ingested {} chunks and {} QA records -> {}",
        corpus.chunks.len(),
        corpus.records.len(),
        cfg.corpus_path.display()
    );
    Ok(())
}

/// Generates the synthetic instruction dataset from every corpus chunk
/// through the chat client.
pub fn cmd_generate(cfg: &ResolvedConfig) -> Result<(), CliError> {
    let corpus = load_corpus_input(cfg)?;
    let chat = cfg.chat_client()?;
    let gen_cfg = cfg.generation_config();
    let (examples, manifest) = run_datagen(&corpus.chunks, &corpus, chat.as_ref(), &gen_cfg)
        .map_err(classify_datagen)?;

    ensure_parent(&cfg.dataset_path)?;
    ensure_parent(&cfg.manifest_path)?;
    write_dataset(&cfg.dataset_path, &examples)
        .map_err(|e| runtime(format!("cannot write dataset: {e}")))?;
    write_manifest(&cfg.manifest_path, &manifest)
        .map_err(|e| runtime(format!("cannot write manifest: {e}")))?;
    write_sidecar(
        cfg,
        "generate",
        &cfg.dataset_path,
        [
            ("examples", manifest.generated.to_string()),
            ("skipped_chunks", manifest.skipped.to_string()),
            ("client", manifest.client_identity.clone()),
        ],
    )?;
    if manifest.failed {
        return Err(runtime(format!(
            "generation failed: {} of {} chunks were skipped; see {}",
            manifest.skipped,
            manifest.requested,
            cfg.manifest_path.display()
        )));
    }
    println!(
        "generated {} examples ({} chunks skipped) -> {}",
        manifest.generated,
        manifest.skipped,
        cfg.dataset_path.display()
    );
    Ok(())
}

/// Fine-tunes the reference backend on the generated dataset: low-rank
/// adapters by default, or the full-parameter baseline with --mode full.
pub fn cmd_train(cfg: &ResolvedConfig, mode_override: Option<TrainMode>) -> Result<(), CliError> {
    require_input(
        &cfg.dataset_path,
        "training dataset not found (run `craft generate` first)",
    )?;
    let dataset = craft_core::datagen::read_dataset(&cfg.dataset_path)
        .map_err(|e| validation(format!("cannot read dataset: {e}")))?;
    let mode = mode_override.unwrap_or(cfg.raw.training.mode);
    let hyper = cfg.hyperparameters();
    let mut backend = TinyBackend32::new(cfg.tiny_config()).map_err(classify_adapter)?;

    let mut report = match mode {
        TrainMode::Lora => {
            let lora_cfg = cfg.lora_config();
            let (artifact, report) =
                train_adapter(&dataset, &lora_cfg, &mut backend, &hyper).map_err(classify_adapter)?;
            ensure_parent(&cfg.adapter_path)?;
            save_adapter(&cfg.adapter_path, &artifact)
                .map_err(|e| runtime(format!("cannot write adapter: {e}")))?;
            report
        }
        TrainMode::Full => train_full(&dataset, &mut backend, &hyper).map_err(classify_adapter)?,
    };
    report.dataset = cfg.raw.run.name.clone();
    if let Some(label) = &cfg.raw.training.label {
        report.label = label.clone();
    }
    // Mean per-token NLL over the training set, exponentiated: the
    // training-set perplexity of the final model.
    report.perplexity = Some(report.final_train_loss.exp());
    let wall_time_s = report.wall_time_s;
    if cfg.raw.run.deterministic {
        report.wall_time_s = 0.0;
    }

    ensure_parent(&cfg.train_report_path)?;
    write_json(&cfg.train_report_path, &report)?;
    write_sidecar(
        cfg,
        "train",
        &cfg.train_report_path,
        [
            ("mode", mode.to_string()),
            ("examples", dataset.len().to_string()),
            ("trainable_params", report.trainable_params.to_string()),
        ],
    )?;
    let drop_pct = if report.initial_train_loss > 0.0 {
        100.0 * (report.initial_train_loss - report.final_train_loss) / report.initial_train_loss
    } else {
        0.0
    };
    println!(
        "trained {mode} on {} examples in {wall_time_s:.1}s: loss {:.4} -> {:.4} ({drop_pct:.1}% drop)",
        dataset.len(),
        report.initial_train_loss,
        report.final_train_loss,
    );
    if mode == TrainMode::Lora {
        println!("adapter -> {}", cfg.adapter_path.display());
    }
    println!("report -> {}", cfg.train_report_path.display());
    Ok(())
}

/// Embeds every corpus chunk and writes the vector index.
pub fn cmd_index(cfg: &ResolvedConfig) -> Result<(), CliError> {
    let corpus = load_corpus_input(cfg)?;
    let embed = cfg.embedding_client()?;
    let index = build_index::<f32>(&corpus.chunks, embed.as_ref()).map_err(classify_rag_build)?;
    ensure_parent(&cfg.index_path)?;
    save_index(&cfg.index_path, &index)
        .map_err(|e| runtime(format!("cannot write index: {e}")))?;
    write_sidecar(
        cfg,
        "index",
        &cfg.index_path,
        [
            ("chunks", index.len().to_string()),
            ("dimension", index.dimension().to_string()),
            ("embedder", index.build_metadata.embedder.clone()),
        ],
    )?;
    println!(
        "indexed {} chunks at dimension {} -> {}",
        index.len(),
        index.dimension(),
        cfg.index_path.display()
    );
    Ok(())
}

/// Grades the reader over the corpus QA records and writes the
/// evaluation report. Golden mode prompts with each record's source
/// chunk; rag mode retrieves from the index.
pub fn cmd_eval(
    cfg: &ResolvedConfig,
    mode_override: Option<EvalMode>,
    label_override: Option<String>,
) -> Result<(), CliError> {
    let corpus = load_corpus_input(cfg)?;
    if corpus.records.is_empty() {
        return Err(validation(format!(
            "corpus {} has no QA records to evaluate",
            cfg.corpus_path.display()
        )));
    }
    let eval_cfg = cfg.eval_config(mode_override, label_override);
    let chat = cfg.chat_client()?;

    let report = match eval_cfg.mode {
        EvalMode::Golden => evaluate::<f32>(
            &corpus.records,
            &corpus,
            &eval_cfg,
            chat.as_ref(),
            None,
            &cfg.raw.generation.template_version,
        ),
        EvalMode::Rag => {
            require_input(
                &cfg.index_path,
                "rag mode needs the vector index (run `craft index` first)",
            )?;
            let index = load_index::<f32>(&cfg.index_path)
                .map_err(|e| validation(format!("cannot read index: {e}")))?;
            let embed = cfg.embedding_client()?;
            evaluate(
                &corpus.records,
                &corpus,
                &eval_cfg,
                chat.as_ref(),
                Some(RagBackend {
                    index: &index,
                    embed_client: embed.as_ref(),
                }),
                &cfg.raw.generation.template_version,
            )
        }
    };
    let mut report = report.map_err(classify_eval)?;
    if cfg.raw.run.deterministic {
        report.zero_latency();
    }

    let out_path = eval_report_path(cfg, &report);
    ensure_parent(&out_path)?;
    write_json(&out_path, &report)?;
    write_sidecar(
        cfg,
        "eval",
        &out_path,
        [
            ("mode", report.mode.to_string()),
            ("model_label", report.model_label.clone()),
            ("graded", report.n.to_string()),
            ("skipped", report.skipped.to_string()),
        ],
    )?;
    println!(
        "evaluated {} records ({} skipped): macro F1 {:.2} -> {}",
        report.n,
        report.skipped,
        report.macro_f1,
        out_path.display()
    );
    if report.invalid {
        return Err(runtime(format!(
            "evaluation is invalid: {} of {} requested records were skipped (over 20%); report written to {}",
            report.skipped,
            report.n + report.skipped,
            out_path.display()
        )));
    }
    Ok(())
}

/// Renders stored evaluation or training reports as one table, printed
/// to stdout and written as markdown plus JSON.
pub fn cmd_report(cfg: &ResolvedConfig, report_files: &[PathBuf]) -> Result<(), CliError> {
    let mut entries = Vec::with_capacity(report_files.len());
    for file in report_files {
        let path = cfg.resolve(file);
        require_input(&path, "report file not found")?;
        let text = std::fs::read_to_string(&path)
            .map_err(|e| validation(format!("cannot read {}: {e}", path.display())))?;
        if let Ok(eval) = serde_json::from_str::<EvalReport>(&text) {
            entries.push(AnyReport::Eval(eval));
        } else if let Ok(train) = serde_json::from_str::<TrainingReport>(&text) {
            entries.push(AnyReport::Resource(ResourceColumn::from(&train)));
        } else {
            return Err(validation(format!(
                "{} is neither an evaluation report nor a training report",
                path.display()
            )));
        }
    }
    let rendered = render_report(&entries).map_err(classify_eval)?;

    let md_path = cfg.output_dir.join("report.md");
    let json_path = cfg.output_dir.join("report.json");
    ensure_parent(&md_path)?;
    std::fs::write(&md_path, &rendered.text)
        .map_err(|e| runtime(format!("cannot write {}: {e}", md_path.display())))?;
    write_json(&json_path, &rendered.json)?;
    write_sidecar(
        cfg,
        "report",
        &json_path,
        [("inputs", report_files.len().to_string())],
    )?;
    print!("{}", rendered.text);
    println!("tables -> {} and {}", md_path.display(), json_path.display());
    Ok(())
}

/// Evaluation reports are named by label and mode so golden and rag runs
/// of several models can coexist in one output directory.
fn eval_report_path(cfg: &ResolvedConfig, report: &EvalReport) -> PathBuf {
    let label: String = report
        .model_label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '-' || c == '_' {
                c
            } else {
                '-'
            }
        })
        .collect();
    cfg.output_dir.join(format!("eval_{label}_{}.json", report.mode))
}

fn load_corpus_input(cfg: &ResolvedConfig) -> Result<Corpus, CliError> {
    require_input(
        &cfg.corpus_path,
        "corpus not found (run `craft ingest` first)",
    )?;
    let tokenizer = HashSegmentTokenizer::new(cfg.tiny_config().vocab_size as u32);
    load_corpus(&cfg.corpus_path, &cfg.raw.run.name, &tokenizer)
        .map_err(|e| validation(format!("cannot read corpus: {e}")))
}

fn require_input(path: &Path, hint: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(validation(format!("{hint}; expected {}", path.display())))
    }
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| runtime(format!("cannot create {}: {e}", parent.display())))?;
        }
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| runtime(format!("cannot serialize {}: {e}", path.display())))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| validation(format!("cannot read {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(line).map_err(|e| {
            validation(format!("{} line {}: {e}", path.display(), idx + 1))
        })?;
        out.push(item);
    }
    Ok(out)
}

/// Provenance sidecar written next to each primary artifact. Contains no
/// timestamps, so reruns stay byte-identical.
fn write_sidecar<const N: usize>(
    cfg: &ResolvedConfig,
    command: &str,
    primary_output: &Path,
    parameters: [(&str, String); N],
) -> Result<(), CliError> {
    let parameters: BTreeMap<&str, String> = parameters.into_iter().collect();
    let sidecar = serde_json::json!({
        "command": command,
        "config_path": cfg.config_path.display().to_string(),
        "config_sha256": cfg.config_sha256,
        "seed": cfg.raw.run.seed,
        "seed_overridden": cfg.seed_overridden,
        "versions": {
            "crate": craft_core::CRATE_VERSION,
            "sampler": sampler_id(),
            "template": cfg.raw.generation.template_version,
        },
        "parameters": parameters,
    });
    let mut name = primary_output.as_os_str().to_os_string();
    name.push(".meta.json");
    write_json(Path::new(&name), &sidecar)
}

fn classify_datagen(e: DatagenError) -> CliError {
    match e {
        DatagenError::InvalidConfig { .. }
        | DatagenError::UnknownTemplateVersion { .. }
        | DatagenError::PoolTooSmall { .. }
        | DatagenError::ChunkNotInPool { .. }
        | DatagenError::EmptyChunkText { .. }
        | DatagenError::Parse { .. } => validation(e.to_string()),
        other => runtime(other.to_string()),
    }
}

fn classify_adapter(e: AdapterError) -> CliError {
    match e {
        AdapterError::InvalidConfig { .. }
        | AdapterError::RankTooLarge { .. }
        | AdapterError::UnmatchedSelector { .. }
        | AdapterError::EmptyDataset => validation(e.to_string()),
        other => runtime(other.to_string()),
    }
}

fn classify_rag_build(e: RagError) -> CliError {
    match e {
        RagError::EmptyChunks | RagError::DuplicateChunkId { .. } => validation(e.to_string()),
        other => runtime(other.to_string()),
    }
}

fn classify_eval(e: EvalError) -> CliError {
    validation(e.to_string())
}
