//! The TOML run configuration shared by every subcommand.
//!
//! One file declares paths, clients, and per-stage settings; the global
//! `[run] seed` feeds every stage so a single value pins the whole
//! pipeline. Relative paths resolve against the config file's directory.
//! The only environment-variable substitution is for bearer tokens
//! (`bearer_token = "$VAR"`), so configs can be committed without
//! secrets.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use craft_core::adapters::tiny::TinyConfig;
use craft_core::adapters::{Hyperparameters, LoraConfig, TrainMode};
use craft_core::clients::{
    ChatClient, EmbeddingClient, HttpChatClient, HttpClientConfig, HttpEmbeddingClient,
    MockChatClient, MockEmbeddingClient, MockScript, RetryPolicy,
};
use craft_core::datagen::GenerationConfig;
use craft_core::eval::{EvalConfig, EvalMode};
use craft_core::seeded::sha256_hex;

use crate::CliError;

fn invalid(message: impl Into<String>) -> CliError {
    CliError::Validation(message.into())
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RawConfig {
    pub run: RunSection,
    pub ingest: Option<IngestSection>,
    pub paths: PathsSection,
    pub chat: Option<ClientSection>,
    pub embedding: Option<ClientSection>,
    pub generation: GenerationSection,
    pub training: TrainingSection,
    pub tiny: TinySection,
    pub eval: EvalSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Dataset label: names the corpus and tags reports.
    pub name: String,
    /// Global seed; every stage derives its randomness from this.
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Zero wall-clock fields in written artifacts so identical inputs
    /// produce byte-identical outputs.
    pub deterministic: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            name: "dataset".to_string(),
            seed: 0,
            output_dir: PathBuf::from("out"),
            deterministic: true,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestSection {
    /// JSON-lines file of raw documents: {"id", "text"} per line.
    pub raw_docs: PathBuf,
    /// Optional JSON-lines file of QA records:
    /// {"id", "question", "gold_answers", "golden_chunk_id"?} per line.
    /// Golden ids reference post-chunking ids (`<doc_id>#<ordinal>`).
    pub qa: Option<PathBuf>,
    #[serde(default = "default_chunk_size")]
    pub chunk_size_tokens: usize,
}

fn default_chunk_size() -> usize {
    64
}

/// Artifact locations; every unset path defaults to a fixed name under
/// `[run] output_dir`.
#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub corpus: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub adapter: Option<PathBuf>,
    pub train_report: Option<PathBuf>,
    pub index: Option<PathBuf>,
}

/// One client: either a live endpoint or a deterministic mock, never
/// both. `[chat]` mocks script responses from a JSON file; `[embedding]`
/// mocks use a seeded hash embedder of fixed dimension.
#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ClientSection {
    pub endpoint: Option<String>,
    pub model: Option<String>,
    /// Literal token, or `$NAME` to read the NAME environment variable.
    pub bearer_token: Option<String>,
    pub retries: Option<u32>,
    pub backoff_s: Option<f64>,
    pub mock_script: Option<PathBuf>,
    pub mock: Option<MockEmbedSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockEmbedSection {
    pub dimension: usize,
    /// Defaults to the global seed.
    pub seed: Option<u64>,
}

impl ClientSection {
    fn validate(&self, role: &str) -> Result<(), CliError> {
        if role == "chat" && self.mock.is_some() {
            return Err(invalid("[chat] mocks are scripted: use mock_script, not mock"));
        }
        if role == "embedding" && self.mock_script.is_some() {
            return Err(invalid(
                "[embedding] mocks are seeded embedders: use mock = { dimension = .. }, not mock_script",
            ));
        }
        let has_mock = self.mock_script.is_some() || self.mock.is_some();
        match (self.endpoint.is_some(), has_mock) {
            (true, true) => {
                return Err(invalid(format!(
                    "[{role}] must set exactly one of endpoint or mock; both are set"
                )))
            }
            (false, false) => {
                return Err(invalid(format!(
                    "[{role}] must set exactly one of endpoint or mock; neither is set"
                )))
            }
            _ => {}
        }
        if self.endpoint.is_some() && self.model.is_none() {
            return Err(invalid(format!("[{role}] endpoint requires a model name")));
        }
        if self.endpoint.is_none()
            && (self.model.is_some()
                || self.bearer_token.is_some()
                || self.retries.is_some()
                || self.backoff_s.is_some())
        {
            return Err(invalid(format!(
                "[{role}] model/bearer_token/retries/backoff_s apply only to endpoint clients"
            )));
        }
        Ok(())
    }
}

/// Mirrors the generation settings, minus the seed (taken from `[run]`).
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationSection {
    pub num_distractors: usize,
    pub p_golden: f64,
    pub question_temperature: f64,
    pub answer_temperature: f64,
    pub max_retries_per_chunk: u32,
    pub template_version: String,
    pub concurrency: usize,
}

impl Default for GenerationSection {
    fn default() -> Self {
        let d = GenerationConfig::default();
        Self {
            num_distractors: d.num_distractors,
            p_golden: d.p_golden,
            question_temperature: d.question_temperature,
            answer_temperature: d.answer_temperature,
            max_retries_per_chunk: d.max_retries_per_chunk,
            template_version: d.template_version,
            concurrency: d.concurrency,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    /// "lora" or "full"; `--mode` overrides.
    pub mode: TrainMode,
    pub rank: usize,
    pub alpha: Option<f64>,
    pub dropout: f64,
    pub target_matrices: Vec<String>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Row label in the resource report; defaults to a mode-derived one.
    pub label: Option<String>,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let lora = LoraConfig::default();
        let hyper = Hyperparameters::default();
        Self {
            mode: TrainMode::Lora,
            rank: lora.rank,
            alpha: lora.alpha,
            dropout: lora.dropout,
            target_matrices: lora.target_matrices,
            learning_rate: hyper.learning_rate,
            epochs: hyper.epochs,
            batch_size: hyper.batch_size,
            label: None,
        }
    }
}

/// Reference-model dimensions, minus the seed (taken from `[run]`).
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TinySection {
    pub vocab_size: usize,
    pub dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_mult: usize,
    pub max_seq: usize,
}

impl Default for TinySection {
    fn default() -> Self {
        let d = TinyConfig::default();
        Self {
            vocab_size: d.vocab_size,
            dim: d.dim,
            n_layers: d.n_layers,
            n_heads: d.n_heads,
            ff_mult: d.ff_mult,
            max_seq: d.max_seq,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// "golden" or "rag"; `--mode` overrides.
    pub mode: EvalMode,
    pub top_k: usize,
    pub subsample: usize,
    /// `--model-label` overrides.
    pub model_label: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        let d = EvalConfig::default();
        Self {
            mode: d.mode,
            top_k: d.top_k,
            subsample: d.subsample,
            model_label: d.model_label,
        }
    }
}

/// A parsed config with resolved paths, plus enough provenance (path,
/// content hash, overrides) for the sidecar metadata files.
pub struct ResolvedConfig {
    pub raw: RawConfig,
    pub config_path: PathBuf,
    pub config_sha256: String,
    pub seed_overridden: bool,
    config_dir: PathBuf,
    pub output_dir: PathBuf,
    pub corpus_path: PathBuf,
    pub dataset_path: PathBuf,
    pub manifest_path: PathBuf,
    pub adapter_path: PathBuf,
    pub train_report_path: PathBuf,
    pub index_path: PathBuf,
}

impl ResolvedConfig {
    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<Self, CliError> {
        let bytes = std::fs::read(path)
            .map_err(|e| invalid(format!("cannot read config {}: {e}", path.display())))?;
        let config_sha256 = sha256_hex(&bytes);
        let text = String::from_utf8(bytes)
            .map_err(|_| invalid(format!("config {} is not UTF-8", path.display())))?;
        let mut raw: RawConfig = toml::from_str(&text)
            .map_err(|e| invalid(format!("config {}: {e}", path.display())))?;
        let seed_overridden = seed_override.is_some();
        if let Some(seed) = seed_override {
            raw.run.seed = seed;
        }
        let config_dir = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."))
            .to_path_buf();
        let output_dir = resolve_in(&config_dir, &raw.run.output_dir);
        let path_or = |explicit: &Option<PathBuf>, default_name: &str| -> PathBuf {
            match explicit {
                Some(p) => resolve_in(&config_dir, p),
                None => output_dir.join(default_name),
            }
        };
        let corpus_path = path_or(&raw.paths.corpus, "corpus.jsonl");
        let dataset_path = path_or(&raw.paths.dataset, "dataset.jsonl");
        let manifest_path = path_or(&raw.paths.manifest, "datagen_manifest.json");
        let adapter_path = path_or(&raw.paths.adapter, "adapter.craft");
        let train_report_path = path_or(&raw.paths.train_report, "train_report.json");
        let index_path = path_or(&raw.paths.index, "index.craft");
        Ok(Self {
            raw,
            config_path: path.to_path_buf(),
            config_sha256,
            seed_overridden,
            config_dir,
            output_dir,
            corpus_path,
            dataset_path,
            manifest_path,
            adapter_path,
            train_report_path,
            index_path,
        })
    }

    /// Resolves a config-relative path.
    pub fn resolve(&self, path: &Path) -> PathBuf {
        resolve_in(&self.config_dir, path)
    }

    pub fn chat_client(&self) -> Result<Box<dyn ChatClient>, CliError> {
        let spec = self
            .raw
            .chat
            .as_ref()
            .ok_or_else(|| invalid("this command needs a [chat] client section"))?;
        spec.validate("chat")?;
        if let Some(script_rel) = &spec.mock_script {
            let script_path = self.resolve(script_rel);
            let text = std::fs::read_to_string(&script_path).map_err(|e| {
                invalid(format!(
                    "cannot read chat mock script {}: {e}",
                    script_path.display()
                ))
            })?;
            let script = MockScript::from_json(&text).map_err(|e| {
                invalid(format!("chat mock script {}: {e}", script_path.display()))
            })?;
            Ok(Box::new(MockChatClient::new(script)))
        } else {
            Ok(Box::new(HttpChatClient::new(self.http_config(spec)?)))
        }
    }

    pub fn embedding_client(&self) -> Result<Box<dyn EmbeddingClient>, CliError> {
        let spec = self
            .raw
            .embedding
            .as_ref()
            .ok_or_else(|| invalid("this command needs an [embedding] client section"))?;
        spec.validate("embedding")?;
        if let Some(mock) = &spec.mock {
            if mock.dimension == 0 {
                return Err(invalid("[embedding] mock dimension must be at least 1"));
            }
            let seed = mock.seed.unwrap_or(self.raw.run.seed);
            Ok(Box::new(MockEmbeddingClient::new(mock.dimension, seed)))
        } else {
            Ok(Box::new(HttpEmbeddingClient::new(self.http_config(spec)?)))
        }
    }

    fn http_config(&self, spec: &ClientSection) -> Result<HttpClientConfig, CliError> {
        let default_retry = RetryPolicy::default();
        Ok(HttpClientConfig {
            base_url: spec.endpoint.clone().expect("validated"),
            model: spec.model.clone().expect("validated"),
            bearer_token: spec
                .bearer_token
                .as_deref()
                .map(resolve_bearer_token)
                .transpose()?,
            retry: RetryPolicy {
                retries: spec.retries.unwrap_or(default_retry.retries),
                base_backoff_s: spec.backoff_s.unwrap_or(default_retry.base_backoff_s),
            },
        })
    }

    pub fn generation_config(&self) -> GenerationConfig {
        let g = &self.raw.generation;
        GenerationConfig {
            num_distractors: g.num_distractors,
            p_golden: g.p_golden,
            question_temperature: g.question_temperature,
            answer_temperature: g.answer_temperature,
            max_retries_per_chunk: g.max_retries_per_chunk,
            seed: self.raw.run.seed,
            template_version: g.template_version.clone(),
            concurrency: g.concurrency,
        }
    }

    pub fn lora_config(&self) -> LoraConfig {
        let t = &self.raw.training;
        LoraConfig {
            rank: t.rank,
            alpha: t.alpha,
            dropout: t.dropout,
            target_matrices: t.target_matrices.clone(),
            seed: self.raw.run.seed,
        }
    }

    pub fn hyperparameters(&self) -> Hyperparameters {
        let t = &self.raw.training;
        Hyperparameters {
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed: self.raw.run.seed,
        }
    }

    pub fn tiny_config(&self) -> TinyConfig {
        let t = &self.raw.tiny;
        TinyConfig {
            vocab_size: t.vocab_size,
            dim: t.dim,
            n_layers: t.n_layers,
            n_heads: t.n_heads,
            ff_mult: t.ff_mult,
            max_seq: t.max_seq,
            seed: self.raw.run.seed,
        }
    }

    pub fn eval_config(
        &self,
        mode_override: Option<EvalMode>,
        label_override: Option<String>,
    ) -> EvalConfig {
        let e = &self.raw.eval;
        EvalConfig {
            mode: mode_override.unwrap_or(e.mode),
            top_k: e.top_k,
            subsample: e.subsample,
            seed: self.raw.run.seed,
            model_label: label_override.unwrap_or_else(|| e.model_label.clone()),
        }
    }
}

fn resolve_in(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

/// `$NAME` reads the environment; anything else is the literal token.
fn resolve_bearer_token(value: &str) -> Result<String, CliError> {
    match value.strip_prefix('$') {
        Some(name) => std::env::var(name).map_err(|_| {
            invalid(format!(
                "bearer token references environment variable {name}, which is not set"
            ))
        }),
        None => Ok(value.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_config(dir: &Path, body: &str) -> PathBuf {
        let path = dir.join("craft.toml");
        std::fs::write(&path, body).unwrap();
        path
    }

    #[test]
    fn minimal_config_fills_every_default() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), "");
        let cfg = ResolvedConfig::load(&path, None).unwrap();
        assert_eq!(cfg.raw.run.seed, 0);
        assert!(cfg.raw.run.deterministic);
        assert_eq!(cfg.corpus_path, dir.path().join("out/corpus.jsonl"));
        assert_eq!(cfg.index_path, dir.path().join("out/index.craft"));
        assert_eq!(cfg.generation_config(), GenerationConfig::default());
        assert_eq!(cfg.lora_config(), LoraConfig::default());
        assert_eq!(cfg.hyperparameters(), Hyperparameters::default());
        assert_eq!(cfg.tiny_config(), TinyConfig::default());
    }

    #[test]
    fn global_seed_feeds_every_stage_and_cli_overrides_it() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), "[run]\nseed = 11\n");
        let cfg = ResolvedConfig::load(&path, None).unwrap();
        assert_eq!(cfg.generation_config().seed, 11);
        assert_eq!(cfg.lora_config().seed, 11);
        assert_eq!(cfg.hyperparameters().seed, 11);
        assert_eq!(cfg.tiny_config().seed, 11);
        assert_eq!(cfg.eval_config(None, None).seed, 11);
        assert!(!cfg.seed_overridden);

        let cfg = ResolvedConfig::load(&path, Some(99)).unwrap();
        assert!(cfg.seed_overridden);
        assert_eq!(cfg.raw.run.seed, 99);
        assert_eq!(cfg.tiny_config().seed, 99);
    }

    #[test]
    fn stage_sections_reject_their_own_seed_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), "[generation]\nseed = 5\n");
        let err = ResolvedConfig::load(&path, None).err().expect("must fail");
        assert!(err.to_string().contains("seed"), "{err}");
    }

    #[test]
    fn unknown_keys_are_validation_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), "[run]\nnmae = \"typo\"\n");
        let err = ResolvedConfig::load(&path, None).err().expect("must fail");
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains("nmae"), "{err}");
    }

    #[test]
    fn clients_require_exactly_one_of_endpoint_or_mock() {
        let dir = tempfile::tempdir().unwrap();
        let neither = write_config(dir.path(), "[chat]\n");
        let cfg = ResolvedConfig::load(&neither, None).unwrap();
        let err = cfg.chat_client().err().expect("neither must fail");
        assert!(err.to_string().contains("neither"), "{err}");

        let both = write_config(
            dir.path(),
            "[chat]\nendpoint = \"http://x\"\nmodel = \"m\"\nmock_script = \"s.json\"\n",
        );
        let cfg = ResolvedConfig::load(&both, None).unwrap();
        let err = cfg.chat_client().err().expect("both must fail");
        assert!(err.to_string().contains("both"), "{err}");

        let endpoint_only = write_config(dir.path(), "[embedding]\nendpoint = \"http://x\"\n");
        let cfg = ResolvedConfig::load(&endpoint_only, None).unwrap();
        let err = cfg.embedding_client().err().expect("missing model must fail");
        assert!(err.to_string().contains("model"), "{err}");
    }

    #[test]
    fn mock_clients_build_from_config() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("script.json"),
            "{\"rules\": [], \"default\": \"ok\"}",
        )
        .unwrap();
        let path = write_config(
            dir.path(),
            "[chat]\nmock_script = \"script.json\"\n\n[embedding]\nmock = { dimension = 16 }\n",
        );
        let cfg = ResolvedConfig::load(&path, None).unwrap();
        let chat = cfg.chat_client().unwrap();
        assert!(chat.identity().contains("mock"));
        let embed = cfg.embedding_client().unwrap();
        let vectors = embed.embed(&["hello".to_string()]).unwrap();
        assert_eq!(vectors[0].len(), 16);
    }

    #[test]
    fn bearer_tokens_substitute_from_the_environment_only_with_dollar() {
        assert_eq!(resolve_bearer_token("literal-token").unwrap(), "literal-token");
        std::env::set_var("CRAFT_TEST_TOKEN_VAR", "from-env");
        assert_eq!(resolve_bearer_token("$CRAFT_TEST_TOKEN_VAR").unwrap(), "from-env");
        std::env::remove_var("CRAFT_TEST_TOKEN_VAR");
        let err = resolve_bearer_token("$CRAFT_TEST_TOKEN_VAR").unwrap_err();
        assert!(err.to_string().contains("CRAFT_TEST_TOKEN_VAR"));
    }

    #[test]
    fn relative_paths_resolve_against_the_config_directory() {
        let dir = tempfile::tempdir().unwrap();
        let nested = dir.path().join("configs");
        std::fs::create_dir_all(&nested).unwrap();
        let path = nested.join("craft.toml");
        std::fs::write(&path, "[run]\noutput_dir = \"../artifacts\"\n[paths]\ncorpus = \"fixed/c.jsonl\"\n").unwrap();
        let cfg = ResolvedConfig::load(&path, None).unwrap();
        assert_eq!(cfg.output_dir, nested.join("../artifacts"));
        assert_eq!(cfg.corpus_path, nested.join("fixed/c.jsonl"));
        assert_eq!(cfg.dataset_path, nested.join("../artifacts/dataset.jsonl"));
    }
}
