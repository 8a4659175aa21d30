//! Low-rank adapter training and serving.
//!
//! A [`TrainingBackend`] owns the model weights and gradient machinery;
//! this module supplies the recipe on top: parameter accounting, the
//! training loops for adapter and full-parameter modes, adapter artifact
//! serialization, hot swapping on a frozen base, and perplexity.
//! The shipped [`tiny`] backend is a deterministic 2-layer transformer
//! small enough for CPU test runs; anything implementing the backend
//! trait plugs in the same way.

pub mod tiny;

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::RwLock;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;
use crate::seeded::{rng_for, sample_indices, sha256_hex};

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("selector \"{selector}\" matches no model matrix")]
    UnmatchedSelector { selector: String },
    #[error("rank {rank} exceeds min dimension {min_dim} of matrix {matrix}")]
    RankTooLarge {
        matrix: String,
        rank: usize,
        min_dim: usize,
    },
    #[error("matrix {matrix}: expected shape {expected_rows}x{expected_cols}, got {got_rows}x{got_cols}")]
    ShapeMismatch {
        matrix: String,
        expected_rows: usize,
        expected_cols: usize,
        got_rows: usize,
        got_cols: usize,
    },
    #[error("adapter checksum mismatch: header says {expected}, payload is {got}")]
    ChecksumMismatch { expected: String, got: String },
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("perplexity eval set is empty")]
    EmptyEvalSet,
    #[error("eval set contains zero target tokens")]
    ZeroTargetTokens,
    #[error("frozen base changed during adapter training: {before} -> {after}")]
    FrozenBaseChanged { before: String, after: String },
    #[error("cannot swap adapters while generation is in flight")]
    SwapInFlight,
    #[error("backend failed after {completed_steps} steps: {message}")]
    BackendFailure {
        completed_steps: u64,
        message: String,
    },
    #[error("invalid adapter config: {message}")]
    InvalidConfig { message: String },
    #[error("adapter file I/O at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("adapter file {path}: {message}")]
    Format { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub rank: usize,
    /// Scaling numerator; the applied scale is `alpha / rank`. Defaults
    /// to `2 * rank` when unset.
    pub alpha: Option<f64>,
    pub dropout: f64,
    /// Substring selectors over model matrix names.
    pub target_matrices: Vec<String>,
    pub seed: u64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: None,
            dropout: 0.05,
            target_matrices: vec!["q_proj".to_string(), "v_proj".to_string()],
            seed: 0,
        }
    }
}

impl LoraConfig {
    pub fn effective_alpha(&self) -> f64 {
        self.alpha.unwrap_or(2.0 * self.rank as f64)
    }

    /// Applied low-rank scale `alpha / rank`.
    pub fn scale(&self) -> f64 {
        self.effective_alpha() / self.rank as f64
    }

    pub fn validate(&self) -> Result<(), AdapterError> {
        if self.rank == 0 {
            return Err(AdapterError::InvalidConfig {
                message: "rank must be at least 1".to_string(),
            });
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(AdapterError::InvalidConfig {
                message: format!("dropout {} outside [0, 1)", self.dropout),
            });
        }
        if self.effective_alpha() <= 0.0 {
            return Err(AdapterError::InvalidConfig {
                message: "alpha must be positive".to_string(),
            });
        }
        if self.target_matrices.is_empty() {
            return Err(AdapterError::InvalidConfig {
                message: "target_matrices must not be empty".to_string(),
            });
        }
        Ok(())
    }
}

/// Shape of one named weight matrix: `n_out` rows by `n_in` columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatrixDim {
    pub name: String,
    pub n_out: usize,
    pub n_in: usize,
}

/// Weight-matrix inventory of a model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub matrices: Vec<MatrixDim>,
    pub total_params: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<(), AdapterError> {
        let mut seen = std::collections::BTreeSet::new();
        let mut sum = 0usize;
        for m in &self.matrices {
            if !seen.insert(m.name.as_str()) {
                return Err(AdapterError::InvalidConfig {
                    message: format!("duplicate matrix name {}", m.name),
                });
            }
            sum += m.n_out * m.n_in;
        }
        if self.total_params < sum {
            return Err(AdapterError::InvalidConfig {
                message: format!(
                    "total_params {} below listed matrix sum {sum}",
                    self.total_params
                ),
            });
        }
        Ok(())
    }

    /// Matrices matched by `selector` (substring on the name).
    pub fn matching(&self, selector: &str) -> Vec<&MatrixDim> {
        self.matrices
            .iter()
            .filter(|m| m.name.contains(selector))
            .collect()
    }

    /// Union of matrices matched by the config's selectors, in
    /// declaration order, each matrix counted once.
    pub fn targets(&self, cfg: &LoraConfig) -> Result<Vec<&MatrixDim>, AdapterError> {
        let mut names = std::collections::BTreeSet::new();
        for selector in &cfg.target_matrices {
            let matched = self.matching(selector);
            if matched.is_empty() {
                return Err(AdapterError::UnmatchedSelector {
                    selector: selector.clone(),
                });
            }
            for m in matched {
                names.insert(m.name.as_str());
            }
        }
        Ok(self
            .matrices
            .iter()
            .filter(|m| names.contains(m.name.as_str()))
            .collect())
    }
}

/// Trainable parameters a low-rank config adds: Σ rank · (n_in + n_out)
/// over the targeted matrices.
pub fn count_trainable_params(dims: &ModelDims, cfg: &LoraConfig) -> Result<usize, AdapterError> {
    cfg.validate()?;
    dims.validate()?;
    let mut total = 0usize;
    for m in dims.targets(cfg)? {
        let min_dim = m.n_out.min(m.n_in);
        if cfg.rank > min_dim {
            return Err(AdapterError::RankTooLarge {
                matrix: m.name.clone(),
                rank: cfg.rank,
                min_dim,
            });
        }
        total += cfg.rank * (m.n_in + m.n_out);
    }
    Ok(total)
}

/// One trained low-rank pair: `a` is rank x n_in, `b` is n_out x rank.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterPair {
    pub name: String,
    pub a: Matrix<f32>,
    pub b: Matrix<f32>,
}

/// Trained adapter: low-rank pairs for every targeted matrix, the config
/// they were trained under, and a payload checksum.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterArtifact {
    pub config: LoraConfig,
    pub pairs: Vec<AdapterPair>,
    pub checksum: String,
}

fn payload_bytes(pairs: &[AdapterPair]) -> Vec<u8> {
    let mut bytes = Vec::new();
    for pair in pairs {
        bytes.extend_from_slice(&pair.a.to_f32_le_bytes());
        bytes.extend_from_slice(&pair.b.to_f32_le_bytes());
    }
    bytes
}

impl AdapterArtifact {
    /// Seals `pairs` with a fresh payload checksum.
    pub fn new(config: LoraConfig, pairs: Vec<AdapterPair>) -> Self {
        let checksum = sha256_hex(&payload_bytes(&pairs));
        Self {
            config,
            pairs,
            checksum,
        }
    }

    pub fn verify_checksum(&self) -> Result<(), AdapterError> {
        let got = sha256_hex(&payload_bytes(&self.pairs));
        if got != self.checksum {
            return Err(AdapterError::ChecksumMismatch {
                expected: self.checksum.clone(),
                got,
            });
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct PairHeader {
    name: String,
    a_rows: usize,
    a_cols: usize,
    b_rows: usize,
    b_cols: usize,
}

#[derive(Serialize, Deserialize)]
struct ArtifactHeader {
    format_version: u32,
    config: LoraConfig,
    pairs: Vec<PairHeader>,
    checksum: String,
}

const ARTIFACT_FORMAT_VERSION: u32 = 1;

/// Writes `[u32 LE header length][header JSON][f32 LE payload]`.
pub fn save_adapter(path: &Path, artifact: &AdapterArtifact) -> Result<(), AdapterError> {
    let io_err = |source| AdapterError::Io {
        path: path.to_path_buf(),
        source,
    };
    let header = ArtifactHeader {
        format_version: ARTIFACT_FORMAT_VERSION,
        config: artifact.config.clone(),
        pairs: artifact
            .pairs
            .iter()
            .map(|p| PairHeader {
                name: p.name.clone(),
                a_rows: p.a.rows(),
                a_cols: p.a.cols(),
                b_rows: p.b.rows(),
                b_cols: p.b.cols(),
            })
            .collect(),
        checksum: artifact.checksum.clone(),
    };
    let header_json = serde_json::to_vec(&header).map_err(|e| AdapterError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let file = std::fs::File::create(path).map_err(io_err)?;
    let mut w = std::io::BufWriter::new(file);
    w.write_all(&(header_json.len() as u32).to_le_bytes())
        .map_err(io_err)?;
    w.write_all(&header_json).map_err(io_err)?;
    w.write_all(&payload_bytes(&artifact.pairs)).map_err(io_err)?;
    w.flush().map_err(io_err)
}

pub fn load_adapter(path: &Path) -> Result<AdapterArtifact, AdapterError> {
    let io_err = |source| AdapterError::Io {
        path: path.to_path_buf(),
        source,
    };
    let format_err = |message: String| AdapterError::Format {
        path: path.to_path_buf(),
        message,
    };
    let mut file = std::fs::File::open(path).map_err(io_err)?;
    let mut len_bytes = [0u8; 4];
    file.read_exact(&mut len_bytes).map_err(io_err)?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    file.read_exact(&mut header_json).map_err(io_err)?;
    let header: ArtifactHeader =
        serde_json::from_slice(&header_json).map_err(|e| format_err(e.to_string()))?;
    if header.format_version != ARTIFACT_FORMAT_VERSION {
        return Err(format_err(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    let mut payload = Vec::new();
    file.read_to_end(&mut payload).map_err(io_err)?;
    let mut offset = 0usize;
    let mut pairs = Vec::with_capacity(header.pairs.len());
    for ph in &header.pairs {
        let take = |offset: &mut usize, rows: usize, cols: usize| -> Result<Matrix<f32>, AdapterError> {
            let n = rows * cols * 4;
            let end = *offset + n;
            if end > payload.len() {
                return Err(format_err(format!(
                    "payload truncated reading matrix for {}",
                    ph.name
                )));
            }
            let m = Matrix::<f32>::from_f32_le_bytes(rows, cols, &payload[*offset..end])
                .ok_or_else(|| format_err(format!("bad payload bytes for {}", ph.name)))?;
            *offset = end;
            Ok(m)
        };
        let a = take(&mut offset, ph.a_rows, ph.a_cols)?;
        let b = take(&mut offset, ph.b_rows, ph.b_cols)?;
        pairs.push(AdapterPair {
            name: ph.name.clone(),
            a,
            b,
        });
    }
    if offset != payload.len() {
        return Err(format_err(format!(
            "payload has {} trailing bytes",
            payload.len() - offset
        )));
    }
    let artifact = AdapterArtifact {
        config: header.config,
        pairs,
        checksum: header.checksum,
    };
    artifact.verify_checksum()?;
    Ok(artifact)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Lora,
    Full,
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainMode::Lora => "lora",
            TrainMode::Full => "full",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparameters {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Seeds epoch shuffling in both training modes.
    pub seed: u64,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            epochs: 5,
            batch_size: 8,
            seed: 0,
        }
    }
}

/// What a training run cost and achieved. `wall_time_s` is measured by
/// the orchestrator; deterministic pipelines zero it before writing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub label: String,
    pub dataset: String,
    pub mode: TrainMode,
    pub trainable_params: usize,
    pub total_params: usize,
    pub wall_time_s: f64,
    pub peak_memory_bytes: Option<u64>,
    /// How the memory figure was obtained, since allocator peak and
    /// device totals differ.
    pub memory_method: String,
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
    pub perplexity: Option<f64>,
}

impl TrainingReport {
    /// Percentage of full-model parameters this run trained.
    pub fn trainable_percent(&self) -> f64 {
        100.0 * self.trainable_params as f64 / self.total_params as f64
    }
}

/// One training sequence: token ids plus the index where loss-bearing
/// target tokens begin.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSequence {
    pub tokens: Vec<u32>,
    pub target_start: usize,
}

/// Gradient machinery contract the training loops drive.
pub trait TrainingBackend {
    fn dims(&self) -> ModelDims;
    fn tokenize(&self, text: &str) -> Vec<u32>;
    fn max_sequence_len(&self) -> usize;
    /// Checksum over every frozen base weight, for the freeze property.
    fn base_checksum(&self) -> String;
    /// Starts a session; `lora` mode attaches fresh low-rank pairs.
    fn begin(
        &mut self,
        mode: TrainMode,
        cfg: &LoraConfig,
        hyper: &Hyperparameters,
    ) -> Result<(), AdapterError>;
    /// One optimizer step over a batch; returns the batch mean loss.
    fn step(&mut self, batch: &[TrainSequence]) -> Result<f64, AdapterError>;
    /// Dataset mean loss without updating parameters.
    fn measure_loss(&mut self, data: &[TrainSequence]) -> Result<f64, AdapterError>;
    /// Trained low-rank pairs; lora sessions only.
    fn export_adapter(&self) -> Result<AdapterArtifact, AdapterError>;
    /// Allocation high-water mark, when the backend tracks one.
    fn peak_memory_bytes(&self) -> Option<u64>;
    fn memory_method(&self) -> String;
}

/// Renders instruction + CoT target into token sequences, left-truncated
/// to the backend's window. Sequences whose target would vanish are
/// dropped.
pub fn encode_examples(
    backend: &dyn TrainingBackend,
    dataset: &[crate::datagen::RaftExample],
) -> Vec<TrainSequence> {
    use crate::token::{BOS_TOKEN, EOS_TOKEN};
    let max_seq = backend.max_sequence_len();
    let mut out = Vec::with_capacity(dataset.len());
    for example in dataset {
        let target_text = crate::datagen::templates::render_training_target(&example.cot_answer);
        let prompt = backend.tokenize(&example.instruction);
        let target = backend.tokenize(&target_text);
        let mut tokens = Vec::with_capacity(prompt.len() + target.len() + 2);
        tokens.push(BOS_TOKEN);
        tokens.extend_from_slice(&prompt);
        let mut target_start = tokens.len();
        tokens.extend_from_slice(&target);
        tokens.push(EOS_TOKEN);
        if tokens.len() > max_seq {
            let cut = tokens.len() - max_seq;
            tokens.drain(..cut);
            target_start = target_start.saturating_sub(cut).max(1);
        }
        if target_start < tokens.len() && tokens.len() >= 2 {
            out.push(TrainSequence {
                tokens,
                target_start,
            });
        }
    }
    out
}

fn run_training(
    sequences: &[TrainSequence],
    mode: TrainMode,
    cfg: &LoraConfig,
    backend: &mut dyn TrainingBackend,
    hyper: &Hyperparameters,
) -> Result<TrainingReport, AdapterError> {
    if sequences.is_empty() {
        return Err(AdapterError::EmptyDataset);
    }
    let checksum_before = backend.base_checksum();
    let started = std::time::Instant::now();
    backend.begin(mode, cfg, hyper)?;
    let initial_train_loss = backend.measure_loss(sequences)?;
    let mut completed_steps = 0u64;
    let batch_size = hyper.batch_size.max(1);
    for epoch in 0..hyper.epochs {
        let mut rng = rng_for(hyper.seed, &format!("train.epoch/{epoch}"));
        let order = sample_indices(&mut rng, sequences.len(), sequences.len());
        for batch_idx in order.chunks(batch_size) {
            let batch: Vec<TrainSequence> =
                batch_idx.iter().map(|&i| sequences[i].clone()).collect();
            backend.step(&batch).map_err(|e| match e {
                AdapterError::BackendFailure { message, .. } => AdapterError::BackendFailure {
                    completed_steps,
                    message,
                },
                other => other,
            })?;
            completed_steps += 1;
        }
    }
    let final_train_loss = backend.measure_loss(sequences)?;
    let wall_time_s = started.elapsed().as_secs_f64();
    if mode == TrainMode::Lora {
        let checksum_after = backend.base_checksum();
        if checksum_after != checksum_before {
            return Err(AdapterError::FrozenBaseChanged {
                before: checksum_before,
                after: checksum_after,
            });
        }
    }
    let dims = backend.dims();
    let trainable_params = match mode {
        TrainMode::Lora => count_trainable_params(&dims, cfg)?,
        TrainMode::Full => dims.total_params,
    };
    Ok(TrainingReport {
        label: match mode {
            TrainMode::Lora => format!("lora-r{}", cfg.rank),
            TrainMode::Full => "full".to_string(),
        },
        dataset: String::new(),
        mode,
        trainable_params,
        total_params: dims.total_params,
        wall_time_s,
        peak_memory_bytes: backend.peak_memory_bytes(),
        memory_method: backend.memory_method(),
        initial_train_loss,
        final_train_loss,
        perplexity: None,
    })
}

/// Trains low-rank pairs on a frozen base and exports them.
pub fn train_adapter(
    dataset: &[crate::datagen::RaftExample],
    cfg: &LoraConfig,
    backend: &mut dyn TrainingBackend,
    hyper: &Hyperparameters,
) -> Result<(AdapterArtifact, TrainingReport), AdapterError> {
    cfg.validate()?;
    let sequences = encode_examples(backend, dataset);
    let report = run_training(&sequences, TrainMode::Lora, cfg, backend, hyper)?;
    let artifact = backend.export_adapter()?;
    artifact.verify_checksum()?;
    Ok((artifact, report))
}

/// Full-parameter fine-tuning baseline: same loop, everything trainable.
pub fn train_full(
    dataset: &[crate::datagen::RaftExample],
    backend: &mut dyn TrainingBackend,
    hyper: &Hyperparameters,
) -> Result<TrainingReport, AdapterError> {
    let sequences = encode_examples(backend, dataset);
    run_training(&sequences, TrainMode::Full, &LoraConfig::default(), backend, hyper)
}

/// A model that can serve with interchangeable adapters.
pub trait AdapterServable {
    /// Installs `artifact` (or clears adapters when `None`), replacing
    /// whatever was attached before.
    fn attach(&mut self, artifact: Option<&AdapterArtifact>) -> Result<(), AdapterError>;
    /// Next-token logits after `prompt_tokens`.
    fn logits(&self, prompt_tokens: &[u32]) -> Vec<f64>;
}

/// Keeps a resident model and swaps adapters on it. Swapping while a
/// generation closure runs is refused, not raced.
pub struct AdapterHost<M> {
    inner: RwLock<M>,
    swaps: AtomicU64,
}

impl<M: AdapterServable> AdapterHost<M> {
    pub fn new(model: M) -> Self {
        Self {
            inner: RwLock::new(model),
            swaps: AtomicU64::new(0),
        }
    }

    /// Runs `f` against the currently attached model.
    pub fn generate<T>(&self, f: impl FnOnce(&M) -> T) -> T {
        let guard = self.inner.read();
        f(&guard)
    }

    pub fn logits(&self, prompt_tokens: &[u32]) -> Vec<f64> {
        self.generate(|m| m.logits(prompt_tokens))
    }

    /// Replaces the attached adapter; `None` restores bare-base behavior.
    pub fn swap(&self, artifact: Option<&AdapterArtifact>) -> Result<(), AdapterError> {
        if let Some(artifact) = artifact {
            artifact.verify_checksum()?;
        }
        let mut guard = self.inner.try_write().ok_or(AdapterError::SwapInFlight)?;
        guard.attach(artifact)?;
        self.swaps.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    pub fn swap_count(&self) -> u64 {
        self.swaps.load(Ordering::Relaxed)
    }

    pub fn into_inner(self) -> M {
        self.inner.into_inner()
    }
}

/// Attaches `artifact` to the hosted model, replacing the previous one.
pub fn swap_adapter<M: AdapterServable>(
    host: &AdapterHost<M>,
    artifact: Option<&AdapterArtifact>,
) -> Result<(), AdapterError> {
    host.swap(artifact)
}

/// Scoring interface for perplexity: per-token log-probabilities of a
/// target given its prompt under teacher forcing.
pub trait LanguageModel: Send + Sync {
    fn target_log_probs(&self, prompt: &str, target: &str) -> Result<Vec<f64>, AdapterError>;
}

/// Exp of the token-count-weighted mean negative log-likelihood of the
/// targets. Per-pair sums are collected in input order before the final
/// reduction, so sharding across workers cannot change the result.
pub fn compute_perplexity(
    model: &dyn LanguageModel,
    eval_set: &[(String, String)],
) -> Result<f64, AdapterError> {
    if eval_set.is_empty() {
        return Err(AdapterError::EmptyEvalSet);
    }
    let per_pair: Result<Vec<(f64, usize)>, AdapterError> = eval_set
        .par_iter()
        .map(|(prompt, target)| {
            let log_probs = model.target_log_probs(prompt, target)?;
            let nll: f64 = log_probs.iter().map(|lp| -lp).sum();
            Ok((nll, log_probs.len()))
        })
        .collect();
    let mut nll_sum = 0.0f64;
    let mut token_count = 0usize;
    for (nll, count) in per_pair? {
        nll_sum += nll;
        token_count += count;
    }
    if token_count == 0 {
        return Err(AdapterError::ZeroTargetTokens);
    }
    Ok((nll_sum / token_count as f64).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(name: &str, n: usize) -> MatrixDim {
        MatrixDim {
            name: name.to_string(),
            n_out: n,
            n_in: n,
        }
    }

    #[test]
    fn count_matches_closed_form_on_square_matrix() {
        // One 4096x4096 target at rank 16: rank·(n+n) = 2·4096·16.
        let dims = ModelDims {
            matrices: vec![square("attn.q_proj", 4096)],
            total_params: 4096 * 4096,
        };
        let cfg = LoraConfig {
            rank: 16,
            target_matrices: vec!["q_proj".into()],
            ..LoraConfig::default()
        };
        assert_eq!(count_trainable_params(&dims, &cfg).unwrap(), 131_072);
    }

    #[test]
    fn count_sums_over_layers_and_selectors() {
        // 4 layers x 2 targeted 64x64 matrices at rank 4 -> 4·2·(2·64·4).
        let mut matrices = Vec::new();
        for l in 0..4 {
            matrices.push(square(&format!("layers.{l}.attn.q_proj"), 64));
            matrices.push(square(&format!("layers.{l}.attn.k_proj"), 64));
            matrices.push(square(&format!("layers.{l}.attn.v_proj"), 64));
        }
        let total = matrices.iter().map(|m| m.n_out * m.n_in).sum();
        let dims = ModelDims {
            matrices,
            total_params: total,
        };
        let cfg = LoraConfig {
            rank: 4,
            ..LoraConfig::default()
        };
        assert_eq!(count_trainable_params(&dims, &cfg).unwrap(), 4096);
    }

    #[test]
    fn unmatched_selector_is_named() {
        let dims = ModelDims {
            matrices: vec![square("ffn.w1", 64)],
            total_params: 64 * 64,
        };
        let err = count_trainable_params(&dims, &LoraConfig::default()).unwrap_err();
        match err {
            AdapterError::UnmatchedSelector { selector } => assert_eq!(selector, "q_proj"),
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn oversized_rank_is_rejected() {
        let dims = ModelDims {
            matrices: vec![MatrixDim {
                name: "attn.q_proj".into(),
                n_out: 8,
                n_in: 64,
            }],
            total_params: 8 * 64,
        };
        let cfg = LoraConfig {
            rank: 16,
            target_matrices: vec!["q_proj".into()],
            ..LoraConfig::default()
        };
        let err = count_trainable_params(&dims, &cfg).unwrap_err();
        assert!(
            matches!(err, AdapterError::RankTooLarge { rank: 16, min_dim: 8, .. }),
            "{err}"
        );
    }

    #[test]
    fn count_agrees_with_independent_sum_on_random_shapes() {
        let mut rng = rng_for(77, "count.fuzz");
        for case in 0..25 {
            let n_matrices = 1 + crate::seeded::uniform_index(&mut rng, 6);
            let mut matrices = Vec::new();
            for i in 0..n_matrices {
                matrices.push(MatrixDim {
                    name: format!("m{case}.{i}.target"),
                    n_out: 8 + crate::seeded::uniform_index(&mut rng, 120),
                    n_in: 8 + crate::seeded::uniform_index(&mut rng, 120),
                });
            }
            let total = matrices.iter().map(|m| m.n_out * m.n_in).sum();
            let dims = ModelDims {
                matrices: matrices.clone(),
                total_params: total,
            };
            let cfg = LoraConfig {
                rank: 1 + crate::seeded::uniform_index(&mut rng, 8),
                target_matrices: vec!["target".into()],
                ..LoraConfig::default()
            };
            let expected: usize = matrices
                .iter()
                .map(|m| cfg.rank * (m.n_in + m.n_out))
                .sum();
            assert_eq!(count_trainable_params(&dims, &cfg).unwrap(), expected);
        }
    }

    #[test]
    fn duplicate_selector_matches_count_once() {
        let dims = ModelDims {
            matrices: vec![square("attn.q_proj", 64)],
            total_params: 64 * 64,
        };
        let cfg = LoraConfig {
            rank: 4,
            target_matrices: vec!["q_proj".into(), "attn".into()],
            ..LoraConfig::default()
        };
        assert_eq!(count_trainable_params(&dims, &cfg).unwrap(), 4 * 128);
    }

    fn toy_artifact() -> AdapterArtifact {
        let a = Matrix::<f32>::from_fn(2, 3, |r, c| (r * 3 + c) as f32 * 0.5 - 1.0);
        let b = Matrix::<f32>::from_fn(4, 2, |r, c| (r * 2 + c) as f32 * -0.25);
        AdapterArtifact::new(
            LoraConfig {
                rank: 2,
                ..LoraConfig::default()
            },
            vec![AdapterPair {
                name: "attn.q_proj".into(),
                a,
                b,
            }],
        )
    }

    #[test]
    fn artifact_round_trips_bitwise() {
        let artifact = toy_artifact();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adapter.bin");
        save_adapter(&path, &artifact).unwrap();
        let back = load_adapter(&path).unwrap();
        assert_eq!(artifact, back);
        back.verify_checksum().unwrap();
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let artifact = toy_artifact();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adapter.bin");
        save_adapter(&path, &artifact).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        let err = load_adapter(&path).unwrap_err();
        assert!(matches!(err, AdapterError::ChecksumMismatch { .. }), "{err}");
    }

    struct FixedProbModel {
        log_probs: Vec<f64>,
    }

    impl LanguageModel for FixedProbModel {
        fn target_log_probs(&self, _prompt: &str, _target: &str) -> Result<Vec<f64>, AdapterError> {
            Ok(self.log_probs.clone())
        }
    }

    struct UniformModel {
        vocab: usize,
    }

    impl LanguageModel for UniformModel {
        fn target_log_probs(&self, _prompt: &str, target: &str) -> Result<Vec<f64>, AdapterError> {
            let n = target.split_whitespace().count();
            Ok(vec![-(self.vocab as f64).ln(); n])
        }
    }

    #[test]
    fn uniform_model_perplexity_equals_vocab() {
        let model = UniformModel { vocab: 100 };
        let set = vec![
            ("p1".to_string(), "one two three".to_string()),
            ("p2".to_string(), "four five".to_string()),
        ];
        let ppl = compute_perplexity(&model, &set).unwrap();
        assert!((ppl - 100.0).abs() < 1e-6, "{ppl}");
    }

    #[test]
    fn perfect_model_perplexity_is_one() {
        let model = FixedProbModel {
            log_probs: vec![0.0, 0.0, 0.0],
        };
        let set = vec![("p".to_string(), "t".to_string())];
        assert_eq!(compute_perplexity(&model, &set).unwrap(), 1.0);
    }

    #[test]
    fn three_token_probabilities_give_geometric_mean_inverse() {
        // (0.5, 0.25, 0.125): exp(-(ln .5 + ln .25 + ln .125)/3) is the
        // inverse geometric mean, (1/64)^(-1/3) = 4 exactly.
        let model = FixedProbModel {
            log_probs: vec![0.5f64.ln(), 0.25f64.ln(), 0.125f64.ln()],
        };
        let set = vec![("p".to_string(), "t".to_string())];
        let ppl = compute_perplexity(&model, &set).unwrap();
        assert!((ppl - 4.0).abs() < 1e-9, "{ppl}");
    }

    #[test]
    fn three_tokens_at_inverse_root_eight_give_two_root_two() {
        // Three tokens each at p = 2^(-3/2): perplexity 2^(3/2) ≈ 2.8284.
        let lp = -1.5 * 2.0f64.ln();
        let model = FixedProbModel {
            log_probs: vec![lp, lp, lp],
        };
        let set = vec![("p".to_string(), "t".to_string())];
        let ppl = compute_perplexity(&model, &set).unwrap();
        assert!((ppl - 2.0f64.powf(1.5)).abs() < 1e-12, "{ppl}");
        assert!((ppl - 2.8284).abs() < 1e-4, "{ppl}");
    }

    #[test]
    fn empty_eval_set_and_zero_tokens_error() {
        let model = FixedProbModel { log_probs: vec![] };
        assert!(matches!(
            compute_perplexity(&model, &[]).unwrap_err(),
            AdapterError::EmptyEvalSet
        ));
        let set = vec![("p".to_string(), "t".to_string())];
        assert!(matches!(
            compute_perplexity(&model, &set).unwrap_err(),
            AdapterError::ZeroTargetTokens
        ));
    }

    #[test]
    fn weighted_mean_weights_by_token_count() {
        // Pair 1: 1 token at p=e^-2; pair 2: 3 tokens at p=e^0. Weighted
        // mean NLL = 2/4, not (2+0)/2.
        struct TwoPair;
        impl LanguageModel for TwoPair {
            fn target_log_probs(&self, prompt: &str, _t: &str) -> Result<Vec<f64>, AdapterError> {
                Ok(if prompt == "first" {
                    vec![-2.0]
                } else {
                    vec![0.0, 0.0, 0.0]
                })
            }
        }
        let set = vec![
            ("first".to_string(), "t".to_string()),
            ("second".to_string(), "t".to_string()),
        ];
        let ppl = compute_perplexity(&TwoPair, &set).unwrap();
        assert!((ppl - 0.5f64.exp()).abs() < 1e-12, "{ppl}");
    }

    #[test]
    fn lora_config_defaults_and_alpha_rule() {
        let cfg = LoraConfig::default();
        assert_eq!(cfg.rank, 4);
        assert_eq!(cfg.effective_alpha(), 8.0);
        assert_eq!(cfg.scale(), 2.0);
        assert_eq!(cfg.dropout, 0.05);
        assert_eq!(cfg.target_matrices, vec!["q_proj", "v_proj"]);
        let wide = LoraConfig {
            rank: 16,
            ..LoraConfig::default()
        };
        assert_eq!(wide.effective_alpha(), 32.0);
    }

    #[test]
    fn report_trainable_percent_matches_ratio() {
        let report = TrainingReport {
            label: "lora-r16".into(),
            dataset: "demo".into(),
            mode: TrainMode::Lora,
            trainable_params: 168_000_000,
            total_params: 8_100_000_000,
            wall_time_s: 0.0,
            peak_memory_bytes: None,
            memory_method: "none".into(),
            initial_train_loss: 1.0,
            final_train_loss: 0.5,
            perplexity: None,
        };
        assert!((report.trainable_percent() - 2.074).abs() < 0.01);
    }
}
