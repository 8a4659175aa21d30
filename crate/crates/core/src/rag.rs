//! Retrieve-read pipeline: an exact flat vector index over chunk
//! embeddings, cosine top-k retrieval, and reader prompting.
//!
//! Search is deliberately brute force — the corpora this toolkit targets
//! are small enough that exact search is fast, and exactness keeps
//! retrieval reproducible across platforms. Ties are broken by ascending
//! chunk id so ordering is deterministic even for duplicated vectors.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clients::{ChatClient, ChatMessage, ChatRequest, ClientError, EmbeddingClient};
use crate::corpus::Corpus;
use crate::datagen::templates;
use crate::linalg::{dot, l2_normalize, Matrix};
use crate::scalar::Scalar;

/// Completion budget for reader answers.
pub const READER_MAX_TOKENS: u32 = 512;

#[derive(Debug, Error)]
pub enum RagError {
    #[error("cannot build an index from zero chunks")]
    EmptyChunks,
    #[error("duplicate chunk id \"{id}\" in index input")]
    DuplicateChunkId { id: String },
    #[error("embedding client returned {got} vectors for {expected} inputs")]
    Arity { expected: usize, got: usize },
    #[error("query text must be non-empty")]
    EmptyQuery,
    #[error("index is empty")]
    EmptyIndex,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("index has no text for retrieved chunk \"{chunk_id}\"")]
    MissingChunkText { chunk_id: String },
    #[error("embedding client failed: {0}")]
    Embed(#[from] ClientError),
    #[error("reader failed after retrieving {} chunks: {source}", trace.len())]
    Reader {
        trace: Vec<RetrievalResult>,
        source: ClientError,
    },
    #[error("template error: {0}")]
    Template(#[from] crate::datagen::DatagenError),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad index file {path}: {message}")]
    Format { path: PathBuf, message: String },
}

/// Provenance recorded at build time. The timestamp is optional and
/// never persisted, so index files are byte-stable across rebuilds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildMetadata {
    pub embedder: String,
    pub built_unix: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub chunk_id: String,
    /// Cosine similarity in [-1, 1].
    pub score: f64,
    /// 1-based position in the result list.
    pub rank: usize,
}

/// Exact flat index: one unit-norm vector per chunk id. Immutable after
/// build; concurrent retrievals share it freely.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex<S: Scalar> {
    dimension: usize,
    ids: Vec<String>,
    /// Row r is the vector for ids[r].
    vectors: Matrix<S>,
    pub build_metadata: BuildMetadata,
}

impl<S: Scalar> VectorIndex<S> {
    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vector(&self, row: usize) -> &[S] {
        self.vectors.row(row)
    }
}

/// Embeds every chunk and stores the L2-normalized vectors.
pub fn build_index<S: Scalar>(
    chunks: &[crate::corpus::DocumentChunk],
    client: &dyn EmbeddingClient,
) -> Result<VectorIndex<S>, RagError> {
    if chunks.is_empty() {
        return Err(RagError::EmptyChunks);
    }
    let mut seen = std::collections::BTreeSet::new();
    for chunk in chunks {
        if !seen.insert(chunk.id.as_str()) {
            return Err(RagError::DuplicateChunkId {
                id: chunk.id.clone(),
            });
        }
    }
    let texts: Vec<String> = chunks.iter().map(|c| c.text.clone()).collect();
    let embedded = client.embed(&texts)?;
    if embedded.len() != chunks.len() {
        return Err(RagError::Arity {
            expected: chunks.len(),
            got: embedded.len(),
        });
    }
    let dimension = embedded[0].len();
    let mut vectors = Matrix::zeros(chunks.len(), dimension);
    for (r, vec_f32) in embedded.iter().enumerate() {
        if vec_f32.len() != dimension {
            return Err(RagError::Arity {
                expected: dimension,
                got: vec_f32.len(),
            });
        }
        let mut row: Vec<S> = vec_f32.iter().map(|&v| S::of_f32(v)).collect();
        l2_normalize(&mut row);
        vectors.row_mut(r).copy_from_slice(&row);
    }
    Ok(VectorIndex {
        dimension,
        ids: chunks.iter().map(|c| c.id.clone()).collect(),
        vectors,
        build_metadata: BuildMetadata {
            embedder: client.identity(),
            built_unix: None,
        },
    })
}

/// Exact cosine top-k: embeds the query and ranks every stored vector.
/// Returns `min(k, len)` results, best first, ties by ascending id.
pub fn retrieve<S: Scalar>(
    index: &VectorIndex<S>,
    query: &str,
    client: &dyn EmbeddingClient,
    k: usize,
) -> Result<Vec<RetrievalResult>, RagError> {
    if index.is_empty() {
        return Err(RagError::EmptyIndex);
    }
    if query.trim().is_empty() {
        return Err(RagError::EmptyQuery);
    }
    if k == 0 {
        return Err(RagError::ZeroK);
    }
    let embedded = client.embed(std::slice::from_ref(&query.to_string()))?;
    let mut q: Vec<S> = embedded[0].iter().map(|&v| S::of_f32(v)).collect();
    l2_normalize(&mut q);
    let mut scored: Vec<(usize, S)> = (0..index.len())
        .map(|r| (r, dot(index.vector(r), &q)))
        .collect();
    scored.sort_by(|(ra, sa), (rb, sb)| {
        sb.partial_cmp(sa)
            .expect("cosine scores are finite")
            .then_with(|| index.ids[*ra].cmp(&index.ids[*rb]))
    });
    Ok(scored
        .into_iter()
        .take(k.min(index.len()))
        .enumerate()
        .map(|(i, (r, score))| RetrievalResult {
            chunk_id: index.ids[r].clone(),
            score: score.as_f64(),
            rank: i + 1,
        })
        .collect())
}

/// Retrieve-read: top-k chunks in rank order plus the question, rendered
/// with the same document-block template used for training instructions,
/// sent to the reader. Returns the raw reader output with the retrieval
/// trace; reader failures carry the trace too.
#[allow(clippy::too_many_arguments)]
pub fn answer_query<S: Scalar>(
    question: &str,
    index: &VectorIndex<S>,
    corpus: &Corpus,
    embed_client: &dyn EmbeddingClient,
    chat_client: &dyn ChatClient,
    k: usize,
    template_version: &str,
) -> Result<(String, Vec<RetrievalResult>), RagError> {
    let trace = retrieve(index, question, embed_client, k)?;
    let mut documents: Vec<(&str, &str)> = Vec::with_capacity(trace.len());
    for result in &trace {
        let chunk =
            corpus
                .chunk_by_id(&result.chunk_id)
                .ok_or_else(|| RagError::MissingChunkText {
                    chunk_id: result.chunk_id.clone(),
                })?;
        documents.push((chunk.id.as_str(), chunk.text.as_str()));
    }
    let prompt = templates::render_reader_prompt(template_version, &documents, question)?;
    let request = ChatRequest {
        messages: vec![ChatMessage::user(prompt)],
        temperature: 0.0,
        max_tokens: READER_MAX_TOKENS,
        seed: None,
    };
    match chat_client.chat(&request) {
        Ok(response) => Ok((response.content, trace)),
        Err(source) => Err(RagError::Reader { trace, source }),
    }
}

#[derive(Serialize, Deserialize)]
struct IndexHeader {
    format_version: u32,
    dimension: usize,
    count: usize,
    ids: Vec<String>,
    embedder: String,
}

const INDEX_FORMAT_VERSION: u32 = 1;

/// Writes `[u32 LE header length][header JSON][f32 LE vector payload]`,
/// rows in id order. No timestamp: rebuilding an identical index yields
/// an identical file.
pub fn save_index<S: Scalar>(path: &Path, index: &VectorIndex<S>) -> Result<(), RagError> {
    let io_err = |source| RagError::Io {
        path: path.to_path_buf(),
        source,
    };
    let header = IndexHeader {
        format_version: INDEX_FORMAT_VERSION,
        dimension: index.dimension,
        count: index.len(),
        ids: index.ids.clone(),
        embedder: index.build_metadata.embedder.clone(),
    };
    let header_json = serde_json::to_vec(&header).map_err(|e| RagError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let file = std::fs::File::create(path).map_err(io_err)?;
    let mut w = std::io::BufWriter::new(file);
    w.write_all(&(header_json.len() as u32).to_le_bytes())
        .map_err(io_err)?;
    w.write_all(&header_json).map_err(io_err)?;
    w.write_all(&index.vectors.to_f32_le_bytes()).map_err(io_err)?;
    w.flush().map_err(io_err)
}

pub fn load_index<S: Scalar>(path: &Path) -> Result<VectorIndex<S>, RagError> {
    let io_err = |source| RagError::Io {
        path: path.to_path_buf(),
        source,
    };
    let format_err = |message: String| RagError::Format {
        path: path.to_path_buf(),
        message,
    };
    let mut file = std::fs::File::open(path).map_err(io_err)?;
    let mut len_bytes = [0u8; 4];
    file.read_exact(&mut len_bytes).map_err(io_err)?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    file.read_exact(&mut header_json).map_err(io_err)?;
    let header: IndexHeader =
        serde_json::from_slice(&header_json).map_err(|e| format_err(e.to_string()))?;
    if header.format_version != INDEX_FORMAT_VERSION {
        return Err(format_err(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    if header.ids.len() != header.count {
        return Err(format_err(format!(
            "header count {} does not match {} ids",
            header.count,
            header.ids.len()
        )));
    }
    let mut payload = Vec::new();
    file.read_to_end(&mut payload).map_err(io_err)?;
    let expected_bytes = header.count * header.dimension * 4;
    if payload.len() != expected_bytes {
        return Err(format_err(format!(
            "payload is {} bytes, expected {expected_bytes}",
            payload.len()
        )));
    }
    let vectors = Matrix::<S>::from_f32_le_bytes(header.count, header.dimension, &payload)
        .ok_or_else(|| format_err("bad payload bytes".to_string()))?;
    // Tolerance leaves headroom for f32 storage quantization; vectors
    // were exactly unit-norm at insert.
    for r in 0..header.count {
        let norm = crate::linalg::l2_norm(vectors.row(r)).as_f64();
        if (norm - 1.0).abs() > 1e-4 {
            return Err(format_err(format!(
                "vector for {} has norm {norm}, expected 1",
                header.ids[r]
            )));
        }
    }
    let mut seen = std::collections::BTreeSet::new();
    for id in &header.ids {
        if !seen.insert(id.as_str()) {
            return Err(format_err(format!("duplicate chunk id \"{id}\"")));
        }
    }
    Ok(VectorIndex {
        dimension: header.dimension,
        ids: header.ids,
        vectors,
        build_metadata: BuildMetadata {
            embedder: header.embedder,
            built_unix: None,
        },
    })
}
