//! Tiny deterministic reference backend: a 2-layer transformer small
//! enough (vocab ≤ 512, dimension ≤ 64) that every training and serving
//! contract can be exercised on CPU in seconds.
//!
//! Forward, backward, and Adam are written out by hand so the whole
//! stack is dependency-free and reproducible bit-for-bit from a seed.
//! Serving applies adapters through cached effective weights
//! (`W + scale·B·A` computed once at attach), so a hot-swapped adapter
//! and a freshly loaded one produce identical bits. Training in adapter
//! mode keeps base weights untouched and routes the low-rank path
//! separately so gradients reach only A and B.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    AdapterArtifact, AdapterError, AdapterPair, AdapterServable, Hyperparameters, LanguageModel,
    LoraConfig, MatrixDim, ModelDims, TrainMode, TrainSequence, TrainingBackend,
};
use crate::linalg::{dot, Matrix};
use crate::scalar::Scalar;
use crate::seeded::{rng_for, sha256_hex, uniform_unit};
use crate::token::{HashSegmentTokenizer, Tokenizer, BOS_TOKEN};

const RMS_EPS: f64 = 1e-6;
/// Adapter A-matrix init spread; B starts at zero so adapters begin as
/// the identity update.
const LORA_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TinyConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Feed-forward width as a multiple of `dim`.
    pub ff_mult: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl Default for TinyConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            dim: 32,
            n_layers: 2,
            n_heads: 2,
            ff_mult: 4,
            max_seq: 128,
            seed: 0,
        }
    }
}

impl TinyConfig {
    pub fn validate(&self) -> Result<(), AdapterError> {
        let bad = |message: String| Err(AdapterError::InvalidConfig { message });
        if self.vocab_size > 512 {
            return bad(format!("vocab_size {} exceeds the 512 cap", self.vocab_size));
        }
        if self.vocab_size <= crate::token::NUM_SPECIAL_TOKENS as usize {
            return bad("vocab_size leaves no room for content tokens".into());
        }
        if self.dim > 64 {
            return bad(format!("dim {} exceeds the 64 cap", self.dim));
        }
        if self.n_heads == 0 || !self.dim.is_multiple_of(self.n_heads) {
            return bad(format!(
                "dim {} must divide evenly into {} heads",
                self.dim, self.n_heads
            ));
        }
        if self.n_layers == 0 || self.ff_mult == 0 || self.max_seq < 2 {
            return bad("n_layers and ff_mult must be positive, max_seq at least 2".into());
        }
        Ok(())
    }

    fn ff_dim(&self) -> usize {
        self.dim * self.ff_mult
    }
}

/// Declaration-ordered matrix inventory. Embedding tables are listed as
/// linear maps (`n_out` = dim); only non-embedding matrices accept
/// adapters in this backend.
fn matrix_shapes(config: &TinyConfig) -> Vec<MatrixDim> {
    let d = config.dim;
    let f = config.ff_dim();
    let v = config.vocab_size;
    let mut shapes = vec![
        MatrixDim {
            name: "token_emb".into(),
            n_out: d,
            n_in: v,
        },
        MatrixDim {
            name: "pos_emb".into(),
            n_out: d,
            n_in: config.max_seq,
        },
    ];
    for l in 0..config.n_layers {
        for proj in ["q_proj", "k_proj", "v_proj", "o_proj"] {
            shapes.push(MatrixDim {
                name: format!("layers.{l}.attn.{proj}"),
                n_out: d,
                n_in: d,
            });
        }
        shapes.push(MatrixDim {
            name: format!("layers.{l}.ffn.w1"),
            n_out: f,
            n_in: d,
        });
        shapes.push(MatrixDim {
            name: format!("layers.{l}.ffn.w2"),
            n_out: d,
            n_in: f,
        });
    }
    shapes.push(MatrixDim {
        name: "unembed".into(),
        n_out: v,
        n_in: d,
    });
    shapes
}

fn is_embedding(name: &str) -> bool {
    name == "token_emb" || name == "pos_emb"
}

/// Storage shape: embeddings are kept row-per-index for cheap lookup,
/// everything else as (n_out x n_in).
fn storage_shape(dim: &MatrixDim) -> (usize, usize) {
    if is_embedding(&dim.name) {
        (dim.n_in, dim.n_out)
    } else {
        (dim.n_out, dim.n_in)
    }
}

pub struct TinyModel<S: Scalar> {
    config: TinyConfig,
    tokenizer: HashSegmentTokenizer,
    shapes: Vec<MatrixDim>,
    base: BTreeMap<String, Matrix<S>>,
    /// Cached `W + scale·B·A` per adapter-targeted matrix; empty when no
    /// adapter is attached.
    effective: BTreeMap<String, Matrix<S>>,
}

impl<S: Scalar> TinyModel<S> {
    pub fn new(config: TinyConfig) -> Result<Self, AdapterError> {
        config.validate()?;
        let shapes = matrix_shapes(&config);
        let mut base = BTreeMap::new();
        for shape in &shapes {
            let (rows, cols) = storage_shape(shape);
            // Fan-in-scaled init keeps activations and logits O(1) at
            // these small dimensions, so the frozen base has usable
            // logit range for adapters to steer.
            let std = if is_embedding(&shape.name) {
                1.0
            } else {
                1.0 / (shape.n_in as f64).sqrt()
            };
            let mut rng = rng_for(config.seed, &format!("tiny.init/{}", shape.name));
            let m = Matrix::from_fn(rows, cols, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                S::of_f64(z * std)
            });
            base.insert(shape.name.clone(), m);
        }
        Ok(Self {
            config,
            tokenizer: HashSegmentTokenizer::new(config_vocab(&config)),
            shapes,
            base,
            effective: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &TinyConfig {
        &self.config
    }

    pub fn dims(&self) -> ModelDims {
        let total = self.shapes.iter().map(|s| s.n_out * s.n_in).sum();
        ModelDims {
            matrices: self.shapes.clone(),
            total_params: total,
        }
    }

    pub fn tokenizer(&self) -> &dyn Tokenizer {
        &self.tokenizer
    }

    fn shape_of(&self, name: &str) -> Option<&MatrixDim> {
        self.shapes.iter().find(|s| s.name == name)
    }

    fn weight(&self, name: &str) -> &Matrix<S> {
        self.effective
            .get(name)
            .unwrap_or_else(|| &self.base[name])
    }

    /// SHA-256 over the canonical little-endian f32 bytes of every base
    /// matrix in declaration order.
    pub fn base_checksum(&self) -> String {
        let mut bytes = Vec::new();
        for shape in &self.shapes {
            bytes.extend_from_slice(shape.name.as_bytes());
            bytes.push(0);
            bytes.extend_from_slice(&self.base[&shape.name].to_f32_le_bytes());
        }
        sha256_hex(&bytes)
    }

    /// Serving forward pass: per-position next-token logits using
    /// effective weights. `tokens` are used as-is (specials included)
    /// and left-truncated to the context window.
    pub fn forward_logits(&self, tokens: &[u32]) -> Vec<Vec<S>> {
        let tokens = tail_window(tokens, self.config.max_seq);
        let t_len = tokens.len();
        let d = self.config.dim;
        let mut x: Vec<Vec<S>> = Vec::with_capacity(t_len);
        let token_emb = &self.base["token_emb"];
        let pos_emb = &self.base["pos_emb"];
        for (t, &tok) in tokens.iter().enumerate() {
            let mut row = vec![S::zero(); d];
            let emb_row = token_emb.row(tok as usize);
            let pos_row = pos_emb.row(t);
            for i in 0..d {
                row[i] = emb_row[i] + pos_row[i];
            }
            x.push(row);
        }
        for l in 0..self.config.n_layers {
            let prefix = format!("layers.{l}");
            let n1: Vec<Vec<S>> = x.iter().map(|xi| rmsnorm(xi).0).collect();
            let q = apply_weight(self.weight(&format!("{prefix}.attn.q_proj")), &n1);
            let k = apply_weight(self.weight(&format!("{prefix}.attn.k_proj")), &n1);
            let v = apply_weight(self.weight(&format!("{prefix}.attn.v_proj")), &n1);
            let ctx = causal_attention(&self.config, &q, &k, &v).0;
            let attn_out = apply_weight(self.weight(&format!("{prefix}.attn.o_proj")), &ctx);
            for t in 0..t_len {
                for i in 0..d {
                    x[t][i] += attn_out[t][i];
                }
            }
            let n2: Vec<Vec<S>> = x.iter().map(|xi| rmsnorm(xi).0).collect();
            let w1 = self.weight(&format!("{prefix}.ffn.w1"));
            let w2 = self.weight(&format!("{prefix}.ffn.w2"));
            for t in 0..t_len {
                let mut z1 = w1.matvec(&n2[t]);
                for z in z1.iter_mut() {
                    if *z < S::zero() {
                        *z = S::zero();
                    }
                }
                let f2 = w2.matvec(&z1);
                for i in 0..d {
                    x[t][i] += f2[i];
                }
            }
        }
        let unembed = self.weight("unembed");
        x.iter()
            .map(|xi| unembed.matvec(&rmsnorm(xi).0))
            .collect()
    }
}

fn config_vocab(config: &TinyConfig) -> u32 {
    config.vocab_size as u32
}

fn tail_window(tokens: &[u32], max_seq: usize) -> &[u32] {
    if tokens.len() > max_seq {
        &tokens[tokens.len() - max_seq..]
    } else {
        tokens
    }
}

fn apply_weight<S: Scalar>(w: &Matrix<S>, xs: &[Vec<S>]) -> Vec<Vec<S>> {
    xs.iter().map(|x| w.matvec(x)).collect()
}

fn rmsnorm<S: Scalar>(x: &[S]) -> (Vec<S>, S) {
    let d = S::of_f64(x.len() as f64);
    let mean_sq = dot(x, x) / d;
    let inv = (mean_sq + S::of_f64(RMS_EPS)).sqrt().recip();
    (x.iter().map(|&xi| xi * inv).collect(), inv)
}

fn rmsnorm_backward<S: Scalar>(x: &[S], inv: S, dy: &[S]) -> Vec<S> {
    let d = S::of_f64(x.len() as f64);
    let k = inv * inv * inv * dot(x, dy) / d;
    x.iter()
        .zip(dy.iter())
        .map(|(&xi, &dyi)| inv * dyi - k * xi)
        .collect()
}

fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let mut max = row[0];
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Multi-head causal attention. Returns contexts (T x dim) plus the
/// per-head attention rows needed by the backward pass.
#[allow(clippy::type_complexity)]
fn causal_attention<S: Scalar>(
    config: &TinyConfig,
    q: &[Vec<S>],
    k: &[Vec<S>],
    v: &[Vec<S>],
) -> (Vec<Vec<S>>, Vec<Vec<Vec<S>>>) {
    let t_len = q.len();
    let heads = config.n_heads;
    let dh = config.dim / heads;
    let inv_sqrt = S::of_f64(1.0 / (dh as f64).sqrt());
    let mut ctx = vec![vec![S::zero(); config.dim]; t_len];
    let mut probs: Vec<Vec<Vec<S>>> = vec![Vec::with_capacity(t_len); heads];
    for (h, head_probs) in probs.iter_mut().enumerate() {
        let lo = h * dh;
        let hi = lo + dh;
        for t in 0..t_len {
            let mut row = vec![S::zero(); t + 1];
            for (u, r) in row.iter_mut().enumerate() {
                *r = dot(&q[t][lo..hi], &k[u][lo..hi]) * inv_sqrt;
            }
            softmax_in_place(&mut row);
            for (u, &p) in row.iter().enumerate() {
                for i in 0..dh {
                    ctx[t][lo + i] += p * v[u][lo + i];
                }
            }
            head_probs.push(row);
        }
    }
    (ctx, probs)
}

/// Low-rank pair under training, in backend precision.
struct LoraParams<S: Scalar> {
    a: Matrix<S>,
    b: Matrix<S>,
    scale: S,
}

/// Saved adapter-path activations for one targeted matrix: the (masked)
/// inputs, the rank-space products `A·x̃`, and the element-wise
/// derivative `dx̃/dx` (`None` when dropout was off, meaning identity).
struct LoraTrace<S: Scalar> {
    x_tilde: Vec<Vec<S>>,
    u: Vec<Vec<S>>,
    factor: Option<Vec<Vec<S>>>,
}

struct LayerTrace<S: Scalar> {
    x_in: Vec<Vec<S>>,
    inv1: Vec<S>,
    n1: Vec<Vec<S>>,
    q: Vec<Vec<S>>,
    k: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    probs: Vec<Vec<Vec<S>>>,
    ctx: Vec<Vec<S>>,
    x_mid: Vec<Vec<S>>,
    inv2: Vec<S>,
    n2: Vec<Vec<S>>,
    z1: Vec<Vec<S>>,
    f1: Vec<Vec<S>>,
}

struct ForwardTrace<S: Scalar> {
    tokens: Vec<u32>,
    layers: Vec<LayerTrace<S>>,
    x_final: Vec<Vec<S>>,
    inv_final: Vec<S>,
    n_final: Vec<Vec<S>>,
    logits: Vec<Vec<S>>,
    lora: BTreeMap<String, LoraTrace<S>>,
    /// Positions i whose next token tokens[i+1] is loss-bearing.
    loss_positions: Vec<usize>,
}

/// Accumulated gradients for one batch.
struct Gradients<S: Scalar> {
    base: BTreeMap<String, Matrix<S>>,
    lora: BTreeMap<String, (Matrix<S>, Matrix<S>)>,
}

impl<S: Scalar> Gradients<S> {
    fn zeros_like(
        model: &TinyModel<S>,
        mode: TrainMode,
        lora: &BTreeMap<String, LoraParams<S>>,
    ) -> Self {
        let mut base = BTreeMap::new();
        if mode == TrainMode::Full {
            for (name, w) in &model.base {
                base.insert(name.clone(), Matrix::zeros(w.rows(), w.cols()));
            }
        }
        let lora_grads = lora
            .iter()
            .map(|(name, p)| {
                (
                    name.clone(),
                    (
                        Matrix::zeros(p.a.rows(), p.a.cols()),
                        Matrix::zeros(p.b.rows(), p.b.cols()),
                    ),
                )
            })
            .collect();
        Self {
            base,
            lora: lora_grads,
        }
    }
}

/// Training-path linear transform: frozen weight product plus, when the
/// matrix is adapter-targeted, the separate low-rank path with optional
/// dropout on its input.
fn train_linear<S: Scalar>(
    name: &str,
    w: &Matrix<S>,
    xs: &[Vec<S>],
    lora: &BTreeMap<String, LoraParams<S>>,
    dropout: Option<(&mut ChaCha8Rng, f64)>,
    traces: &mut BTreeMap<String, LoraTrace<S>>,
) -> Vec<Vec<S>> {
    let mut ys = apply_weight(w, xs);
    if let Some(params) = lora.get(name) {
        let mut x_tilde_all = Vec::with_capacity(xs.len());
        let mut u_all = Vec::with_capacity(xs.len());
        let mut dropout = dropout;
        let mut factor_all: Option<Vec<Vec<S>>> = None;
        for (t, x) in xs.iter().enumerate() {
            let x_tilde: Vec<S> = match dropout.as_mut() {
                Some((rng, p)) if *p > 0.0 => {
                    let keep_scale = S::of_f64(1.0 / (1.0 - *p));
                    let mut factor_row = vec![S::zero(); x.len()];
                    let masked = x
                        .iter()
                        .enumerate()
                        .map(|(i, &xi)| {
                            if uniform_unit(rng) < *p {
                                S::zero()
                            } else {
                                factor_row[i] = keep_scale;
                                xi * keep_scale
                            }
                        })
                        .collect();
                    factor_all
                        .get_or_insert_with(|| Vec::with_capacity(xs.len()))
                        .push(factor_row);
                    masked
                }
                _ => x.clone(),
            };
            let u = params.a.matvec(&x_tilde);
            let bu = params.b.matvec(&u);
            for (yi, &bi) in ys[t].iter_mut().zip(bu.iter()) {
                *yi += params.scale * bi;
            }
            x_tilde_all.push(x_tilde);
            u_all.push(u);
        }
        traces.insert(
            name.to_string(),
            LoraTrace {
                x_tilde: x_tilde_all,
                u: u_all,
                factor: factor_all,
            },
        );
    }
    ys
}

/// Backward of [`train_linear`]: accumulates weight (full mode) and
/// low-rank gradients, returns the input gradients.
fn train_linear_backward<S: Scalar>(
    name: &str,
    w: &Matrix<S>,
    xs: &[Vec<S>],
    dys: &[Vec<S>],
    lora: &BTreeMap<String, LoraParams<S>>,
    trace: &ForwardTrace<S>,
    grads: &mut Gradients<S>,
) -> Vec<Vec<S>> {
    let mut dxs: Vec<Vec<S>> = dys.iter().map(|dy| w.matvec_t(dy)).collect();
    if let Some(gw) = grads.base.get_mut(name) {
        for (x, dy) in xs.iter().zip(dys.iter()) {
            gw.add_outer(dy, x);
        }
    }
    if let Some(params) = lora.get(name) {
        let lt = &trace.lora[name];
        let (ga, gb) = grads.lora.get_mut(name).expect("lora grad slot");
        for t in 0..xs.len() {
            let dy = &dys[t];
            // y += s·B·(A·x̃): dB += s·dy⊗uᵀ, dA += s·(Bᵀdy)⊗x̃ᵀ,
            // dx += s·(mask ∘ Aᵀ(Bᵀdy)), mask folded into x̃/x ratio.
            let bt_dy: Vec<S> = params.b.matvec_t(dy);
            let scaled_bt_dy: Vec<S> = bt_dy.iter().map(|&v| v * params.scale).collect();
            gb.add_outer(
                &dy.iter().map(|&v| v * params.scale).collect::<Vec<S>>(),
                &lt.u[t],
            );
            ga.add_outer(&scaled_bt_dy, &lt.x_tilde[t]);
            let da_path = params.a.matvec_t(&scaled_bt_dy);
            match &lt.factor {
                Some(factor) => {
                    for i in 0..dxs[t].len() {
                        dxs[t][i] += da_path[i] * factor[t][i];
                    }
                }
                None => {
                    for i in 0..dxs[t].len() {
                        dxs[t][i] += da_path[i];
                    }
                }
            }
        }
    }
    dxs
}

struct LossSummary {
    nll_sum: f64,
    token_count: usize,
}

/// Reborrow the shared dropout state for one linear-layer call.
fn reborrow_dropout<'a>(
    dropout: &'a mut Option<(&mut ChaCha8Rng, f64)>,
) -> Option<(&'a mut ChaCha8Rng, f64)> {
    dropout.as_mut().map(|(rng, p)| (&mut **rng, *p))
}

/// Full training forward pass with activation capture.
fn forward_train<S: Scalar>(
    model: &TinyModel<S>,
    sequence: &TrainSequence,
    lora: &BTreeMap<String, LoraParams<S>>,
    mut dropout: Option<(&mut ChaCha8Rng, f64)>,
) -> (ForwardTrace<S>, LossSummary) {
    let max_seq = model.config.max_seq;
    let full = &sequence.tokens;
    let (tokens, target_start) = if full.len() > max_seq {
        let cut = full.len() - max_seq;
        (
            full[cut..].to_vec(),
            sequence.target_start.saturating_sub(cut).max(1),
        )
    } else {
        (full.clone(), sequence.target_start.max(1))
    };
    let t_len = tokens.len();
    let d = model.config.dim;
    let token_emb = &model.base["token_emb"];
    let pos_emb = &model.base["pos_emb"];
    let mut x: Vec<Vec<S>> = Vec::with_capacity(t_len);
    for (t, &tok) in tokens.iter().enumerate() {
        let emb_row = token_emb.row(tok as usize);
        let pos_row = pos_emb.row(t);
        x.push((0..d).map(|i| emb_row[i] + pos_row[i]).collect());
    }
    let mut layers = Vec::with_capacity(model.config.n_layers);
    let mut lora_traces = BTreeMap::new();
    for l in 0..model.config.n_layers {
        let prefix = format!("layers.{l}");
        let x_in = x.clone();
        let mut inv1 = Vec::with_capacity(t_len);
        let mut n1 = Vec::with_capacity(t_len);
        for xi in &x_in {
            let (n, inv) = rmsnorm(xi);
            n1.push(n);
            inv1.push(inv);
        }
        let q = train_linear(
            &format!("{prefix}.attn.q_proj"),
            &model.base[&format!("{prefix}.attn.q_proj")],
            &n1,
            lora,
            reborrow_dropout(&mut dropout),
            &mut lora_traces,
        );
        let k = train_linear(
            &format!("{prefix}.attn.k_proj"),
            &model.base[&format!("{prefix}.attn.k_proj")],
            &n1,
            lora,
            reborrow_dropout(&mut dropout),
            &mut lora_traces,
        );
        let v = train_linear(
            &format!("{prefix}.attn.v_proj"),
            &model.base[&format!("{prefix}.attn.v_proj")],
            &n1,
            lora,
            reborrow_dropout(&mut dropout),
            &mut lora_traces,
        );
        let (ctx, probs) = causal_attention(&model.config, &q, &k, &v);
        let attn_out = train_linear(
            &format!("{prefix}.attn.o_proj"),
            &model.base[&format!("{prefix}.attn.o_proj")],
            &ctx,
            lora,
            reborrow_dropout(&mut dropout),
            &mut lora_traces,
        );
        let mut x_mid = x_in.clone();
        for t in 0..t_len {
            for i in 0..d {
                x_mid[t][i] += attn_out[t][i];
            }
        }
        let mut inv2 = Vec::with_capacity(t_len);
        let mut n2 = Vec::with_capacity(t_len);
        for xi in &x_mid {
            let (n, inv) = rmsnorm(xi);
            n2.push(n);
            inv2.push(inv);
        }
        let z1 = train_linear(
            &format!("{prefix}.ffn.w1"),
            &model.base[&format!("{prefix}.ffn.w1")],
            &n2,
            lora,
            reborrow_dropout(&mut dropout),
            &mut lora_traces,
        );
        let f1: Vec<Vec<S>> = z1
            .iter()
            .map(|row| {
                row.iter()
                    .map(|&z| if z < S::zero() { S::zero() } else { z })
                    .collect()
            })
            .collect();
        let f2 = train_linear(
            &format!("{prefix}.ffn.w2"),
            &model.base[&format!("{prefix}.ffn.w2")],
            &f1,
            lora,
            reborrow_dropout(&mut dropout),
            &mut lora_traces,
        );
        let mut x_out = x_mid.clone();
        for t in 0..t_len {
            for i in 0..d {
                x_out[t][i] += f2[t][i];
            }
        }
        layers.push(LayerTrace {
            x_in,
            inv1,
            n1,
            q,
            k,
            v,
            probs,
            ctx,
            x_mid,
            inv2,
            n2,
            z1,
            f1,
        });
        x = x_out;
    }
    let x_final = x;
    let mut inv_final = Vec::with_capacity(t_len);
    let mut n_final = Vec::with_capacity(t_len);
    for xi in &x_final {
        let (n, inv) = rmsnorm(xi);
        n_final.push(n);
        inv_final.push(inv);
    }
    let logits = train_linear(
        "unembed",
        &model.base["unembed"],
        &n_final,
        lora,
        reborrow_dropout(&mut dropout),
        &mut lora_traces,
    );
    let loss_positions: Vec<usize> = (target_start.max(1)..t_len).map(|i| i - 1).collect();
    let mut nll_sum = 0.0f64;
    for &i in &loss_positions {
        let target = tokens[i + 1] as usize;
        let row: Vec<f64> = logits[i].iter().map(|&v| v.as_f64()).collect();
        nll_sum -= log_softmax_at(&row, target);
    }
    let token_count = loss_positions.len();
    (
        ForwardTrace {
            tokens,
            layers,
            x_final,
            inv_final,
            n_final,
            logits,
            lora: lora_traces,
            loss_positions,
        },
        LossSummary {
            nll_sum,
            token_count,
        },
    )
}

fn log_softmax_at(row: &[f64], index: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum: f64 = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    row[index] - max - log_sum
}

/// Backward pass matching [`forward_train`]. `inv_total_tokens` is the
/// 1/N loss normalization shared by the whole batch.
fn backward_train<S: Scalar>(
    model: &TinyModel<S>,
    trace: &ForwardTrace<S>,
    lora: &BTreeMap<String, LoraParams<S>>,
    inv_total_tokens: S,
    grads: &mut Gradients<S>,
) {
    let t_len = trace.tokens.len();
    let d = model.config.dim;
    let heads = model.config.n_heads;
    let dh = d / heads;
    let inv_sqrt = S::of_f64(1.0 / (dh as f64).sqrt());

    // d logits: (softmax - onehot) / N at loss positions.
    let mut dlogits = vec![vec![S::zero(); model.config.vocab_size]; t_len];
    for &i in &trace.loss_positions {
        let target = trace.tokens[i + 1] as usize;
        let mut probs = trace.logits[i].clone();
        softmax_in_place(&mut probs);
        for (j, p) in probs.into_iter().enumerate() {
            let delta = if j == target { S::one() } else { S::zero() };
            dlogits[i][j] = (p - delta) * inv_total_tokens;
        }
    }

    let dn_final = train_linear_backward(
        "unembed",
        &model.base["unembed"],
        &trace.n_final,
        &dlogits,
        lora,
        trace,
        grads,
    );
    let mut dx: Vec<Vec<S>> = (0..t_len)
        .map(|t| rmsnorm_backward(&trace.x_final[t], trace.inv_final[t], &dn_final[t]))
        .collect();

    for l in (0..model.config.n_layers).rev() {
        let prefix = format!("layers.{l}");
        let lt = &trace.layers[l];
        // FFN branch: x_out = x_mid + W2·relu(W1·n2(x_mid)).
        let df2 = dx.clone();
        let df1 = train_linear_backward(
            &format!("{prefix}.ffn.w2"),
            &model.base[&format!("{prefix}.ffn.w2")],
            &lt.f1,
            &df2,
            lora,
            trace,
            grads,
        );
        let dz1: Vec<Vec<S>> = (0..t_len)
            .map(|t| {
                df1[t]
                    .iter()
                    .zip(lt.z1[t].iter())
                    .map(|(&g, &z)| if z > S::zero() { g } else { S::zero() })
                    .collect()
            })
            .collect();
        let dn2 = train_linear_backward(
            &format!("{prefix}.ffn.w1"),
            &model.base[&format!("{prefix}.ffn.w1")],
            &lt.n2,
            &dz1,
            lora,
            trace,
            grads,
        );
        let mut dx_mid = dx;
        for t in 0..t_len {
            let back = rmsnorm_backward(&lt.x_mid[t], lt.inv2[t], &dn2[t]);
            for i in 0..d {
                dx_mid[t][i] += back[i];
            }
        }
        // Attention branch: x_mid = x_in + Wo·attn(n1(x_in)).
        let da = dx_mid.clone();
        let dctx = train_linear_backward(
            &format!("{prefix}.attn.o_proj"),
            &model.base[&format!("{prefix}.attn.o_proj")],
            &lt.ctx,
            &da,
            lora,
            trace,
            grads,
        );
        let mut dq = vec![vec![S::zero(); d]; t_len];
        let mut dk = vec![vec![S::zero(); d]; t_len];
        let mut dv = vec![vec![S::zero(); d]; t_len];
        for h in 0..heads {
            let lo = h * dh;
            for t in 0..t_len {
                let p_row = &lt.probs[h][t];
                // dp and softmax Jacobian.
                let mut dp = vec![S::zero(); t + 1];
                for (u, dpu) in dp.iter_mut().enumerate() {
                    *dpu = dot(&dctx[t][lo..lo + dh], &lt.v[u][lo..lo + dh]);
                    for i in 0..dh {
                        dv[u][lo + i] += p_row[u] * dctx[t][lo + i];
                    }
                }
                let mut inner = S::zero();
                for u in 0..=t {
                    inner += p_row[u] * dp[u];
                }
                for u in 0..=t {
                    let ds = p_row[u] * (dp[u] - inner) * inv_sqrt;
                    for i in 0..dh {
                        dq[t][lo + i] += ds * lt.k[u][lo + i];
                        dk[u][lo + i] += ds * lt.q[t][lo + i];
                    }
                }
            }
        }
        let dn1_q = train_linear_backward(
            &format!("{prefix}.attn.q_proj"),
            &model.base[&format!("{prefix}.attn.q_proj")],
            &lt.n1,
            &dq,
            lora,
            trace,
            grads,
        );
        let dn1_k = train_linear_backward(
            &format!("{prefix}.attn.k_proj"),
            &model.base[&format!("{prefix}.attn.k_proj")],
            &lt.n1,
            &dk,
            lora,
            trace,
            grads,
        );
        let dn1_v = train_linear_backward(
            &format!("{prefix}.attn.v_proj"),
            &model.base[&format!("{prefix}.attn.v_proj")],
            &lt.n1,
            &dv,
            lora,
            trace,
            grads,
        );
        let mut dx_in = dx_mid;
        for t in 0..t_len {
            let mut dn1 = dn1_q[t].clone();
            for i in 0..d {
                dn1[i] += dn1_k[t][i] + dn1_v[t][i];
            }
            let back = rmsnorm_backward(&lt.x_in[t], lt.inv1[t], &dn1);
            for i in 0..d {
                dx_in[t][i] += back[i];
            }
        }
        dx = dx_in;
    }

    // Embedding gradients (full mode only).
    if !grads.base.is_empty() {
        let g_tok = grads.base.get_mut("token_emb").expect("token_emb grad");
        for (t, &tok) in trace.tokens.iter().enumerate() {
            let row = g_tok.row_mut(tok as usize);
            for i in 0..d {
                row[i] += dx[t][i];
            }
        }
        let g_pos = grads.base.get_mut("pos_emb").expect("pos_emb grad");
        for (t, dxt) in dx.iter().enumerate() {
            let row = g_pos.row_mut(t);
            for i in 0..d {
                row[i] += dxt[i];
            }
        }
    }
}

struct AdamSlot<S: Scalar> {
    m: Matrix<S>,
    v: Matrix<S>,
}

impl<S: Scalar> AdamSlot<S> {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
        }
    }

    fn bytes(&self) -> u64 {
        (2 * self.m.len() * std::mem::size_of::<S>()) as u64
    }

    fn update(&mut self, weight: &mut Matrix<S>, grad: &Matrix<S>, lr: f64, step: u64) {
        let b1 = S::of_f64(0.9);
        let b2 = S::of_f64(0.999);
        let eps = S::of_f64(1e-8);
        let one = S::one();
        let corr1 = S::of_f64(1.0 - 0.9f64.powi(step as i32));
        let corr2 = S::of_f64(1.0 - 0.999f64.powi(step as i32));
        let lr = S::of_f64(lr);
        for i in 0..weight.len() {
            let g = grad.data()[i];
            let m = b1 * self.m.data()[i] + (one - b1) * g;
            let v = b2 * self.v.data()[i] + (one - b2) * g * g;
            self.m.data_mut()[i] = m;
            self.v.data_mut()[i] = v;
            let m_hat = m / corr1;
            let v_hat = v / corr2;
            weight.data_mut()[i] = weight.data()[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

struct Session<S: Scalar> {
    mode: TrainMode,
    cfg: LoraConfig,
    hyper: Hyperparameters,
    lora: BTreeMap<String, LoraParams<S>>,
    adam: BTreeMap<String, AdamSlot<S>>,
    step_count: u64,
}

/// Deterministic CPU training backend around [`TinyModel`].
pub struct TinyBackend<S: Scalar> {
    model: TinyModel<S>,
    session: Option<Session<S>>,
    peak_bytes: u64,
}

impl<S: Scalar> TinyBackend<S> {
    pub fn new(config: TinyConfig) -> Result<Self, AdapterError> {
        let model = TinyModel::new(config)?;
        let mut backend = Self {
            model,
            session: None,
            peak_bytes: 0,
        };
        backend.track_memory(0);
        Ok(backend)
    }

    pub fn model(&self) -> &TinyModel<S> {
        &self.model
    }

    pub fn into_model(self) -> TinyModel<S> {
        self.model
    }

    fn base_bytes(&self) -> u64 {
        self.model
            .base
            .values()
            .map(|m| (m.len() * std::mem::size_of::<S>()) as u64)
            .sum()
    }

    fn session_bytes(&self) -> u64 {
        let Some(session) = &self.session else {
            return 0;
        };
        let lora: u64 = session
            .lora
            .values()
            .map(|p| ((p.a.len() + p.b.len()) * std::mem::size_of::<S>()) as u64)
            .sum();
        let adam: u64 = session.adam.values().map(AdamSlot::bytes).sum();
        lora + adam
    }

    /// Working-set estimate for one forward+backward over a sequence of
    /// length `t`: the saved per-layer activations plus mirrored
    /// gradient buffers.
    fn activation_bytes(&self, t: usize) -> u64 {
        let c = &self.model.config;
        let per_layer = 9 * t * c.dim + 2 * t * c.ff_dim() + c.n_heads * t * (t + 1) / 2;
        let fixed = 3 * t * c.dim + t * c.vocab_size;
        (2 * (c.n_layers * per_layer + fixed) * std::mem::size_of::<S>()) as u64
    }

    fn track_memory(&mut self, seq_len: usize) {
        let current = self.base_bytes() + self.session_bytes() + self.activation_bytes(seq_len);
        if current > self.peak_bytes {
            self.peak_bytes = current;
        }
    }

    fn session_ref(&self) -> Result<&Session<S>, AdapterError> {
        self.session.as_ref().ok_or(AdapterError::BackendFailure {
            completed_steps: 0,
            message: "no training session; call begin first".to_string(),
        })
    }
}

impl<S: Scalar> TrainingBackend for TinyBackend<S> {
    fn dims(&self) -> ModelDims {
        self.model.dims()
    }

    fn tokenize(&self, text: &str) -> Vec<u32> {
        self.model.tokenizer.encode(text)
    }

    fn max_sequence_len(&self) -> usize {
        self.model.config.max_seq
    }

    fn base_checksum(&self) -> String {
        self.model.base_checksum()
    }

    fn begin(
        &mut self,
        mode: TrainMode,
        cfg: &LoraConfig,
        hyper: &Hyperparameters,
    ) -> Result<(), AdapterError> {
        let mut lora = BTreeMap::new();
        let mut adam = BTreeMap::new();
        match mode {
            TrainMode::Lora => {
                cfg.validate()?;
                let dims = self.model.dims();
                for target in dims.targets(cfg)? {
                    if is_embedding(&target.name) {
                        return Err(AdapterError::InvalidConfig {
                            message: format!(
                                "adapters on embedding matrix {} are not supported by this backend",
                                target.name
                            ),
                        });
                    }
                    let min_dim = target.n_out.min(target.n_in);
                    if cfg.rank > min_dim {
                        return Err(AdapterError::RankTooLarge {
                            matrix: target.name.clone(),
                            rank: cfg.rank,
                            min_dim,
                        });
                    }
                    let mut rng = rng_for(cfg.seed, &format!("lora.init/{}", target.name));
                    let a = Matrix::from_fn(cfg.rank, target.n_in, |_, _| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        S::of_f64(z * LORA_INIT_STD)
                    });
                    let b = Matrix::zeros(target.n_out, cfg.rank);
                    adam.insert(
                        format!("lora/{}/a", target.name),
                        AdamSlot::zeros(a.rows(), a.cols()),
                    );
                    adam.insert(
                        format!("lora/{}/b", target.name),
                        AdamSlot::zeros(b.rows(), b.cols()),
                    );
                    lora.insert(
                        target.name.clone(),
                        LoraParams {
                            a,
                            b,
                            scale: S::of_f64(cfg.scale()),
                        },
                    );
                }
            }
            TrainMode::Full => {
                for (name, w) in &self.model.base {
                    adam.insert(format!("base/{name}"), AdamSlot::zeros(w.rows(), w.cols()));
                }
            }
        }
        self.session = Some(Session {
            mode,
            cfg: cfg.clone(),
            hyper: hyper.clone(),
            lora,
            adam,
            step_count: 0,
        });
        self.track_memory(0);
        Ok(())
    }

    fn step(&mut self, batch: &[TrainSequence]) -> Result<f64, AdapterError> {
        let max_len = batch.iter().map(|s| s.tokens.len()).max().unwrap_or(0);
        let mut session = self.session.take().ok_or(AdapterError::BackendFailure {
            completed_steps: 0,
            message: "no training session; call begin first".to_string(),
        })?;
        let mut grads = Gradients::zeros_like(&self.model, session.mode, &session.lora);
        let total_tokens: usize = batch
            .iter()
            .map(|s| s.tokens.len().saturating_sub(s.target_start.max(1)))
            .sum();
        if total_tokens == 0 {
            self.session = Some(session);
            return Err(AdapterError::ZeroTargetTokens);
        }
        let inv_total = S::of_f64(1.0 / total_tokens as f64);
        let mut dropout_rng = rng_for(
            session.cfg.seed,
            &format!("tiny.dropout/{}", session.step_count),
        );
        let use_dropout = session.mode == TrainMode::Lora && session.cfg.dropout > 0.0;
        let mut nll_sum = 0.0f64;
        let mut token_count = 0usize;
        for sequence in batch {
            let dropout = use_dropout.then_some((&mut dropout_rng, session.cfg.dropout));
            let (trace, loss) = forward_train(&self.model, sequence, &session.lora, dropout);
            nll_sum += loss.nll_sum;
            token_count += loss.token_count;
            backward_train(&self.model, &trace, &session.lora, inv_total, &mut grads);
        }
        session.step_count += 1;
        let step = session.step_count;
        let lr = session.hyper.learning_rate;
        for (name, grad) in &grads.base {
            let slot = session.adam.get_mut(&format!("base/{name}")).expect("slot");
            let weight = self.model.base.get_mut(name).expect("weight");
            slot.update(weight, grad, lr, step);
        }
        for (name, (ga, gb)) in &grads.lora {
            let params = session.lora.get_mut(name).expect("lora params");
            session
                .adam
                .get_mut(&format!("lora/{name}/a"))
                .expect("slot")
                .update(&mut params.a, ga, lr, step);
            session
                .adam
                .get_mut(&format!("lora/{name}/b"))
                .expect("slot")
                .update(&mut params.b, gb, lr, step);
        }
        self.session = Some(session);
        self.track_memory(max_len.min(self.model.config.max_seq));
        Ok(nll_sum / token_count as f64)
    }

    fn measure_loss(&mut self, data: &[TrainSequence]) -> Result<f64, AdapterError> {
        let session = self.session_ref()?;
        let mut nll_sum = 0.0f64;
        let mut token_count = 0usize;
        for sequence in data {
            let (_, loss) = forward_train(&self.model, sequence, &session.lora, None);
            nll_sum += loss.nll_sum;
            token_count += loss.token_count;
        }
        if token_count == 0 {
            return Err(AdapterError::ZeroTargetTokens);
        }
        Ok(nll_sum / token_count as f64)
    }

    fn export_adapter(&self) -> Result<AdapterArtifact, AdapterError> {
        let session = self.session_ref()?;
        if session.mode != TrainMode::Lora {
            return Err(AdapterError::InvalidConfig {
                message: "full-parameter sessions have no adapter to export".to_string(),
            });
        }
        let pairs = session
            .lora
            .iter()
            .map(|(name, p)| AdapterPair {
                name: name.clone(),
                a: to_f32(&p.a),
                b: to_f32(&p.b),
            })
            .collect();
        Ok(AdapterArtifact::new(session.cfg.clone(), pairs))
    }

    fn peak_memory_bytes(&self) -> Option<u64> {
        Some(self.peak_bytes)
    }

    fn memory_method(&self) -> String {
        "tracked tensor bytes: parameters + optimizer state + activation working set".to_string()
    }
}

fn to_f32<S: Scalar>(m: &Matrix<S>) -> Matrix<f32> {
    Matrix::from_fn(m.rows(), m.cols(), |r, c| m.get(r, c).as_f32())
}

impl<S: Scalar> AdapterServable for TinyModel<S> {
    fn attach(&mut self, artifact: Option<&AdapterArtifact>) -> Result<(), AdapterError> {
        let Some(artifact) = artifact else {
            self.effective.clear();
            return Ok(());
        };
        artifact.verify_checksum()?;
        let scale = S::of_f64(artifact.config.scale());
        let mut effective = BTreeMap::new();
        for pair in &artifact.pairs {
            let shape = self.shape_of(&pair.name).ok_or_else(|| {
                AdapterError::UnmatchedSelector {
                    selector: pair.name.clone(),
                }
            })?;
            if is_embedding(&shape.name) {
                return Err(AdapterError::InvalidConfig {
                    message: format!(
                        "adapters on embedding matrix {} are not supported by this backend",
                        shape.name
                    ),
                });
            }
            let rank = pair.a.rows();
            if pair.a.cols() != shape.n_in || pair.b.rows() != shape.n_out || pair.b.cols() != rank
            {
                return Err(AdapterError::ShapeMismatch {
                    matrix: pair.name.clone(),
                    expected_rows: shape.n_out,
                    expected_cols: shape.n_in,
                    got_rows: pair.b.rows(),
                    got_cols: pair.a.cols(),
                });
            }
            let mut w_eff = self.base[&pair.name].clone();
            let delta = to_scalar::<S>(&pair.b).matmul(&to_scalar::<S>(&pair.a));
            w_eff.add_scaled(&delta, scale);
            effective.insert(pair.name.clone(), w_eff);
        }
        self.effective = effective;
        Ok(())
    }

    fn logits(&self, prompt_tokens: &[u32]) -> Vec<f64> {
        let tokens: Vec<u32> = if prompt_tokens.is_empty() {
            vec![BOS_TOKEN]
        } else {
            prompt_tokens.to_vec()
        };
        let all = self.forward_logits(&tokens);
        all.last()
            .map(|row| row.iter().map(|&v| v.as_f64()).collect())
            .unwrap_or_default()
    }
}

fn to_scalar<S: Scalar>(m: &Matrix<f32>) -> Matrix<S> {
    Matrix::from_fn(m.rows(), m.cols(), |r, c| S::of_f32(m.get(r, c)))
}

impl<S: Scalar> LanguageModel for TinyModel<S> {
    fn target_log_probs(&self, prompt: &str, target: &str) -> Result<Vec<f64>, AdapterError> {
        let target_tokens = self.tokenizer.encode(target);
        if target_tokens.is_empty() {
            return Ok(Vec::new());
        }
        if 1 + target_tokens.len() > self.config.max_seq {
            return Err(AdapterError::InvalidConfig {
                message: format!(
                    "target of {} tokens exceeds the {}-token context window",
                    target_tokens.len(),
                    self.config.max_seq
                ),
            });
        }
        let mut tokens = vec![BOS_TOKEN];
        tokens.extend(self.tokenizer.encode(prompt));
        tokens.extend_from_slice(&target_tokens);
        let tokens = tail_window(&tokens, self.config.max_seq).to_vec();
        let logits = self.forward_logits(&tokens);
        let first_target = tokens.len() - target_tokens.len();
        let mut out = Vec::with_capacity(target_tokens.len());
        for (j, &tok) in target_tokens.iter().enumerate() {
            let row: Vec<f64> = logits[first_target + j - 1]
                .iter()
                .map(|&v| v.as_f64())
                .collect();
            out.push(log_softmax_at(&row, tok as usize));
        }
        Ok(out)
    }
}
