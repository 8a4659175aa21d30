//! Retrieval-augmented fine-tuning toolkit: synthetic instruction-dataset
//! generation from a document corpus, low-rank adapter training over a
//! pluggable backend, and reader evaluation in golden-context and
//! retrieve-read settings.
//!
//! The numeric core ([`linalg`], [`adapters::tiny`]) is generic over
//! [`Scalar`] so the same code runs at `f32` (the artifact payload type)
//! and `f64` (for oracle cross-checks). Concrete aliases for the common
//! width live at the crate root. Everything that touches randomness draws
//! from [`seeded`] streams keyed by `(seed, domain)`, so results are
//! reproducible bit-for-bit regardless of thread schedule.

pub mod adapters;
pub mod clients;
pub mod clock;
pub mod corpus;
pub mod datagen;
pub mod eval;
pub mod linalg;
pub mod rag;
pub mod scalar;
pub mod seeded;
pub mod token;

pub use scalar::Scalar;

pub type Matrix32 = linalg::Matrix<f32>;
pub type Matrix64 = linalg::Matrix<f64>;
pub type TinyBackend32 = adapters::tiny::TinyBackend<f32>;
pub type TinyModel32 = adapters::tiny::TinyModel<f32>;
pub type VectorIndex32 = rag::VectorIndex<f32>;
pub type VectorIndex64 = rag::VectorIndex<f64>;

pub const CRATE_VERSION: &str = env!("CARGO_PKG_VERSION");
