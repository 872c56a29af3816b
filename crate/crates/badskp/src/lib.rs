//! A desk-scale laboratory for graph-poisoning backdoors against
//! retrieval-augmented language models.
//!
//! The victim stack couples a whitespace-tokenized causal transformer with
//! a knowledge graph: each query retrieves a subgraph around its entity, a
//! message-passing encoder compresses that subgraph into a single soft
//! prompt vector, and the model answers conditioned on the prompt plus the
//! linearized graph text. Everything is small enough to run on a laptop
//! yet end-to-end differentiable, so attacks, baselines, statistical
//! analyses, and defenses can be studied exactly:
//!
//! - [`kg`] — graphs, retrieval, poison plans, and text composition;
//! - [`lm`] — tokenizer, mean-embedding text encoder, and the transformer;
//! - [`gnn`] — the graph-prompt module (encoder + projector);
//! - [`pipeline`] — fusion of prompt/graph/query, generation, evaluation,
//!   and soft-prompt training;
//! - [`attack`] — target construction, node-embedding optimization,
//!   text approximation, sequential node injection, two baselines, and
//!   persistence tuning against later clean fine-tuning;
//! - [`anchoring`] — role-resolved hidden-state similarity analyses;
//! - [`defense`] — attribute perplexity filtering and an anchoring
//!   monitor;
//! - [`stats`] — the small inferential toolkit used by the analyses;
//! - [`checkpoint`] — versioned, checksummed persistence.
//!
//! Numeric code is generic over [`scalar::Scalar`] (`f32` or `f64`);
//! the crate-root aliases fix `f64` for everyday use.

pub mod anchoring;
pub mod attack;
pub mod checkpoint;
pub mod defense;
pub mod error;
pub mod gnn;
pub mod kg;
pub mod linalg;
pub mod lm;
pub mod pipeline;
pub mod scalar;
pub mod stats;
pub mod testing;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// The causal language model at `f64` precision.
pub type Lm = lm::ToyCausalLM<f64>;
/// The node-attribute text encoder at `f64` precision.
pub type Encoder = lm::TextEncoder<f64>;
/// The graph-prompt module at `f64` precision.
pub type PromptModule = gnn::GraphPromptModule<f64>;
/// The full victim stack at `f64` precision.
pub type Pipeline = pipeline::VictimPipeline<f64>;
