//! Language-model stack: whitespace tokenizer, a frozen mean-pooling text
//! encoder for node features, and a small decoder-only transformer with
//! hand-written backpropagation. The transformer consumes embedding rows
//! directly so a soft prompt vector can be fused at position 0.

pub mod encoder;
pub mod model;
pub mod tokenizer;
pub mod transformer;

pub use encoder::TextEncoder;
pub use model::{corpus_loss, nll_loss, train_toy_lm, ToyCausalLM, TrainConfig, TrainReport};
pub use tokenizer::{TokenId, Tokenizer, BOS, EOS, PAD, RESERVED_WORDS, UNK};
pub use transformer::{HiddenStateBundle, LmCache, LmParams, TransformerConfig};
