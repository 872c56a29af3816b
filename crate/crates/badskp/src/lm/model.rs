//! Toy causal language model: the transformer stack plus token-level
//! conveniences (greedy decoding, perplexity, next-token top-k) and a
//! self-contained Adam training loop.

use crate::error::{Error, Result};
use crate::linalg::{argmax_tie_lowest, log_sum_exp, Mat};
use crate::lm::tokenizer::{TokenId, Tokenizer, EOS, PAD};
use crate::lm::transformer::{
    HiddenStateBundle, LmCache, LmParams, Transformer, TransformerConfig,
};
use crate::scalar::{cast, to_f64, Scalar};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

#[derive(Clone, Debug)]
pub struct ToyCausalLM<T> {
    pub cfg: TransformerConfig,
    pub params: LmParams<T>,
}

impl<T: Scalar> ToyCausalLM<T> {
    pub fn new_random(cfg: TransformerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = LmParams::random(&cfg, &mut rng);
        Ok(ToyCausalLM { cfg, params })
    }

    /// All-zero parameters: every logit is identical, so the next-token
    /// distribution is uniform. Useful as a numerical fixture.
    pub fn new_uniform(cfg: TransformerConfig) -> Result<Self> {
        cfg.validate()?;
        let params = LmParams::zeros(&cfg);
        Ok(ToyCausalLM { cfg, params })
    }

    pub fn vocab_size(&self) -> usize {
        self.cfg.vocab_size
    }

    pub fn d_model(&self) -> usize {
        self.cfg.d_model
    }

    /// Token-embedding rows for a sequence of ids.
    pub fn embed(&self, ids: &[TokenId]) -> Result<Mat<T>> {
        if ids.is_empty() {
            return Err(Error::EmptyInput("token sequence to embed"));
        }
        let mut out = Mat::zeros(ids.len(), self.cfg.d_model);
        for (i, &id) in ids.iter().enumerate() {
            if id >= self.cfg.vocab_size {
                return Err(Error::UnknownTokenId(id));
            }
            out.row_mut(i).copy_from_slice(self.params.tok_emb.row(id));
        }
        Ok(out)
    }

    /// Forward over pre-built input embeddings; returns logits for every
    /// position and the final-layer hidden states.
    pub fn forward_hidden(&self, input: &Mat<T>) -> Result<(Mat<T>, HiddenStateBundle<T>)> {
        let (logits, bundle, _) = Transformer::forward(&self.cfg, &self.params, input)?;
        Ok((logits, bundle))
    }

    /// Forward that also returns the cache needed for `backward`.
    pub fn forward_cached(
        &self,
        input: &Mat<T>,
    ) -> Result<(Mat<T>, HiddenStateBundle<T>, LmCache<T>)> {
        Transformer::forward(&self.cfg, &self.params, input)
    }

    /// Reverse pass; gradient seeded at logits and/or exported hidden
    /// states. Returns (d_input, parameter gradients).
    pub fn backward(
        &self,
        cache: &LmCache<T>,
        d_logits: Option<&Mat<T>>,
        d_states: Option<&Mat<T>>,
    ) -> (Mat<T>, LmParams<T>) {
        Transformer::backward(&self.cfg, &self.params, cache, d_logits, d_states)
    }

    /// Greedy decoding from an embedded prefix. Ties break toward the
    /// lowest token id; generation stops at `<eos>` (excluded from the
    /// output) or after `max_new` tokens.
    pub fn generate_greedy(&self, prefix: &Mat<T>, max_new: usize) -> Result<Vec<TokenId>> {
        let mut input = prefix.clone();
        let mut out = Vec::new();
        for _ in 0..max_new {
            if input.rows() >= self.cfg.max_seq {
                break;
            }
            let (logits, _) = self.forward_hidden(&input)?;
            let next = argmax_tie_lowest(logits.row(logits.rows() - 1));
            if next == EOS {
                break;
            }
            out.push(next);
            input = input.vstack(&self.embed(&[next])?);
        }
        Ok(out)
    }

    /// Greedy decoding that detokenizes the generated ids.
    pub fn generate_text(
        &self,
        prefix: &Mat<T>,
        max_new: usize,
        tokenizer: &Tokenizer,
    ) -> Result<String> {
        tokenizer.detokenize(&self.generate_greedy(prefix, max_new)?)
    }

    /// Per-token perplexity of a token sequence (needs at least two tokens:
    /// the first has no prediction context).
    pub fn perplexity_ids(&self, ids: &[TokenId]) -> Result<T> {
        if ids.len() < 2 {
            return Err(Error::SequenceTooShort {
                context: "perplexity",
                min: 2,
                got: ids.len(),
            });
        }
        let input = self.embed(ids)?;
        let (logits, _) = self.forward_hidden(&input)?;
        let mut nll = T::zero();
        for i in 1..ids.len() {
            let row = logits.row(i - 1);
            nll += log_sum_exp(row) - row[ids[i]];
        }
        let count = cast::<T>((ids.len() - 1) as f64);
        Ok((nll / count).exp())
    }

    pub fn perplexity_text(&self, tokenizer: &Tokenizer, text: &str) -> Result<T> {
        self.perplexity_ids(&tokenizer.tokenize(text))
    }

    /// The k most likely next tokens after `ids`, highest logit first, ties
    /// toward the lower id; k is clipped to the vocabulary size.
    pub fn next_token_topk(&self, ids: &[TokenId], k: usize) -> Result<Vec<(TokenId, T)>> {
        let input = self.embed(ids)?;
        let (logits, _) = self.forward_hidden(&input)?;
        let last = logits.row(logits.rows() - 1);
        let mut ranked: Vec<(TokenId, T)> = last.iter().copied().enumerate().collect();
        ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        ranked.truncate(k.min(self.cfg.vocab_size));
        Ok(ranked)
    }

    /// SHA-256 over every parameter tensor (canonical f64 little-endian
    /// bytes), for determinism checks.
    pub fn param_checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, shape, data) in self.params.named_tensors() {
            hasher.update(name.as_bytes());
            for s in shape {
                hasher.update((s as u64).to_le_bytes());
            }
            for &v in data {
                hasher.update(to_f64(v).to_le_bytes());
            }
        }
        format!("{:x}", hasher.finalize())
    }
}

/// Cross-entropy over selected (position, target) pairs. Returns the summed
/// negative log-likelihood and the logit gradient of that sum.
pub fn nll_loss<T: Scalar>(logits: &Mat<T>, targets: &[(usize, TokenId)]) -> (T, Mat<T>) {
    let mut d_logits = Mat::zeros(logits.rows(), logits.cols());
    let mut loss = T::zero();
    for &(pos, tok) in targets {
        let row = logits.row(pos);
        let lse = log_sum_exp(row);
        loss += lse - row[tok];
        let drow = d_logits.row_mut(pos);
        for (j, &l) in row.iter().enumerate() {
            drow[j] += (l - lse).exp();
        }
        drow[tok] -= T::one();
    }
    (loss, d_logits)
}

// ── Training ──

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Randomly shift each sequence right by one pad token during training
    /// so downstream prompts (which occupy position 0) do not break the
    /// model's positional expectations.
    pub offset_augment: bool,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub epoch_losses: Vec<f64>,
}

struct Adam<T> {
    m: LmParams<T>,
    v: LmParams<T>,
    t: usize,
}

impl<T: Scalar> Adam<T> {
    fn new(cfg: &TransformerConfig) -> Self {
        Adam {
            m: LmParams::zeros(cfg),
            v: LmParams::zeros(cfg),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut LmParams<T>, grads: &LmParams<T>, lr: f64) {
        self.t += 1;
        let b1 = cast::<T>(0.9);
        let b2 = cast::<T>(0.999);
        let eps = cast::<T>(1e-8);
        let bias1 = cast::<T>(1.0 - 0.9f64.powi(self.t as i32));
        let bias2 = cast::<T>(1.0 - 0.999f64.powi(self.t as i32));
        let lr = cast::<T>(lr);
        let gs = grads.flat();
        let mut ms = self.m.flat_mut();
        let mut vs = self.v.flat_mut();
        for ((p, g), (m, v)) in params
            .flat_mut()
            .into_iter()
            .zip(gs)
            .zip(ms.iter_mut().zip(vs.iter_mut()))
        {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let mhat = m[i] / bias1;
                let vhat = v[i] / bias2;
                p[i] = p[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Mean per-token next-token loss of one sequence, with logit gradients.
fn sequence_loss_and_grads<T: Scalar>(
    model: &ToyCausalLM<T>,
    ids: &[TokenId],
) -> Result<(T, LmParams<T>, Mat<T>)> {
    let input = model.embed(ids)?;
    let (logits, _, cache) = model.forward_cached(&input)?;
    let targets: Vec<(usize, TokenId)> = (1..ids.len()).map(|i| (i - 1, ids[i])).collect();
    let (total, mut d_logits) = nll_loss(&logits, &targets);
    let scale = cast::<T>(1.0 / targets.len() as f64);
    d_logits.scale(scale);
    let (d_input, mut grads) = model.backward(&cache, Some(&d_logits), None);
    // Token embeddings receive the input gradient at their positions.
    for (i, &id) in ids.iter().enumerate() {
        let src = d_input.row(i).to_vec();
        for (g, s) in grads.tok_emb.row_mut(id).iter_mut().zip(src) {
            *g += s;
        }
    }
    Ok((total * scale, grads, d_input))
}

/// Mean per-sequence loss over a corpus without touching parameters.
pub fn corpus_loss<T: Scalar>(model: &ToyCausalLM<T>, corpus: &[Vec<TokenId>]) -> Result<f64> {
    let losses: Vec<Result<f64>> = corpus
        .par_iter()
        .map(|ids| {
            let input = model.embed(ids)?;
            let (logits, _) = model.forward_hidden(&input)?;
            let targets: Vec<(usize, TokenId)> =
                (1..ids.len()).map(|i| (i - 1, ids[i])).collect();
            let (total, _) = nll_loss(&logits, &targets);
            Ok(to_f64(total) / targets.len() as f64)
        })
        .collect();
    let mut sum = 0.0;
    for l in losses {
        sum += l?;
    }
    Ok(sum / corpus.len() as f64)
}

/// Trains a fresh model on the corpus with Adam, shuffling every epoch.
/// Deterministic for a fixed seed. Fails on divergence (non-finite loss or
/// parameters).
pub fn train_toy_lm<T: Scalar>(
    cfg: &TransformerConfig,
    corpus: &[Vec<TokenId>],
    train: &TrainConfig,
) -> Result<(ToyCausalLM<T>, TrainReport)> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("training corpus"));
    }
    for ids in corpus {
        if ids.len() < 2 {
            return Err(Error::SequenceTooShort {
                context: "training sequence",
                min: 2,
                got: ids.len(),
            });
        }
        if ids.len() + 1 > cfg.max_seq {
            return Err(Error::SequenceTooLong {
                got: ids.len() + 1,
                max: cfg.max_seq,
            });
        }
    }
    if train.batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be positive".into()));
    }

    let mut model = ToyCausalLM::<T>::new_random(cfg.clone(), train.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed.wrapping_add(1));
    let mut adam = Adam::new(cfg);

    let initial_loss = corpus_loss(&model, corpus)?;
    let mut epoch_losses = Vec::with_capacity(train.epochs);

    let mut order: Vec<usize> = (0..corpus.len()).collect();
    for epoch in 0..train.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        for chunk in order.chunks(train.batch_size) {
            // Fix each sequence's offset up front so the parallel map stays
            // deterministic.
            let batch: Vec<Vec<TokenId>> = chunk
                .iter()
                .map(|&i| {
                    if train.offset_augment && rng.gen_bool(0.5) {
                        let mut ids = Vec::with_capacity(corpus[i].len() + 1);
                        ids.push(PAD);
                        ids.extend_from_slice(&corpus[i]);
                        ids
                    } else {
                        corpus[i].clone()
                    }
                })
                .collect();
            let results: Vec<Result<(T, LmParams<T>)>> = batch
                .par_iter()
                .map(|ids| {
                    let (loss, grads, _) = sequence_loss_and_grads(&model, ids)?;
                    Ok((loss, grads))
                })
                .collect();
            let mut acc = LmParams::zeros(cfg);
            let inv = cast::<T>(1.0 / chunk.len() as f64);
            for r in results {
                let (loss, grads) = r?;
                let lf = to_f64(loss);
                if !lf.is_finite() {
                    return Err(Error::Diverged(format!(
                        "non-finite loss at epoch {epoch}"
                    )));
                }
                epoch_sum += lf;
                acc.add_scaled(&grads, inv);
            }
            adam.step(&mut model.params, &acc, train.lr);
            if !model.params.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite parameters at epoch {epoch}"
                )));
            }
        }
        epoch_losses.push(epoch_sum / corpus.len() as f64);
    }

    let final_loss = corpus_loss(&model, corpus)?;
    Ok((
        model,
        TrainReport {
            initial_loss,
            final_loss,
            epoch_losses,
        },
    ))
}
