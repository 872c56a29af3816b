//! Decoder-only transformer over externally supplied input embeddings, with
//! hand-written backpropagation.
//!
//! The forward pass accepts a sequence of embedding rows (not token ids):
//! callers build the input themselves, which is what lets a soft prompt
//! vector occupy position 0. Learned positional rows are added inside the
//! forward pass. Blocks are pre-norm (`x + Attn(LN(x))`, `x + FFN(LN(x))`)
//! with causal masking and a tanh FFN; there is no final layer norm, so the
//! exported hidden states are exactly the last block's output, and logits
//! are a linear readout of those states.

use crate::error::{Error, Result};
use crate::linalg::{softmax_in_place, Mat};
use crate::scalar::{cast, Scalar};
use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    /// Tie the readout matrix to the token embedding table.
    pub tie_output: bool,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d_model == 0 || self.n_layers == 0 || self.max_seq == 0 {
            return Err(Error::InvalidConfig(
                "transformer dimensions must be positive".into(),
            ));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ff == 0 {
            return Err(Error::InvalidConfig("d_ff must be positive".into()));
        }
        Ok(())
    }
}

const LN_EPS: f64 = 1e-5;

// ── Layer norm ──

#[derive(Clone, Debug)]
pub struct LayerNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

pub struct LnCache<T> {
    xhat: Mat<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> LayerNorm<T> {
    fn identity(dim: usize) -> Self {
        LayerNorm {
            gamma: vec![T::one(); dim],
            beta: vec![T::zero(); dim],
        }
    }

    fn zeros(dim: usize) -> Self {
        LayerNorm {
            gamma: vec![T::zero(); dim],
            beta: vec![T::zero(); dim],
        }
    }

    fn forward(&self, x: &Mat<T>) -> (Mat<T>, LnCache<T>) {
        let (n, d) = (x.rows(), x.cols());
        let dim = cast::<T>(d as f64);
        let eps = cast::<T>(LN_EPS);
        let mut y = Mat::zeros(n, d);
        let mut xhat = Mat::zeros(n, d);
        let mut inv_std = vec![T::zero(); n];
        for i in 0..n {
            let row = x.row(i);
            let mean: T = row.iter().copied().sum::<T>() / dim;
            let var: T = row
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .sum::<T>()
                / dim;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[i] = inv;
            let xh = xhat.row_mut(i);
            let yr = y.row_mut(i);
            for j in 0..d {
                xh[j] = (row[j] - mean) * inv;
                yr[j] = self.gamma[j] * xh[j] + self.beta[j];
            }
        }
        (y, LnCache { xhat, inv_std })
    }

    /// Returns dx; accumulates dgamma/dbeta into `grad`.
    fn backward(&self, dy: &Mat<T>, cache: &LnCache<T>, grad: &mut LayerNorm<T>) -> Mat<T> {
        let (n, d) = (dy.rows(), dy.cols());
        let dim = cast::<T>(d as f64);
        let mut dx = Mat::zeros(n, d);
        for i in 0..n {
            let dyr = dy.row(i);
            let xh = cache.xhat.row(i);
            let mut m1 = T::zero(); // mean of dxhat
            let mut m2 = T::zero(); // mean of dxhat * xhat
            for j in 0..d {
                let dxh = dyr[j] * self.gamma[j];
                m1 += dxh;
                m2 += dxh * xh[j];
                grad.gamma[j] += dyr[j] * xh[j];
                grad.beta[j] += dyr[j];
            }
            m1 = m1 / dim;
            m2 = m2 / dim;
            let dxr = dx.row_mut(i);
            for j in 0..d {
                let dxh = dyr[j] * self.gamma[j];
                dxr[j] = cache.inv_std[i] * (dxh - m1 - xh[j] * m2);
            }
        }
        dx
    }
}

// ── Block parameters ──

#[derive(Clone, Debug)]
pub struct BlockParams<T> {
    pub ln1: LayerNorm<T>,
    pub wq: Mat<T>,
    pub wk: Mat<T>,
    pub wv: Mat<T>,
    pub wo: Mat<T>,
    pub bq: Vec<T>,
    pub bk: Vec<T>,
    pub bv: Vec<T>,
    pub bo: Vec<T>,
    pub ln2: LayerNorm<T>,
    pub w1: Mat<T>,
    pub b1: Vec<T>,
    pub w2: Mat<T>,
    pub b2: Vec<T>,
}

impl<T: Scalar> BlockParams<T> {
    fn random(d: usize, f: usize, rng: &mut impl Rng) -> Self {
        let attn_std = 1.0 / (d as f64).sqrt();
        let ff_in = 1.0 / (d as f64).sqrt();
        let ff_out = 1.0 / (f as f64).sqrt();
        BlockParams {
            ln1: LayerNorm::identity(d),
            wq: Mat::randn(d, d, attn_std, rng),
            wk: Mat::randn(d, d, attn_std, rng),
            wv: Mat::randn(d, d, attn_std, rng),
            wo: Mat::randn(d, d, attn_std, rng),
            bq: vec![T::zero(); d],
            bk: vec![T::zero(); d],
            bv: vec![T::zero(); d],
            bo: vec![T::zero(); d],
            ln2: LayerNorm::identity(d),
            w1: Mat::randn(d, f, ff_in, rng),
            b1: vec![T::zero(); f],
            w2: Mat::randn(f, d, ff_out, rng),
            b2: vec![T::zero(); d],
        }
    }

    fn zeros(d: usize, f: usize) -> Self {
        BlockParams {
            ln1: LayerNorm::zeros(d),
            wq: Mat::zeros(d, d),
            wk: Mat::zeros(d, d),
            wv: Mat::zeros(d, d),
            wo: Mat::zeros(d, d),
            bq: vec![T::zero(); d],
            bk: vec![T::zero(); d],
            bv: vec![T::zero(); d],
            bo: vec![T::zero(); d],
            ln2: LayerNorm::zeros(d),
            w1: Mat::zeros(d, f),
            b1: vec![T::zero(); f],
            w2: Mat::zeros(f, d),
            b2: vec![T::zero(); d],
        }
    }
}

#[derive(Clone, Debug)]
pub struct LmParams<T> {
    pub tok_emb: Mat<T>,
    pub pos_emb: Mat<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub w_out: Mat<T>,
    pub b_out: Vec<T>,
}

impl<T: Scalar> LmParams<T> {
    pub fn random(cfg: &TransformerConfig, rng: &mut impl Rng) -> Self {
        let emb_std = 0.1;
        LmParams {
            tok_emb: Mat::randn(cfg.vocab_size, cfg.d_model, emb_std, rng),
            pos_emb: Mat::randn(cfg.max_seq, cfg.d_model, emb_std, rng),
            blocks: (0..cfg.n_layers)
                .map(|_| BlockParams::random(cfg.d_model, cfg.d_ff, rng))
                .collect(),
            w_out: Mat::randn(cfg.vocab_size, cfg.d_model, 1.0 / (cfg.d_model as f64).sqrt(), rng),
            b_out: vec![T::zero(); cfg.vocab_size],
        }
    }

    pub fn zeros(cfg: &TransformerConfig) -> Self {
        LmParams {
            tok_emb: Mat::zeros(cfg.vocab_size, cfg.d_model),
            pos_emb: Mat::zeros(cfg.max_seq, cfg.d_model),
            blocks: (0..cfg.n_layers)
                .map(|_| BlockParams::zeros(cfg.d_model, cfg.d_ff))
                .collect(),
            w_out: Mat::zeros(cfg.vocab_size, cfg.d_model),
            b_out: vec![T::zero(); cfg.vocab_size],
        }
    }

    /// Every tensor as a named (name, shape, data) triple, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[T])> {
        let mut out: Vec<(String, Vec<usize>, &[T])> = vec![
            (
                "tok_emb".into(),
                vec![self.tok_emb.rows(), self.tok_emb.cols()],
                self.tok_emb.data(),
            ),
            (
                "pos_emb".into(),
                vec![self.pos_emb.rows(), self.pos_emb.cols()],
                self.pos_emb.data(),
            ),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |s: &str| format!("block{i}.{s}");
            out.push((p("ln1.gamma"), vec![b.ln1.gamma.len()], &b.ln1.gamma));
            out.push((p("ln1.beta"), vec![b.ln1.beta.len()], &b.ln1.beta));
            for (nm, m) in [("wq", &b.wq), ("wk", &b.wk), ("wv", &b.wv), ("wo", &b.wo)] {
                out.push((p(nm), vec![m.rows(), m.cols()], m.data()));
            }
            for (nm, v) in [("bq", &b.bq), ("bk", &b.bk), ("bv", &b.bv), ("bo", &b.bo)] {
                out.push((p(nm), vec![v.len()], v.as_slice()));
            }
            out.push((p("ln2.gamma"), vec![b.ln2.gamma.len()], &b.ln2.gamma));
            out.push((p("ln2.beta"), vec![b.ln2.beta.len()], &b.ln2.beta));
            out.push((p("w1"), vec![b.w1.rows(), b.w1.cols()], b.w1.data()));
            out.push((p("b1"), vec![b.b1.len()], b.b1.as_slice()));
            out.push((p("w2"), vec![b.w2.rows(), b.w2.cols()], b.w2.data()));
            out.push((p("b2"), vec![b.b2.len()], b.b2.as_slice()));
        }
        out.push((
            "w_out".into(),
            vec![self.w_out.rows(), self.w_out.cols()],
            self.w_out.data(),
        ));
        out.push(("b_out".into(), vec![self.b_out.len()], self.b_out.as_slice()));
        out
    }

    /// Mutable flat views over every tensor, in the same order as
    /// `named_tensors`.
    pub fn flat_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = vec![self.tok_emb.data_mut(), self.pos_emb.data_mut()];
        for b in self.blocks.iter_mut() {
            out.push(&mut b.ln1.gamma);
            out.push(&mut b.ln1.beta);
            out.push(b.wq.data_mut());
            out.push(b.wk.data_mut());
            out.push(b.wv.data_mut());
            out.push(b.wo.data_mut());
            out.push(&mut b.bq);
            out.push(&mut b.bk);
            out.push(&mut b.bv);
            out.push(&mut b.bo);
            out.push(&mut b.ln2.gamma);
            out.push(&mut b.ln2.beta);
            out.push(b.w1.data_mut());
            out.push(&mut b.b1);
            out.push(b.w2.data_mut());
            out.push(&mut b.b2);
        }
        out.push(self.w_out.data_mut());
        out.push(&mut self.b_out);
        out
    }

    pub fn flat(&self) -> Vec<&[T]> {
        self.named_tensors().into_iter().map(|(_, _, d)| d).collect()
    }

    /// self += alpha * other (used for gradient accumulation).
    pub fn add_scaled(&mut self, other: &LmParams<T>, alpha: T) {
        let others = other.flat();
        for (dst, src) in self.flat_mut().into_iter().zip(others) {
            for (d, &s) in dst.iter_mut().zip(src.iter()) {
                *d = *d + alpha * s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.flat().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

// ── Forward / backward ──

/// Final-layer hidden states for every position; the last row is the
/// sequence summary the attack and the anchoring analysis both read.
#[derive(Clone, Debug)]
pub struct HiddenStateBundle<T> {
    pub states: Mat<T>,
}

impl<T: Scalar> HiddenStateBundle<T> {
    pub fn h_last(&self) -> &[T] {
        self.states.row(self.states.rows() - 1)
    }

    pub fn len(&self) -> usize {
        self.states.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.rows() == 0
    }
}

struct BlockCache<T> {
    ln1: LnCache<T>,
    a: Mat<T>,
    q: Mat<T>,
    k: Mat<T>,
    v: Mat<T>,
    probs: Vec<Mat<T>>,
    concat: Mat<T>,
    ln2: LnCache<T>,
    b: Mat<T>,
    h_act: Mat<T>,
}

/// Opaque forward cache consumed by `backward`.
pub struct LmCache<T> {
    n: usize,
    blocks: Vec<BlockCache<T>>,
    states: Mat<T>,
}

fn add_bias_rows<T: Scalar>(m: &mut Mat<T>, bias: &[T]) {
    for i in 0..m.rows() {
        for (x, &b) in m.row_mut(i).iter_mut().zip(bias.iter()) {
            *x += b;
        }
    }
}

fn col_sums<T: Scalar>(m: &Mat<T>) -> Vec<T> {
    let mut out = vec![T::zero(); m.cols()];
    for i in 0..m.rows() {
        for (o, &x) in out.iter_mut().zip(m.row(i).iter()) {
            *o += x;
        }
    }
    out
}

fn take_cols<T: Scalar>(m: &Mat<T>, from: usize, width: usize) -> Mat<T> {
    Mat::from_fn(m.rows(), width, |i, j| m.row(i)[from + j])
}

fn add_into_cols<T: Scalar>(dst: &mut Mat<T>, src: &Mat<T>, from: usize) {
    for i in 0..src.rows() {
        let s = src.row(i);
        let d = dst.row_mut(i);
        for (j, &x) in s.iter().enumerate() {
            d[from + j] += x;
        }
    }
}

pub struct Transformer;

impl Transformer {
    /// Runs the stack over pre-built input embeddings, returning logits and
    /// the final-layer hidden states.
    pub fn forward<T: Scalar>(
        cfg: &TransformerConfig,
        params: &LmParams<T>,
        input: &Mat<T>,
    ) -> Result<(Mat<T>, HiddenStateBundle<T>, LmCache<T>)> {
        let n = input.rows();
        if n == 0 {
            return Err(Error::EmptyInput("transformer input sequence"));
        }
        if n > cfg.max_seq {
            return Err(Error::SequenceTooLong {
                got: n,
                max: cfg.max_seq,
            });
        }
        if input.cols() != cfg.d_model {
            return Err(Error::ShapeMismatch {
                context: "transformer input width",
                expected: cfg.d_model.to_string(),
                got: input.cols().to_string(),
            });
        }
        if !input.is_finite() {
            return Err(Error::NonFinite("transformer input"));
        }

        let d = cfg.d_model;
        let heads = cfg.n_heads;
        let dh = d / heads;
        let scale = cast::<T>(1.0 / (dh as f64).sqrt());

        // Add positional rows.
        let mut x = input.clone();
        for i in 0..n {
            let pos = params.pos_emb.row(i);
            for (xv, &pv) in x.row_mut(i).iter_mut().zip(pos.iter()) {
                *xv += pv;
            }
        }

        let mut caches = Vec::with_capacity(cfg.n_layers);
        for block in &params.blocks {
            // Attention sublayer.
            let (a, ln1_cache) = block.ln1.forward(&x);
            let mut q = a.matmul(&block.wq);
            add_bias_rows(&mut q, &block.bq);
            let mut k = a.matmul(&block.wk);
            add_bias_rows(&mut k, &block.bk);
            let mut v = a.matmul(&block.wv);
            add_bias_rows(&mut v, &block.bv);

            let mut concat = Mat::zeros(n, d);
            let mut probs = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = take_cols(&q, h * dh, dh);
                let kh = take_cols(&k, h * dh, dh);
                let vh = take_cols(&v, h * dh, dh);
                let mut scores = qh.matmul_tb(&kh);
                scores.scale(scale);
                for i in 0..n {
                    let row = scores.row_mut(i);
                    for item in row.iter_mut().skip(i + 1) {
                        *item = T::neg_infinity();
                    }
                    softmax_in_place(row);
                }
                let ctx = scores.matmul(&vh);
                add_into_cols(&mut concat, &ctx, h * dh);
                probs.push(scores);
            }
            let mut attn = concat.matmul(&block.wo);
            add_bias_rows(&mut attn, &block.bo);
            let mut x_mid = x.clone();
            x_mid.add_assign(&attn);

            // Feed-forward sublayer.
            let (b, ln2_cache) = block.ln2.forward(&x_mid);
            let mut pre = b.matmul(&block.w1);
            add_bias_rows(&mut pre, &block.b1);
            let mut h_act = pre;
            for v in h_act.data_mut().iter_mut() {
                *v = v.tanh();
            }
            let mut f = h_act.matmul(&block.w2);
            add_bias_rows(&mut f, &block.b2);
            let mut x_out = x_mid;
            x_out.add_assign(&f);

            caches.push(BlockCache {
                ln1: ln1_cache,
                a,
                q,
                k,
                v,
                probs,
                concat,
                ln2: ln2_cache,
                b,
                h_act,
            });
            x = x_out;
        }

        let readout = if cfg.tie_output {
            &params.tok_emb
        } else {
            &params.w_out
        };
        let mut logits = x.matmul_tb(readout);
        add_bias_rows(&mut logits, &params.b_out);

        if !logits.is_finite() {
            return Err(Error::NonFinite("transformer logits"));
        }

        let states = x;
        Ok((
            logits,
            HiddenStateBundle {
                states: states.clone(),
            },
            LmCache {
                n,
                blocks: caches,
                states,
            },
        ))
    }

    /// Reverse pass. Gradient can be seeded at the logits, at the exported
    /// hidden states, or both; returns the gradient with respect to the
    /// input embedding rows plus a full parameter-gradient mirror.
    pub fn backward<T: Scalar>(
        cfg: &TransformerConfig,
        params: &LmParams<T>,
        cache: &LmCache<T>,
        d_logits: Option<&Mat<T>>,
        d_states_seed: Option<&Mat<T>>,
    ) -> (Mat<T>, LmParams<T>) {
        let n = cache.n;
        let d = cfg.d_model;
        let heads = cfg.n_heads;
        let dh = d / heads;
        let scale = cast::<T>(1.0 / (dh as f64).sqrt());

        let mut grads = LmParams::zeros(cfg);
        let mut dx = Mat::zeros(n, d);

        if let Some(dl) = d_logits {
            let readout = if cfg.tie_output {
                &params.tok_emb
            } else {
                &params.w_out
            };
            dx.add_assign(&dl.matmul(readout));
            let dw = dl.matmul_ta(&cache.states);
            if cfg.tie_output {
                grads.tok_emb.add_assign(&dw);
            } else {
                grads.w_out.add_assign(&dw);
            }
            for (g, s) in grads.b_out.iter_mut().zip(col_sums(dl)) {
                *g += s;
            }
        }
        if let Some(ds) = d_states_seed {
            dx.add_assign(ds);
        }

        for idx in (0..params.blocks.len()).rev() {
            let block = &params.blocks[idx];
            let bc = &cache.blocks[idx];

            // Feed-forward sublayer backward. dx is d(x_out).
            let dh_act = dx.matmul_tb(&block.w2);
            grads.blocks[idx].w2.add_assign(&bc.h_act.matmul_ta(&dx));
            for (gb, s) in grads.blocks[idx].b2.iter_mut().zip(col_sums(&dx)) {
                *gb += s;
            }
            let mut dpre = dh_act;
            for (dp, &h) in dpre.data_mut().iter_mut().zip(bc.h_act.data().iter()) {
                *dp = *dp * (T::one() - h * h);
            }
            grads.blocks[idx].w1.add_assign(&bc.b.matmul_ta(&dpre));
            for (gb, s) in grads.blocks[idx].b1.iter_mut().zip(col_sums(&dpre)) {
                *gb += s;
            }
            let db_mat = dpre.matmul_tb(&block.w1);
            let mut gln2 = LayerNorm::zeros(d);
            let dx_from_ln2 = block.ln2.backward(&db_mat, &bc.ln2, &mut gln2);
            for (a, b) in grads.blocks[idx].ln2.gamma.iter_mut().zip(gln2.gamma) {
                *a += b;
            }
            for (a, b) in grads.blocks[idx].ln2.beta.iter_mut().zip(gln2.beta) {
                *a += b;
            }
            let mut dx_mid = dx.clone(); // residual path
            dx_mid.add_assign(&dx_from_ln2);

            // Attention sublayer backward. dx_mid is d(x_mid).
            let dconcat = dx_mid.matmul_tb(&block.wo);
            grads.blocks[idx]
                .wo
                .add_assign(&bc.concat.matmul_ta(&dx_mid));
            for (gb, s) in grads.blocks[idx].bo.iter_mut().zip(col_sums(&dx_mid)) {
                *gb += s;
            }

            let mut dq = Mat::zeros(n, d);
            let mut dk = Mat::zeros(n, d);
            let mut dv = Mat::zeros(n, d);
            for h in 0..heads {
                let dctx = take_cols(&dconcat, h * dh, dh);
                let probs = &bc.probs[h];
                let vh = take_cols(&bc.v, h * dh, dh);
                let dprobs = dctx.matmul_tb(&vh);
                let dvh = probs.matmul_ta(&dctx);
                // Softmax backward, row-wise: ds = p ∘ (dp − ⟨dp, p⟩).
                let mut dscores = Mat::zeros(n, n);
                for i in 0..n {
                    let p = probs.row(i);
                    let dp = dprobs.row(i);
                    let inner: T = p.iter().zip(dp.iter()).map(|(&a, &b)| a * b).sum();
                    let ds = dscores.row_mut(i);
                    for j in 0..n {
                        ds[j] = p[j] * (dp[j] - inner);
                    }
                }
                let qh = take_cols(&bc.q, h * dh, dh);
                let kh = take_cols(&bc.k, h * dh, dh);
                let mut dqh = dscores.matmul(&kh);
                dqh.scale(scale);
                let mut dkh = dscores.matmul_ta(&qh);
                dkh.scale(scale);
                add_into_cols(&mut dq, &dqh, h * dh);
                add_into_cols(&mut dk, &dkh, h * dh);
                add_into_cols(&mut dv, &dvh, h * dh);
            }

            let mut da = dq.matmul_tb(&block.wq);
            da.add_assign(&dk.matmul_tb(&block.wk));
            da.add_assign(&dv.matmul_tb(&block.wv));
            grads.blocks[idx].wq.add_assign(&bc.a.matmul_ta(&dq));
            grads.blocks[idx].wk.add_assign(&bc.a.matmul_ta(&dk));
            grads.blocks[idx].wv.add_assign(&bc.a.matmul_ta(&dv));
            for (gb, s) in grads.blocks[idx].bq.iter_mut().zip(col_sums(&dq)) {
                *gb += s;
            }
            for (gb, s) in grads.blocks[idx].bk.iter_mut().zip(col_sums(&dk)) {
                *gb += s;
            }
            for (gb, s) in grads.blocks[idx].bv.iter_mut().zip(col_sums(&dv)) {
                *gb += s;
            }

            let mut gln1 = LayerNorm::zeros(d);
            let dx_from_ln1 = block.ln1.backward(&da, &bc.ln1, &mut gln1);
            for (a, b) in grads.blocks[idx].ln1.gamma.iter_mut().zip(gln1.gamma) {
                *a += b;
            }
            for (a, b) in grads.blocks[idx].ln1.beta.iter_mut().zip(gln1.beta) {
                *a += b;
            }

            dx = dx_mid;
            dx.add_assign(&dx_from_ln1);
        }

        // Positional rows receive dx directly; the input does too.
        for i in 0..n {
            let src = dx.row(i).to_vec();
            for (g, s) in grads.pos_emb.row_mut(i).iter_mut().zip(src) {
                *g += s;
            }
        }
        (dx, grads)
    }
}
