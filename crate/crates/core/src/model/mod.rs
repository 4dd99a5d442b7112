//! Pre-norm encoder-decoder transformer with language-embedding features.
//!
//! Every forward pass records onto a caller-owned [`Graph`], so the same code
//! serves training, inference, and the regularizers that compare two decoder
//! runs. Sequences are processed in padded batches laid out as
//! `[batch * len, d_model]` rows.

mod checkpoint;
mod params;
pub mod pooling;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Graph, Tensor, Var};
use crate::seed;
use crate::topology::LangId;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointHeader, CHECKPOINT_VERSION};
pub use params::{is_decoder_param, Bound, Parameters};

pub const LN_EPS: f32 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderVariant {
    #[default]
    Baseline,
    MeanPool,
    AttnPool,
}

impl EncoderVariant {
    pub fn is_pooling(self) -> bool {
        self != EncoderVariant::Baseline
    }
}

/// Where cross-attention contexts are read off for the attention regularizer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextCapture {
    /// concatenated heads, before the output projection
    #[default]
    PreProjection,
    PostProjection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_languages: usize,
    pub vocab_size: usize,
    pub n_layers_enc: usize,
    pub n_layers_dec: usize,
    pub d_model: usize,
    pub d_inner: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub encoder_variant: EncoderVariant,
    pub n_pooled_states: usize,
    pub dropout_residual: f64,
    pub dropout_word: f64,
    pub source_lang_embedding: bool,
    pub target_lang_embedding: bool,
    pub tie_output: bool,
    pub context_capture: ContextCapture,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_languages: 5,
            vocab_size: 5 * 64 + 3,
            n_layers_enc: 2,
            n_layers_dec: 2,
            d_model: 64,
            d_inner: 256,
            n_heads: 4,
            max_len: 64,
            encoder_variant: EncoderVariant::Baseline,
            n_pooled_states: 4,
            dropout_residual: 0.1,
            dropout_word: 0.1,
            source_lang_embedding: true,
            target_lang_embedding: true,
            tie_output: true,
            context_capture: ContextCapture::PreProjection,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("model.{m}")));
        for (name, v) in [
            ("n_languages", self.n_languages),
            ("n_layers_enc", self.n_layers_enc),
            ("n_layers_dec", self.n_layers_dec),
            ("d_model", self.d_model),
            ("d_inner", self.d_inner),
            ("n_heads", self.n_heads),
            ("max_len", self.max_len),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model: {} is not divisible by n_heads = {}",
                self.d_model, self.n_heads
            ));
        }
        if !self.d_model.is_multiple_of(2) {
            return bad(format!("d_model: {} must be even", self.d_model));
        }
        if self.vocab_size < 4 {
            return bad(format!("vocab_size: {} is too small", self.vocab_size));
        }
        if self.encoder_variant.is_pooling() && self.n_pooled_states == 0 {
            return bad("n_pooled_states must be at least 1 for pooling encoders".into());
        }
        for (name, p) in [
            ("dropout_residual", self.dropout_residual),
            ("dropout_word", self.dropout_word),
        ] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name}: {p} is not in [0, 1)"));
            }
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Digest of everything that determines parameter shapes and the
    /// function they compute. Dropout rates are training-time settings and
    /// do not take part.
    pub fn arch_digest(&self) -> String {
        let arch = Self {
            dropout_residual: 0.0,
            dropout_word: 0.0,
            ..self.clone()
        };
        crate::digest::of_toml(&arch)
    }

    pub fn pad(&self) -> usize {
        self.vocab_size - 3
    }

    pub fn bos(&self) -> usize {
        self.vocab_size - 2
    }

    pub fn eos(&self) -> usize {
        self.vocab_size - 1
    }
}

/// A padded batch of token sequences, one language tag per sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqBatch {
    /// `[batch * len]`, padded with the pad id
    pub ids: Vec<usize>,
    pub lens: Vec<usize>,
    pub langs: Vec<LangId>,
    pub len: usize,
}

impl SeqBatch {
    pub fn new(seqs: &[&[usize]], langs: &[LangId], pad: usize) -> Result<Self> {
        if seqs.is_empty() || seqs.len() != langs.len() {
            return Err(Error::Model(format!(
                "batch of {} sequences with {} language tags",
                seqs.len(),
                langs.len()
            )));
        }
        if seqs.iter().any(|s| s.is_empty()) {
            return Err(Error::Model("empty input sequence".into()));
        }
        let len = seqs.iter().map(|s| s.len()).max().unwrap();
        let mut ids = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(pad, len - s.len()));
        }
        Ok(Self {
            ids,
            lens: seqs.iter().map(|s| s.len()).collect(),
            langs: langs.to_vec(),
            len,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.lens.len()
    }

    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    /// Row validity in `[batch * len]` order.
    pub fn valid(&self) -> Vec<bool> {
        self.lens
            .iter()
            .flat_map(|&l| (0..self.len).map(move |t| t < l))
            .collect()
    }
}

/// Decoder input (`BOS y`) and output (`y EOS`) batches for targets `y`.
pub fn teacher_forcing(
    targets: &[&[usize]],
    langs: &[LangId],
    cfg: &ModelConfig,
) -> Result<(SeqBatch, Vec<usize>)> {
    let inputs: Vec<Vec<usize>> = targets
        .iter()
        .map(|t| std::iter::once(cfg.bos()).chain(t.iter().copied()).collect())
        .collect();
    let outputs: Vec<Vec<usize>> = targets
        .iter()
        .map(|t| t.iter().copied().chain(std::iter::once(cfg.eos())).collect())
        .collect();
    let refs: Vec<&[usize]> = inputs.iter().map(|v| v.as_slice()).collect();
    let prefix = SeqBatch::new(&refs, langs, cfg.pad())?;
    let orefs: Vec<&[usize]> = outputs.iter().map(|v| v.as_slice()).collect();
    let out = SeqBatch::new(&orefs, langs, cfg.pad())?;
    Ok((prefix, out.ids))
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `[batch * len, d_model]`; `len` is the number of pooled states for the
    /// pooling variants
    pub states: Var,
    pub keep: Vec<bool>,
    pub batch: usize,
    pub len: usize,
    /// true for the fixed-size pooling variants
    pub pooled: bool,
}

/// Trace of one teacher-forced decoder run.
#[derive(Clone, Debug)]
pub struct DecodePass {
    /// `[batch * len, vocab_size]`
    pub logits: Var,
    /// one `[batch * len, d_model]` tensor per decoder layer
    pub attn_contexts: Vec<Var>,
    /// `[batch * len, d_model]` after the final layer norm
    pub dec_states: Var,
    pub valid: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Source,
    Target,
}

/// Seeded dropout masks. Masks are drawn in call order, so a fixed seed and a
/// fixed sequence of forward calls reproduce the same masks.
#[derive(Clone, Debug)]
pub struct Dropout {
    rng: ChaCha8Rng,
    pub residual: f32,
    pub word: f32,
}

impl Dropout {
    pub fn new(rng: ChaCha8Rng, residual: f64, word: f64) -> Self {
        Self {
            rng,
            residual: residual as f32,
            word: word as f32,
        }
    }

    pub fn from_seed(base: u64, parts: &[u64], residual: f64, word: f64) -> Self {
        Self::new(seed::rng(base, parts), residual, word)
    }
}

/// Per-row survival scales: `0` with probability `p`, else `1 / (1 - p)`.
pub fn word_dropout_scales(rows: usize, p: f32, rng: &mut impl Rng) -> Vec<f32> {
    let keep = 1.0 / (1.0 - p);
    (0..rows)
        .map(|_| if rng.gen::<f32>() < p { 0.0 } else { keep })
        .collect()
}

fn sinusoid_table(max_len: usize, d: usize) -> Vec<f32> {
    let mut pe = vec![0.0f32; max_len * d];
    for pos in 0..max_len {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            pe[pos * d + 2 * i] = angle.sin() as f32;
            pe[pos * d + 2 * i + 1] = angle.cos() as f32;
        }
    }
    pe
}

/// `keep[g, i, j]` for a `[batch * heads, tq, tk]` score tensor.
fn attn_mask(
    batch: usize,
    heads: usize,
    tq: usize,
    tk: usize,
    f: impl Fn(usize, usize, usize) -> bool,
) -> Vec<bool> {
    let mut keep = Vec::with_capacity(batch * heads * tq * tk);
    for b in 0..batch {
        for _ in 0..heads {
            for i in 0..tq {
                for j in 0..tk {
                    keep.push(f(b, i, j));
                }
            }
        }
    }
    keep
}

/// `softmax(q kᵀ / √d) v` over `[groups, len, d]` tensors, with `keep`
/// marking the admissible `(query, key)` pairs. Returns contexts and weights.
pub fn scaled_dot_attention(
    g: &mut Graph<f32>,
    q: Var,
    k: Var,
    v: Var,
    keep: &[bool],
) -> Result<(Var, Var)> {
    let d = *g.shape(q).last().unwrap();
    let scores = g.matmul_nt(q, k)?;
    let scores = g.scale(scores, 1.0 / (d as f32).sqrt());
    let weights = g.masked_softmax(scores, keep)?;
    let ctx = g.matmul(weights, v)?;
    Ok((ctx, weights))
}

/// Forward-pass context: configuration, position table and (in training)
/// the dropout stream.
pub struct Net<'c> {
    pub cfg: &'c ModelConfig,
    positions: Vec<f32>,
    dropout: Option<Dropout>,
}

pub(crate) struct Attended {
    /// concatenated heads before the output projection
    pub merged: Var,
    pub out: Var,
    pub weights: Var,
}

impl<'c> Net<'c> {
    /// Deterministic inference mode.
    pub fn eval(cfg: &'c ModelConfig) -> Self {
        Self {
            cfg,
            positions: sinusoid_table(cfg.max_len, cfg.d_model),
            dropout: None,
        }
    }

    pub fn train(cfg: &'c ModelConfig, dropout: Dropout) -> Self {
        Self {
            dropout: Some(dropout),
            ..Self::eval(cfg)
        }
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.cfg.max_len {
            return Err(Error::Model(format!(
                "sequence length {len} exceeds max_len {}",
                self.cfg.max_len
            )));
        }
        Ok(())
    }

    /// Token embedding plus sinusoidal position plus (if enabled for the
    /// side) the sequence's language embedding, with word dropout in training.
    pub fn embed_inputs(&mut self, g: &mut Graph<f32>, p: &Bound, batch: &SeqBatch, side: Side) -> Result<Var> {
        self.check_len(batch.len)?;
        let h = self.cfg.d_model;
        if let Some(&bad) = batch.ids.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(Error::Model(format!("token id {bad} out of range")));
        }
        if let Some(&bad) = batch.langs.iter().find(|&&l| l >= self.cfg.n_languages) {
            return Err(Error::Model(format!("language id {bad} out of range")));
        }
        let mut x = g.gather(p.get("embed.tokens"), &batch.ids)?;
        let with_lang = match side {
            Side::Source => self.cfg.source_lang_embedding,
            Side::Target => self.cfg.target_lang_embedding,
        };
        if with_lang {
            let lang_rows: Vec<usize> = batch
                .langs
                .iter()
                .flat_map(|&l| std::iter::repeat_n(l, batch.len))
                .collect();
            let lang = g.gather(p.get("embed.lang"), &lang_rows)?;
            x = g.add(x, lang)?;
        }
        x = g.scale(x, (h as f32).sqrt());
        let mut pos = Vec::with_capacity(batch.rows() * h);
        for _ in 0..batch.batch_size() {
            pos.extend_from_slice(&self.positions[..batch.len * h]);
        }
        let pos = g.constant(Tensor::new(&[batch.rows(), h], pos)?);
        x = g.add(x, pos)?;
        if let Some(d) = self.dropout.as_mut().filter(|d| d.word > 0.0) {
            let scales = word_dropout_scales(batch.rows(), d.word, &mut d.rng);
            let mask = Tensor::from_fn(&[batch.rows(), h], |i| scales[i / h]);
            let mask = g.constant(mask);
            x = g.mul(x, mask)?;
        }
        Ok(x)
    }

    fn residual_dropout(&mut self, g: &mut Graph<f32>, x: Var) -> Result<Var> {
        match self.dropout.as_mut().filter(|d| d.residual > 0.0) {
            Some(d) => {
                let (p, keep) = (d.residual, 1.0 / (1.0 - d.residual));
                let shape = g.shape(x).to_vec();
                let mask = Tensor::from_fn(&shape, |_| if d.rng.gen::<f32>() < p { 0.0 } else { keep });
                let mask = g.constant(mask);
                Ok(g.mul(x, mask)?)
            }
            None => Ok(x),
        }
    }

    fn linear(&self, g: &mut Graph<f32>, p: &Bound, x: Var, prefix: &str, w: &str, b: &str) -> Result<Var> {
        let y = g.matmul(x, p.get(&format!("{prefix}.{w}")))?;
        Ok(g.add_row(y, p.get(&format!("{prefix}.{b}")))?)
    }

    fn layer_norm(&self, g: &mut Graph<f32>, p: &Bound, x: Var, prefix: &str) -> Result<Var> {
        Ok(g.layer_norm(
            x,
            p.get(&format!("{prefix}.g")),
            p.get(&format!("{prefix}.b")),
            LN_EPS,
        )?)
    }

    fn feed_forward(&self, g: &mut Graph<f32>, p: &Bound, x: Var, prefix: &str) -> Result<Var> {
        let h = self.linear(g, p, x, prefix, "w1", "b1")?;
        let h = g.relu(h);
        self.linear(g, p, h, prefix, "w2", "b2")
    }

    /// Multi-head attention of `q_in` rows over `kv_in` rows.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn attention(
        &self,
        g: &mut Graph<f32>,
        p: &Bound,
        prefix: &str,
        q_in: Var,
        kv_in: Var,
        batch: usize,
        keep: &[bool],
    ) -> Result<Attended> {
        let q = self.linear(g, p, q_in, prefix, "wq", "bq")?;
        let k = self.linear(g, p, kv_in, prefix, "wk", "bk")?;
        let v = self.linear(g, p, kv_in, prefix, "wv", "bv")?;
        self.attend_projected(g, p, prefix, q, k, v, batch, keep)
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn attend_projected(
        &self,
        g: &mut Graph<f32>,
        p: &Bound,
        prefix: &str,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        keep: &[bool],
    ) -> Result<Attended> {
        let heads = self.cfg.n_heads;
        let q = g.split_heads(q, batch, heads)?;
        let k = g.split_heads(k, batch, heads)?;
        let v = g.split_heads(v, batch, heads)?;
        let (ctx, weights) = scaled_dot_attention(g, q, k, v, keep)?;
        let merged = g.merge_heads(ctx, batch)?;
        let out = self.linear(g, p, merged, prefix, "wo", "bo")?;
        Ok(Attended { merged, out, weights })
    }

    /// Encodes a source batch. Baseline states are source-aligned; pooling
    /// variants return `n_pooled_states` states per sentence, all valid.
    pub fn encode(&mut self, g: &mut Graph<f32>, p: &Bound, src: &SeqBatch) -> Result<EncoderOutput> {
        let mut x = self.embed_inputs(g, p, src, Side::Source)?;
        let (b, t) = (src.batch_size(), src.len);
        let keep = attn_mask(b, self.cfg.n_heads, t, t, |bi, _, j| j < src.lens[bi]);
        for l in 0..self.cfg.n_layers_enc {
            let pre = format!("enc.{l}");
            let h = self.layer_norm(g, p, x, &format!("{pre}.ln1"))?;
            let a = self.attention(g, p, &format!("{pre}.attn"), h, h, b, &keep)?.out;
            let a = self.residual_dropout(g, a)?;
            x = g.add(x, a)?;
            let h = self.layer_norm(g, p, x, &format!("{pre}.ln2"))?;
            let f = self.feed_forward(g, p, h, &format!("{pre}.ff"))?;
            let f = self.residual_dropout(g, f)?;
            x = g.add(x, f)?;
        }
        let states = self.layer_norm(g, p, x, "enc.ln")?;
        let valid = src.valid();
        let n = self.cfg.n_pooled_states;
        match self.cfg.encoder_variant {
            EncoderVariant::Baseline => Ok(EncoderOutput {
                states,
                keep: valid,
                batch: b,
                len: t,
                pooled: false,
            }),
            EncoderVariant::MeanPool => Ok(EncoderOutput {
                states: pooling::mean_pool(g, p, states, b, &valid, n)?,
                keep: vec![true; b * n],
                batch: b,
                len: n,
                pooled: true,
            }),
            EncoderVariant::AttnPool => Ok(EncoderOutput {
                states: pooling::attention_pool(self, g, p, states, b, &valid, n)?.0,
                keep: vec![true; b * n],
                batch: b,
                len: n,
                pooled: true,
            }),
        }
    }

    /// Runs the decoder over `prefix` (which starts with BOS) with causal
    /// self-attention and cross-attention over `enc`.
    pub fn decode_teacher_forced(
        &mut self,
        g: &mut Graph<f32>,
        p: &Bound,
        prefix: &SeqBatch,
        enc: &EncoderOutput,
    ) -> Result<DecodePass> {
        if prefix.batch_size() != enc.batch {
            return Err(Error::Model(format!(
                "decoder batch {} does not match encoder batch {}",
                prefix.batch_size(),
                enc.batch
            )));
        }
        let bos = self.cfg.bos();
        if prefix.ids.chunks(prefix.len).any(|s| s[0] != bos) {
            return Err(Error::Model("decoder prefix must start with BOS".into()));
        }
        let mut x = self.embed_inputs(g, p, prefix, Side::Target)?;
        let (b, t, heads) = (prefix.batch_size(), prefix.len, self.cfg.n_heads);
        let self_keep = attn_mask(b, heads, t, t, |bi, i, j| j <= i && j < prefix.lens[bi]);
        let cross_keep = attn_mask(b, heads, t, enc.len, |bi, _, j| enc.keep[bi * enc.len + j]);
        let mut attn_contexts = Vec::with_capacity(self.cfg.n_layers_dec);
        for l in 0..self.cfg.n_layers_dec {
            let pre = format!("dec.{l}");
            let h = self.layer_norm(g, p, x, &format!("{pre}.ln1"))?;
            let a = self.attention(g, p, &format!("{pre}.self"), h, h, b, &self_keep)?.out;
            let a = self.residual_dropout(g, a)?;
            x = g.add(x, a)?;
            let h = self.layer_norm(g, p, x, &format!("{pre}.ln2"))?;
            let c = self.attention(g, p, &format!("{pre}.cross"), h, enc.states, b, &cross_keep)?;
            attn_contexts.push(match self.cfg.context_capture {
                ContextCapture::PreProjection => c.merged,
                ContextCapture::PostProjection => c.out,
            });
            let a = self.residual_dropout(g, c.out)?;
            x = g.add(x, a)?;
            let h = self.layer_norm(g, p, x, &format!("{pre}.ln3"))?;
            let f = self.feed_forward(g, p, h, &format!("{pre}.ff"))?;
            let f = self.residual_dropout(g, f)?;
            x = g.add(x, f)?;
        }
        let dec_states = self.layer_norm(g, p, x, "dec.ln")?;
        let table = if self.cfg.tie_output {
            p.get("embed.tokens")
        } else {
            p.get("out.proj")
        };
        let logits = g.matmul_nt(dec_states, table)?;
        let logits = g.add_row(logits, p.get("out.bias"))?;
        Ok(DecodePass {
            logits,
            attn_contexts,
            dec_states,
            valid: prefix.valid(),
            batch: b,
            len: t,
        })
    }
}

#[cfg(test)]
mod tests;
