use std::cell::RefCell;

use crate::corpus::{oracle_translate, LanguageSpec};
use crate::error::{Error, Result};
use crate::model::{Bound, ModelConfig, Net, Parameters, SeqBatch};
use crate::numeric::Graph;
use crate::topology::{LangId, LanguageTopology};

/// Sentences decoded per forward batch.
const DECODE_BATCH: usize = 64;
pub const BEAM_WIDTH: usize = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DecodeOptions {
    /// restrict output to the target language's block plus EOS
    pub vocab_filter: bool,
    /// beam search with [`BEAM_WIDTH`] hypotheses instead of greedy search
    pub beam: bool,
}

/// Anything that maps source sentences of one language into another.
pub trait Translator {
    fn translate(
        &self,
        sources: &[&[usize]],
        src_lang: LangId,
        tgt_lang: LangId,
        vocab_filter: bool,
    ) -> Result<Vec<Vec<usize>>>;
}

/// Output length budget for a batch whose longest source has `max_src`
/// tokens: twice the source plus two, within the model's position range.
pub fn length_limit(cfg: &ModelConfig, max_src: usize) -> usize {
    (cfg.max_len - 1).min(2 * max_src + 2)
}

fn allowed_tokens(cfg: &ModelConfig, tgt_lang: LangId, vocab_filter: bool) -> Vec<bool> {
    let base = cfg.pad() / cfg.n_languages;
    (0..cfg.vocab_size)
        .map(|t| !vocab_filter || t == cfg.eos() || t / base == tgt_lang && t < cfg.pad())
        .collect()
}

fn check_langs(cfg: &ModelConfig, src_lang: LangId, tgt_lang: LangId) -> Result<()> {
    if src_lang >= cfg.n_languages || tgt_lang >= cfg.n_languages {
        return Err(Error::Eval(format!(
            "language pair {src_lang}-{tgt_lang} outside the model's {} languages",
            cfg.n_languages
        )));
    }
    Ok(())
}

/// Greedy decoding of a batch of sentences from `src_lang` into `tgt_lang`.
/// The whole prefix is re-run each step; a sentence stops at EOS or at its
/// own [`length_limit`], so outputs do not depend on batch composition.
pub fn greedy_decode(
    cfg: &ModelConfig,
    params: &Parameters,
    sources: &[&[usize]],
    src_lang: LangId,
    tgt_lang: LangId,
    vocab_filter: bool,
) -> Result<Vec<Vec<usize>>> {
    check_langs(cfg, src_lang, tgt_lang)?;
    let allowed = allowed_tokens(cfg, tgt_lang, vocab_filter);
    let mut out = Vec::with_capacity(sources.len());
    for chunk in sources.chunks(DECODE_BATCH) {
        let n = chunk.len();
        let limits: Vec<usize> = chunk.iter().map(|s| length_limit(cfg, s.len())).collect();
        let limit = limits.iter().copied().max().unwrap_or(0);
        let mut g = Graph::new();
        let p = Bound::constants(&mut g, params);
        let mut net = Net::eval(cfg);
        let src = SeqBatch::new(chunk, &vec![src_lang; n], cfg.pad())?;
        let enc = net.encode(&mut g, &p, &src)?;
        let mark = g.len();
        let mut hyps: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut done = vec![false; n];
        for step in 0..limit {
            let prefixes: Vec<Vec<usize>> = hyps
                .iter()
                .map(|h| {
                    let mut p = vec![cfg.bos()];
                    p.extend_from_slice(h);
                    p.resize(step + 1, cfg.eos());
                    p
                })
                .collect();
            let refs: Vec<&[usize]> = prefixes.iter().map(|v| v.as_slice()).collect();
            let prefix = SeqBatch::new(&refs, &vec![tgt_lang; n], cfg.pad())?;
            let pass = net.decode_teacher_forced(&mut g, &p, &prefix, &enc)?;
            let logits = g.value(pass.logits);
            let v = cfg.vocab_size;
            for b in 0..n {
                if done[b] {
                    continue;
                }
                let row = &logits[(b * (step + 1) + step) * v..(b * (step + 1) + step + 1) * v];
                let best = row
                    .iter()
                    .enumerate()
                    .filter(|(t, _)| allowed[*t])
                    .fold((0, f32::NEG_INFINITY), |acc, (t, &x)| if x > acc.1 { (t, x) } else { acc })
                    .0;
                if best == cfg.eos() {
                    done[b] = true;
                } else {
                    hyps[b].push(best);
                    done[b] = hyps[b].len() >= limits[b];
                }
            }
            g.truncate(mark);
            if done.iter().all(|&d| d) {
                break;
            }
        }
        out.extend(hyps);
    }
    Ok(out)
}

fn log_softmax_row(row: &[f32]) -> Vec<f64> {
    let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let z: f64 = row.iter().map(|&x| (x as f64 - mx).exp()).sum();
    row.iter().map(|&x| x as f64 - mx - z.ln()).collect()
}

/// Beam search with [`BEAM_WIDTH`] hypotheses and no length penalty.
pub fn beam_decode(
    cfg: &ModelConfig,
    params: &Parameters,
    sources: &[&[usize]],
    src_lang: LangId,
    tgt_lang: LangId,
    vocab_filter: bool,
) -> Result<Vec<Vec<usize>>> {
    check_langs(cfg, src_lang, tgt_lang)?;
    let allowed = allowed_tokens(cfg, tgt_lang, vocab_filter);
    let k = BEAM_WIDTH;
    let mut out = Vec::with_capacity(sources.len());
    for src in sources {
        let limit = length_limit(cfg, src.len());
        let mut g = Graph::new();
        let p = Bound::constants(&mut g, params);
        let mut net = Net::eval(cfg);
        let batch = SeqBatch::new(&vec![*src; k], &vec![src_lang; k], cfg.pad())?;
        let enc = net.encode(&mut g, &p, &batch)?;
        let mark = g.len();
        let mut beams: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
        let mut finished: Vec<(Vec<usize>, f64)> = Vec::new();
        for step in 0..limit {
            let mut prefixes: Vec<Vec<usize>> = beams
                .iter()
                .map(|(h, _)| std::iter::once(cfg.bos()).chain(h.iter().copied()).collect())
                .collect();
            prefixes.resize(k, prefixes[0].clone());
            let refs: Vec<&[usize]> = prefixes.iter().map(|v| v.as_slice()).collect();
            let prefix = SeqBatch::new(&refs, &vec![tgt_lang; k], cfg.pad())?;
            let pass = net.decode_teacher_forced(&mut g, &p, &prefix, &enc)?;
            let logits = g.value(pass.logits);
            let v = cfg.vocab_size;
            let mut cands: Vec<(usize, usize, f64)> = Vec::new();
            for (b, (_, score)) in beams.iter().enumerate() {
                let row = &logits[(b * (step + 1) + step) * v..(b * (step + 1) + step + 1) * v];
                for (t, lp) in log_softmax_row(row).into_iter().enumerate() {
                    if allowed[t] {
                        cands.push((b, t, score + lp));
                    }
                }
            }
            g.truncate(mark);
            cands.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
            let mut next = Vec::with_capacity(k);
            for (b, t, s) in cands {
                if t == cfg.eos() {
                    finished.push((beams[b].0.clone(), s));
                } else {
                    let mut h = beams[b].0.clone();
                    h.push(t);
                    next.push((h, s));
                    if next.len() == k {
                        break;
                    }
                }
            }
            beams = next;
            // scores only decrease, so a finished hypothesis at least as good
            // as every live one is final
            let best_finished = finished.iter().map(|f| f.1).fold(f64::NEG_INFINITY, f64::max);
            if beams.iter().all(|(_, s)| *s <= best_finished) {
                break;
            }
        }
        finished.extend(beams);
        let best = finished
            .into_iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(h, _)| h)
            .unwrap_or_default();
        out.push(best);
    }
    Ok(out)
}

/// A trained model used as a [`Translator`].
pub struct ModelTranslator<'a> {
    pub cfg: &'a ModelConfig,
    pub params: &'a Parameters,
    pub beam: bool,
}

impl Translator for ModelTranslator<'_> {
    fn translate(
        &self,
        sources: &[&[usize]],
        src_lang: LangId,
        tgt_lang: LangId,
        vocab_filter: bool,
    ) -> Result<Vec<Vec<usize>>> {
        if self.beam {
            beam_decode(self.cfg, self.params, sources, src_lang, tgt_lang, vocab_filter)
        } else {
            greedy_decode(self.cfg, self.params, sources, src_lang, tgt_lang, vocab_filter)
        }
    }
}

/// Exact translator backed by the corpus oracle. Inputs that are not valid
/// sentences of the source language translate to the empty sentence.
pub struct OracleTranslator<'a> {
    pub specs: &'a [LanguageSpec],
}

impl Translator for OracleTranslator<'_> {
    fn translate(
        &self,
        sources: &[&[usize]],
        src_lang: LangId,
        tgt_lang: LangId,
        _vocab_filter: bool,
    ) -> Result<Vec<Vec<usize>>> {
        let (s, t) = (&self.specs[src_lang], &self.specs[tgt_lang]);
        Ok(sources
            .iter()
            .map(|x| oracle_translate(x, s, t).unwrap_or_default())
            .collect())
    }
}

/// Records every direction it is asked to translate.
pub struct Recording<'t, T: Translator> {
    pub inner: &'t T,
    pub calls: RefCell<Vec<(LangId, LangId)>>,
}

impl<'t, T: Translator> Recording<'t, T> {
    pub fn new(inner: &'t T) -> Self {
        Self {
            inner,
            calls: RefCell::new(Vec::new()),
        }
    }
}

impl<T: Translator> Translator for Recording<'_, T> {
    fn translate(
        &self,
        sources: &[&[usize]],
        src_lang: LangId,
        tgt_lang: LangId,
        vocab_filter: bool,
    ) -> Result<Vec<Vec<usize>>> {
        self.calls.borrow_mut().push((src_lang, tgt_lang));
        self.inner.translate(sources, src_lang, tgt_lang, vocab_filter)
    }
}

/// Translates along `path`, feeding each hop's output into the next hop.
/// Every hop must be a supervised direction; the vocabulary filter is always
/// on. Returns the outputs and the number of hops decoded.
pub fn pivot_translate<T: Translator>(
    translator: &T,
    topology: &LanguageTopology,
    sources: &[&[usize]],
    path: &[LangId],
) -> Result<(Vec<Vec<usize>>, usize)> {
    if path.len() < 2 {
        return Err(Error::Eval("pivot path needs at least two languages".into()));
    }
    if let Some(w) = path.windows(2).find(|w| !topology.is_supervised(w[0], w[1])) {
        return Err(Error::Eval(format!(
            "pivot hop {}-{} is not a supervised direction",
            w[0], w[1]
        )));
    }
    let mut current: Vec<Vec<usize>> = sources.iter().map(|s| s.to_vec()).collect();
    for w in path.windows(2) {
        // empty intermediate outputs cannot be encoded and stay empty
        let refs: Vec<&[usize]> = current.iter().map(|v| v.as_slice()).collect();
        let (nonempty, idx): (Vec<&[usize]>, Vec<usize>) = refs
            .iter()
            .enumerate()
            .filter(|(_, s)| !s.is_empty())
            .map(|(i, s)| (*s, i))
            .unzip();
        let mut next = vec![Vec::new(); current.len()];
        if !nonempty.is_empty() {
            for (out, i) in translator.translate(&nonempty, w[0], w[1], true)?.into_iter().zip(idx) {
                next[i] = out;
            }
        }
        current = next;
    }
    Ok((current, path.len() - 1))
}
