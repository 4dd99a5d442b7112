//! Decoding, scoring against the oracle references, pivot translation and
//! the per-direction evaluation matrix.

mod bleu;
mod decode;
mod report;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use bleu::{bleu, corpus_bleu, BleuStats, Smoothing, MAX_ORDER};
pub use decode::{
    beam_decode, greedy_decode, length_limit, pivot_translate, DecodeOptions, ModelTranslator, OracleTranslator,
    Recording, Translator, BEAM_WIDTH,
};
pub use report::{merge_reports, AverageRow, EvalReport, ReportMeta};

use crate::corpus::ParallelExample;
use crate::error::{Error, Result};
use crate::topology::{LangId, LanguageTopology};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    #[default]
    Direct,
    Pivot,
}

impl std::fmt::Display for EvalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EvalMode::Direct => "direct",
            EvalMode::Pivot => "pivot",
        })
    }
}

impl std::str::FromStr for EvalMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(EvalMode::Direct),
            "pivot" => Ok(EvalMode::Pivot),
            other => Err(Error::Config(format!(
                "eval mode `{other}`: expected `direct` or `pivot`"
            ))),
        }
    }
}

/// Scores of one translation direction.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionScore {
    pub src_lang: LangId,
    pub tgt_lang: LangId,
    pub zero_shot: bool,
    /// hops on the shortest supervised path
    pub distance: usize,
    pub bleu: f64,
    pub token_accuracy: f64,
    pub exact_match: f64,
    /// translation hops actually decoded per sentence
    pub hops: usize,
}

/// Positionwise matches and the comparison length `max(|hyp|, |ref|)`.
pub fn token_matches(hyp: &[usize], reference: &[usize]) -> (usize, usize) {
    let matches = hyp.iter().zip(reference).filter(|(a, b)| a == b).count();
    (matches, hyp.len().max(reference.len()))
}

/// Fraction of positions where `hyp` agrees with `reference`, over the
/// longer of the two.
pub fn token_accuracy(hyp: &[usize], reference: &[usize]) -> f64 {
    let (m, n) = token_matches(hyp, reference);
    if n == 0 {
        1.0
    } else {
        m as f64 / n as f64
    }
}

/// Scores hypotheses of one direction: corpus-level BLEU, micro-averaged
/// token accuracy and exact-match rate.
pub fn score_direction(hyps: &[Vec<usize>], refs: &[&[usize]], smoothing: Smoothing) -> Result<(f64, f64, f64)> {
    if hyps.len() != refs.len() || refs.is_empty() {
        return Err(Error::Eval("hypothesis and reference counts differ".into()));
    }
    let bleu = corpus_bleu(hyps.iter().map(|h| h.as_slice()).zip(refs.iter().copied()), smoothing)?;
    let (mut m, mut n, mut exact) = (0usize, 0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        let (a, b) = token_matches(h, r);
        m += a;
        n += b;
        exact += usize::from(h.as_slice() == *r);
    }
    let acc = if n == 0 { 1.0 } else { m as f64 / n as f64 };
    Ok((bleu, acc, exact as f64 / refs.len() as f64))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalOptions {
    pub mode: EvalMode,
    /// target-block restriction for direct decoding (pivot hops always use it)
    pub vocab_filter: bool,
    pub smoothing: Smoothing,
}

/// Evaluates every ordered language pair of `topology` on `eval_split`.
pub fn evaluate_matrix<T: Translator>(
    translator: &T,
    eval_split: &[ParallelExample],
    topology: &LanguageTopology,
    opts: &EvalOptions,
) -> Result<Vec<DirectionScore>> {
    let mut by_dir: BTreeMap<(LangId, LangId), Vec<&ParallelExample>> = BTreeMap::new();
    for ex in eval_split {
        by_dir.entry(ex.direction()).or_default().push(ex);
    }
    let mut scores = Vec::new();
    for (s, t) in topology.all_directions() {
        let exs = by_dir
            .get(&(s, t))
            .ok_or_else(|| Error::Eval(format!("evaluation split has no {s}-{t} examples")))?;
        let sources: Vec<&[usize]> = exs.iter().map(|e| e.src.as_slice()).collect();
        let refs: Vec<&[usize]> = exs.iter().map(|e| e.tgt.as_slice()).collect();
        let distance = topology.distance(s, t)?;
        let (hyps, hops) = match opts.mode {
            EvalMode::Direct => (translator.translate(&sources, s, t, opts.vocab_filter)?, 1),
            EvalMode::Pivot => {
                let path = topology.bridge_path(s, t)?;
                pivot_translate(translator, topology, &sources, &path)?
            }
        };
        let (bleu, token_accuracy, exact_match) = score_direction(&hyps, &refs, opts.smoothing)?;
        scores.push(DirectionScore {
            src_lang: s,
            tgt_lang: t,
            zero_shot: !topology.is_supervised(s, t),
            distance,
            bleu,
            token_accuracy,
            exact_match,
            hops,
        });
    }
    Ok(scores)
}
