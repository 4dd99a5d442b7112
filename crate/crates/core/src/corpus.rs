//! Synthetic multilingual corpora with an exact translation oracle.
//!
//! Every language is an invertible realization of a shared interlingua: a
//! fixed local reordering inside windows of `w` symbols, then a bijection into
//! the language's own surface-token block, then (optionally) doubling of a
//! chosen set of symbols so that sentence lengths diverge across languages.
//! Translating between any two languages is therefore exact: invert one
//! realization and apply the other.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::seed;
use crate::topology::{parse_edges, LangId, LanguageTopology, TopologyKind};

const STREAM_SPEC: u64 = 1;
const STREAM_SPLITS: u64 = 2;
const STREAM_SENTENCE: u64 = 3;
const STREAM_MULTIWAY: u64 = 4;

/// Interlingua ids at or above these bases belong to the held-out splits.
const VALID_ID_BASE: u64 = 1 << 40;
const EVAL_ID_BASE: u64 = 1 << 41;

/// Token layout shared by all languages: one surface block of
/// `base_vocab_size` ids per language, then the three special markers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocab {
    pub n_languages: usize,
    pub base_vocab_size: usize,
}

impl Vocab {
    pub fn new(n_languages: usize, base_vocab_size: usize) -> Self {
        Self {
            n_languages,
            base_vocab_size,
        }
    }

    pub fn pad(&self) -> usize {
        self.n_languages * self.base_vocab_size
    }

    pub fn bos(&self) -> usize {
        self.pad() + 1
    }

    pub fn eos(&self) -> usize {
        self.pad() + 2
    }

    pub fn size(&self) -> usize {
        self.pad() + 3
    }

    pub fn block(&self, lang: LangId) -> Range<usize> {
        lang * self.base_vocab_size..(lang + 1) * self.base_vocab_size
    }

    pub fn language_of(&self, token: usize) -> Option<LangId> {
        (token < self.pad()).then(|| token / self.base_vocab_size)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LanguageSpec {
    pub lang_id: LangId,
    base_vocab_size: usize,
    /// semantic id → absolute surface token
    surface_map: Vec<usize>,
    /// offset within the block → semantic id
    inverse_map: Vec<usize>,
    window: usize,
    window_perm: Vec<usize>,
    split_set: BTreeSet<usize>,
}

/// Deterministic language definition for `(seed, lang_id)`.
///
/// The window size is drawn uniformly from {1, 2, 3}; for windows of two or
/// more the within-window permutation is never the identity.
pub fn make_language_spec(seed: u64, lang_id: LangId, base_vocab_size: usize) -> Result<LanguageSpec> {
    if base_vocab_size < 8 {
        return Err(Error::Corpus(format!(
            "base_vocab_size must be at least 8, got {base_vocab_size}"
        )));
    }
    let mut rng = seed::rng(seed, &[STREAM_SPEC, lang_id as u64]);
    let window = rng.gen_range(1..=3usize);
    let identity: Vec<usize> = (0..window).collect();
    let mut window_perm = identity.clone();
    while window > 1 && window_perm == identity {
        window_perm.shuffle(&mut rng);
    }
    let mut offsets: Vec<usize> = (0..base_vocab_size).collect();
    offsets.shuffle(&mut rng);
    let base = lang_id * base_vocab_size;
    LanguageSpec::from_parts(
        lang_id,
        base_vocab_size,
        offsets.into_iter().map(|o| base + o).collect(),
        window_perm,
        BTreeSet::new(),
    )
}

impl LanguageSpec {
    /// Builds a spec from explicit parts. `surface_map[s]` is the absolute
    /// token for semantic id `s` and must be a bijection onto the language's
    /// block; `window_perm` is a permutation of `0..w`.
    pub fn from_parts(
        lang_id: LangId,
        base_vocab_size: usize,
        surface_map: Vec<usize>,
        window_perm: Vec<usize>,
        split_set: BTreeSet<usize>,
    ) -> Result<Self> {
        let block = lang_id * base_vocab_size..(lang_id + 1) * base_vocab_size;
        if surface_map.len() != base_vocab_size {
            return Err(Error::Corpus("surface map must cover every symbol".into()));
        }
        let mut inverse_map = vec![usize::MAX; base_vocab_size];
        for (s, &tok) in surface_map.iter().enumerate() {
            if !block.contains(&tok) || inverse_map[tok - block.start] != usize::MAX {
                return Err(Error::Corpus(format!(
                    "surface map of language {lang_id} is not a bijection onto its block"
                )));
            }
            inverse_map[tok - block.start] = s;
        }
        let mut sorted = window_perm.clone();
        sorted.sort_unstable();
        if window_perm.is_empty() || sorted != (0..window_perm.len()).collect::<Vec<_>>() {
            return Err(Error::Corpus("window permutation is not a permutation".into()));
        }
        if split_set.iter().any(|&s| s >= base_vocab_size) {
            return Err(Error::Corpus("split symbol out of range".into()));
        }
        Ok(Self {
            lang_id,
            base_vocab_size,
            surface_map,
            inverse_map,
            window: window_perm.len(),
            window_perm,
            split_set,
        })
    }

    /// Identity ordering and the identity map shifted to the language block.
    pub fn identity(lang_id: LangId, base_vocab_size: usize) -> Self {
        let base = lang_id * base_vocab_size;
        Self::from_parts(
            lang_id,
            base_vocab_size,
            (0..base_vocab_size).map(|s| base + s).collect(),
            vec![0],
            BTreeSet::new(),
        )
        .expect("identity spec is valid")
    }

    /// Marks each symbol for doubling with probability `fraction`.
    pub fn with_random_splits(mut self, seed: u64, fraction: f64) -> Self {
        let mut rng = seed::rng(seed, &[STREAM_SPLITS, self.lang_id as u64]);
        self.split_set = (0..self.base_vocab_size)
            .filter(|_| rng.gen::<f64>() < fraction)
            .collect();
        self
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn window_perm(&self) -> &[usize] {
        &self.window_perm
    }

    pub fn split_set(&self) -> &BTreeSet<usize> {
        &self.split_set
    }

    pub fn block(&self) -> Range<usize> {
        self.lang_id * self.base_vocab_size..(self.lang_id + 1) * self.base_vocab_size
    }

    /// Surface tokens for an interlingua sentence. Only complete windows are
    /// reordered; a trailing partial window keeps its order.
    pub fn realize(&self, interlingua: &[usize]) -> Result<Vec<usize>> {
        if let Some(&bad) = interlingua.iter().find(|&&s| s >= self.base_vocab_size) {
            return Err(Error::Corpus(format!("semantic id {bad} out of range")));
        }
        let w = self.window;
        let mut ordered = interlingua.to_vec();
        for (chunk, src) in ordered.chunks_exact_mut(w).zip(interlingua.chunks_exact(w)) {
            for (j, &p) in self.window_perm.iter().enumerate() {
                chunk[j] = src[p];
            }
        }
        let mut out = Vec::with_capacity(ordered.len());
        for s in ordered {
            let tok = self.surface_map[s];
            out.push(tok);
            if self.split_set.contains(&s) {
                out.push(tok);
            }
        }
        Ok(out)
    }

    /// Recovers the interlingua from a realization under this spec.
    pub fn invert(&self, surface: &[usize]) -> Result<Vec<usize>> {
        let block = self.block();
        let mut ordered = Vec::with_capacity(surface.len());
        let mut i = 0;
        while i < surface.len() {
            let tok = surface[i];
            if !block.contains(&tok) {
                return Err(Error::Corpus(format!(
                    "token {tok} is outside the surface block {block:?} of language {}",
                    self.lang_id
                )));
            }
            let s = self.inverse_map[tok - block.start];
            if self.split_set.contains(&s) {
                if surface.get(i + 1) != Some(&tok) {
                    return Err(Error::Corpus(format!("split token {tok} is not doubled")));
                }
                i += 1;
            }
            ordered.push(s);
            i += 1;
        }
        let w = self.window;
        let mut out = ordered.clone();
        for (chunk, src) in out.chunks_exact_mut(w).zip(ordered.chunks_exact(w)) {
            for (j, &p) in self.window_perm.iter().enumerate() {
                chunk[p] = src[j];
            }
        }
        Ok(out)
    }
}

/// Exact translation of `sentence` from `src`'s language into `tgt`'s.
pub fn oracle_translate(sentence: &[usize], src: &LanguageSpec, tgt: &LanguageSpec) -> Result<Vec<usize>> {
    tgt.realize(&src.invert(sentence)?)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelExample {
    pub src_lang: LangId,
    pub src: Vec<usize>,
    pub tgt_lang: LangId,
    pub tgt: Vec<usize>,
    pub interlingua_id: u64,
}

impl ParallelExample {
    pub fn direction(&self) -> (LangId, LangId) {
        (self.src_lang, self.tgt_lang)
    }

    fn to_line(&self) -> String {
        let join = |xs: &[usize]| {
            xs.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.src_lang,
            self.tgt_lang,
            join(&self.src),
            join(&self.tgt),
            self.interlingua_id
        )
    }

    fn from_line(line: &str) -> Result<Self> {
        let bad = || Error::Corpus(format!("malformed corpus line `{line}`"));
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(bad());
        }
        let ids = |s: &str| -> Result<Vec<usize>> {
            s.split_whitespace()
                .map(|t| t.parse().map_err(|_| bad()))
                .collect()
        };
        Ok(Self {
            src_lang: fields[0].parse().map_err(|_| bad())?,
            tgt_lang: fields[1].parse().map_err(|_| bad())?,
            src: ids(fields[2])?,
            tgt: ids(fields[3])?,
            interlingua_id: fields[4].parse().map_err(|_| bad())?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub seed: u64,
    pub base_vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub n_train_per_pair: usize,
    pub n_valid_per_direction: usize,
    pub n_eval_per_direction: usize,
    pub p_multiway: f64,
    pub split_fraction: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            base_vocab_size: 64,
            min_len: 5,
            max_len: 12,
            n_train_per_pair: 4000,
            n_valid_per_direction: 50,
            n_eval_per_direction: 200,
            p_multiway: 0.6,
            split_fraction: 0.0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_multiway) {
            return Err(Error::Corpus(format!("p_multiway {} not in [0, 1]", self.p_multiway)));
        }
        if !(0.0..=1.0).contains(&self.split_fraction) {
            return Err(Error::Corpus(format!(
                "split_fraction {} not in [0, 1]",
                self.split_fraction
            )));
        }
        if self.min_len < 1 || self.min_len > self.max_len {
            return Err(Error::Corpus(format!(
                "length range {}..={} is empty",
                self.min_len, self.max_len
            )));
        }
        if self.base_vocab_size < 8 {
            return Err(Error::Corpus("base_vocab_size must be at least 8".into()));
        }
        Ok(())
    }
}

/// The interlingua sentence behind `id`; a pure function of `(seed, id)`.
pub fn interlingua_sentence(seed: u64, id: u64, cfg: &CorpusConfig) -> Vec<usize> {
    let mut rng = seed::rng(seed, &[STREAM_SENTENCE, id]);
    let len = rng.gen_range(cfg.min_len..=cfg.max_len);
    (0..len).map(|_| rng.gen_range(0..cfg.base_vocab_size)).collect()
}

pub fn make_language_specs(n_languages: usize, cfg: &CorpusConfig) -> Result<Vec<LanguageSpec>> {
    (0..n_languages)
        .map(|l| {
            Ok(make_language_spec(cfg.seed, l, cfg.base_vocab_size)?
                .with_random_splits(cfg.seed, cfg.split_fraction))
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub topology: LanguageTopology,
    pub specs: Vec<LanguageSpec>,
    pub config: CorpusConfig,
    pub train: Vec<ParallelExample>,
    pub valid: Vec<ParallelExample>,
    pub eval: Vec<ParallelExample>,
}

fn example(
    specs: &[LanguageSpec],
    (s, t): (LangId, LangId),
    id: u64,
    sentence: &[usize],
) -> Result<ParallelExample> {
    Ok(ParallelExample {
        src_lang: s,
        src: specs[s].realize(sentence)?,
        tgt_lang: t,
        tgt: specs[t].realize(sentence)?,
        interlingua_id: id,
    })
}

/// Builds train/valid/eval splits.
///
/// For each supervised pair, `n_train_per_pair` sentences are drawn and
/// emitted in both directions. With probability `p_multiway` a sentence
/// comes from a pool shared by all pairs (slot `j` of every pair holds the
/// same sentence), otherwise it is unique to the pair. Validation covers the
/// supervised directions only; evaluation covers every direction and is
/// multiway-parallel.
pub fn build_corpus(topology: &LanguageTopology, specs: &[LanguageSpec], cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    if specs.len() != topology.n_languages() {
        return Err(Error::Corpus(format!(
            "{} language specs for {} languages",
            specs.len(),
            topology.n_languages()
        )));
    }
    let n = cfg.n_train_per_pair as u64;
    let mut train = Vec::new();
    for (e, (a, b)) in topology.edges().enumerate() {
        let mut rng = seed::rng(cfg.seed, &[STREAM_MULTIWAY, e as u64]);
        for j in 0..n {
            let id = if rng.gen::<f64>() < cfg.p_multiway {
                j
            } else {
                n * (e as u64 + 1) + j
            };
            let sentence = interlingua_sentence(cfg.seed, id, cfg);
            train.push(example(specs, (a, b), id, &sentence)?);
            train.push(example(specs, (b, a), id, &sentence)?);
        }
    }
    let held_out = |base: u64, count: usize, dirs: &[(LangId, LangId)]| -> Result<Vec<ParallelExample>> {
        let mut out = Vec::with_capacity(count * dirs.len());
        for &dir in dirs {
            for j in 0..count as u64 {
                let sentence = interlingua_sentence(cfg.seed, base + j, cfg);
                out.push(example(specs, dir, base + j, &sentence)?);
            }
        }
        Ok(out)
    };
    let valid = held_out(
        VALID_ID_BASE,
        cfg.n_valid_per_direction,
        &topology.supervised_directions(),
    )?;
    let eval = held_out(EVAL_ID_BASE, cfg.n_eval_per_direction, &topology.all_directions())?;
    Ok(Corpus {
        topology: topology.clone(),
        specs: specs.to_vec(),
        config: cfg.clone(),
        train,
        valid,
        eval,
    })
}

/// Sidecar written next to the split files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusMeta {
    pub config_digest: String,
    pub topology_digest: String,
    pub topology: TopologyKind,
    pub n_languages: usize,
    pub edges: String,
    /// seed each language spec was generated from, by language id
    pub spec_seeds: Vec<u64>,
    pub generator: CorpusConfig,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_eval: usize,
}

pub const TRAIN_FILE: &str = "train.tsv";
pub const VALID_FILE: &str = "valid.tsv";
pub const EVAL_FILE: &str = "eval.tsv";
pub const META_FILE: &str = "meta.toml";

fn write_split(path: &Path, examples: &[ParallelExample]) -> Result<()> {
    let file = fs::File::create(path).at(path)?;
    let mut w = BufWriter::new(file);
    for ex in examples {
        writeln!(w, "{}", ex.to_line()).at(path)?;
    }
    w.flush().at(path)
}

fn read_split(path: &Path) -> Result<Vec<ParallelExample>> {
    let file = fs::File::open(path).at(path)?;
    BufReader::new(file)
        .lines()
        .map(|l| ParallelExample::from_line(&l.at(path)?))
        .collect()
}

impl Corpus {
    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.topology.n_languages(), self.config.base_vocab_size)
    }

    pub fn examples_for(&self, split: &[ParallelExample], dir: (LangId, LangId)) -> Vec<ParallelExample> {
        split.iter().filter(|e| e.direction() == dir).cloned().collect()
    }

    pub fn meta(&self, config_digest: &str, topology_digest: &str) -> CorpusMeta {
        let edges: Vec<String> = self.topology.edges().map(|(a, b)| format!("{a}-{b}")).collect();
        CorpusMeta {
            config_digest: config_digest.to_string(),
            topology_digest: topology_digest.to_string(),
            topology: self.topology.kind(),
            n_languages: self.topology.n_languages(),
            edges: edges.join(","),
            spec_seeds: vec![self.config.seed; self.topology.n_languages()],
            generator: self.config.clone(),
            n_train: self.train.len(),
            n_valid: self.valid.len(),
            n_eval: self.eval.len(),
        }
    }

    pub fn write(&self, dir: &Path, config_digest: &str, topology_digest: &str) -> Result<()> {
        fs::create_dir_all(dir).at(dir)?;
        write_split(&dir.join(TRAIN_FILE), &self.train)?;
        write_split(&dir.join(VALID_FILE), &self.valid)?;
        write_split(&dir.join(EVAL_FILE), &self.eval)?;
        let meta = toml::to_string(&self.meta(config_digest, topology_digest))
            .map_err(|e| Error::Corpus(e.to_string()))?;
        let path = dir.join(META_FILE);
        fs::write(&path, meta).at(path)
    }

    pub fn read_meta(dir: &Path) -> Result<CorpusMeta> {
        let path = dir.join(META_FILE);
        let text = fs::read_to_string(&path).at(&path)?;
        toml::from_str(&text).map_err(|e| Error::Corpus(format!("{}: {e}", path.display())))
    }

    /// Loads a corpus written by [`Corpus::write`]; language specs are
    /// regenerated from the recorded seeds.
    pub fn load(dir: &Path) -> Result<(Self, CorpusMeta)> {
        let meta = Self::read_meta(dir)?;
        let edges = parse_edges(&meta.edges)?;
        let topology = match meta.topology {
            TopologyKind::Star => LanguageTopology::star(meta.n_languages)?,
            TopologyKind::Chain => LanguageTopology::chain(meta.n_languages)?,
            TopologyKind::Custom => LanguageTopology::custom(meta.n_languages, edges)?,
        };
        let specs = make_language_specs(meta.n_languages, &meta.generator)?;
        let corpus = Self {
            topology,
            specs,
            config: meta.generator.clone(),
            train: read_split(&dir.join(TRAIN_FILE))?,
            valid: read_split(&dir.join(VALID_FILE))?,
            eval: read_split(&dir.join(EVAL_FILE))?,
        };
        Ok((corpus, meta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_cfg() -> CorpusConfig {
        CorpusConfig {
            n_train_per_pair: 40,
            n_valid_per_direction: 3,
            n_eval_per_direction: 5,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn spec_is_deterministic_and_blocks_disjoint() {
        let a = make_language_spec(9, 1, 64).unwrap();
        assert_eq!(a, make_language_spec(9, 1, 64).unwrap());
        let b = make_language_spec(9, 0, 64).unwrap();
        assert_eq!(a.block(), 64..128);
        assert_eq!(b.block(), 0..64);
        assert!(make_language_spec(9, 0, 7).is_err());
    }

    #[test]
    fn window_sizes_uniform_over_seeds() {
        let mut counts = [0usize; 3];
        for seed in 0..300 {
            counts[make_language_spec(seed, 0, 16).unwrap().window() - 1] += 1;
        }
        // each bucket frequency within ten percentage points of 1/3
        for c in counts {
            let f = c as f64 / 300.0;
            assert!((f - 1.0 / 3.0).abs() <= 0.10, "{counts:?}");
        }
    }

    #[test]
    fn identity_offset_spec() {
        let spec = LanguageSpec::identity(2, 10);
        assert_eq!(spec.realize(&[0, 3, 9]).unwrap(), vec![20, 23, 29]);
        assert!(spec.invert(&[5]).is_err());
    }

    #[test]
    fn splits_double_tokens_and_invert() {
        let spec = LanguageSpec::from_parts(
            0,
            8,
            (0..8).collect(),
            vec![1, 0],
            BTreeSet::from([2]),
        )
        .unwrap();
        let s = spec.realize(&[1, 2, 3]).unwrap();
        assert_eq!(s, vec![2, 2, 1, 3]);
        assert_eq!(spec.invert(&s).unwrap(), vec![1, 2, 3]);
        assert!(spec.invert(&[2, 1, 3]).is_err());
    }

    #[test]
    fn oracle_identity_when_specs_equal() {
        let spec = make_language_spec(5, 3, 16).unwrap();
        let s = spec.realize(&[1, 2, 3, 4, 5, 6, 7]).unwrap();
        assert_eq!(oracle_translate(&s, &spec, &spec).unwrap(), s);
        let other = make_language_spec(5, 1, 16).unwrap();
        assert!(oracle_translate(&s, &other, &spec).is_err());
    }

    #[test]
    fn star_corpus_directions() {
        let topo = LanguageTopology::star(5).unwrap();
        let cfg = small_cfg();
        let specs = make_language_specs(5, &cfg).unwrap();
        let c = build_corpus(&topo, &specs, &cfg).unwrap();
        assert_eq!(c.train.len(), 4 * 40 * 2);
        assert!(c.train.iter().all(|e| topo.is_supervised(e.src_lang, e.tgt_lang)));
        let dirs: BTreeSet<_> = c.eval.iter().map(|e| e.direction()).collect();
        assert_eq!(dirs.len(), 20);
        for e in c.eval.iter().chain(&c.train) {
            let t = oracle_translate(&e.src, &specs[e.src_lang], &specs[e.tgt_lang]).unwrap();
            assert_eq!(t, e.tgt);
        }
    }

    #[test]
    fn no_multiway_means_unique_ids() {
        let topo = LanguageTopology::chain(5).unwrap();
        let cfg = CorpusConfig {
            p_multiway: 0.0,
            ..small_cfg()
        };
        let specs = make_language_specs(5, &cfg).unwrap();
        let c = build_corpus(&topo, &specs, &cfg).unwrap();
        let pairs: BTreeSet<(u64, (usize, usize))> = c
            .train
            .iter()
            .map(|e| (e.interlingua_id, (e.src_lang.min(e.tgt_lang), e.src_lang.max(e.tgt_lang))))
            .collect();
        let ids: BTreeSet<u64> = pairs.iter().map(|p| p.0).collect();
        assert_eq!(ids.len(), pairs.len());
    }

    #[test]
    fn full_multiway_shares_sentences() {
        let topo = LanguageTopology::star(3).unwrap();
        let cfg = CorpusConfig {
            p_multiway: 1.0,
            ..small_cfg()
        };
        let specs = make_language_specs(3, &cfg).unwrap();
        let c = build_corpus(&topo, &specs, &cfg).unwrap();
        let ids: BTreeSet<u64> = c.train.iter().map(|e| e.interlingua_id).collect();
        assert_eq!(ids.len(), 40);
    }

    #[test]
    fn write_and_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let topo = LanguageTopology::chain(4).unwrap();
        let cfg = small_cfg();
        let specs = make_language_specs(4, &cfg).unwrap();
        let c = build_corpus(&topo, &specs, &cfg).unwrap();
        c.write(dir.path(), "abc", "def").unwrap();
        let (back, meta) = Corpus::load(dir.path()).unwrap();
        assert_eq!(meta.config_digest, "abc");
        assert_eq!(back.train, c.train);
        assert_eq!(back.eval, c.eval);
        assert_eq!(back.specs, c.specs);
        assert_eq!(back.topology, c.topology);
    }

    proptest! {
        #[test]
        fn realize_invert_roundtrip(seed in 0u64..1000, lang in 0usize..5,
                                    frac in 0.0f64..0.5,
                                    s in prop::collection::vec(0usize..16, 1..20)) {
            let spec = make_language_spec(seed, lang, 16).unwrap().with_random_splits(seed, frac);
            let surface = spec.realize(&s).unwrap();
            prop_assert_eq!(spec.invert(&surface).unwrap(), s.clone());
            if spec.split_set().is_empty() {
                prop_assert_eq!(surface.len(), s.len());
            }
        }
    }
}
