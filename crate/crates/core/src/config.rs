//! Experiment configuration: one TOML file with `[topology]`, `[model]`,
//! `[objective]`, `[trainer]`, `[eval]` and `[paths]` sections. Every key is
//! optional; unknown sections and keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusConfig;
use crate::digest;
use crate::error::{Error, IoContext, Result};
use crate::eval::{EvalMode, EvalOptions, Smoothing};
use crate::model::ModelConfig;
use crate::objectives::{ObjectiveConfig, Regularizer};
use crate::numeric::Reduction;
use crate::topology::{parse_edges, LanguageTopology, TopologyKind};
use crate::trainer::TrainerConfig;

/// Supervision graph plus the synthetic corpus drawn over it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopologySection {
    pub kind: TopologyKind,
    pub n_languages: usize,
    /// `a-b` pairs, comma separated; only read for `kind = "custom"`
    pub edges: String,
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

impl Default for TopologySection {
    fn default() -> Self {
        let c = CorpusConfig::default();
        Self {
            kind: TopologyKind::Star,
            n_languages: 5,
            edges: String::new(),
            seed: c.seed,
            base_vocab_size: c.base_vocab_size,
            min_len: c.min_len,
            max_len: c.max_len,
            n_train_per_pair: c.n_train_per_pair,
            n_valid_per_direction: c.n_valid_per_direction,
            n_eval_per_direction: c.n_eval_per_direction,
            p_multiway: c.p_multiway,
            split_fraction: c.split_fraction,
        }
    }
}

impl TopologySection {
    pub fn topology(&self) -> Result<LanguageTopology> {
        match self.kind {
            TopologyKind::Star => LanguageTopology::star(self.n_languages),
            TopologyKind::Chain => LanguageTopology::chain(self.n_languages),
            TopologyKind::Custom => LanguageTopology::custom(self.n_languages, parse_edges(&self.edges)?),
        }
    }

    pub fn corpus(&self) -> CorpusConfig {
        CorpusConfig {
            seed: self.seed,
            base_vocab_size: self.base_vocab_size,
            min_len: self.min_len,
            max_len: self.max_len,
            n_train_per_pair: self.n_train_per_pair,
            n_valid_per_direction: self.n_valid_per_direction,
            n_eval_per_direction: self.n_eval_per_direction,
            p_multiway: self.p_multiway,
            split_fraction: self.split_fraction,
        }
    }
}

/// Objective as written in the file; `alpha` defaults per regularizer.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ObjectiveSection {
    regularizer: Regularizer,
    alpha: Option<f64>,
    reduction: Reduction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub mode: EvalMode,
    /// restrict direct decoding to the target language's vocabulary block
    pub vocab_filter: bool,
    pub smoothing: Smoothing,
    /// width-4 beam search instead of greedy decoding
    pub beam: bool,
    /// column label in reports; empty means derived from the objective and mode
    pub label: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            mode: EvalMode::Direct,
            vocab_filter: false,
            smoothing: Smoothing::None,
            beam: false,
            label: String::new(),
        }
    }
}

impl EvalSection {
    pub fn options(&self) -> EvalOptions {
        EvalOptions {
            mode: self.mode,
            vocab_filter: self.vocab_filter,
            smoothing: self.smoothing,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub corpus_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            corpus_dir: "data".into(),
            checkpoint_dir: "checkpoints".into(),
            report_dir: "reports".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub topology: TopologySection,
    pub model: ModelConfig,
    pub objective: ObjectiveConfig,
    pub trainer: TrainerConfig,
    pub eval: EvalSection,
    pub paths: PathsSection,
}

/// The digested part of a config: everything except output locations.
#[derive(Serialize)]
struct Canonical<'a> {
    topology: &'a TopologySection,
    model: &'a ModelConfig,
    objective: &'a ObjectiveConfig,
    trainer: &'a TrainerConfig,
    eval: &'a EvalSection,
}

const SECTIONS: [&str; 6] = ["topology", "model", "objective", "trainer", "eval", "paths"];

fn section<T: for<'de> Deserialize<'de> + Default>(table: &toml::Table, name: &str) -> Result<T> {
    match table.get(name) {
        None => Ok(T::default()),
        Some(toml::Value::Table(t)) => T::deserialize(t.clone())
            .map_err(|e| Error::Config(format!("[{name}] {}", e.message().trim()))),
        Some(_) => Err(Error::Config(format!("`{name}` must be a section"))),
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::parse("").expect("defaults are valid")
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Parses, fills defaults and validates. `model.n_languages` and
    /// `model.vocab_size` follow the topology unless given explicitly, in
    /// which case they must agree with it.
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.message().trim().to_string()))?;
        if let Some(k) = table.keys().find(|k| !SECTIONS.contains(&k.as_str())) {
            return Err(Error::Config(format!(
                "unknown section `{k}` (expected one of {})",
                SECTIONS.join(", ")
            )));
        }
        let topology: TopologySection = section(&table, "topology")?;
        let mut model: ModelConfig = section(&table, "model")?;
        let obj: ObjectiveSection = section(&table, "objective")?;
        let trainer: TrainerConfig = section(&table, "trainer")?;
        let eval: EvalSection = section(&table, "eval")?;
        let paths: PathsSection = section(&table, "paths")?;

        let given = |key: &str| {
            table
                .get("model")
                .and_then(|m| m.as_table())
                .is_some_and(|m| m.contains_key(key))
        };
        let n = topology.n_languages;
        let vocab = crate::corpus::Vocab::new(n, topology.base_vocab_size).size();
        for (key, derived, value) in [
            ("n_languages", n, &mut model.n_languages),
            ("vocab_size", vocab, &mut model.vocab_size),
        ] {
            if !given(key) {
                *value = derived;
            } else if *value != derived {
                return Err(Error::Config(format!(
                    "[model] {key} = {value} disagrees with the topology, which implies {derived}"
                )));
            }
        }
        let objective = ObjectiveConfig {
            regularizer: obj.regularizer,
            alpha: obj.alpha.unwrap_or(obj.regularizer.default_alpha()),
            reduction: obj.reduction,
        };
        let cfg = Self {
            topology,
            model,
            objective,
            trainer,
            eval,
            paths,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.topology.topology()?;
        self.topology.corpus().validate()?;
        self.model.validate()?;
        self.objective.validate(&self.model)?;
        self.trainer.validate()?;
        if self.model.max_len < self.topology.max_len * 2 + 2 {
            return Err(Error::Config(format!(
                "[model] max_len = {} is too short for sentences of up to {} tokens (need {})",
                self.model.max_len,
                self.topology.max_len,
                self.topology.max_len * 2 + 2
            )));
        }
        Ok(())
    }

    /// Sets both the corpus seed and the training seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.topology.seed = seed;
        self.trainer.seed = seed;
        self
    }

    /// Stable hash of the whole resolved config apart from `[paths]`.
    pub fn digest(&self) -> String {
        digest::of_toml(&Canonical {
            topology: &self.topology,
            model: &self.model,
            objective: &self.objective,
            trainer: &self.trainer,
            eval: &self.eval,
        })
    }

    /// Hash of the topology section alone: runs sharing it share a corpus.
    pub fn topology_digest(&self) -> String {
        digest::of_toml(&self.topology)
    }

    /// Report label: the explicit `eval.label`, else the regularizer name,
    /// with `+pivot` for pivot evaluation.
    pub fn label(&self, phase: u8) -> String {
        if !self.eval.label.is_empty() {
            return self.eval.label.clone();
        }
        let base = if phase == 1 { "baseline" } else { self.objective.regularizer.name() };
        match self.eval.mode {
            EvalMode::Direct => base.to_string(),
            EvalMode::Pivot => format!("{base}+pivot"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = ExperimentConfig::parse("").unwrap();
        assert_eq!(c.model.vocab_size, 5 * 64 + 3);
        assert_eq!(c.objective.regularizer, Regularizer::None);
        assert_eq!(c.trainer, TrainerConfig::default());
        assert_eq!(c.digest(), ExperimentConfig::default().digest());
        assert_eq!(c.digest().len(), 64);
    }

    #[test]
    fn alpha_is_parsed_and_defaulted() {
        let c = ExperimentConfig::parse("[objective]\nregularizer = \"mse_decoder\"\nalpha = 0.2\n").unwrap();
        assert_eq!(c.objective.alpha, 0.2);
        let c = ExperimentConfig::parse("[objective]\nregularizer = \"kl_softmax\"\n").unwrap();
        assert_eq!(c.objective.alpha, 0.01);
    }

    #[test]
    fn unknown_keys_name_section_and_key() {
        let e = ExperimentConfig::parse("[objective]\nalhpa = 0.2\n").unwrap_err().to_string();
        assert!(e.contains("[objective]") && e.contains("alhpa"), "{e}");
        let e = ExperimentConfig::parse("[optimizer]\nlr = 1\n").unwrap_err().to_string();
        assert!(e.contains("optimizer"), "{e}");
        let e = ExperimentConfig::parse("[eval]\nmode = \"bridge\"\n").unwrap_err().to_string();
        assert!(e.contains("[eval]") && e.contains("direct"), "{e}");
    }

    #[test]
    fn model_vocab_follows_topology() {
        let c = ExperimentConfig::parse("[topology]\nkind = \"chain\"\nn_languages = 3\nbase_vocab_size = 16\n").unwrap();
        assert_eq!(c.model.n_languages, 3);
        assert_eq!(c.model.vocab_size, 51);
        assert!(ExperimentConfig::parse("[model]\nvocab_size = 100\n").is_err());
    }

    #[test]
    fn seed_override_and_digests() {
        let a = ExperimentConfig::default();
        let b = a.clone().with_seed(7);
        assert_eq!((b.topology.seed, b.trainer.seed), (7, 7));
        assert_ne!(a.digest(), b.digest());
        assert_ne!(a.topology_digest(), b.topology_digest());
        let mut c = a.clone();
        c.paths.report_dir = "elsewhere".into();
        assert_eq!(a.digest(), c.digest());
        let mut d = a.clone();
        d.objective = ObjectiveConfig::new(Regularizer::MseDecoder);
        assert_eq!(a.topology_digest(), d.topology_digest());
    }

    #[test]
    fn custom_topology_needs_edges() {
        assert!(ExperimentConfig::parse("[topology]\nkind = \"custom\"\n").is_err());
        let c = ExperimentConfig::parse("[topology]\nkind = \"custom\"\nn_languages = 3\nedges = \"0-1,0-2\"\n").unwrap();
        assert_eq!(c.topology.topology().unwrap().supervised_directions().len(), 4);
    }
}
