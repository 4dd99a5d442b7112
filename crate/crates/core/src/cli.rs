//! The `zeroshot` command line: `gen-data`, `train`, `eval` and `report`.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::corpus::{build_corpus, make_language_specs, Corpus};
use crate::error::{Error, IoContext, Result};
use crate::eval::{evaluate_matrix, merge_reports, EvalMode, EvalReport, ModelTranslator, ReportMeta};
use crate::objectives::{ObjectiveConfig, Regularizer};
use crate::trainer::{averaged_path, load_init, train_phase, Init, PhaseSpec};

#[derive(Debug, Parser)]
#[command(name = "zeroshot", version, about = "Multilingual seq2seq experiments on a synthetic corpus")]
pub struct Cli {
    /// experiment config (TOML); defaults apply when omitted
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// overrides both `topology.seed` and `trainer.seed`
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// output directory, replacing the one from `[paths]`
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the train/valid/eval corpus
    GenData,
    /// Run training phase 1 (plain NLL) or 2 (NLL plus regularizer)
    Train {
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
        phase: u8,
        /// checkpoint to start from; required for phase 2
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on every direction
    Eval {
        #[arg(long)]
        mode: Option<EvalMode>,
        /// evaluate the averaged checkpoint of this phase (default: 1 without a regularizer, else 2)
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        phase: Option<u8>,
        /// checkpoint to evaluate instead of the phase's averaged one
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Merge evaluation reports into one comparison table
    Report {
        /// report files (.tsv) in column order; the first is the baseline
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
}

/// Directory holding one training run's checkpoints.
pub fn run_dir(cfg: &ExperimentConfig, phase: u8) -> PathBuf {
    let name = if phase == 1 { "baseline" } else { cfg.objective.regularizer.name() };
    cfg.paths.checkpoint_dir.join(name)
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    Ok(match cli.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn load_corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    let dir = &cfg.paths.corpus_dir;
    if !dir.join("meta.toml").exists() {
        return Err(Error::Config(format!(
            "no corpus in {}; run `zeroshot gen-data` first",
            dir.display()
        )));
    }
    let (corpus, meta) = Corpus::load(dir)?;
    if meta.topology_digest != cfg.topology_digest() {
        return Err(Error::Config(format!(
            "corpus in {} was generated from a different [topology] section; rerun gen-data",
            dir.display()
        )));
    }
    Ok(corpus)
}

fn lang_embedding(cfg: &ExperimentConfig) -> &'static str {
    match (cfg.model.source_lang_embedding, cfg.model.target_lang_embedding) {
        (true, true) => "source+target",
        (true, false) => "source",
        (false, true) => "target",
        (false, false) => "none",
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).at(dir)?;
    }
    std::fs::write(path, text).at(path)
}

/// Runs one subcommand. Progress and tables go to `out`.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let mut cfg = load_config(cli)?;
    let say = |out: &mut dyn Write, s: String| {
        let _ = writeln!(out, "{s}");
    };
    match &cli.command {
        Command::GenData => {
            if let Some(dir) = &cli.out {
                cfg.paths.corpus_dir = dir.clone();
            }
            let topology = cfg.topology.topology()?;
            let ccfg = cfg.topology.corpus();
            let specs = make_language_specs(topology.n_languages(), &ccfg)?;
            let corpus = build_corpus(&topology, &specs, &ccfg)?;
            corpus.write(&cfg.paths.corpus_dir, &cfg.digest(), &cfg.topology_digest())?;
            say(
                out,
                format!(
                    "wrote {} train / {} valid / {} eval examples ({}) to {}",
                    corpus.train.len(),
                    corpus.valid.len(),
                    corpus.eval.len(),
                    topology.describe(),
                    cfg.paths.corpus_dir.display()
                ),
            );
        }
        Command::Train { phase, init } => {
            let corpus = load_corpus(&cfg)?;
            let dir = cli.out.clone().unwrap_or_else(|| run_dir(&cfg, *phase));
            let init = match init {
                Some(p) => Init::Checkpoint(p.clone()),
                None => Init::Fresh,
            };
            let digest = cfg.digest();
            let spec = PhaseSpec {
                phase: *phase,
                init,
                out_dir: &dir,
                config_digest: &digest,
            };
            // phase 1 is the plain baseline whatever the objective section says
            let objective = if *phase == 1 {
                ObjectiveConfig {
                    regularizer: Regularizer::None,
                    ..cfg.objective.clone()
                }
            } else {
                cfg.objective.clone()
            };
            let outcome = train_phase(&cfg.model, &corpus, &objective, &cfg.trainer, &spec, &mut |row| {
                say(out, row.to_line())
            })?;
            say(
                out,
                format!(
                    "averaged checkpoint {} (valid nll {:.6})",
                    outcome.averaged.display(),
                    outcome.averaged_valid_nll
                ),
            );
        }
        Command::Eval { mode, phase, init } => {
            if let Some(m) = mode {
                cfg.eval.mode = *m;
            }
            let phase = phase.unwrap_or(if cfg.objective.active() { 2 } else { 1 });
            let ckpt = init.clone().unwrap_or_else(|| averaged_path(&run_dir(&cfg, phase), phase));
            if !ckpt.exists() {
                return Err(Error::Eval(format!(
                    "no checkpoint at {}; run `zeroshot train --phase {phase}` first",
                    ckpt.display()
                )));
            }
            let corpus = load_corpus(&cfg)?;
            let params = load_init(&cfg.model, &ckpt)?;
            let translator = ModelTranslator {
                cfg: &cfg.model,
                params: &params,
                beam: cfg.eval.beam,
            };
            let scores = evaluate_matrix(&translator, &corpus.eval, &corpus.topology, &cfg.eval.options())?;
            let report = EvalReport {
                meta: ReportMeta {
                    label: cfg.label(phase),
                    config_digest: cfg.digest(),
                    topology_digest: cfg.topology_digest(),
                    topology: corpus.topology.describe(),
                    mode: cfg.eval.mode,
                    lang_embedding: lang_embedding(&cfg).into(),
                },
                scores,
            };
            let dir = cli.out.clone().unwrap_or_else(|| cfg.paths.report_dir.clone());
            let label = report.meta.label.clone();
            let tsv = dir.join(format!("{label}.tsv"));
            write_file(&tsv, &report.to_tsv())?;
            let table = report.to_table();
            write_file(&dir.join(format!("{label}.txt")), &table)?;
            say(out, table);
            say(out, format!("wrote {}", tsv.display()));
        }
        Command::Report { files } => {
            let reports = files
                .iter()
                .map(|f| EvalReport::from_tsv(&std::fs::read_to_string(f).at(f)?))
                .collect::<Result<Vec<_>>>()?;
            let (tsv, table) = merge_reports(&reports)?;
            let dir = cli.out.clone().unwrap_or_else(|| cfg.paths.report_dir.clone());
            write_file(&dir.join("comparison.tsv"), &tsv)?;
            write_file(&dir.join("comparison.txt"), &table)?;
            say(out, table);
        }
    }
    Ok(())
}
