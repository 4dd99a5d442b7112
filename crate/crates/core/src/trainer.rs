//! Two-phase training: plain multilingual NLL, then continuation from the
//! averaged phase-1 checkpoint with the regularizer switched on and a fresh
//! learning-rate schedule.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, ParallelExample};
use crate::error::{Error, IoContext, Result};
use crate::model::{
    is_decoder_param, read_checkpoint, word_dropout_scales, write_checkpoint, Bound, Dropout, ModelConfig, Net,
    Parameters,
};
use crate::numeric::{Graph, Tensor};
use crate::objectives::{combined_loss, DecoderIsolation, LossBreakdown, ObjectiveConfig, PairBatch};
use crate::seed;
use crate::topology::LangId;

const STREAM_BATCH: u64 = 21;
const STREAM_DROPOUT: u64 = 22;
const STREAM_WORD_DROPOUT: u64 = 23;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    /// schedule multiplier; 1.0 suits d_model 64 with 400 warmup steps
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub steps_phase1: u64,
    pub steps_phase2: u64,
    pub batch_size: usize,
    pub checkpoint_every: u64,
    pub k_average: usize,
    /// shrink `k` until the average is no worse on validation than its
    /// worst member
    pub average_guard: bool,
    pub seed: u64,
    /// global gradient-norm clip; 0 disables clipping
    pub clip_norm: f64,
    pub valid_batch_size: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            base_lr: 1.0,
            warmup_steps: 400,
            steps_phase1: 3000,
            steps_phase2: 2000,
            batch_size: 32,
            checkpoint_every: 250,
            k_average: 5,
            average_guard: true,
            seed: 1,
            clip_norm: 0.0,
            valid_batch_size: 64,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("trainer.{m}")));
        if self.warmup_steps < 1 {
            return bad("warmup_steps must be at least 1");
        }
        if self.batch_size == 0 || self.valid_batch_size == 0 {
            return bad("batch sizes must be positive");
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be positive");
        }
        if self.k_average == 0 {
            return bad("k_average must be positive");
        }
        if !(self.base_lr > 0.0) {
            return bad("base_lr must be positive");
        }
        if !(self.clip_norm >= 0.0) {
            return bad("clip_norm must be nonnegative");
        }
        Ok(())
    }

    pub fn steps(&self, phase: u8) -> u64 {
        if phase == 1 {
            self.steps_phase1
        } else {
            self.steps_phase2
        }
    }
}

/// Inverse-square-root schedule with linear warmup.
pub fn lr_at(step: u64, d_model: usize, base_lr: f64, warmup: u64) -> Result<f64> {
    if step == 0 {
        return Err(Error::Training("learning-rate schedule starts at step 1".into()));
    }
    let s = step as f64;
    let w = warmup as f64;
    Ok(base_lr * (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5)))
}

/// Zeroes whole rows of `embedded` with probability `p` and scales the
/// survivors by `1 / (1 - p)`. Deterministic in `(seed, step)`.
pub fn apply_word_dropout(embedded: &Tensor, p: f64, seed: u64, step: u64) -> Tensor {
    if p == 0.0 {
        return embedded.clone();
    }
    let mut rng = seed::rng(seed, &[STREAM_WORD_DROPOUT, step]);
    let scales = word_dropout_scales(embedded.rows(), p as f32, &mut rng);
    let c = embedded.last_dim();
    let mut out = embedded.clone();
    for (row, s) in out.data_mut().chunks_mut(c).zip(scales) {
        row.iter_mut().for_each(|x| *x *= s);
    }
    out
}

/// First-order adaptive-moment optimizer.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    t: i32,
    m: Parameters,
    v: Parameters,
}

fn zeros_like(params: &Parameters) -> Parameters {
    Parameters::from_map(
        params
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
            .collect(),
    )
}

impl Adam {
    pub fn new(params: &Parameters) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            t: 0,
            m: zeros_like(params),
            v: zeros_like(params),
        }
    }

    pub fn step(&mut self, params: &mut Parameters, grads: &Parameters, lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let lr = lr as f32;
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).expect("gradient for every parameter").data();
            let m = self.m.get_mut(name).unwrap().data_mut();
            let v = self.v.get_mut(name).unwrap().data_mut();
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            }
            for ((x, &mi), &vi) in p.data_mut().iter_mut().zip(m.iter()).zip(v.iter()) {
                *x -= lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
            }
        }
    }
}

fn clip_global_norm(grads: &mut Parameters, max_norm: f64) {
    let norm = grads
        .iter()
        .flat_map(|(_, t)| t.data().iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for (_, t) in grads.iter_mut() {
            t.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointRecord {
    pub step: u64,
    pub valid_loss: f64,
    pub path: PathBuf,
}

/// Ascending validation loss, earlier step first on ties.
pub fn by_validation(a: &CheckpointRecord, b: &CheckpointRecord) -> Ordering {
    a.valid_loss
        .partial_cmp(&b.valid_loss)
        .unwrap_or(Ordering::Equal)
        .then(a.step.cmp(&b.step))
}

/// Elementwise mean of parameter sets with identical layouts.
pub fn average_parameters(sets: &[Parameters]) -> Result<Parameters> {
    let first = sets
        .first()
        .ok_or_else(|| Error::Training("nothing to average".into()))?;
    let mut acc: BTreeMap<String, Vec<f64>> = first
        .iter()
        .map(|(n, t)| (n.clone(), vec![0.0; t.numel()]))
        .collect();
    for set in sets {
        if set.len() != first.len() {
            return Err(Error::Training("averaged checkpoints differ in layout".into()));
        }
        for (name, t) in set.iter() {
            let a = acc
                .get_mut(name)
                .filter(|a| a.len() == t.numel())
                .ok_or_else(|| Error::Training(format!("averaged checkpoints differ at {name}")))?;
            for (s, &x) in a.iter_mut().zip(t.data()) {
                *s += x as f64;
            }
        }
    }
    let k = sets.len() as f64;
    let tensors = first
        .iter()
        .map(|(n, t)| {
            let data = acc[n].iter().map(|s| (s / k) as f32).collect();
            (n.clone(), Tensor::new(t.shape(), data).expect("same shape"))
        })
        .collect();
    Ok(Parameters::from_map(tensors))
}

/// Mean of the `k` best checkpoints by validation loss (`k` is clipped to
/// the number of records).
pub fn average_checkpoints(records: &[CheckpointRecord], k: usize) -> Result<Parameters> {
    if records.is_empty() {
        return Err(Error::Training("no checkpoints to average".into()));
    }
    let mut sorted = records.to_vec();
    sorted.sort_by(by_validation);
    let sets = sorted
        .iter()
        .take(k.max(1))
        .map(|r| read_checkpoint(&r.path).map(|(_, p)| p))
        .collect::<Result<Vec<_>>>()?;
    average_parameters(&sets)
}

/// Averages the best `k` checkpoints. With `guard`, `k` shrinks until the
/// average scores no worse under `validate` than its worst member; `k = 1`
/// is always accepted. Each attempt is logged.
pub fn select_average(
    records: &[CheckpointRecord],
    k: usize,
    guard: bool,
    log: &mut String,
    mut validate: impl FnMut(&Parameters) -> Result<f64>,
) -> Result<(Parameters, f64)> {
    let mut sorted = records.to_vec();
    sorted.sort_by(by_validation);
    let mut k = k.min(sorted.len()).max(1);
    loop {
        let averaged = average_checkpoints(records, k)?;
        let valid = validate(&averaged)?;
        let members = &sorted[..k];
        let worst = members.iter().map(|r| r.valid_loss).fold(f64::MIN, f64::max);
        let within = valid <= worst;
        let accept = within || k == 1 || !guard;
        let steps: Vec<String> = members.iter().map(|r| r.step.to_string()).collect();
        writeln!(
            log,
            "# {}\tsteps\t{}\tvalid_nll\t{valid:.6}\tworst_member\t{worst:.6}\twithin_bound\t{within}",
            if accept { "averaged" } else { "rejected" },
            steps.join(","),
        )
        .unwrap();
        if accept {
            return Ok((averaged, valid));
        }
        k -= 1;
    }
}

/// Token-weighted NLL over `examples`, evaluated without dropout.
pub fn validation_nll(cfg: &ModelConfig, params: &Parameters, examples: &[ParallelExample], batch_size: usize) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Training("empty validation split".into()));
    }
    let mut total = 0.0f64;
    let mut tokens = 0usize;
    for chunk in examples.chunks(batch_size) {
        let refs: Vec<&ParallelExample> = chunk.iter().collect();
        let batch = PairBatch::new(&refs, cfg)?;
        let mut g = Graph::new();
        let p = Bound::constants(&mut g, params);
        let mut net = Net::eval(cfg);
        let loss = combined_loss(
            &mut g,
            &mut net,
            &p,
            &batch,
            &ObjectiveConfig::default(),
            DecoderIsolation::Detach,
        )?;
        let n = batch.n_tokens();
        total += g.item(loss.nll) as f64 * n as f64;
        tokens += n;
    }
    Ok(total / tokens as f64)
}

/// Draws a training batch: each element picks a supervised direction
/// uniformly, then an example of that direction uniformly.
pub struct BatchSampler<'c> {
    by_direction: Vec<((LangId, LangId), Vec<&'c ParallelExample>)>,
}

impl<'c> BatchSampler<'c> {
    pub fn new(corpus: &'c Corpus) -> Result<Self> {
        let mut map: BTreeMap<(LangId, LangId), Vec<&ParallelExample>> = BTreeMap::new();
        for ex in &corpus.train {
            map.entry(ex.direction()).or_default().push(ex);
        }
        let by_direction: Vec<_> = corpus
            .topology
            .supervised_directions()
            .into_iter()
            .map(|d| (d, map.remove(&d).unwrap_or_default()))
            .collect();
        if let Some((d, _)) = by_direction.iter().find(|(_, v)| v.is_empty()) {
            return Err(Error::Training(format!(
                "no training data for supervised direction {}-{}",
                d.0, d.1
            )));
        }
        if !map.is_empty() {
            return Err(Error::Training("training split contains unsupervised directions".into()));
        }
        Ok(Self { by_direction })
    }

    pub fn sample(&self, seed: u64, phase: u8, step: u64, n: usize) -> Vec<&'c ParallelExample> {
        let mut rng = seed::rng(seed, &[STREAM_BATCH, phase as u64, step]);
        (0..n)
            .map(|_| {
                let (_, exs) = &self.by_direction[rng.gen_range(0..self.by_direction.len())];
                exs[rng.gen_range(0..exs.len())]
            })
            .collect()
    }
}

/// Starting point of a phase.
#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    Fresh,
    Checkpoint(PathBuf),
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub lr: f64,
    pub train: LossBreakdown,
    pub valid_nll: f64,
}

impl LogRow {
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{:.6e}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.step, self.lr, self.train.nll, self.train.reg, self.train.total, self.valid_nll
        )
    }
}

#[derive(Clone, Debug)]
pub struct PhaseOutcome {
    pub records: Vec<CheckpointRecord>,
    pub averaged: PathBuf,
    pub averaged_valid_nll: f64,
    pub log: PathBuf,
    pub params: Parameters,
}

pub fn checkpoint_path(dir: &Path, phase: u8, step: u64) -> PathBuf {
    dir.join(format!("phase{phase}_step{step}.ckpt"))
}

pub fn averaged_path(dir: &Path, phase: u8) -> PathBuf {
    dir.join(format!("phase{phase}_avg.ckpt"))
}

pub fn log_path(dir: &Path, phase: u8) -> PathBuf {
    dir.join(format!("phase{phase}.log"))
}

/// Where a phase starts and where it writes.
#[derive(Clone, Debug)]
pub struct PhaseSpec<'a> {
    pub phase: u8,
    pub init: Init,
    pub out_dir: &'a Path,
    /// stamped into the log header
    pub config_digest: &'a str,
}

pub fn load_init(cfg: &ModelConfig, path: &Path) -> Result<Parameters> {
    let (header, params) = read_checkpoint(path)?;
    if header.model_digest != cfg.arch_digest() {
        return Err(Error::Checkpoint(format!(
            "{} was written for a different model architecture",
            path.display()
        )));
    }
    params.check_layout(cfg)?;
    Ok(params)
}

/// Checks that the regularizer leaves every decoder-parameter gradient
/// untouched on `batch`.
pub fn decoder_gradient_audit(
    cfg: &ModelConfig,
    params: &Parameters,
    batch: &PairBatch,
    objective: &ObjectiveConfig,
) -> Result<f32> {
    let grads = |obj: &ObjectiveConfig| -> Result<Parameters> {
        let mut g = Graph::new();
        let p = Bound::params(&mut g, params);
        let mut net = Net::eval(cfg);
        let loss = combined_loss(&mut g, &mut net, &p, batch, obj, DecoderIsolation::Detach)?;
        g.backward(loss.total)?;
        Ok(p.gradients(&g))
    };
    let full = grads(objective)?;
    let plain = grads(&ObjectiveConfig::default())?;
    let mut worst = 0.0f32;
    for (name, t) in full.iter().filter(|(n, _)| is_decoder_param(n)) {
        worst = worst.max(t.max_abs_diff(plain.get(name).unwrap()));
    }
    Ok(worst)
}

/// Runs one training phase, writing checkpoints, the averaged checkpoint and
/// a log into `spec.out_dir`. `observe` sees every log row as it is written.
pub fn train_phase(
    cfg: &ModelConfig,
    corpus: &Corpus,
    objective: &ObjectiveConfig,
    tcfg: &TrainerConfig,
    spec: &PhaseSpec<'_>,
    observe: &mut dyn FnMut(&LogRow),
) -> Result<PhaseOutcome> {
    cfg.validate()?;
    tcfg.validate()?;
    objective.validate(cfg)?;
    if corpus.vocab().size() != cfg.vocab_size || corpus.topology.n_languages() != cfg.n_languages {
        return Err(Error::Config(format!(
            "model.vocab_size / n_languages ({} / {}) do not match the corpus ({} / {})",
            cfg.vocab_size,
            cfg.n_languages,
            corpus.vocab().size(),
            corpus.topology.n_languages()
        )));
    }
    let phase = spec.phase;
    let mut params = match (&spec.init, phase) {
        (Init::Fresh, 2) => {
            return Err(Error::Training(
                "phase 2 continues from a phase-1 checkpoint; pass --init <checkpoint>".into(),
            ))
        }
        (Init::Fresh, _) => Parameters::init(cfg, tcfg.seed)?,
        (Init::Checkpoint(path), _) => load_init(cfg, path)?,
    };
    fs::create_dir_all(spec.out_dir).at(spec.out_dir)?;
    let sampler = BatchSampler::new(corpus)?;
    let audit_examples: Vec<&ParallelExample> = corpus.valid.iter().take(8).collect();
    let audit_batch = PairBatch::new(&audit_examples, cfg)?;
    let mut adam = Adam::new(&params);
    let digest = cfg.arch_digest();

    let mut log = String::new();
    writeln!(log, "# config_digest\t{}", spec.config_digest).unwrap();
    writeln!(log, "# phase\t{phase}\tregularizer\t{}\talpha\t{}", objective.regularizer.name(), objective.alpha).unwrap();
    writeln!(log, "step\tlr\tnll\treg\ttotal\tvalid_nll").unwrap();

    let steps = tcfg.steps(phase);
    let mut records = Vec::new();
    let mut acc = (0.0f64, 0.0f64, 0.0f64, 0u64);
    for step in 1..=steps {
        let examples = sampler.sample(tcfg.seed, phase, step, tcfg.batch_size);
        let batch = PairBatch::new(&examples, cfg)?;
        let mut g = Graph::new();
        let p = Bound::params(&mut g, &params);
        let dropout = Dropout::from_seed(
            tcfg.seed,
            &[STREAM_DROPOUT, phase as u64, step],
            cfg.dropout_residual,
            cfg.dropout_word,
        );
        let mut net = Net::train(cfg, dropout);
        let loss = combined_loss(&mut g, &mut net, &p, &batch, objective, DecoderIsolation::Detach)?;
        g.backward(loss.total)?;
        let b = loss.breakdown(&g);
        if !b.total.is_finite() {
            return Err(Error::Training(format!("loss is not finite at step {step}")));
        }
        acc = (acc.0 + b.nll as f64, acc.1 + b.reg as f64, acc.2 + b.total as f64, acc.3 + 1);
        let mut grads = p.gradients(&g);
        drop(g);
        if tcfg.clip_norm > 0.0 {
            clip_global_norm(&mut grads, tcfg.clip_norm);
        }
        let lr = lr_at(step, cfg.d_model, tcfg.base_lr, tcfg.warmup_steps)?;
        adam.step(&mut params, &grads, lr);

        if step % tcfg.checkpoint_every == 0 || step == steps {
            if objective.active() {
                let worst = decoder_gradient_audit(cfg, &params, &audit_batch, objective)?;
                if worst != 0.0 {
                    return Err(Error::Training(format!(
                        "regularizer leaked into decoder gradients at step {step} (max diff {worst})"
                    )));
                }
            }
            let valid_nll = validation_nll(cfg, &params, &corpus.valid, tcfg.valid_batch_size)?;
            let path = checkpoint_path(spec.out_dir, phase, step);
            write_checkpoint(&path, &digest, step, &params)?;
            let n = acc.3 as f64;
            let row = LogRow {
                step,
                lr,
                train: LossBreakdown {
                    nll: (acc.0 / n) as f32,
                    reg: (acc.1 / n) as f32,
                    total: (acc.2 / n) as f32,
                },
                valid_nll,
            };
            writeln!(log, "{}", row.to_line()).unwrap();
            observe(&row);
            acc = (0.0, 0.0, 0.0, 0);
            records.push(CheckpointRecord {
                step,
                valid_loss: valid_nll,
                path,
            });
        }
    }
    if records.is_empty() {
        return Err(Error::Training(format!("phase {phase} has no training steps")));
    }

    let (averaged, averaged_valid_nll) = select_average(&records, tcfg.k_average, tcfg.average_guard, &mut log, |p| {
        validation_nll(cfg, p, &corpus.valid, tcfg.valid_batch_size)
    })?;
    let averaged_path = averaged_path(spec.out_dir, phase);
    write_checkpoint(&averaged_path, &digest, steps, &averaged)?;
    let log_file = log_path(spec.out_dir, phase);
    fs::write(&log_file, log).at(&log_file)?;
    Ok(PhaseOutcome {
        records,
        averaged: averaged_path,
        averaged_valid_nll,
        log: log_file,
        params: averaged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_values() {
        let lr = lr_at(8192, 512, 2.0, 8192).unwrap();
        assert!((lr - 9.765_625e-4).abs() < 1e-9);
        let w = 400u64;
        let d = 64;
        let at = |s| lr_at(s, d, 2.0, w).unwrap();
        assert!((w as f64).powf(-0.5) - (w as f64) * (w as f64).powf(-1.5) == 0.0);
        for s in 1..w {
            assert!(at(s) < at(s + 1));
        }
        for s in w..w + 500 {
            assert!(at(s) > at(s + 1));
        }
        assert!(lr_at(0, d, 2.0, w).is_err());
    }

    #[test]
    fn word_dropout_rate() {
        let x = Tensor::full(&[100_000, 2], 1.0);
        let y = apply_word_dropout(&x, 0.1, 3, 7);
        let dropped = y.data().chunks(2).filter(|r| r[0] == 0.0).count() as f64 / 1e5;
        assert!((dropped - 0.1).abs() < 0.01, "{dropped}");
        for r in y.data().chunks(2) {
            assert_eq!(r[0], r[1]);
            assert!(r[0] == 0.0 || (r[0] - 1.0 / 0.9).abs() < 1e-6);
        }
        assert_eq!(apply_word_dropout(&x, 0.1, 3, 7), y);
        assert_eq!(apply_word_dropout(&x, 0.0, 3, 7), x);
        let z = apply_word_dropout(&Tensor::full(&[1000, 2], 1.0), 0.999, 3, 7);
        assert!(z.data().iter().filter(|&&v| v == 0.0).count() > 1900);
    }

    fn set(v: f32) -> Parameters {
        Parameters::from_map([("a".to_string(), Tensor::full(&[2, 2], v))].into_iter().collect())
    }

    #[test]
    fn averaging_identities() {
        let theta = Parameters::from_map(
            [("w".to_string(), Tensor::new(&[3], vec![0.5, -1.25, 3.0]).unwrap())]
                .into_iter()
                .collect(),
        );
        let neg = Parameters::from_map(
            [("w".to_string(), Tensor::new(&[3], vec![-0.5, 1.25, -3.0]).unwrap())]
                .into_iter()
                .collect(),
        );
        assert_eq!(average_parameters(&[theta.clone(), theta.clone(), theta.clone()]).unwrap(), theta);
        let zero = average_parameters(&[theta.clone(), neg]).unwrap();
        assert!(zero.get("w").unwrap().data().iter().all(|&x| x == 0.0));
        assert!(average_parameters(&[]).is_err());
        assert!(average_checkpoints(&[], 5).is_err());
    }

    #[test]
    fn best_checkpoints_selected() {
        let dir = tempfile::tempdir().unwrap();
        let mut records = Vec::new();
        for (step, (loss, v)) in [(3.0, 1.0), (1.0, 2.0), (1.0, 4.0), (2.0, 8.0)].into_iter().enumerate() {
            let path = dir.path().join(format!("{step}.ckpt"));
            write_checkpoint(&path, "d", step as u64, &set(v)).unwrap();
            records.push(CheckpointRecord {
                step: step as u64,
                valid_loss: loss,
                path,
            });
        }
        let best = average_checkpoints(&records, 1).unwrap();
        assert_eq!(best, set(2.0));
        let two = average_checkpoints(&records, 2).unwrap();
        assert_eq!(two, set(3.0));
        let all = average_checkpoints(&records, 10).unwrap();
        assert_eq!(all, set(15.0 / 4.0));
    }

    #[test]
    fn guarded_average_shrinks_until_within_bound() {
        let dir = tempfile::tempdir().unwrap();
        let mut records = Vec::new();
        // values 1, 2, 3, 10 with losses 0.1 .. 0.4; the "validator" reads the value
        for (step, v) in [1.0f32, 2.0, 3.0, 10.0].into_iter().enumerate() {
            let path = dir.path().join(format!("{step}.ckpt"));
            write_checkpoint(&path, "d", step as u64, &set(v)).unwrap();
            records.push(CheckpointRecord {
                step: step as u64,
                valid_loss: 0.1 * (step + 1) as f64,
                path,
            });
        }
        let score = |p: &Parameters| Ok(f64::from(p.get("a").unwrap().data()[0]) / 10.0);
        let mut log = String::new();
        // k=4 averages to 4 (0.4 <= 0.4 ok)
        let (p, v) = select_average(&records, 4, true, &mut log, score).unwrap();
        assert_eq!((p, v), (set(4.0), 0.4));
        // a validator that punishes averaging forces k down to 1
        let mut log = String::new();
        let strict = |p: &Parameters| Ok(if p == &set(1.0) { 0.1 } else { 9.0 });
        let (p, _) = select_average(&records, 4, true, &mut log, strict).unwrap();
        assert_eq!(p, set(1.0));
        assert_eq!(log.matches("# rejected").count(), 3);
        assert_eq!(log.lines().last().unwrap().split('\t').nth(2), Some("0"));
        // without the guard the first average is kept
        let mut log = String::new();
        let (p, _) = select_average(&records, 4, false, &mut log, strict).unwrap();
        assert_eq!(p, set(4.0));
        assert!(log.starts_with("# averaged"));
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut p = set(1.0);
        let grads = set(0.5);
        let mut adam = Adam::new(&p);
        adam.step(&mut p, &grads, 0.1);
        for &x in p.get("a").unwrap().data() {
            assert!((x - 0.9).abs() < 1e-6);
        }
    }
}
