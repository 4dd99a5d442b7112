use std::path::Path;

use zeroshot::corpus::{build_corpus, make_language_specs, Corpus, CorpusConfig};
use zeroshot::model::{read_checkpoint, ModelConfig};
use zeroshot::objectives::{ObjectiveConfig, Regularizer};
use zeroshot::topology::LanguageTopology;
use zeroshot::trainer::{train_phase, Init, PhaseOutcome, PhaseSpec, TrainerConfig};

fn corpus(n_train_per_pair: usize, base_vocab_size: usize) -> Corpus {
    let topo = LanguageTopology::star(3).unwrap();
    let cfg = CorpusConfig {
        base_vocab_size,
        n_train_per_pair,
        n_valid_per_direction: 4,
        n_eval_per_direction: 4,
        ..CorpusConfig::default()
    };
    let specs = make_language_specs(3, &cfg).unwrap();
    build_corpus(&topo, &specs, &cfg).unwrap()
}

fn small_model(vocab: usize) -> ModelConfig {
    ModelConfig {
        n_languages: 3,
        vocab_size: 3 * vocab + 3,
        d_model: 16,
        d_inner: 32,
        n_heads: 2,
        ..ModelConfig::default()
    }
}

fn run(
    cfg: &ModelConfig,
    corpus: &Corpus,
    objective: &ObjectiveConfig,
    tcfg: &TrainerConfig,
    phase: u8,
    init: Init,
    dir: &Path,
) -> PhaseOutcome {
    let spec = PhaseSpec {
        phase,
        init,
        out_dir: dir,
        config_digest: "test",
    };
    train_phase(cfg, corpus, objective, tcfg, &spec, &mut |_| {}).unwrap()
}

#[test]
fn overfits_a_tiny_corpus() {
    // 8 examples per pair in both directions over the 4 supervised directions of STAR(3)
    let c = corpus(8, 16);
    assert_eq!(c.train.len(), 32);
    let cfg = ModelConfig {
        n_languages: 3,
        vocab_size: 3 * 16 + 3,
        dropout_residual: 0.0,
        dropout_word: 0.0,
        ..ModelConfig::default()
    };
    let tcfg = TrainerConfig {
        steps_phase1: 500,
        batch_size: 32,
        base_lr: 1.0,
        warmup_steps: 100,
        checkpoint_every: 50,
        ..TrainerConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let mut last = f32::INFINITY;
    let spec = PhaseSpec {
        phase: 1,
        init: Init::Fresh,
        out_dir: dir.path(),
        config_digest: "test",
    };
    train_phase(&cfg, &c, &ObjectiveConfig::default(), &tcfg, &spec, &mut |row| last = row.train.nll).unwrap();
    assert!(last < 0.05, "training nll {last}");
}

#[test]
fn same_seed_same_checkpoint() {
    let c = corpus(20, 16);
    let cfg = small_model(16);
    let tcfg = TrainerConfig {
        steps_phase1: 20,
        checkpoint_every: 10,
        batch_size: 8,
        ..TrainerConfig::default()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let obj = ObjectiveConfig::default();
    let ra = run(&cfg, &c, &obj, &tcfg, 1, Init::Fresh, a.path());
    let rb = run(&cfg, &c, &obj, &tcfg, 1, Init::Fresh, b.path());
    assert_eq!(std::fs::read(&ra.averaged).unwrap(), std::fs::read(&rb.averaged).unwrap());
    assert_eq!(std::fs::read(&ra.log).unwrap(), std::fs::read(&rb.log).unwrap());

    let other = TrainerConfig { seed: 2, ..tcfg };
    let rc = run(&cfg, &c, &obj, &other, 1, Init::Fresh, tempfile::tempdir().unwrap().path());
    assert_ne!(ra.params, rc.params);
}

#[test]
fn zero_alpha_matches_plain_training_bitwise() {
    let c = corpus(20, 16);
    let cfg = small_model(16);
    let tcfg = TrainerConfig {
        steps_phase1: 10,
        steps_phase2: 10,
        checkpoint_every: 5,
        batch_size: 8,
        ..TrainerConfig::default()
    };
    let base = tempfile::tempdir().unwrap();
    let p1 = run(&cfg, &c, &ObjectiveConfig::default(), &tcfg, 1, Init::Fresh, base.path());
    let init = || Init::Checkpoint(p1.averaged.clone());
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let plain = run(&cfg, &c, &ObjectiveConfig::default().with_alpha(0.7), &tcfg, 2, init(), a.path());
    let zero = run(
        &cfg,
        &c,
        &ObjectiveConfig::new(Regularizer::MseDecoder).with_alpha(0.0),
        &tcfg,
        2,
        init(),
        b.path(),
    );
    for (name, t) in plain.params.iter() {
        assert_eq!(t.data(), zero.params.get(name).unwrap().data(), "{name}");
    }
    let (ha, _) = read_checkpoint(&plain.averaged).unwrap();
    let (hb, _) = read_checkpoint(&zero.averaged).unwrap();
    assert_eq!(ha, hb);
}

#[test]
fn phase_two_needs_a_checkpoint_and_resets_schedule() {
    let c = corpus(20, 16);
    let cfg = small_model(16);
    let tcfg = TrainerConfig {
        steps_phase1: 6,
        steps_phase2: 6,
        checkpoint_every: 3,
        batch_size: 4,
        ..TrainerConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let spec = PhaseSpec {
        phase: 2,
        init: Init::Fresh,
        out_dir: dir.path(),
        config_digest: "test",
    };
    let obj = ObjectiveConfig::new(Regularizer::MseAttention);
    let err = train_phase(&cfg, &c, &obj, &tcfg, &spec, &mut |_| {}).unwrap_err();
    assert!(err.to_string().contains("--init"), "{err}");

    let p1 = run(&cfg, &c, &ObjectiveConfig::default(), &tcfg, 1, Init::Fresh, dir.path());
    let mut lrs1 = Vec::new();
    let mut lrs2 = Vec::new();
    let spec1 = PhaseSpec {
        phase: 1,
        init: Init::Fresh,
        out_dir: dir.path(),
        config_digest: "test",
    };
    train_phase(&cfg, &c, &ObjectiveConfig::default(), &tcfg, &spec1, &mut |r| lrs1.push(r.lr)).unwrap();
    let spec2 = PhaseSpec {
        phase: 2,
        init: Init::Checkpoint(p1.averaged.clone()),
        out_dir: dir.path(),
        config_digest: "test",
    };
    train_phase(&cfg, &c, &obj, &tcfg, &spec2, &mut |r| lrs2.push(r.lr)).unwrap();
    assert_eq!(lrs1, lrs2);
    let log = std::fs::read_to_string(dir.path().join("phase2.log")).unwrap();
    assert!(log.contains("mse_attention"));
}

#[test]
fn pooled_encoders_train_with_every_regularizer() {
    let c = corpus(20, 16);
    let tcfg = TrainerConfig {
        steps_phase1: 4,
        steps_phase2: 4,
        checkpoint_every: 2,
        batch_size: 4,
        ..TrainerConfig::default()
    };
    for variant in [
        zeroshot::model::EncoderVariant::MeanPool,
        zeroshot::model::EncoderVariant::AttnPool,
    ] {
        let cfg = ModelConfig {
            encoder_variant: variant,
            n_pooled_states: 3,
            ..small_model(16)
        };
        let dir = tempfile::tempdir().unwrap();
        let p1 = run(&cfg, &c, &ObjectiveConfig::default(), &tcfg, 1, Init::Fresh, dir.path());
        for reg in [
            Regularizer::MseEncoder,
            Regularizer::MseAttention,
            Regularizer::MseDecoder,
            Regularizer::KlSoftmax,
        ] {
            let out = run(
                &cfg,
                &c,
                &ObjectiveConfig::new(reg),
                &tcfg,
                2,
                Init::Checkpoint(p1.averaged.clone()),
                dir.path(),
            );
            assert!(out.averaged_valid_nll.is_finite());
        }
    }
}
