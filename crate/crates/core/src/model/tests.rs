use super::*;
use crate::numeric::Reduction;

fn tiny(variant: EncoderVariant) -> ModelConfig {
    ModelConfig {
        n_languages: 2,
        vocab_size: 2 * 8 + 3,
        d_model: 8,
        d_inner: 16,
        n_heads: 2,
        encoder_variant: variant,
        n_pooled_states: 3,
        ..ModelConfig::default()
    }
}

fn batch(seqs: &[&[usize]], lang: usize, cfg: &ModelConfig) -> SeqBatch {
    SeqBatch::new(seqs, &vec![lang; seqs.len()], cfg.pad()).unwrap()
}

fn encode_values(cfg: &ModelConfig, params: &Parameters, seqs: &[&[usize]]) -> (Vec<f32>, Vec<usize>) {
    let mut g = Graph::new();
    let p = Bound::constants(&mut g, params);
    let enc = Net::eval(cfg).encode(&mut g, &p, &batch(seqs, 0, cfg)).unwrap();
    (g.value(enc.states).to_vec(), g.shape(enc.states).to_vec())
}

#[test]
fn language_embedding_is_additive() {
    let cfg = tiny(EncoderVariant::Baseline);
    let params = Parameters::init(&cfg, 3).unwrap();
    let mut g = Graph::new();
    let p = Bound::constants(&mut g, &params);
    let mut net = Net::eval(&cfg);
    let a = net.embed_inputs(&mut g, &p, &batch(&[&[1, 2, 3]], 0, &cfg), Side::Source).unwrap();
    let b = net.embed_inputs(&mut g, &p, &batch(&[&[1, 2, 3]], 1, &cfg), Side::Source).unwrap();
    assert_eq!(g.shape(a), &[3, 8]);
    for (ra, rb) in g.value(a).chunks(8).zip(g.value(b).chunks(8)) {
        assert_ne!(ra, rb);
    }

    let mut zeroed = params.clone();
    zeroed.get_mut("embed.lang").unwrap().data_mut().fill(0.0);
    let off = ModelConfig {
        source_lang_embedding: false,
        ..cfg.clone()
    };
    let mut g = Graph::new();
    let pz = Bound::constants(&mut g, &zeroed);
    let with_zero = Net::eval(&cfg)
        .embed_inputs(&mut g, &pz, &batch(&[&[1, 2, 3]], 1, &cfg), Side::Source)
        .unwrap();
    let without = Net::eval(&off)
        .embed_inputs(&mut g, &pz, &batch(&[&[1, 2, 3]], 1, &cfg), Side::Source)
        .unwrap();
    assert_eq!(g.value(with_zero), g.value(without));
    let bad = Net::eval(&cfg).embed_inputs(&mut g, &pz, &batch(&[&[99]], 0, &cfg), Side::Source);
    assert!(bad.is_err());
}

#[test]
fn attention_examples() {
    let mut g = Graph::<f32>::new();
    let q = g.constant(Tensor::new(&[1, 1, 2], vec![1.0, 0.5]).unwrap());
    let k = g.constant(Tensor::new(&[1, 3, 2], vec![0.3, 0.3, 0.3, 0.3, 0.3, 0.3]).unwrap());
    let v = g.constant(Tensor::new(&[1, 3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    let (ctx, w) = scaled_dot_attention(&mut g, q, k, v, &[true; 3]).unwrap();
    assert!((g.value(ctx)[0] - 3.0).abs() < 1e-6 && (g.value(ctx)[1] - 4.0).abs() < 1e-6);
    for x in g.value(w) {
        assert!((x - 1.0 / 3.0).abs() < 1e-6);
    }

    let (ctx, w) = scaled_dot_attention(&mut g, q, k, v, &[true, false, true]).unwrap();
    assert_eq!(g.value(w)[1], 0.0);
    assert!((g.value(ctx)[0] - 3.0).abs() < 1e-6);
    assert!(scaled_dot_attention(&mut g, q, k, v, &[false; 3]).is_err());

    // margin of 30 on the second key after scaling by 1/sqrt(2)
    let big = 30.0 * 2f32.sqrt();
    let q = g.constant(Tensor::new(&[1, 1, 2], vec![1.0, 0.0]).unwrap());
    let k = g.constant(Tensor::new(&[1, 3, 2], vec![0.0, 0.0, big, 0.0, 0.0, 0.0]).unwrap());
    let (ctx, _) = scaled_dot_attention(&mut g, q, k, v, &[true; 3]).unwrap();
    assert!((g.value(ctx)[0] - 3.0).abs() < 1e-4 && (g.value(ctx)[1] - 4.0).abs() < 1e-4);
}

#[test]
fn encoder_shapes() {
    let cfg = tiny(EncoderVariant::Baseline);
    let params = Parameters::init(&cfg, 1).unwrap();
    let (_, shape) = encode_values(&cfg, &params, &[&[1, 2, 3, 4, 5, 6, 7]]);
    assert_eq!(shape, vec![7, 8]);
    for variant in [EncoderVariant::MeanPool, EncoderVariant::AttnPool] {
        let cfg = tiny(variant);
        let params = Parameters::init(&cfg, 1).unwrap();
        for len in [3, 50] {
            let s: Vec<usize> = (0..len).map(|i| i % 8).collect();
            let (_, shape) = encode_values(&cfg, &params, &[&s]);
            assert_eq!(shape, vec![3, 8]);
        }
    }
    let mut g = Graph::new();
    let p = Bound::constants(&mut g, &params);
    assert!(SeqBatch::new(&[&[]], &[0], cfg.pad()).is_err());
    let long: Vec<usize> = vec![1; 65];
    assert!(Net::eval(&cfg).encode(&mut g, &p, &batch(&[&long], 0, &cfg)).is_err());
}

#[test]
fn padding_leaves_real_positions_unchanged() {
    for variant in [EncoderVariant::Baseline, EncoderVariant::MeanPool, EncoderVariant::AttnPool] {
        let cfg = tiny(variant);
        let params = Parameters::init(&cfg, 5).unwrap();
        let (alone, _) = encode_values(&cfg, &params, &[&[3, 1, 4, 1, 5]]);
        let (padded, shape) = encode_values(&cfg, &params, &[&[3, 1, 4, 1, 5], &[2, 6, 5, 3, 5, 7, 7, 1]]);
        let first = &padded[..alone.len()];
        assert_eq!(shape[0] % 2, 0);
        for (a, b) in alone.iter().zip(first) {
            assert!((a - b).abs() < 1e-6, "{variant:?}");
        }
    }
}

fn decode(cfg: &ModelConfig, params: &Parameters, src: &[usize], prefix: &[usize]) -> (Vec<Vec<f32>>, usize) {
    let mut g = Graph::new();
    let p = Bound::constants(&mut g, params);
    let mut net = Net::eval(cfg);
    let enc = net.encode(&mut g, &p, &batch(&[src], 0, cfg)).unwrap();
    let pass = net
        .decode_teacher_forced(&mut g, &p, &batch(&[prefix], 1, cfg), &enc)
        .unwrap();
    let mut out = vec![g.value(pass.logits).to_vec(), g.value(pass.dec_states).to_vec()];
    out.extend(pass.attn_contexts.iter().map(|&c| g.value(c).to_vec()));
    (out, pass.attn_contexts.len())
}

#[test]
fn decoder_is_causal_and_deterministic() {
    let cfg = tiny(EncoderVariant::Baseline);
    let params = Parameters::init(&cfg, 2).unwrap();
    let bos = cfg.bos();
    let (a, layers) = decode(&cfg, &params, &[1, 2, 3], &[bos, 9, 10, 11]);
    let (b, _) = decode(&cfg, &params, &[1, 2, 3], &[bos, 9, 12, 11]);
    assert_eq!(layers, 2);
    for (ta, tb) in a.iter().zip(&b) {
        let width = ta.len() / 4;
        // positions 0 and 1 precede the altered token
        assert_eq!(ta[..2 * width], tb[..2 * width]);
        assert_ne!(ta[2 * width..3 * width], tb[2 * width..3 * width]);
    }
    assert_eq!(a, decode(&cfg, &params, &[1, 2, 3], &[bos, 9, 10, 11]).0);

    let mut g = Graph::new();
    let p = Bound::constants(&mut g, &params);
    let mut net = Net::eval(&cfg);
    let enc = net.encode(&mut g, &p, &batch(&[&[1]], 0, &cfg)).unwrap();
    assert!(net
        .decode_teacher_forced(&mut g, &p, &batch(&[&[9, 10]], 1, &cfg), &enc)
        .is_err());
}

#[test]
fn context_capture_points() {
    let cfg = tiny(EncoderVariant::Baseline);
    let post = ModelConfig {
        context_capture: ContextCapture::PostProjection,
        ..cfg.clone()
    };
    let params = Parameters::init(&cfg, 2).unwrap();
    let prefix = [cfg.bos(), 9, 10];
    let (pre, _) = decode(&cfg, &params, &[1, 2], &prefix);
    let (after, _) = decode(&post, &params, &[1, 2], &prefix);
    assert_eq!(pre[..2], after[..2]);
    assert_ne!(pre[2], after[2]);
}

#[test]
fn parameter_layout_is_pure() {
    for variant in [EncoderVariant::Baseline, EncoderVariant::MeanPool, EncoderVariant::AttnPool] {
        let cfg = tiny(variant);
        let a = Parameters::init(&cfg, 1).unwrap();
        let b = Parameters::init(&cfg, 2).unwrap();
        let names_a: Vec<_> = a.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
        let names_b: Vec<_> = b.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
        assert_eq!(names_a, names_b);
        assert_eq!(names_a, Parameters::layout(&cfg));
        a.check_layout(&cfg).unwrap();
        assert_eq!(a, Parameters::init(&cfg, 1).unwrap());
    }
    let desk = ModelConfig::default();
    let p = Parameters::init(&desk, 1).unwrap();
    assert!(p.check_layout(&tiny(EncoderVariant::Baseline)).is_err());
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let cfg = tiny(EncoderVariant::AttnPool);
    let params = Parameters::init(&cfg, 8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ckpt");
    write_checkpoint(&path, &cfg.arch_digest(), 42, &params).unwrap();
    let (header, back) = read_checkpoint(&path).unwrap();
    assert_eq!(header.step, 42);
    assert_eq!(header.model_digest, cfg.arch_digest());
    assert_eq!(back, params);
    let src = [1, 2, 3];
    let prefix = [cfg.bos(), 9];
    assert_eq!(decode(&cfg, &params, &src, &prefix), decode(&cfg, &back, &src, &prefix));

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(read_checkpoint(&path).is_err());
}

#[test]
fn dropout_is_seeded() {
    let cfg = ModelConfig {
        dropout_residual: 0.3,
        dropout_word: 0.2,
        ..tiny(EncoderVariant::Baseline)
    };
    let params = Parameters::init(&cfg, 2).unwrap();
    let run = |seed: u64| {
        let mut g = Graph::new();
        let p = Bound::params(&mut g, &params);
        let mut net = Net::train(&cfg, Dropout::from_seed(seed, &[1], 0.3, 0.2));
        let enc = net.encode(&mut g, &p, &batch(&[&[1, 2, 3, 4]], 0, &cfg)).unwrap();
        g.value(enc.states).to_vec()
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
}

#[test]
fn mean_pool_examples() {
    let cfg = tiny(EncoderVariant::MeanPool);
    let params = Parameters::init(&cfg, 4).unwrap();
    let (h, n) = (8, 3);
    let row: Vec<f32> = (0..h).map(|i| i as f32 * 0.1 - 0.3).collect();
    let mut g = Graph::new();
    let p = Bound::constants(&mut g, &params);
    let hv = g.constant(Tensor::from_fn(&[5, h], |i| row[i % h]));
    let pooled = pooling::mean_pool(&mut g, &p, hv, 1, &[true; 5], n).unwrap();
    assert_eq!(g.shape(pooled), &[n, h]);
    let w = params.get("pool.proj").unwrap();
    for i in 0..n {
        for j in 0..h {
            let expect: f32 = (0..h).map(|k| row[k] * w.data()[k * n * h + i * h + j]).sum();
            assert!((g.value(pooled)[i * h + j] - expect).abs() < 1e-5);
        }
    }
    let hv = g.constant(Tensor::zeros(&[2, h]));
    assert!(pooling::mean_pool(&mut g, &p, hv, 1, &[false; 2], n).is_err());
}

#[test]
fn attention_pool_identical_values() {
    let cfg = tiny(EncoderVariant::AttnPool);
    let params = Parameters::init(&cfg, 4).unwrap();
    let h = 8;
    let mut g = Graph::new();
    let p = Bound::constants(&mut g, &params);
    let hv = g.constant(Tensor::from_fn(&[4, h], |i| (i % h) as f32 * 0.2));
    let net = Net::eval(&cfg);
    let (out, w) = pooling::attention_pool(&net, &mut g, &p, hv, 1, &[true; 4], 3).unwrap();
    let rows: Vec<&[f32]> = g.value(out).chunks(h).collect();
    for r in &rows[1..] {
        for (a, b) in r.iter().zip(rows[0]) {
            assert!((a - b).abs() < 1e-6);
        }
    }
    for r in g.value(w).chunks(4) {
        assert!((r.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn pooling_gradients_reach_every_parameter() {
    for variant in [EncoderVariant::MeanPool, EncoderVariant::AttnPool] {
        let cfg = tiny(variant);
        let params = Parameters::init(&cfg, 6).unwrap();
        let mut g = Graph::new();
        let p = Bound::params(&mut g, &params);
        let enc = Net::eval(&cfg)
            .encode(&mut g, &p, &batch(&[&[1, 2, 3], &[4, 5]], 0, &cfg))
            .unwrap();
        let target = g.constant(Tensor::from_fn(&[6, 8], |i| (i as f32 * 0.37).sin()));
        let loss = g.mse(enc.states, target, Reduction::Mean).unwrap();
        g.backward(loss).unwrap();
        let grads = p.gradients(&g);
        for (name, t) in grads.iter().filter(|(n, _)| n.starts_with("pool.")) {
            assert!(t.data().iter().any(|&x| x != 0.0), "{variant:?} {name}");
        }
    }
}
