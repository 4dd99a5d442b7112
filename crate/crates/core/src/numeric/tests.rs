use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Central-difference gradient of `f` with respect to each input, compared
/// elementwise against the recorded analytic gradient.
fn check_grads(inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let loss = f(&mut g, &vars);
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars.iter().map(|v| g.grad(*v).unwrap().to_vec()).collect();

    let eval = |ins: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let l = f(&mut g, &vars);
        g.item(l)
    };
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (ti, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let mut plus = inputs.clone();
            plus[ti].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[ti].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[ti][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

#[test]
fn matmul_examples() {
    let mut g = Graph::<f64>::new();
    let i = g.constant(Tensor::identity(2));
    let a = g.constant(Tensor::from_rows(&[&[1.5, -2.0], &[3.0, 0.5]]));
    let ia = g.matmul(i, a).unwrap();
    assert_eq!(g.value(ia), g.value(a));

    let x = g.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let y = g.constant(Tensor::from_rows(&[&[5.0], &[6.0]]));
    let xy = g.matmul(x, y).unwrap();
    assert_eq!(g.shape(xy), &[2, 1]);
    assert_eq!(g.value(xy), &[17.0, 39.0]);

    let p = g.constant(Tensor::zeros(&[2, 3]));
    let q = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(p, q).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3] and [2, 3]"), "{msg}");
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(&[4], vec![0.0; 4]).unwrap());
    let s = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(s), &[0.25; 4]);

    let x = g.constant(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
    let s = g.softmax(x, 0).unwrap();
    for (v, e) in g.value(s).iter().zip([0.0900, 0.2447, 0.6652]) {
        assert!((v - e).abs() < 1e-4);
    }

    let x = g.constant(Tensor::new(&[2], vec![1000.0, 1000.0]).unwrap());
    let s = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(s), &[0.5, 0.5]);

    assert!(matches!(g.softmax(x, 1), Err(TensorError::InvalidAxis { .. })));
}

#[test]
fn softmax_along_inner_axis() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_fn(&[2, 3, 4], |i| (i as f64 * 0.37).sin() * 5.0));
    let s = g.softmax(x, 1).unwrap();
    let v = g.value(s);
    for o in 0..2 {
        for i in 0..4 {
            let total: f64 = (0..3).map(|a| v[(o * 3 + a) * 4 + i]).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn masked_softmax_zeroes_masked_entries() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::new(&[2, 3], vec![5.0, 1.0, 2.0, 0.0, 0.0, 0.0]).unwrap());
    let s = g
        .masked_softmax(x, &[false, true, true, true, false, true])
        .unwrap();
    let v = g.value(s);
    assert_eq!(v[0], 0.0);
    assert_eq!(v[4], 0.0);
    assert_eq!(v[3], 0.5);
    assert!(matches!(
        g.masked_softmax(x, &[false, false, false, true, true, true]),
        Err(TensorError::AllMasked)
    ));
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::<f64>::new();
    let gain = g.constant(Tensor::full(&[3], 1.0));
    let bias = g.constant(Tensor::zeros(&[3]));
    let x = g.constant(Tensor::new(&[1, 3], vec![5.0; 3]).unwrap());
    let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
    assert_eq!(g.value(y), &[0.0; 3]);

    let gain2 = g.constant(Tensor::full(&[2], 1.0));
    let bias2 = g.constant(Tensor::zeros(&[2]));
    let x = g.constant(Tensor::new(&[1, 2], vec![1.0, 3.0]).unwrap());
    let y = g.layer_norm(x, gain2, bias2, 1e-5).unwrap();
    assert!((g.value(y)[0] + 1.0).abs() < 1e-5);
    assert!((g.value(y)[1] - 1.0).abs() < 1e-5);

    let base = Tensor::from_fn(&[2, 3], |i| (i as f64).cos());
    let shifted = Tensor::from_fn(&[2, 3], |i| (i as f64).cos() + 7.25);
    let a = g.constant(base);
    let b = g.constant(shifted);
    let ya = g.layer_norm(a, gain, bias, 1e-5).unwrap();
    let yb = g.layer_norm(b, gain, bias, 1e-5).unwrap();
    for (p, q) in g.value(ya).iter().zip(g.value(yb)) {
        assert!((p - q).abs() < 1e-9);
    }
}

#[test]
fn mse_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_rows(&[&[0.3, -1.0], &[2.0, 4.0]]));
    let z = g.mse(x, x, Reduction::Mean).unwrap();
    assert_eq!(g.item(z), 0.0);

    let a = g.constant(Tensor::new(&[2], vec![0.0, 0.0]).unwrap());
    let b = g.constant(Tensor::new(&[2], vec![1.0, 1.0]).unwrap());
    let m = g.mse(a, b, Reduction::Mean).unwrap();
    assert_eq!(g.item(m), 1.0);
    let s = g.mse(a, b, Reduction::Sum).unwrap();
    assert_eq!(g.item(s), 2.0);
    let ab = g.mse(a, b, Reduction::Mean).unwrap();
    let ba = g.mse(b, a, Reduction::Mean).unwrap();
    assert_eq!(g.item(ab), g.item(ba));

    let c = g.constant(Tensor::zeros(&[3]));
    assert!(matches!(g.mse(a, c, Reduction::Mean), Err(TensorError::Shape { .. })));
}

#[test]
fn mse_rows_ignores_masked_rows() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::from_rows(&[&[1.0, 1.0], &[9.0, 9.0]]));
    let b = g.constant(Tensor::from_rows(&[&[0.0, 0.0], &[0.0, 0.0]]));
    let m = g.mse_rows(a, b, Some(&[true, false]), Reduction::Mean).unwrap();
    assert_eq!(g.item(m), 1.0);
    assert!(g.mse_rows(a, b, Some(&[false, false]), Reduction::Mean).is_err());
}

#[test]
fn kl_examples() {
    let mut g = Graph::<f64>::new();
    let p = g.constant(Tensor::new(&[2], vec![0.5, 0.5]).unwrap());
    let q = g.constant(Tensor::new(&[2], vec![0.25, 0.75]).unwrap());
    let pp = g.kl_div(p, p).unwrap();
    assert_eq!(g.item(pp), 0.0);
    let pq = g.kl_div(p, q).unwrap();
    let expect = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
    assert!((g.item(pq) - expect).abs() < 1e-12);
    assert!((g.item(pq) - 0.1438).abs() < 1e-4);

    let zero_q = g.constant(Tensor::new(&[2], vec![1.0, 0.0]).unwrap());
    let finite = g.kl_div(p, zero_q).unwrap();
    assert!(g.item(finite).is_finite());

    let bad = g.constant(Tensor::new(&[2], vec![0.5, 0.6]).unwrap());
    assert!(matches!(g.kl_div(bad, p), Err(TensorError::NotADistribution { .. })));
}

#[test]
fn backward_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.param(&Tensor::scalar(3.0));
    let sq = g.mul(x, x).unwrap();
    g.backward(sq).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[6.0]);
    assert!(matches!(g.backward(sq), Err(TensorError::BackwardTwice)));

    let mut g = Graph::<f64>::new();
    let x = g.param(&Tensor::scalar(3.0));
    let c = g.constant(Tensor::scalar(2.0));
    let y = g.scale(c, 4.0);
    let _unused = g.mul(x, x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.0]);

    let mut g = Graph::<f64>::new();
    let v = g.param(&Tensor::zeros(&[2]));
    assert!(matches!(g.backward(v), Err(TensorError::NonScalarBackward(_))));
}

#[test]
fn detached_tensor_stops_adjoints() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = rand_tensor(&mut rng, &[3, 3]);
    let x = rand_tensor(&mut rng, &[2, 3]);
    let mut g = Graph::<f64>::new();
    let wv = g.param(&w);
    let xv = g.param(&x);
    let h = g.matmul(xv, wv).unwrap();
    let hd = g.detach(h);
    let out = g.mul(hd, hd).unwrap();
    let direct = g.add(out, h).unwrap();
    let loss = g.sum(direct);
    g.backward(loss).unwrap();
    // only the non-detached `h` branch contributes: dloss/dh = 1
    let gx = g.grad(xv).unwrap();
    for r in 0..2 {
        for c in 0..3 {
            let expect: f64 = (0..3).map(|j| w.data()[c * 3 + j]).sum();
            assert!((gx[r * 3 + c] - expect).abs() < 1e-12);
        }
    }
    assert!(g.grad(hd).is_none());
}

#[test]
fn fd_matmul_and_heads() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ins = vec![
        rand_tensor(&mut rng, &[6, 4]),
        rand_tensor(&mut rng, &[4, 4]),
        rand_tensor(&mut rng, &[5, 4]),
    ];
    let err = check_grads(ins, |g, v| {
        let q = g.matmul(v[0], v[1]).unwrap();
        let k = g.split_heads(q, 2, 2).unwrap();
        let kk = g.matmul_nt(k, k).unwrap();
        let s = g.softmax(kk, 2).unwrap();
        let ctx = g.matmul(s, k).unwrap();
        let m = g.merge_heads(ctx, 2).unwrap();
        let r = g.reshape(m, &[24]).unwrap();
        let sq = g.mul(r, r).unwrap();
        let t = g.matmul_nt(v[2], v[1]).unwrap();
        let t2 = g.relu(t);
        let a = g.sum(sq);
        let b = g.sum(t2);
        g.add(a, b).unwrap()
    });
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn fd_layer_norm_gather_and_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ins = vec![
        rand_tensor(&mut rng, &[5, 4]),
        rand_tensor(&mut rng, &[4]),
        rand_tensor(&mut rng, &[4]),
        rand_tensor(&mut rng, &[3, 4]),
    ];
    let err = check_grads(ins, |g, v| {
        let e = g.gather(v[0], &[1, 3, 3]).unwrap();
        let y = g.layer_norm(e, v[1], v[2], 1e-5).unwrap();
        let y = g.add_row(y, v[2]).unwrap();
        let ce = g.cross_entropy(y, &[0, 2, 1], Some(&[true, false, true])).unwrap();
        let p = g.softmax(y, 1).unwrap();
        let q = g.softmax(v[3], 1).unwrap();
        let kl = g.kl_div_rows(p, q, Some(&[true, true, false])).unwrap();
        let m = g.mse_rows(y, v[3], Some(&[false, true, true]), Reduction::Mean).unwrap();
        let s = g.add(ce, kl).unwrap();
        let s = g.add(s, m).unwrap();
        g.scale(s, 1.5)
    });
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn fd_masked_softmax_and_sub() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ins = vec![rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[3, 4])];
    let keep: Vec<bool> = (0..12).map(|i| i % 4 != 3).collect();
    let err = check_grads(ins, move |g, v| {
        let d = g.sub(v[0], v[1]).unwrap();
        let s = g.masked_softmax(d, &keep).unwrap();
        let w = g.mul(s, v[1]).unwrap();
        let m = g.mean(w);
        let s2 = g.mse(v[0], v[1], Reduction::Sum).unwrap();
        g.add(m, s2).unwrap()
    });
    assert!(err < 1e-4, "relative error {err}");
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(xs in prop::collection::vec(-80.0f32..80.0, 1..40)) {
            let mut g = Graph::<f32>::new();
            let n = xs.len();
            let x = g.constant(Tensor::new(&[n], xs).unwrap());
            let s = g.softmax(x, 0).unwrap();
            let total: f32 = g.value(s).iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
            prop_assert!(g.value(s).iter().all(|&p| p >= 0.0));
        }

        #[test]
        fn divergences_nonnegative(a in prop::collection::vec(-5.0f64..5.0, 6),
                                   b in prop::collection::vec(-5.0f64..5.0, 6)) {
            let mut g = Graph::<f64>::new();
            let x = g.constant(Tensor::new(&[2, 3], a).unwrap());
            let y = g.constant(Tensor::new(&[2, 3], b).unwrap());
            let m = g.mse(x, y, Reduction::Mean).unwrap();
            prop_assert!(g.item(m) >= 0.0);
            let p = g.softmax(x, 1).unwrap();
            let q = g.softmax(y, 1).unwrap();
            let kl = g.kl_div(p, q).unwrap();
            prop_assert!(g.item(kl) >= -1e-12);
            let self_kl = g.kl_div(p, p).unwrap();
            prop_assert_eq!(g.item(self_kl), 0.0);
        }
    }
}
