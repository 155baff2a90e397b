use milsurv_core::gradcheck::small_head_config;
use milsurv_core::heads::{nystrom_attention, HeadConfig, HeadKind, MilHead};
use milsurv_core::{ParamStore, Rng, Tape, Tensor};

fn bag(m: usize, d: usize, rng: &mut Rng) -> Tensor<f64> {
    Tensor::new(m, d, (0..m * d).map(|_| rng.normal()).collect()).unwrap()
}

fn rel_close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * x.abs().max(y.abs()).max(1e-12) || (x - y).abs() < 1e-12)
}

/// Plain softmax(q·kᵀ)·v, row by row.
fn exact_attention(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>) -> Vec<f64> {
    let (n, dh) = (q.rows(), q.cols());
    let mut out = vec![0.0; n * v.cols()];
    for i in 0..n {
        let scores: Vec<f64> = (0..n)
            .map(|j| (0..dh).map(|c| q.get(i, c) * k.get(j, c)).sum())
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = w.iter().sum();
        for j in 0..n {
            for c in 0..v.cols() {
                out[i * v.cols() + c] += w[j] / total * v.get(j, c);
            }
        }
    }
    out
}

#[test]
fn pooling_heads_ignore_instance_order() {
    for kind in [HeadKind::Mean, HeadKind::Max, HeadKind::Abmil] {
        let mut rng = Rng::new(11, 0);
        let head = MilHead::<f64>::new(HeadConfig::new(kind, 32), &mut rng).unwrap();
        let x = bag(40, 32, &mut rng);
        let reference = head.predict(&x).unwrap();
        let mut order: Vec<usize> = (0..40).collect();
        for _ in 0..100 {
            rng.shuffle(&mut order);
            let got = head.predict(&x.select_rows(&order)).unwrap();
            assert!(rel_close(&reference, &got, 1e-5), "{kind}: {reference:?} vs {got:?}");
        }
    }
}

#[test]
fn transmil_is_finite_and_seed_deterministic_but_order_sensitive() {
    let config = small_head_config(HeadKind::TransMil);
    let a = MilHead::<f64>::new(config, &mut Rng::new(3, 0)).unwrap();
    let b = MilHead::<f64>::new(config, &mut Rng::new(3, 0)).unwrap();
    let x = bag(13, 16, &mut Rng::new(4, 0));
    let out = a.predict(&x).unwrap();
    assert!(out.iter().all(|v| v.is_finite()));
    assert_eq!(out, b.predict(&x).unwrap());
    let mut rev: Vec<usize> = (0..13).collect();
    rev.reverse();
    assert_ne!(out, a.predict(&x.select_rows(&rev)).unwrap());
}

#[test]
fn transmil_runs_at_default_widths_on_a_long_bag() {
    let head = MilHead::<f32>::new(HeadConfig::new(HeadKind::TransMil, 24), &mut Rng::new(8, 0)).unwrap();
    let mut rng = Rng::new(9, 0);
    // 300 instances pad to 324 tokens plus the class token, which exceeds
    // the 256 landmarks.
    let x = Tensor::new(300, 24, (0..300 * 24).map(|_| rng.normal() as f32).collect()).unwrap();
    let out = head.predict(&x).unwrap();
    assert_eq!(out.len(), 4);
    assert!(out.iter().all(|v| v.is_finite()));
}

/// Newton-Schulz iterations that take the full-kernel inverse to machine
/// precision for sequences of a few hundred tokens. The head default of six
/// leaves errors around 1e-2 on these inputs.
const CONVERGED_ITERATIONS: usize = 30;

#[test]
fn nystrom_with_full_landmarks_is_exact_attention() {
    let mut rng = Rng::new(21, 0);
    let store = ParamStore::<f64>::new();
    for (n, dh) in [(5, 4), (16, 8), (33, 16), (64, 64), (257, 64)] {
        for _ in 0..5 {
            let scale = 1.0 / (dh as f64).sqrt();
            let q = bag(n, dh, &mut rng).map(|x| x * scale);
            let k = bag(n, dh, &mut rng);
            let v = bag(n, dh, &mut rng);
            let expected = exact_attention(&q, &k, &v);
            let mut tape = Tape::new(&store);
            let (qv, kv, vv) = (tape.constant(q), tape.constant(k), tape.constant(v));
            let out = nystrom_attention(&mut tape, qv, kv, vv, n + 3, CONVERGED_ITERATIONS).unwrap();
            let got = tape.value(out).data();
            let err = got
                .iter()
                .zip(&expected)
                .map(|(g, e)| (g - e).abs() / e.abs().max(1.0))
                .fold(0.0, f64::max);
            assert!(err < 1e-4, "n={n} dh={dh}: {err:e}");
        }
    }
}

#[test]
fn abmil_attention_is_a_distribution() {
    let mut rng = Rng::new(6, 0);
    let head = MilHead::<f64>::new(HeadConfig::new(HeadKind::Abmil, 12), &mut rng).unwrap();
    for m in [1, 2, 17] {
        let x = bag(m, 12, &mut rng);
        let mut tape = head.tape();
        let xv = tape.constant_ref(&x);
        let trace = head.forward_traced(&mut tape, xv, false, &mut rng).unwrap();
        let w = tape.value(trace.attention.unwrap()).data();
        assert!(w.iter().all(|&a| a >= 0.0));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        if m == 1 {
            assert_eq!(w, &[1.0]);
        }
    }
}

#[test]
fn mean_of_identical_instances_equals_single_instance() {
    let mut rng = Rng::new(7, 0);
    let head = MilHead::<f64>::new(HeadConfig::new(HeadKind::Mean, 10), &mut rng).unwrap();
    let one = bag(1, 10, &mut rng);
    let many = one.select_rows(&[0; 9]);
    assert!(rel_close(&head.predict(&one).unwrap(), &head.predict(&many).unwrap(), 1e-12));
}

#[test]
fn max_of_a_dominating_instance() {
    let mut rng = Rng::new(8, 0);
    let head = MilHead::<f64>::new(HeadConfig::new(HeadKind::Max, 10), &mut rng).unwrap();
    // Search for a pair whose per-instance logits are ordered elementwise.
    for _ in 0..2000 {
        let pair = bag(2, 10, &mut rng);
        let a = head.predict(&pair.select_rows(&[0])).unwrap();
        let b = head.predict(&pair.select_rows(&[1])).unwrap();
        if a.iter().zip(&b).all(|(x, y)| x >= y) {
            assert_eq!(head.predict(&pair).unwrap(), a);
            return;
        }
    }
    panic!("no dominating pair found");
}

#[test]
fn evaluation_is_deterministic_and_training_uses_dropout() {
    let mut rng = Rng::new(10, 0);
    let head = MilHead::<f64>::new(HeadConfig::new(HeadKind::Mean, 10), &mut rng).unwrap();
    let x = bag(6, 10, &mut rng);
    assert_eq!(head.predict(&x).unwrap(), head.predict(&x).unwrap());
    let train_out = |seed| {
        let mut tape = head.tape();
        let xv = tape.constant_ref(&x);
        let l = head.forward(&mut tape, xv, true, &mut Rng::new(seed, 0)).unwrap();
        tape.value(l).data().to_vec()
    };
    assert_eq!(train_out(1), train_out(1));
    assert_ne!(train_out(1), train_out(2));
}

#[test]
fn wrong_width_and_foreign_tape_are_contract_errors() {
    let mut rng = Rng::new(12, 0);
    let head = MilHead::<f64>::new(HeadConfig::new(HeadKind::Mean, 10), &mut rng).unwrap();
    assert!(head.predict(&bag(3, 9, &mut rng)).is_err());
    let other = ParamStore::new();
    let mut tape = Tape::new(&other);
    let x = tape.constant(bag(3, 10, &mut rng));
    assert!(head.forward(&mut tape, x, false, &mut rng).is_err());
}

#[test]
fn counts_for_other_input_widths() {
    assert_eq!(HeadConfig::new(HeadKind::Mean, 768).parameter_count(), 395_780);
    assert_eq!(HeadConfig::new(HeadKind::Mean, 2048).parameter_count(), 1_051_140);
}
