use milsurv_core::tape::{Activation, Axis};
use milsurv_core::{Gradients, ParamKind, ParamStore, Rng, Tape, Tensor};
use proptest::prelude::*;

fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let mut out = vec![0.0; a.rows() * b.cols()];
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            for k in 0..a.cols() {
                out[i * b.cols() + j] += a.get(i, k) * b.get(k, j);
            }
        }
    }
    out
}

fn tensor(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    let mut rng = Rng::new(seed, 0);
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
}

#[test]
fn dropout_keeps_the_mean_and_drops_at_the_rate() {
    let store = ParamStore::<f64>::new();
    let mut tape = Tape::new(&store);
    let ones = tape.constant(Tensor::filled(200, 500, 1.0));
    let y = tape.dropout(ones, 0.25, &mut Rng::new(5, 0), true).unwrap();
    let v = tape.value(y).data();
    let n = v.len() as f64;
    let zeros = v.iter().filter(|&&x| x == 0.0).count() as f64;
    let mean = v.iter().sum::<f64>() / n;
    // Standard errors are about 0.0019 for the rate and 0.0026 for the mean.
    assert!((zeros / n - 0.25).abs() < 0.01, "{}", zeros / n);
    assert!((mean - 1.0).abs() < 0.015, "{mean}");
    assert!(v.iter().all(|&x| x == 0.0 || (x - 4.0 / 3.0).abs() < 1e-12));
    let eval = tape.dropout(ones, 0.25, &mut Rng::new(5, 0), false).unwrap();
    assert_eq!(tape.value(eval).data(), tape.value(ones).data());
}

#[test]
fn softmax_sums_to_one_along_its_axis() {
    let store = ParamStore::<f64>::new();
    let mut tape = Tape::new(&store);
    let x = tape.constant(tensor(6, 9, 1).map(|v| 30.0 * v));
    let by_row = tape.activation(x, "softmax".parse::<Activation>().unwrap());
    let by_col = tape.softmax(x, Axis::Rows);
    let r = tape.value(by_row);
    for i in 0..6 {
        assert!((r.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    let c = tape.value(by_col);
    for j in 0..9 {
        assert!(((0..6).map(|i| c.get(i, j)).sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn repeated_backward_calls_accumulate() {
    let mut store = ParamStore::new();
    let w = store.add("w", ParamKind::Weight, tensor(2, 3, 2));
    let mut tape = Tape::new(&store);
    let p = tape.param(w);
    let y = tape.sigmoid(p);
    let s = tape.sum(y);
    let mut once = Gradients::for_params(&store);
    tape.backward(s, &mut once).unwrap();
    let mut thrice = Gradients::for_params(&store);
    for _ in 0..3 {
        tape.backward(s, &mut thrice).unwrap();
    }
    for (a, b) in once.get(w).data().iter().zip(thrice.get(w).data()) {
        assert!((3.0 * a - b).abs() < 1e-15);
    }
    let mut g = Gradients::for_params(&store);
    assert!(tape.backward(y, &mut g).is_err());
}

proptest! {
    #[test]
    fn blocked_matmul_matches_naive(n in 1usize..20, p in 1usize..40, q in 1usize..20, seed in any::<u64>()) {
        let a = tensor(n, p, seed);
        let b = tensor(p, q, seed.wrapping_add(1));
        let fast = a.matmul(&b).unwrap();
        for (x, y) in fast.data().iter().zip(naive_matmul(&a, &b)) {
            prop_assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn matmul_backward_matches_transposed_products(n in 1usize..8, p in 1usize..12, q in 1usize..8, seed in any::<u64>()) {
        let mut store = ParamStore::new();
        let a = store.add("a", ParamKind::Weight, tensor(n, p, seed));
        let b = store.add("b", ParamKind::Weight, tensor(p, q, seed.wrapping_add(7)));
        let mut tape = Tape::new(&store);
        let (av, bv) = (tape.param(a), tape.param(b));
        let y = tape.matmul(av, bv).unwrap();
        let s = tape.sum(y);
        let mut g = Gradients::for_params(&store);
        tape.backward(s, &mut g).unwrap();
        let ones = Tensor::<f64>::filled(n, q, 1.0);
        let ga = ones.matmul(&store.get(b).transpose()).unwrap();
        let gb = store.get(a).transpose().matmul(&ones).unwrap();
        prop_assert!(g.get(a).max_abs_diff(&ga) < 1e-10);
        prop_assert!(g.get(b).max_abs_diff(&gb) < 1e-10);
    }
}
