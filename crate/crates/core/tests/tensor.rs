use std::sync::Arc;

use proptest::prelude::*;

use swin_mae::masking::RngState;
use swin_mae::tensor::{grad_check, ParamStore, Tape, Tensor};

fn rand(shape: &[usize], seed: u64) -> Tensor {
    let mut r = RngState::new(seed);
    Tensor::from_fn(shape, |_| 2.0 * r.uniform() - 1.0)
}

proptest! {
    #[test]
    fn matmul_matches_naive(m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in any::<u64>()) {
        let (a, b) = (rand(&[m, k], seed), rand(&[k, n], seed ^ 1));
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let c = tape.matmul(va, vb).unwrap();
        let c = tape.value(c);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a.at(&[i, p]) * b.at(&[p, j])).sum();
                prop_assert!((c.at(&[i, j]) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..4, cols in 1usize..6, seed in any::<u64>()) {
        let mut tape = Tape::new();
        let x = tape.constant(rand(&[rows, cols], seed));
        let y = tape.softmax(x).unwrap();
        for row in tape.value(y).data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn permute_round_trip(a in 1usize..4, b in 1usize..4, c in 1usize..4, seed in any::<u64>()) {
        let t = rand(&[a, b, c], seed);
        let mut tape = Tape::new();
        let x = tape.constant(t.clone());
        let y = tape.permute(x, &[1, 2, 0]).unwrap();
        let z = tape.permute(y, &[2, 0, 1]).unwrap();
        prop_assert!(tape.value(z).bit_eq(&t));
    }

    #[test]
    fn composite_expression_gradients(seed in any::<u64>()) {
        let x = rand(&[2, 3], seed);
        let w = rand(&[3, 3], seed ^ 7);
        let err = grad_check(
            |t, x| {
                let w = t.constant(w.clone());
                let h = t.matmul(x, w)?;
                let h = t.gelu(h)?;
                let s = t.softmax(h)?;
                let p = t.mul(s, x)?;
                t.sum(p)
            },
            &x,
            1e-5,
        )
        .unwrap();
        prop_assert!(err < 1e-6, "relative error {err}");
    }
}

#[test]
fn reused_value_accumulates_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
    let y = tape.mul(x, x).unwrap();
    let y = tape.add(y, x).unwrap();
    let l = tape.sum(y).unwrap();
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[3.0, -3.0, 2.0]);
}

#[test]
fn index_select_scatters_repeats() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap());
    let y = tape.index_select(x, 0, Arc::new(vec![2, 2, 0])).unwrap();
    let l = tape.sum(y).unwrap();
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 2.0]);
}

#[test]
fn parameters_receive_named_gradients() {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::new(vec![2], vec![3.0, 4.0]).unwrap()).unwrap();
    let g = {
        let mut tape = Tape::with_params(&store);
        let w = tape.param("w").unwrap();
        let l = tape.mul(w, w).unwrap();
        let l = tape.sum(l).unwrap();
        assert!(tape.param("missing").is_err());
        tape.backward(l).unwrap()
    };
    store.accumulate(&g).unwrap();
    assert_eq!(store.param("w").unwrap().grad.as_ref().unwrap().data(), &[6.0, 8.0]);
}

#[test]
fn shape_errors_are_reported() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let e = tape.matmul(a, b).unwrap_err();
    assert_eq!(e.kind(), "shape");
    assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
}
