//! Finite-difference gradient checks and algebraic properties for the
//! tensor engine, all in f64.

mod common;

use std::sync::Arc;

use common::{fd_check, rand_tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use retro_lab::tensor::{softmax_rows, AttentionLayout, RelativePositions, Tape, Tensor};

const TOL: f64 = 1e-4;

#[test]
fn matmul_hand_cases() {
    let mut tape = Tape::<f64>::new();
    let a = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let ones = tape.leaf(Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap());
    let c = tape.matmul(a, ones).unwrap();
    assert_eq!(tape.value(c).data, vec![3.0, 7.0]);

    let eye = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let same = tape.matmul(a, eye).unwrap();
    assert_eq!(tape.value(same).data, tape.value(a).data);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.leaf(Tensor::zeros(vec![2, 3]));
    let b = tape.leaf(Tensor::zeros(vec![4, 5]));
    let msg = tape.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
}

#[test]
fn matmul_gradients_over_random_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut cases = vec![(vec![5, 4], vec![4, 3])];
    for _ in 0..20 {
        let (p, q, r) = (rng.random_range(1..7), rng.random_range(1..7), rng.random_range(1..7));
        let batch = rng.random_range(1..4);
        if rng.random_bool(0.5) {
            cases.push((vec![batch, p, q], vec![q, r]));
        } else {
            cases.push((vec![batch, p, q], vec![batch, q, r]));
        }
    }
    for (sa, sb) in cases {
        let inputs = vec![rand_tensor(&mut rng, sa.clone()), rand_tensor(&mut rng, sb.clone())];
        let err = fd_check(&inputs, 3, |tape, v| tape.matmul(v[0], v[1]).unwrap());
        assert!(err < TOL, "matmul {sa:?} x {sb:?}: {err}");
    }
}

#[test]
fn softmax_ce_values() {
    let mut tape = Tape::<f64>::new();
    let logits = tape.leaf(Tensor::zeros(vec![3, 4]));
    let losses = tape.softmax_ce(logits, &[0, 3, 2], u32::MAX).unwrap();
    for &l in &tape.value(losses).data {
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }
    let mut peaked = Tensor::zeros(vec![1, 4]);
    peaked.data[2] = 1000.0;
    let logits = tape.leaf(peaked);
    let losses = tape.softmax_ce(logits, &[2], u32::MAX).unwrap();
    assert!(tape.value(losses).data[0].abs() < 1e-12);
    assert!(tape.softmax_ce(logits, &[4], u32::MAX).is_err());
}

#[test]
fn softmax_ce_ignores_pad_targets() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut tape = Tape::<f64>::new();
    let logits = tape.leaf(rand_tensor(&mut rng, vec![3, 5]));
    let losses = tape.softmax_ce(logits, &[1, 0, 4], 0).unwrap();
    assert_eq!(tape.value(losses).data[1], 0.0);
    let total = tape.sum(losses);
    let grads = tape.backward(total);
    let g = grads.get(logits).unwrap();
    assert!(g[5..10].iter().all(|&x| x == 0.0));
}

#[test]
fn softmax_ce_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..20 {
        let (t, v) = if case == 0 { (6, 10) } else { (rng.random_range(1..8), rng.random_range(2..12)) };
        let targets: Vec<u32> = (0..t).map(|_| rng.random_range(0..v as u32)).collect();
        let inputs = vec![rand_tensor(&mut rng, vec![t, v])];
        let err = fd_check(&inputs, 3, |tape, x| tape.softmax_ce(x[0], &targets, 0).unwrap());
        assert!(err < TOL, "softmax_ce {t}x{v}: {err}");
    }
}

#[test]
fn layer_norm_of_constant_is_bias() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::new(vec![1, 4], vec![3.0; 4]).unwrap());
    let g = tape.leaf(Tensor::new(vec![4], vec![2.0; 4]).unwrap());
    let b = tape.leaf(Tensor::zeros(vec![4]));
    let y = tape.layer_norm(x, g, b).unwrap();
    assert!(tape.value(y).data.iter().all(|&v| v == 0.0));
}

#[test]
fn elementwise_and_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let (rows, d) = (rng.random_range(1..6), rng.random_range(2..9));
        let x = rand_tensor(&mut rng, vec![rows, d]);
        let gain = rand_tensor(&mut rng, vec![d]);
        let bias = rand_tensor(&mut rng, vec![d]);
        let err = fd_check(&[x.clone(), gain, bias.clone()], 3, |tape, v| {
            tape.layer_norm(v[0], v[1], v[2]).unwrap()
        });
        assert!(err < TOL, "layer_norm: {err}");
        let err = fd_check(std::slice::from_ref(&x), 3, |tape, v| tape.gelu(v[0]));
        assert!(err < TOL, "gelu: {err}");
        let err = fd_check(&[x.clone(), bias], 3, |tape, v| tape.add_bias(v[0], v[1]).unwrap());
        assert!(err < TOL, "add_bias: {err}");
        let other = rand_tensor(&mut rng, vec![rows, d]);
        let err = fd_check(&[x.clone(), other], 3, |tape, v| {
            let s = tape.add(v[0], v[1]).unwrap();
            let m = tape.mul(s, v[1]).unwrap();
            tape.scale(m, -1.5)
        });
        assert!(err < TOL, "add/mul/scale: {err}");
    }
}

#[test]
fn gelu_fixed_point() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::new(vec![1], vec![0.0]).unwrap());
    let y = tape.gelu(x);
    assert_eq!(tape.value(y).data[0], 0.0);
}

#[test]
fn embedding_gradients_with_repeated_ids() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let (v, d) = (rng.random_range(2..8), rng.random_range(1..6));
        let ids: Vec<u32> = (0..rng.random_range(1..10)).map(|_| rng.random_range(0..v as u32)).collect();
        let table = rand_tensor(&mut rng, vec![v, d]);
        let err = fd_check(&[table], 3, |tape, t| tape.embedding(t[0], &ids).unwrap());
        assert!(err < TOL, "embedding: {err}");
    }
}

fn relative(q: usize, k: usize) -> RelativePositions {
    RelativePositions {
        query_pos: (0..q as i64).collect(),
        key_pos: (0..k as i64).collect(),
        min_offset: -(q as i64 - 1),
        buckets: q + k - 1,
    }
}

#[test]
fn attention_single_position_returns_value_row() {
    let mut tape = Tape::<f64>::new();
    let q = tape.leaf(Tensor::new(vec![1, 2], vec![0.3, -0.2]).unwrap());
    let k = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
    let v = tape.leaf(Tensor::new(vec![1, 2], vec![5.0, -7.0]).unwrap());
    let out = tape
        .attention(q, k, v, None, Arc::new(AttentionLayout::full(1, 1, 1)))
        .unwrap();
    assert_eq!(tape.value(out).data, vec![5.0, -7.0]);
}

#[test]
fn attention_fully_masked_row_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut tape = Tape::<f64>::new();
    let q = tape.leaf(rand_tensor(&mut rng, vec![2, 4]));
    let k = tape.leaf(rand_tensor(&mut rng, vec![3, 4]));
    let v = tape.leaf(rand_tensor(&mut rng, vec![3, 4]));
    let layout = AttentionLayout::full(2, 2, 3)
        .with_mask(vec![false, false, false, true, false, true])
        .unwrap();
    let out = tape.attention(q, k, v, None, Arc::new(layout)).unwrap();
    assert!(tape.value(out).data[..4].iter().all(|&x| x == 0.0));
    assert!(tape.value(out).data[4..].iter().any(|&x| x != 0.0));
}

#[test]
fn attention_mask_shape_checked() {
    assert!(AttentionLayout::full(1, 2, 3).with_mask(vec![true; 5]).is_err());
}

#[test]
fn attention_is_convex_combination_of_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut tape = Tape::<f64>::new();
    let q = tape.leaf(rand_tensor(&mut rng, vec![3, 1]));
    let k = tape.leaf(rand_tensor(&mut rng, vec![5, 1]));
    let v = tape.leaf(rand_tensor(&mut rng, vec![5, 1]));
    let out = tape
        .attention(q, k, v, None, Arc::new(AttentionLayout::full(1, 3, 5)))
        .unwrap();
    let vs = &tape.value(v).data;
    let (lo, hi) = vs.iter().fold((f64::MAX, f64::MIN), |(l, h), &x| (l.min(x), h.max(x)));
    for &o in &tape.value(out).data {
        assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
    }
}

#[test]
fn attention_gradients_with_relative_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    // 2 heads, L = 4, causal, with a bias table
    let layout = Arc::new(AttentionLayout::causal(2, 4).with_relative(relative(4, 4)));
    let inputs = vec![
        rand_tensor(&mut rng, vec![4, 6]),
        rand_tensor(&mut rng, vec![4, 6]),
        rand_tensor(&mut rng, vec![4, 6]),
        rand_tensor(&mut rng, vec![2, 7]),
    ];
    let err = fd_check(&inputs, 3, |tape, v| {
        tape.attention(v[0], v[1], v[2], Some(v[3]), layout.clone()).unwrap()
    });
    assert!(err < TOL, "attention: {err}");

    for _ in 0..20 {
        let heads = rng.random_range(1..4);
        let dh = rng.random_range(1..4);
        let (tq, tk) = (rng.random_range(1..6), rng.random_range(1..6));
        let row_keys = (0..tq)
            .map(|_| {
                let lo = rng.random_range(0..tk);
                lo..rng.random_range(lo..=tk)
            })
            .collect();
        let key_valid = (0..tk).map(|_| rng.random_bool(0.8)).collect();
        let layout = Arc::new(
            AttentionLayout {
                row_keys,
                key_valid,
                ..AttentionLayout::full(heads, tq, tk)
            }
            .with_relative(relative(tq, tk)),
        );
        let w = heads * dh;
        let inputs = vec![
            rand_tensor(&mut rng, vec![tq, w]),
            rand_tensor(&mut rng, vec![tk, w]),
            rand_tensor(&mut rng, vec![tk, w]),
            rand_tensor(&mut rng, vec![heads, tq + tk - 1]),
        ];
        let err = fd_check(&inputs, 3, |tape, v| {
            tape.attention(v[0], v[1], v[2], Some(v[3]), layout.clone()).unwrap()
        });
        assert!(err < TOL, "attention random layout: {err}");
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&mut rng, vec![7, 13]);
    let p = softmax_rows(&x.data, 13);
    for row in p.chunks(13) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn backward_is_linear_in_summed_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let a = rand_tensor(&mut rng, vec![3, 4]);
    let b = rand_tensor(&mut rng, vec![4, 5]);
    let grad_of = |which: u8| {
        let mut tape = Tape::<f64>::new();
        let (va, vb) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
        let prod = tape.matmul(va, vb).unwrap();
        let l1 = tape.softmax_ce(prod, &[0, 1, 2], u32::MAX).unwrap();
        let g = tape.gelu(prod);
        let l2 = tape.softmax_ce(g, &[4, 3, 2], u32::MAX).unwrap();
        let out = match which {
            1 => tape.sum(l1),
            2 => tape.sum(l2),
            _ => {
                let s = tape.add(l1, l2).unwrap();
                tape.sum(s)
            }
        };
        tape.backward(out).get(va).unwrap().to_vec()
    };
    let (g1, g2, g12) = (grad_of(1), grad_of(2), grad_of(0));
    for i in 0..g12.len() {
        assert!((g1[i] + g2[i] - g12[i]).abs() < 1e-12);
    }
}

#[test]
fn ops_do_not_mutate_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = rand_tensor(&mut rng, vec![4, 6]);
    let mut tape = Tape::<f64>::new();
    let v = tape.leaf(x.clone());
    let g = tape.leaf(rand_tensor(&mut rng, vec![6]));
    let b = tape.leaf(rand_tensor(&mut rng, vec![6]));
    let n = tape.layer_norm(v, g, b).unwrap();
    let a = tape
        .attention(n, v, v, None, Arc::new(AttentionLayout::causal(2, 4)))
        .unwrap();
    let l = tape.softmax_ce(a, &[0, 1, 2, 3], u32::MAX).unwrap();
    let s = tape.sum(l);
    let _ = tape.backward(s);
    assert_eq!(tape.value(v), &x);
}
