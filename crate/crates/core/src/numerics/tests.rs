use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{max_relative_error, DEFAULT_STEP};
use super::*;
use crate::error::{Error, Result};

type Build = fn(&mut Graph, &ParamStore, &mut ChaCha8Rng) -> Result<Var>;

/// Declares random small parameters `a`, `b`, `c` and checks the gradient of
/// `build`'s scalar output against finite differences.
fn check_op(label: &str, shapes: &[(&str, &[usize])], build: Build) {
    for seed in 0..20u64 {
        let mut params = ParamStore::new(seed);
        for (name, shape) in shapes {
            params.declare(name, shape, Init::Uniform(1.0)).unwrap();
        }
        let eval = |p: &ParamStore| -> Result<f64> {
            let mut g = Graph::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
            let out = build(&mut g, p, &mut rng)?;
            Ok(g.value(out).item())
        };
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let out = build(&mut g, &params, &mut rng).unwrap();
        g.backward(out, &mut params).unwrap();
        let (err, name) = max_relative_error(&params, DEFAULT_STEP, eval).unwrap();
        assert!(err < 1e-4, "{label}: seed {seed}, param {name}, rel err {err:e}");
    }
}

fn weights(g: &mut Graph, rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Var {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    g.input(Tensor::matrix(rows, cols, data).unwrap()).unwrap()
}

/// Contracts an arbitrary node to a scalar with random weights so every
/// output coordinate carries a distinct upstream gradient.
fn contract(g: &mut Graph, v: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let (r, c) = g.value(v).dims2();
    let w = weights(g, rng, r, c);
    let v = g.reshape(v, vec![r, c])?;
    let prod = g.mul(v, w)?;
    g.sum(prod)
}

#[test]
fn grad_matmul() {
    check_op("matmul", &[("a", &[3, 4]), ("b", &[4, 2])], |g, p, rng| {
        let (a, b) = (g.param(p, "a")?, g.param(p, "b")?);
        let y = g.matmul(a, b)?;
        contract(g, y, rng)
    });
}

#[test]
fn grad_linear() {
    check_op("linear", &[("a", &[3, 5]), ("b", &[4, 5]), ("c", &[4])], |g, p, rng| {
        let (x, w, b) = (g.param(p, "a")?, g.param(p, "b")?, g.param(p, "c")?);
        let y = g.linear(x, w, Some(b))?;
        contract(g, y, rng)
    });
}

#[test]
fn grad_elementwise_arith() {
    check_op("add/sub/mul", &[("a", &[2, 3]), ("b", &[2, 3])], |g, p, rng| {
        let (a, b) = (g.param(p, "a")?, g.param(p, "b")?);
        let s = g.add(a, b)?;
        let d = g.sub(s, b)?;
        let m = g.mul(d, b)?;
        let sc = g.scale(m, -1.7)?;
        contract(g, sc, rng)
    });
}

#[test]
fn grad_activations() {
    check_op("activations", &[("a", &[2, 4])], |g, p, rng| {
        let a = g.param(p, "a")?;
        let s = g.sigmoid(a)?;
        let t = g.tanh(a)?;
        let sq = g.square(a)?;
        let r = g.relu(a)?;
        let x = g.add(s, t)?;
        let x = g.add(x, sq)?;
        let x = g.add(x, r)?;
        let ab = g.abs(a)?;
        let x = g.add(x, ab)?;
        contract(g, x, rng)
    });
}

#[test]
fn grad_add_row_and_concat_slice() {
    check_op(
        "add_row/concat/slice",
        &[("a", &[3, 2]), ("b", &[2]), ("c", &[3, 3])],
        |g, p, rng| {
            let (a, b, c) = (g.param(p, "a")?, g.param(p, "b")?, g.param(p, "c")?);
            let x = g.add_row(a, b)?;
            let cat = g.concat_cols(x, c)?;
            let s = g.slice_cols(cat, 1, 3)?;
            let t = g.tanh(s)?;
            contract(g, t, rng)
        },
    );
}

#[test]
fn grad_row_normalize() {
    check_op("row_normalize", &[("a", &[3, 4])], |g, p, rng| {
        let a = g.param(p, "a")?;
        let n = g.row_normalize(a, 1e-12)?;
        let sq = g.square(n)?;
        contract(g, sq, rng)
    });
}

#[test]
fn grad_gather() {
    check_op("gather", &[("a", &[5, 3])], |g, p, rng| {
        let a = g.param(p, "a")?;
        let y = g.gather(a, &[0, 3, 3, 1])?;
        contract(g, y, rng)
    });
}

#[test]
fn grad_softmax_rows() {
    check_op("softmax", &[("a", &[3, 4])], |g, p, rng| {
        let a = g.param(p, "a")?;
        let y = g.softmax_rows(a)?;
        contract(g, y, rng)
    });
}

#[test]
fn grad_lerp() {
    check_op("lerp", &[("a", &[2, 3]), ("b", &[2, 3]), ("c", &[1])], |g, p, rng| {
        let (a, b, c) = (g.param(p, "a")?, g.param(p, "b")?, g.param(p, "c")?);
        let w = g.sigmoid(c)?;
        let y = g.lerp(w, a, b)?;
        contract(g, y, rng)
    });
}

#[test]
fn grad_order_violation_and_hinge() {
    check_op(
        "order_violation/ranking_hinge",
        &[("a", &[4, 3]), ("b", &[4, 3])],
        |g, p, _| {
            let (a, b) = (g.param(p, "a")?, g.param(p, "b")?);
            let s = g.order_violation(a, b)?;
            g.ranking_hinge(s, 0.05)
        },
    );
    check_op(
        "ranking_hinge_skipping",
        &[("a", &[3, 3]), ("b", &[3, 3])],
        |g, p, _| {
            let (a, b) = (g.param(p, "a")?, g.param(p, "b")?);
            let s = g.order_violation(a, b)?;
            let skip = (0..9).map(|i| (i % 4 == 1, i % 3 == 2)).collect();
            g.ranking_hinge_skipping(s, 0.05, skip)
        },
    );
}

#[test]
fn skipped_hinge_terms_drop_out() {
    let mut g = Graph::new();
    let s = g.input(Tensor::zeros(&[2, 2])).unwrap();
    let all = g.ranking_hinge(s, 0.5).unwrap();
    assert_eq!(g.value(all).item(), 2.0);
    let some = g
        .ranking_hinge_skipping(
            s,
            0.5,
            vec![(false, false), (true, false), (false, true), (false, false)],
        )
        .unwrap();
    assert_eq!(g.value(some).item(), 1.0);
}

#[test]
fn grad_cross_entropy() {
    check_op("cross_entropy", &[("a", &[4, 5])], |g, p, _| {
        let a = g.param(p, "a")?;
        g.cross_entropy(a, &[Some(1), None, Some(4), Some(0)])
    });
}

#[test]
fn grad_bce() {
    check_op("bce_with_logits", &[("a", &[2, 3])], |g, p, _| {
        let a = g.param(p, "a")?;
        g.bce_with_logits(a, &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0])
    });
}

#[test]
fn grad_grid_attention() {
    check_op(
        "add_grid/attend",
        &[("a", &[6, 2]), ("b", &[2, 2]), ("c", &[2, 3])],
        |g, p, rng| {
            let (a, b, c) = (g.param(p, "a")?, g.param(p, "b")?, g.param(p, "c")?);
            let grid = g.add_grid(a, b, 3)?;
            let e = g.tanh(grid)?;
            let e = g.slice_cols(e, 0, 1)?;
            let e = g.reshape(e, vec![2, 3])?;
            let alpha = g.softmax_rows(e)?;
            let sum = g.add(alpha, c)?;
            let feats = g.reshape(a, vec![6, 2])?;
            let out = g.attend(sum, feats)?;
            contract(g, out, rng)
        },
    );
}

#[test]
fn grad_select_rows() {
    check_op("select_rows", &[("a", &[3, 2]), ("b", &[3, 2])], |g, p, rng| {
        let (a, b) = (g.param(p, "a")?, g.param(p, "b")?);
        let y = g.select_rows(&[true, false, true], a, b)?;
        contract(g, y, rng)
    });
}

#[test]
fn backward_sum_gives_ones() {
    let mut p = ParamStore::new(0);
    p.declare("w", &[2, 3], Init::Glorot).unwrap();
    p.declare("unused", &[2], Init::Glorot).unwrap();
    let mut g = Graph::new();
    let w = g.param(&p, "w").unwrap();
    let s = g.sum(w).unwrap();
    backward(&g, s, &mut p).unwrap();
    assert_eq!(p.get("w").unwrap().grad().unwrap(), &[1.0; 6]);
    assert_eq!(p.get("unused").unwrap().grad().unwrap(), &[0.0; 2]);
}

#[test]
fn backward_half_square_norm() {
    let mut p = ParamStore::new(0);
    p.insert("w", Tensor::vector(vec![3.0, 4.0]).unwrap());
    let mut g = Graph::new();
    let w = g.param(&p, "w").unwrap();
    let sq = g.square(w).unwrap();
    let s = g.sum(sq).unwrap();
    let loss = g.scale(s, 0.5).unwrap();
    g.backward(loss, &mut p).unwrap();
    assert_eq!(p.get("w").unwrap().grad().unwrap(), &[3.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut p = ParamStore::new(0);
    p.declare("w", &[2], Init::Glorot).unwrap();
    let mut g = Graph::new();
    let w = g.param(&p, "w").unwrap();
    assert!(matches!(g.backward(w, &mut p), Err(Error::Contract(_))));
}

#[test]
fn nan_is_reported_with_op_name() {
    let mut g = Graph::new();
    let x = g.input(Tensor::vector(vec![1e300]).unwrap()).unwrap();
    match g.square(x) {
        Err(Error::Numeric { op, .. }) => assert_eq!(op, "square"),
        other => panic!("expected numeric error, got {other:?}"),
    }
}

mod props {
    use proptest::prelude::*;

    use super::super::*;

    proptest! {
        #[test]
        fn softmax_normalized_and_permutation_equivariant(
            v in proptest::collection::vec(-50.0f64..50.0, 1..12),
            rot in 0usize..12,
        ) {
            let s = softmax(&Tensor::vector(v.clone()).unwrap()).unwrap();
            prop_assert!((s.sum() - 1.0).abs() < 1e-12);
            prop_assert!(s.data().iter().all(|&p| p >= 0.0));
            let k = rot % v.len();
            let mut r = v.clone();
            r.rotate_left(k);
            let sr = softmax(&Tensor::vector(r).unwrap()).unwrap();
            let mut expect = s.data().to_vec();
            expect.rotate_left(k);
            for (a, b) in sr.data().iter().zip(&expect) {
                prop_assert!((a - b).abs() < 1e-15);
            }
        }

        #[test]
        fn activation_ranges(v in -30.0f64..30.0) {
            let sg = Activation::Sigmoid.apply(v);
            prop_assert!((0.0..=1.0).contains(&sg));
            let th = Activation::Tanh.apply(v);
            prop_assert!((-1.0..=1.0).contains(&th));
            prop_assert!(Activation::Relu.apply(v) >= 0.0);
        }
    }
}
