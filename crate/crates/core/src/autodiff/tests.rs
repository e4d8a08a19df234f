use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check, relative_error};
use super::*;
use crate::error::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

/// Uniform values in ±[0.05, 1], kept away from the relu kink.
fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

#[test]
fn affine_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 2], &[1., 2.]));
    let w = g.constant(t(&[2, 2], &[1., 0., 0., 1.]));
    let b = g.constant(t(&[2], &[0., 0.]));
    let y = g.affine(x, w, b).unwrap();
    assert_eq!(g.value(y).data(), &[1., 2.]);

    let x = g.constant(t(&[1, 2], &[1., 1.]));
    let w = g.constant(t(&[2, 2], &[2., 3., 4., 5.]));
    let b = g.constant(t(&[2], &[1., 1.]));
    let y = g.affine(x, w, b).unwrap();
    assert_eq!(g.value(y).data(), &[7., 9.]);
}

#[test]
fn affine_bias_gradient_is_ones() {
    let mut g = Graph::new();
    let x = g.constant(t(&[3, 2], &[1., -2., 0.5, 4., 3., 1.]));
    let w = g.constant(t(&[2, 2], &[0.1, 0.2, 0.3, 0.4]));
    let b = g.input(t(&[2], &[0., 0.]));
    let y = g.affine(x, w, b).unwrap();
    let s = g.sum(y);
    g.backward(s, GroupSet::EMPTY, &mut ParamStore::new()).unwrap();
    // one row per batch item, so the sum sees each bias three times
    assert_eq!(g.grad(b).unwrap(), &[3., 3.]);
}

#[test]
fn affine_shape_mismatch_names_both_shapes() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 3]));
    let w = g.constant(Tensor::zeros(&[2, 2]));
    let b = g.constant(Tensor::zeros(&[2]));
    let err = g.affine(x, w, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[1, 3]") && msg.contains("[2, 2]"), "{msg}");
}

#[test]
fn conv2d_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let k = g.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
    let y = g.conv2d(x, k, 1).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 2, 2]);
    assert_eq!(g.value(y).data(), &[4., 4., 4., 4.]);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let xin = rand_tensor(&mut rng, &[2, 1, 4, 5]);
    let x = g.constant(xin.clone());
    let k = g.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
    let y = g.conv2d(x, k, 1).unwrap();
    assert_eq!(g.value(y), &xin);
}

#[test]
fn conv2d_output_size_and_errors() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 9, 7]));
    let k = g.constant(Tensor::zeros(&[3, 2, 3, 3]));
    let y = g.conv2d(x, k, 2).unwrap();
    assert_eq!(g.shape(y), &[1, 3, 4, 3]);

    let big = g.constant(Tensor::zeros(&[1, 2, 10, 3]));
    assert!(matches!(g.conv2d(x, big, 1), Err(Error::Dimension { .. })));
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    // <conv(x), y> == <x, convT(y)> for the same kernel
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[2, 3, 9, 8]);
    let k = rand_tensor(&mut rng, &[4, 3, 3, 3]);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let kv = g.constant(k);
    let cx = g.conv2d(xv, kv, 2).unwrap();
    let y = rand_tensor(&mut rng, g.shape(cx));
    let yv = g.constant(y.clone());
    let ty = g.conv_transpose2d(yv, kv, 2, (9, 8)).unwrap();
    let lhs: f64 = g.value(cx).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
    let rhs: f64 = x.data().iter().zip(g.value(ty).data()).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
}

#[test]
fn nonlinearity_examples() {
    let mut g = Graph::new();
    let x = g.input(t(&[3], &[-1., 0., 2.]));
    let y = g.relu(x);
    assert_eq!(g.value(y).data(), &[0., 0., 2.]);
    let s = g.sum(y);
    g.backward(s, GroupSet::EMPTY, &mut ParamStore::new()).unwrap();
    // subgradient at exactly zero is zero
    assert_eq!(g.grad(x).unwrap(), &[0., 0., 1.]);

    let z = g.constant(Tensor::scalar(0.0));
    let tz = g.tanh(z);
    assert_eq!(g.value(tz).data(), &[0.0]);
}

#[test]
fn tanh_gradient_at_half() {
    let err = check(
        |g, v| {
            let y = g.tanh(v[0]);
            Ok(g.sum(y))
        },
        &[Tensor::scalar(0.5)],
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn concat_examples_and_split() {
    let mut g = Graph::new();
    let a = g.input(t(&[1, 1], &[1.]));
    let b = g.input(t(&[1, 1], &[2.]));
    let c = g.concat(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[1., 2.]);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::new();
    let a = g.input(rand_tensor(&mut rng, &[3, 2]));
    let b = g.input(rand_tensor(&mut rng, &[3, 4]));
    let c = g.concat(a, b).unwrap();
    let w = rand_tensor(&mut rng, &[3, 6]);
    let s = g.dot_const(c, w.clone()).unwrap();
    g.backward(s, GroupSet::EMPTY, &mut ParamStore::new()).unwrap();
    for r in 0..3 {
        assert_eq!(&g.grad(a).unwrap()[r * 2..r * 2 + 2], &w.data()[r * 6..r * 6 + 2]);
        assert_eq!(&g.grad(b).unwrap()[r * 4..r * 4 + 4], &w.data()[r * 6 + 2..r * 6 + 6]);
    }

    let bad = g.input(Tensor::zeros(&[2, 1]));
    assert!(g.concat(a, bad).is_err());
}

#[test]
fn detach_blocks_gradient_and_preserves_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let xt = rand_tensor(&mut rng, &[2, 3]);
    let mut g = Graph::new();
    let x = g.input(xt.clone());
    let d = g.detach(x);
    assert_eq!(g.value(d).data(), xt.data());
    for (a, b) in g.value(d).data().iter().zip(xt.data()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }

    // loss = sum(tanh(x)) + sum(detach(x)^2-ish via relu) -> dloss/dx = 1 - tanh^2
    let f = g.tanh(x);
    let fs = g.sum(f);
    let r = g.relu(d);
    let rs = g.sum(r);
    let loss = g.add(fs, rs).unwrap();
    g.backward(loss, GroupSet::EMPTY, &mut ParamStore::new()).unwrap();
    let expected: Vec<f64> = xt.data().iter().map(|v| 1.0 - v.tanh().powi(2)).collect();
    assert!(relative_error(g.grad(x).unwrap(), &expected) < 1e-12);

    let mut g = Graph::new();
    let x = g.input(xt);
    let d = g.detach(x);
    let s = g.sum(d);
    g.backward(s, GroupSet::EMPTY, &mut ParamStore::new()).unwrap();
    assert!(g.grad(x).is_none());
}

fn two_group_store() -> (ParamStore, ParamId, ParamId) {
    let mut store = ParamStore::new();
    let a = store.add("ee.w", ParamGroup::EliminatingEncoder, t(&[2, 2], &[1., 2., 3., 4.]));
    let b = store.add("cadv.w", ParamGroup::AdversarialClassifier, t(&[2, 2], &[0.5, -1., 2., 1.]));
    (store, a, b)
}

fn two_layer_loss(g: &mut Graph, store: &ParamStore, a: ParamId, b: ParamId) -> Var {
    let x = g.constant(t(&[1, 2], &[1., -1.]));
    let zero = g.constant(Tensor::zeros(&[2]));
    let wa = g.param(store, a);
    let wb = g.param(store, b);
    let h = g.affine(x, wa, zero).unwrap();
    let h = g.tanh(h);
    let y = g.affine(h, wb, zero).unwrap();
    g.sum(y)
}

#[test]
fn backward_respects_allowed_groups() {
    let (mut store, a, b) = two_group_store();
    let mut g = Graph::new();
    let loss = two_layer_loss(&mut g, &store, a, b);
    g.backward(loss, GroupSet::of(&[ParamGroup::AdversarialClassifier]), &mut store)
        .unwrap();
    assert!(store.grad_is_zero(ParamGroup::EliminatingEncoder));
    assert!(!store.grad_is_zero(ParamGroup::AdversarialClassifier));

    let (mut full, a, b) = two_group_store();
    let mut g = Graph::new();
    let loss = two_layer_loss(&mut g, &full, a, b);
    g.backward(loss, GroupSet::all(), &mut full).unwrap();
    // the gated pass agrees with the unrestricted one on the allowed group
    assert_eq!(store.get(b).grad, full.get(b).grad);
    assert!(!full.grad_is_zero(ParamGroup::EliminatingEncoder));
}

#[test]
fn sequential_backward_accumulates() {
    let (mut twice, a, b) = two_group_store();
    let mut g = Graph::new();
    let loss = two_layer_loss(&mut g, &twice, a, b);
    g.backward(loss, GroupSet::all(), &mut twice).unwrap();
    g.backward(loss, GroupSet::all(), &mut twice).unwrap();

    let (mut doubled, a, b) = two_group_store();
    let mut g = Graph::new();
    let loss = two_layer_loss(&mut g, &doubled, a, b);
    let loss2 = g.scale(loss, 2.0);
    g.backward(loss2, GroupSet::all(), &mut doubled).unwrap();
    for id in [a, b] {
        assert!(relative_error(&twice.get(id).grad, &doubled.get(id).grad) < 1e-15);
    }
}

#[test]
fn non_scalar_root_is_contract_error() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[2]));
    let err = g.backward(x, GroupSet::all(), &mut ParamStore::new()).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
}

#[test]
fn mean_axis_and_tile_shapes() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2, 3, 2], &[1., 2., 3., 4., 5., 6., 7., 8., 9., 10., 11., 12.]));
    let m = g.mean_axis(x, 1).unwrap();
    assert_eq!(g.shape(m), &[2, 2]);
    assert_eq!(g.value(m).data(), &[3., 4., 9., 10.]);
    let tl = g.tile(m, 1, 3).unwrap();
    assert_eq!(g.shape(tl), &[2, 3, 2]);
    assert_eq!(&g.value(tl).data()[..6], &[3., 4., 3., 4., 3., 4.]);
}

#[test]
fn finite_difference_agreement_per_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let x = rand_tensor(&mut rng, &[3, 4]);
        let w = rand_tensor(&mut rng, &[4, 5]);
        let b = rand_tensor(&mut rng, &[5]);
        let r = rand_tensor(&mut rng, &[3, 5]);
        let err = check(
            |g, v| {
                let y = g.affine(v[0], v[1], v[2])?;
                g.dot_const(y, r.clone())
            },
            &[x, w, b],
        )
        .unwrap();
        assert!(err < 1e-4, "affine {err}");

        let x = rand_tensor(&mut rng, &[2, 2, 7, 6]);
        let k = rand_tensor(&mut rng, &[3, 2, 3, 2]);
        let r = rand_tensor(&mut rng, &[2, 3, 3, 3]);
        let err = check(
            |g, v| {
                let y = g.conv2d(v[0], v[1], 2)?;
                g.dot_const(y, r.clone())
            },
            &[x, k],
        )
        .unwrap();
        assert!(err < 1e-4, "conv2d {err}");

        let x = rand_tensor(&mut rng, &[2, 3, 3, 3]);
        let k = rand_tensor(&mut rng, &[3, 2, 3, 2]);
        let r = rand_tensor(&mut rng, &[2, 2, 8, 6]);
        let err = check(
            |g, v| {
                let y = g.conv_transpose2d(v[0], v[1], 2, (8, 6))?;
                g.dot_const(y, r.clone())
            },
            &[x, k],
        )
        .unwrap();
        assert!(err < 1e-4, "conv_transpose2d {err}");

        let x = rand_tensor(&mut rng, &[4, 5]);
        let r = rand_tensor(&mut rng, &[4, 5]);
        for kind in 0..2 {
            let err = check(
                |g, v| {
                    let y = if kind == 0 { g.relu(v[0]) } else { g.tanh(v[0]) };
                    g.dot_const(y, r.clone())
                },
                std::slice::from_ref(&x),
            )
            .unwrap();
            assert!(err < 1e-4, "nonlinearity {kind}: {err}");
        }

        let a = rand_tensor(&mut rng, &[3, 2]);
        let b = rand_tensor(&mut rng, &[3, 3]);
        let r = rand_tensor(&mut rng, &[3, 5]);
        let err = check(
            |g, v| {
                let y = g.concat(v[0], v[1])?;
                g.dot_const(y, r.clone())
            },
            &[a, b],
        )
        .unwrap();
        assert!(err < 1e-4, "concat {err}");

        let x = rand_tensor(&mut rng, &[2, 5, 3]);
        let r = rand_tensor(&mut rng, &[2, 4, 3]);
        let err = check(
            |g, v| {
                let m = g.mean_axis(v[0], 1)?;
                let t = g.tile(m, 1, 4)?;
                g.dot_const(t, r.clone())
            },
            &[x],
        )
        .unwrap();
        assert!(err < 1e-4, "pooling {err}");

        let x = rand_tensor(&mut rng, &[5, 3]);
        let r = rand_tensor(&mut rng, &[5, 3]);
        let err = check(
            |g, v| {
                let y = g.standardize_batch(v[0], 1e-8)?;
                g.dot_const(y, r.clone())
            },
            &[x],
        )
        .unwrap();
        assert!(err < 1e-4, "standardize_batch {err}");
    }
}

#[test]
fn standardize_batch_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut g = Graph::new();
    let x = g.input(rand_tensor(&mut rng, &[6, 4]));
    let y = g.standardize_batch(x, 0.0).unwrap();
    let v = g.value(y).data().to_vec();
    for k in 0..4 {
        let col: Vec<f64> = v.iter().skip(k).step_by(4).copied().collect();
        let m = col.iter().sum::<f64>() / 6.0;
        let var = col.iter().map(|c| (c - m).powi(2)).sum::<f64>() / 6.0;
        assert!(m.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    }
    let one = g.input(Tensor::zeros(&[1, 4]));
    assert!(g.standardize_batch(one, 1e-8).is_err());
}

#[test]
fn replay_is_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_tensor(&mut rng, &[2, 1, 6, 6]);
        let k = rand_tensor(&mut rng, &[2, 1, 3, 3]);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let kv = g.constant(k);
        let y = g.conv2d(xv, kv, 1).unwrap();
        let y = g.tanh(y);
        g.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
