mod common;

use common::*;
use dualvq::{Graph, Tensor};
use rand::Rng;

#[test]
fn every_op_matches_finite_differences() {
    let results = gradient_suite();
    let failures: Vec<_> = results.iter().filter(|r| !r.passed()).collect();
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn conv2d_matches_naive_loops() {
    let mut r = rng(70);
    let x = uniform(&mut r, &[1, 2, 6, 6], -1.0, 1.0);
    let w = uniform(&mut r, &[3, 2, 3, 3], -1.0, 1.0);
    for pad in [0, 1] {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone(), true).unwrap();
        let wv = g.leaf(w.clone(), true).unwrap();
        let y = g.conv2d(xv, wv, 2, pad).unwrap();
        let expected = naive_conv2d(&x, &w, 2, pad);
        assert_eq!(g.value(y).shape(), expected.shape());
        assert!(max_abs_diff(g.value(y).data(), expected.data()) < 1e-10);

        let g_out = uniform(&mut r, expected.shape(), -1.0, 1.0);
        let gc = g.constant(g_out.clone()).unwrap();
        let p = g.mul(y, gc).unwrap();
        let loss = g.sum(p).unwrap();
        g.backward(loss).unwrap();
        let (gx, gw) = naive_conv2d_grads(&x, &w, &g_out, 2, pad);
        assert!(max_abs_diff(g.grad(xv).unwrap().data(), gx.data()) < 1e-10);
        assert!(max_abs_diff(g.grad(wv).unwrap().data(), gw.data()) < 1e-10);
    }
}

#[test]
fn conv2d_unit_kernel_scales() {
    let mut r = rng(71);
    let x = uniform(&mut r, &[2, 1, 3, 4], -1.0, 1.0);
    let mut g = Graph::new();
    let xv = g.constant(x.clone()).unwrap();
    let w = g.constant(Tensor::full(&[1, 1, 1, 1], 2.0)).unwrap();
    let y = g.conv2d(xv, w, 1, 0).unwrap();
    let doubled: Vec<f64> = x.data().iter().map(|v| 2.0 * v).collect();
    assert_eq!(g.value(y).data(), &doubled[..]);
}

#[test]
fn conv2d_delta_kernel_is_identity() {
    let mut r = rng(72);
    let x = uniform(&mut r, &[1, 1, 5, 5], -1.0, 1.0);
    let mut g = Graph::new();
    let xv = g.constant(x.clone()).unwrap();
    let w = g
        .constant(Tensor::from_fn(&[1, 1, 3, 3], |i| if i == 4 { 1.0 } else { 0.0 }))
        .unwrap();
    let y = g.conv2d(xv, w, 1, 1).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    let mut r = rng(73);
    for _ in 0..10 {
        let (b, c, o) = (r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(1..=3));
        let k = r.gen_range(1..=4);
        let stride = r.gen_range(1..=3);
        let pad = r.gen_range(0..=1).min(k - 1);
        // pick an input size the window tiles exactly
        let lo = r.gen_range(2..=4);
        let h = (lo - 1) * stride + k - 2 * pad;
        let x = uniform(&mut r, &[b, c, h, h], -1.0, 1.0);
        let w = uniform(&mut r, &[o, c, k, k], -1.0, 1.0);
        let mut g = Graph::new();
        let xv = g.constant(x.clone()).unwrap();
        let wv = g.constant(w).unwrap();
        let cx = g.conv2d(xv, wv, stride, pad).unwrap();
        let y = uniform(&mut r, g.value(cx).shape(), -1.0, 1.0);
        let yv = g.constant(y.clone()).unwrap();
        let ty = g.conv_transpose2d(yv, wv, stride, pad).unwrap();
        assert_eq!(g.value(ty).shape(), x.shape());
        let lhs = dot(g.value(cx).data(), y.data());
        let rhs = dot(x.data(), g.value(ty).data());
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }
}

#[test]
fn conv_transpose_unit_kernel_matches_conv() {
    let mut r = rng(74);
    let x = uniform(&mut r, &[1, 3, 4, 4], -1.0, 1.0);
    let w = uniform(&mut r, &[3, 2, 1, 1], -1.0, 1.0);
    let mut g = Graph::new();
    let xv = g.constant(x).unwrap();
    let wt = g.constant(w.clone()).unwrap();
    // conv2d wants [O,C,...]; the transpose of a 1x1 kernel swaps the roles
    let wc = g
        .constant(Tensor::from_fn(&[2, 3, 1, 1], |i| w.data()[(i % 3) * 2 + i / 3]))
        .unwrap();
    let a = g.conv_transpose2d(xv, wt, 1, 0).unwrap();
    let b = g.conv2d(xv, wc, 1, 0).unwrap();
    assert!(max_abs_diff(g.value(a).data(), g.value(b).data()) < 1e-15);
}

#[test]
fn conv_transpose_stride_two_doubles_extent() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::ones(&[1, 4, 8, 8])).unwrap();
    let w = g.constant(Tensor::ones(&[4, 2, 4, 4])).unwrap();
    let y = g.conv_transpose2d(x, w, 2, 1).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 2, 16, 16]);
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut r = rng(75);
    let x = uniform(&mut r, &[6, 9], -20.0, 20.0);
    let mut g = Graph::new();
    let xv = g.constant(x).unwrap();
    let y = g.softmax(xv).unwrap();
    for row in g.value(y).data().chunks(9) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn identical_graphs_are_bit_identical() {
    let run = || {
        let mut r = rng(76);
        let x = uniform(&mut r, &[2, 2, 6, 6], -1.0, 1.0);
        let w = uniform(&mut r, &[3, 2, 3, 3], -1.0, 1.0);
        let mut g = Graph::new();
        let xv = g.leaf(x, true).unwrap();
        let wv = g.leaf(w, true).unwrap();
        let y = g.conv2d(xv, wv, 1, 1).unwrap();
        let y = g.gelu(y).unwrap();
        let loss = g.mean(y).unwrap();
        g.backward(loss).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        (
            bits(g.value(loss)),
            bits(g.grad(xv).unwrap()),
            bits(g.grad(wv).unwrap()),
        )
    };
    assert_eq!(run(), run());
}
