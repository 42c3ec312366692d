mod common;

use common::{integer_tensor, naive_conv, naive_conv_transposed, random_tensor, rng};
use rand::Rng;
use seistile::nn::{conv2d_forward, conv2d_transposed_forward};
use seistile::tensor::Tensor;

#[test]
fn im2col_matches_naive_loops_exactly() {
    let mut r = rng(1);
    for case in 0..60 {
        let (n, h, w) = (r.random_range(1..=2), r.random_range(1..=7), r.random_range(1..=7));
        let (cin, cout) = (r.random_range(1..=3), r.random_range(1..=3));
        let (k, s) = ([1, 2, 3, 5][r.random_range(0..4)], r.random_range(1..=2));
        let x = integer_tensor(&mut r, &[n, h, w, cin]);
        let kernel = integer_tensor(&mut r, &[k, k, cin, cout]);
        let bias = integer_tensor(&mut r, &[cout]);
        let (fast, _) = conv2d_forward(&x, &kernel, &bias, s).unwrap();
        assert_eq!(
            fast,
            naive_conv(&x, &kernel, &bias, s),
            "case {case}: {n}x{h}x{w}x{cin} k{k} s{s} -> {cout}"
        );
    }
}

#[test]
fn transposed_matches_scatter_oracle_exactly() {
    let mut r = rng(2);
    for case in 0..40 {
        let (h, w) = (r.random_range(1..=5), r.random_range(1..=5));
        let (cin, cout) = (r.random_range(1..=3), r.random_range(1..=3));
        let (k, s) = ([1, 2, 3][r.random_range(0..3)], r.random_range(1..=2));
        let y = integer_tensor(&mut r, &[1, h, w, cin]);
        let kernel = integer_tensor(&mut r, &[k, k, cout, cin]);
        let bias = integer_tensor(&mut r, &[cout]);
        let (fast, _) = conv2d_transposed_forward(&y, &kernel, &bias, s).unwrap();
        assert_eq!(fast.shape(), &[1, h * s, w * s, cout]);
        assert_eq!(fast, naive_conv_transposed(&y, &kernel, &bias, s), "case {case}");
    }
}

#[test]
fn transposed_is_the_adjoint() {
    let mut r = rng(3);
    for case in 0..30 {
        let s = 1 + case % 2;
        let (h, w) = (s * r.random_range(1..=5), s * r.random_range(1..=5));
        let (cin, cout, k) = (
            r.random_range(1..=3),
            r.random_range(1..=3),
            [1, 3, 5][r.random_range(0..3)],
        );
        let x = random_tensor(&mut r, &[2, h, w, cin]);
        let kernel = random_tensor(&mut r, &[k, k, cin, cout]);
        let (ax, _) = conv2d_forward(&x, &kernel, &Tensor::zeros(&[cout]), s).unwrap();
        let y = random_tensor(&mut r, ax.shape());
        let (aty, _) = conv2d_transposed_forward(&y, &kernel, &Tensor::zeros(&[cin]), s).unwrap();
        let lhs = ax.dot(&y).unwrap();
        let rhs = x.dot(&aty).unwrap();
        assert!((lhs - rhs).abs() < 1e-10, "case {case}: {lhs} vs {rhs}");
    }
}

#[test]
fn scalar_examples() {
    let x = Tensor::new(&[1, 1, 1, 1], vec![2.0]).unwrap();
    let w = Tensor::new(&[1, 1, 1, 1], vec![3.0]).unwrap();
    let (y, _) = conv2d_forward(&x, &w, &Tensor::new(&[1], vec![1.0]).unwrap(), 1).unwrap();
    assert_eq!(y.data(), &[7.0]);
    let x = Tensor::from_fn(&[1, 2, 2, 1], |_| 1.0);
    let (y, _) = conv2d_transposed_forward(&x, &Tensor::full(&[2, 2, 1, 1], 1.0), &Tensor::zeros(&[1]), 2).unwrap();
    assert_eq!(y.shape(), &[1, 4, 4, 1]);
    assert!(y.data().iter().all(|&v| v == 1.0));
}
