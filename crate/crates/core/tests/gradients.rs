mod common;

use common::*;
use mzsr::meta::meta_objective;
use mzsr::tensor::{backward, Array, Graph};
use proptest::prelude::*;

#[test]
fn every_op_matches_finite_differences() {
    for case in op_cases() {
        let err = gradient_error(&*case.f, &case.inputs);
        assert!(err <= FD_TOL, "{}: relative error {err:e}", case.name);
    }
}

#[test]
fn gradients_of_gradients_match_finite_differences() {
    for case in op_cases() {
        // Squaring keeps every gradient input-dependent, even for linear ops.
        let f = &case.f;
        let squared = move |g: &Graph, x: &[mzsr::tensor::Tensor]| {
            let y = f(g, x)?;
            y.mul(&y)
        };
        let err = second_order_error(&squared, &case.inputs, 900);
        assert!(err <= FD_TOL, "{}: relative error {err:e}", case.name);
    }
}

#[test]
fn meta_gradient_matches_finite_differences() {
    assert!(micro_arch().param_count().unwrap() <= 50);
    let err = meta_gradient_error(false);
    assert!(err <= FD_TOL, "relative error {err:e}");
}

#[test]
fn first_order_meta_gradient_differs_on_network() {
    let tasks = vec![MicroTask::new(40)];
    let grad = |first_order: bool| {
        let g = Graph::new();
        let theta: Vec<_> = micro_params(60).into_iter().map(|a| g.leaf(a)).collect();
        let obj = meta_objective(&theta, &tasks, 0.05, &[1.0], first_order).unwrap();
        backward(&obj, &theta, false)
            .unwrap()
            .iter()
            .flat_map(|t| t.value().data().to_vec())
            .collect::<Vec<f64>>()
    };
    let full = grad(false);
    let approx = grad(true);
    assert!(relative_error(&full, &approx) > 1e-6);
}

/// Evaluate `c · x^n` and its first and second derivatives through the tape.
fn monomial_derivatives(x0: f64, n: usize, c: f64) -> (f64, f64, f64) {
    let g = Graph::new();
    let x = g.scalar(x0);
    let mut y = x.clone();
    for _ in 1..n {
        y = y.mul(&x).unwrap();
    }
    let y = y.mul_scalar(c);
    let d1 = backward(&y, std::slice::from_ref(&x), true).unwrap().remove(0);
    let d2 = backward(&d1, &[x], false).unwrap().remove(0);
    (y.item(), d1.item(), d2.item())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn polynomial_double_backward(x0 in -2.0f64..2.0, n in 2usize..=4, c in -3.0f64..3.0) {
        let (y, d1, d2) = monomial_derivatives(x0, n, c);
        let nf = n as f64;
        prop_assert!((y - c * x0.powi(n as i32)).abs() <= 1e-12 * (1.0 + y.abs()));
        prop_assert!((d1 - c * nf * x0.powi(n as i32 - 1)).abs() <= 1e-12 * (1.0 + d1.abs()));
        prop_assert!((d2 - c * nf * (nf - 1.0) * x0.powi(n as i32 - 2)).abs() <= 1e-12 * (1.0 + d2.abs()));
    }

    #[test]
    fn backward_never_mutates_recorded_values(seed in 0u64..1000) {
        let g = Graph::new();
        let a = g.leaf(random_array(seed, &[3, 4]));
        let b = g.leaf(random_array(seed + 1, &[3, 4]));
        let y = a.mul(&b).unwrap().relu().sum();
        let before: Vec<Array> = [&a, &b, &y].iter().map(|t| (*t.value()).clone()).collect();
        let _ = backward(&y, &[a.clone(), b.clone()], true).unwrap();
        let after: Vec<Array> = [&a, &b, &y].iter().map(|t| (*t.value()).clone()).collect();
        prop_assert_eq!(before, after);
    }

    #[test]
    fn sum_and_mean_gradients_are_uniform(seed in 0u64..1000, rows in 1usize..5, cols in 1usize..5) {
        let g = Graph::new();
        let x = g.leaf(random_array(seed, &[rows, cols]));
        let dsum = backward(&x.sum(), std::slice::from_ref(&x), false).unwrap().remove(0);
        prop_assert!(dsum.value().data().iter().all(|&v| v == 1.0));
        let dmean = backward(&x.mean(), std::slice::from_ref(&x), false).unwrap().remove(0);
        let n = (rows * cols) as f64;
        prop_assert!(dmean.value().data().iter().all(|&v| (v - 1.0 / n).abs() < 1e-15));
    }
}
