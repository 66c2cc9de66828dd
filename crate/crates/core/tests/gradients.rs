use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use placerec_core::diff::{grad_check, BnMode, CustomOp, Graph};
use placerec_core::suite::{self, DEFAULT_STEP, DEFAULT_TOLERANCE};
use placerec_core::Tensor;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec())
}

#[test]
fn full_suite_passes() {
    let start = Instant::now();
    let results = suite::run(None, 1, DEFAULT_TOLERANCE, DEFAULT_STEP).unwrap();
    assert_eq!(results.len(), suite::case_names().len());
    let failed: Vec<_> = results
        .iter()
        .filter(|r| !r.report.passed)
        .map(|r| format!("{} ({:e})", r.name, r.report.max_rel_error))
        .collect();
    assert!(failed.is_empty(), "failing cases: {failed:?}");
    assert!(start.elapsed().as_secs() < 300);
}

#[test]
fn suite_holds_for_other_seeds() {
    for seed in [2, 3] {
        for r in suite::run(Some("module_"), seed, DEFAULT_TOLERANCE, DEFAULT_STEP).unwrap() {
            assert!(r.report.passed, "seed {seed} {} {:e}", r.name, r.report.max_rel_error);
        }
    }
}

#[test]
fn forward_examples() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[2], &[-1.0, 2.0]), false);
    let r = g.relu(x).unwrap();
    assert_eq!(g.value(r).data(), &[0.0, 2.0]);

    let z = g.leaf(t(&[1, 3], &[0.0, 0.0, 0.0]), false);
    let s = g.softmax(z, 1).unwrap();
    for v in g.value(s).data() {
        assert_eq!(*v, 1.0 / 3.0);
    }

    let o = g.leaf(t(&[1], &[0.0]), false);
    let sg = g.sigmoid(o).unwrap();
    assert_eq!(g.value(sg).data(), &[0.5]);
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[2], &[1.0, 2.0]), true);
    let sq = g.mul(x, x).unwrap();
    let y = g.sum_all(sq).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);

    let mut g = Graph::new();
    let x = g.leaf(t(&[2], &[-1.0, 3.0]), true);
    let r = g.relu(x).unwrap();
    let y = g.sum_all(r).unwrap();
    assert_eq!(g.backward(y).unwrap().get(x).unwrap().data(), &[0.0, 1.0]);
}

#[test]
fn backward_requires_scalar_output() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[2], &[1.0, 2.0]), true);
    assert!(g.backward(x).is_err());
}

#[test]
fn fan_out_gradients_accumulate() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[1], &[3.0]), true);
    let a = g.scale(x, 2.0).unwrap();
    let b = g.add(a, x).unwrap();
    let y = g.sum_all(b).unwrap();
    assert_eq!(g.backward(y).unwrap().get(x).unwrap().data(), &[3.0]);
}

#[test]
fn shape_errors_name_the_node() {
    let mut g = Graph::<f64>::new();
    let a = g.leaf(Tensor::zeros(&[2, 3]), false);
    let b = g.leaf(Tensor::zeros(&[2, 3]), false);
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("matmul"), "{err}");
}

#[test]
fn linear_and_batchnorm_pass() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut rand = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    };
    let mut g = Graph::new();
    let x = g.leaf(rand(&[6, 4]), true);
    let w = g.leaf(rand(&[4, 3]), true);
    let b = g.leaf(rand(&[3]), true);
    let gamma = g.leaf(rand(&[3]), true);
    let beta = g.leaf(rand(&[3]), true);
    let r = g.leaf(rand(&[6, 3]), false);
    let l = g.linear(x, w, Some(b)).unwrap();
    let n = g.batch_norm(l, gamma, beta, BnMode::Train, 1e-5).unwrap();
    let m = g.mul(n, r).unwrap();
    let y = g.sum_all(m).unwrap();
    let report = grad_check(&mut g, y, 1e-4, 1e-5).unwrap();
    assert!(report.passed, "{report:?}");
}

/// `y = 2x` whose backward rule returns the wrong sign.
struct NegatedDouble;

impl CustomOp<f64> for NegatedDouble {
    fn name(&self) -> &'static str {
        "negated_double"
    }

    fn forward(&self, inputs: &[&Tensor<f64>]) -> Result<Tensor<f64>, String> {
        Ok(inputs[0].map(|v| 2.0 * v))
    }

    fn backward(&self, _inputs: &[&Tensor<f64>], _output: &Tensor<f64>, grad: &Tensor<f64>) -> Vec<Tensor<f64>> {
        vec![grad.map(|v| -2.0 * v)]
    }
}

#[test]
fn corrupted_backward_fails_the_check() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[3], &[0.3, -0.7, 1.1]), true);
    let y = g.custom(Arc::new(NegatedDouble), &[x]).unwrap();
    let sq = g.mul(y, y).unwrap();
    let out = g.sum_all(sq).unwrap();
    let report = grad_check(&mut g, out, 1e-4, 1e-5).unwrap();
    assert!(!report.passed);
    assert!(report.max_rel_error > 0.5);
}

#[test]
fn linear_graph_backward_is_the_transpose() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let (n, m) = (rng.random_range(1..6), rng.random_range(1..6));
        let a: Vec<f64> = (0..n * m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let u: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let av = g.leaf(t(&[n, m], &a), false);
        let xv = g.leaf(t(&[m, 1], &x), true);
        let y = g.matmul(av, xv).unwrap();
        let grads = g.backward_seeded(y, t(&[n, 1], &u)).unwrap();
        let got = grads.get(xv).unwrap().data().to_vec();
        for j in 0..m {
            let want: f64 = (0..n).map(|i| a[i * m + j] * u[i]).sum();
            assert!((got[j] - want).abs() < 1e-14);
        }
    }
}

#[test]
fn forward_is_bitwise_deterministic() {
    let a = suite::run(Some("module_full_model"), 4, 1e-4, 1e-5).unwrap();
    let b = suite::run(Some("module_full_model"), 4, 1e-4, 1e-5).unwrap();
    assert_eq!(a[0].report.max_rel_error.to_bits(), b[0].report.max_rel_error.to_bits());
}
