use std::sync::Arc;
use std::time::Instant;

use mitr_core::gradcheck::{build_case, check_case, grad_check, registry, run_all, unit_names, CheckCase, UnitKind, EPSILON, TOLERANCE};
use mitr_core::graph::CustomOp;
use mitr_core::params::ParamStore;
use mitr_core::{Result, Tensor};

#[test]
fn every_unit_passes_at_five_seeds() {
    let start = Instant::now();
    let reports = run_all(&[0, 1, 2, 3, 4], EPSILON).unwrap();
    for r in &reports {
        assert!(r.passed(), "{} max rel error {:e}", r.name, r.max_rel_error);
        assert!(r.coordinates > 0, "{}", r.name);
    }
    assert_eq!(reports.len(), registry().len());
    assert!(start.elapsed().as_secs() < 120);
}

#[test]
fn registry_covers_operators_and_modules() {
    let names = unit_names();
    for required in [
        "gated_activation",
        "dilated_causal_conv_d1",
        "dilated_causal_conv_d8",
        "conv1x1",
        "layer_norm",
        "attention_block",
        "cross_attention",
        "smooth_l1",
        "cosine_similarity",
        "stop_gradient",
        "encoder",
        "mibtrl",
        "fusion",
        "losses",
    ] {
        assert!(names.contains(&required), "{required} missing");
    }
    let composites = registry().into_iter().filter(|(_, k, _)| *k == UnitKind::Composite).count();
    assert!(composites >= 4);
}

/// `x^2` with a backward that returns `x` instead of `2x`.
struct BrokenSquare;

impl CustomOp<f64> for BrokenSquare {
    fn name(&self) -> &str {
        "broken_square"
    }

    fn forward(&self, inputs: &[&Tensor<f64>]) -> Result<Tensor<f64>> {
        let x = inputs[0];
        Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * v).collect())
    }

    fn backward(&self, inputs: &[&Tensor<f64>], _output: &Tensor<f64>, grad: &[f64]) -> Vec<Vec<f64>> {
        vec![inputs[0].data().iter().zip(grad).map(|(x, g)| x * g).collect()]
    }
}

struct Square;

impl CustomOp<f64> for Square {
    fn name(&self) -> &str {
        "square"
    }

    fn forward(&self, inputs: &[&Tensor<f64>]) -> Result<Tensor<f64>> {
        BrokenSquare.forward(inputs)
    }

    fn backward(&self, inputs: &[&Tensor<f64>], _output: &Tensor<f64>, grad: &[f64]) -> Vec<Vec<f64>> {
        vec![inputs[0].data().iter().zip(grad).map(|(x, g)| 2.0 * x * g).collect()]
    }
}

fn custom_case(op: Arc<dyn CustomOp<f64>>) -> CheckCase {
    let x = Tensor::from_fn(&[2, 3], |i| 0.3 * i as f64 - 0.7);
    CheckCase::new(vec![x], ParamStore::new(), move |cx, v| cx.g.custom(&[v[0]], op.clone()))
}

#[test]
fn corrupted_backward_is_reported() {
    let bad = check_case("broken", &custom_case(Arc::new(BrokenSquare)), EPSILON).unwrap();
    assert!(!bad.passed());
    assert!(bad.max_rel_error > 0.1);
    let good = check_case("square", &custom_case(Arc::new(Square)), EPSILON).unwrap();
    assert!(good.max_rel_error < TOLERANCE);
}

#[test]
fn stop_gradient_case_matches_finite_differences() {
    // The stopped branch is replayed as a constant during differencing.
    assert!(grad_check("stop_gradient", 9, EPSILON).unwrap() < TOLERANCE);
    assert!(build_case("nonexistent", 0).is_err());
}

#[test]
fn epsilon_range_is_enforced() {
    assert!(grad_check("tanh", 0, 1e-8).is_err());
    assert!(grad_check("tanh", 0, 1e-3).is_ok());
}
