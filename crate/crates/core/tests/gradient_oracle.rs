//! Reverse-mode gradients against central finite differences.

mod oracles;

use oracles::gradient::{lora_adapter_error, primitive_errors, random_model_errors, MODEL_TOL, PRIMITIVE_TOL};

#[test]
fn every_primitive_within_tolerance() {
    for (name, err) in primitive_errors() {
        assert!(err <= PRIMITIVE_TOL, "{name}: max relative error {err:e} > {PRIMITIVE_TOL:e}");
    }
}

#[test]
fn full_model_on_twenty_random_configs() {
    for (i, err) in random_model_errors(20).into_iter().enumerate() {
        assert!(err <= MODEL_TOL, "config {i}: {err:e}");
    }
}

#[test]
fn lora_adapter_gradients() {
    let err = lora_adapter_error();
    assert!(err <= MODEL_TOL, "adapter gradients: {err:e}");
}
