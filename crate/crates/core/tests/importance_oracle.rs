//! First-order importance `|g·θ|` against exact nullification `|L(θ) − L(θ₋ᵢ)|`.

mod oracles;

use oracles::importance::{exact_vs_estimate, trained, MAX_PARAMS, MIN_SPEARMAN};
use parashift::data::Modality;
use parashift::importance::{estimate_importance, exact_importance};

#[test]
fn gradient_estimate_ranks_like_exact_nullification() {
    let (rho, params) = exact_vs_estimate(600);
    assert!(params <= MAX_PARAMS, "{params} parameters");
    eprintln!("spearman over 600 elements: {rho:.4}");
    assert!(rho >= MIN_SPEARMAN, "spearman {rho:.4} < {MIN_SPEARMAN}");
}

#[test]
fn estimate_is_first_order_term_of_exact_change() {
    // for an element with tiny weight, nullifying it changes the loss by
    // almost exactly g·θ
    let (mut model, probe) = trained();
    let (p, e) = (model.param_index("layer.0.wq").unwrap(), 3);
    model.params_mut()[p].data_mut()[e] = 1e-4;
    let map = estimate_importance(&model, &probe, Modality::Text).unwrap();
    let exact = exact_importance(&model, &probe, Modality::Text, &[(p, e)]).unwrap()[0];
    let est = map.scores[p].data()[e];
    assert!((exact - est).abs() <= 1e-3 * est.max(1e-12) + 1e-14, "exact {exact:e} vs estimate {est:e}");
}
