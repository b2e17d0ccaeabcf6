//! First-order importance `|g·θ|` against exact nullification `|L(θ) − L(θ₋ᵢ)|`.

use parashift::data::{generate_corpus, Example, Modality, TaskKind, TaskSpec, World};
use parashift::importance::{estimate_importance, exact_importance, spearman};
use parashift::model::{ModelConfig, TransformerLM};
use parashift::training::{train, Strategy, TrainingData, TrainingPlan};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const MIN_SPEARMAN: f64 = 0.8;
pub const MAX_PARAMS: usize = 50_000;

/// Two layers, `d_model = 16`.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 64,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_seq: 12,
        feature_dim: 8,
        seed: 5,
    }
}

/// Briefly trained tiny model, so scores reflect learned structure, and a
/// probe of exactly one batch, so the estimate and the exact loss see the
/// same mean.
pub fn trained() -> (TransformerLM, Vec<Example>) {
    let cfg = tiny_config();
    let world = World {
        vocab_size: cfg.vocab_size,
        feature_dim: cfg.feature_dim,
        seed: 1,
    };
    let mut spec = TaskSpec::new(TaskKind::KvRetrieval, 800, 0, 2);
    spec.n_keys = 16;
    let train_set = generate_corpus(&world, &spec).unwrap().train;
    let mut plan = TrainingPlan::new(Strategy::PretrainText);
    plan.epochs = 4;
    plan.base_lr = 3e-3;
    let out = train(
        TransformerLM::new(&cfg).unwrap(),
        TrainingData {
            train: &train_set,
            eval: &[],
            probe: &[],
            profile: None,
        },
        &plan,
    )
    .unwrap();
    let probe: Vec<Example> = train_set.into_iter().step_by(25).take(32).collect();
    (out.model, probe)
}

/// Uniformly sampled `(parameter, element)` pairs among the parameters the
/// text forward reads (the adaptor is excluded: both scores are zero there).
pub fn sample_elements(model: &TransformerLM, n: usize, seed: u64) -> Vec<(usize, usize)> {
    let offsets: Vec<(usize, usize)> = model
        .names()
        .iter()
        .enumerate()
        .filter(|(_, name)| !name.starts_with("adaptor."))
        .flat_map(|(p, _)| (0..model.params()[p].numel()).map(move |e| (p, e)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample(&mut rng, offsets.len(), n).into_iter().map(|i| offsets[i]).collect()
}

/// Spearman correlation of exact and estimated scores over `n` elements,
/// with the model's parameter count.
pub fn exact_vs_estimate(n: usize) -> (f64, usize) {
    let (model, probe) = trained();
    let map = estimate_importance(&model, &probe, Modality::Text).unwrap();
    let picks = sample_elements(&model, n, 17);
    let exact = exact_importance(&model, &probe, Modality::Text, &picks).unwrap();
    let estimate: Vec<f64> = picks.iter().map(|&(p, e)| map.scores[p].data()[e]).collect();
    (spearman(&exact, &estimate).unwrap(), model.num_params())
}
