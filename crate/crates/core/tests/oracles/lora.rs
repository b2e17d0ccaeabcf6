//! Structural invariants of low-rank adapters, as measurements.

use nalgebra::DMatrix;
use parashift::data::{batches, generate_corpus, Example, Modality, TaskKind, TaskSpec, World};
use parashift::model::{MergeStatus, ModelConfig, TransformerLM, DEFAULT_LORA_TARGETS};
use parashift::training::{train, Strategy, TrainingData, TrainingPlan};
use parashift::Tensor;

/// Merged and unmerged forwards differ only by rounding of the extra matmuls.
pub const MERGE_TOL: f64 = 1e-10;
/// Singular values below `RANK_RTOL · σ_max` count as zero.
pub const RANK_RTOL: f64 = 1e-9;

pub fn small_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 64,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_seq: 12,
        feature_dim: 8,
        seed: 11,
    }
}

pub fn speech_examples(cfg: &ModelConfig, n: usize) -> Vec<Example> {
    let world = World {
        vocab_size: cfg.vocab_size,
        feature_dim: cfg.feature_dim,
        seed: 4,
    };
    let mut spec = TaskSpec::new(TaskKind::KvRetrieval, n, 0, 9);
    spec.n_keys = 16;
    generate_corpus(&world, &spec).unwrap().train
}

pub fn numerical_rank(t: &Tensor) -> usize {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let m = DMatrix::from_row_slice(r, c, t.data());
    let sv = m.singular_values();
    let max = sv.iter().copied().fold(0.0, f64::max);
    sv.iter().filter(|&&s| s > RANK_RTOL * max).count()
}

/// `(base, LoRA-trained)` pair on speech data.
pub fn trained_lora(rank: usize) -> (TransformerLM, TransformerLM) {
    let cfg = small_config();
    let base = TransformerLM::new(&cfg).unwrap();
    let data = speech_examples(&cfg, 96);
    let mut plan = TrainingPlan::new(Strategy::Lora);
    plan.lora_rank = rank;
    plan.epochs = 2;
    plan.base_lr = 1e-2;
    plan.batch_size = 16;
    let out = train(
        base.clone(),
        TrainingData {
            train: &data,
            eval: &[],
            probe: &[],
            profile: None,
        },
        &plan,
    )
    .unwrap();
    (base, out.model)
}

/// Whether freshly attached adapters leave both modalities' logits
/// bit-identical, and the number of adapters attached.
pub fn attach_identity() -> (bool, usize) {
    let cfg = small_config();
    let mut model = TransformerLM::new(&cfg).unwrap();
    let data = speech_examples(&cfg, 24);
    let logits = |m: &TransformerLM, modality| {
        m.logits(&batches(&data, 24, modality, cfg.feature_dim).unwrap()[0]).unwrap()
    };
    let before = [logits(&model, Modality::Text), logits(&model, Modality::Speech)];
    let n = model.attach_lora(DEFAULT_LORA_TARGETS, 4, 8.0, 3).unwrap();
    let after = [logits(&model, Modality::Text), logits(&model, Modality::Speech)];
    let same = before.iter().zip(&after).all(|(a, b)| a.data() == b.data());
    (same, n)
}

/// Largest logit difference between a trained adapter model and its merge,
/// over both modalities, and the two merge statuses (first, repeated).
pub fn merge_fidelity(tuned: &TransformerLM) -> (f64, MergeStatus, MergeStatus) {
    let data = speech_examples(tuned.config(), 32);
    let mut merged = tuned.clone();
    let first = merged.merge_lora();
    let mut worst: f64 = 0.0;
    for m in [Modality::Text, Modality::Speech] {
        let batch = &batches(&data, 32, m, tuned.config().feature_dim).unwrap()[0];
        let diff = tuned.logits(batch).unwrap().max_abs_diff(&merged.logits(batch).unwrap()).unwrap();
        worst = worst.max(diff);
    }
    (worst, first, merged.merge_lora())
}

/// Names of base (non-adaptor) parameters that changed, and whether the
/// adaptor moved.
pub fn frozen_base_changes(base: &TransformerLM, tuned: &TransformerLM) -> (Vec<String>, bool) {
    let mut changed = Vec::new();
    let mut adaptor_moved = false;
    for (name, (b, t)) in base.names().iter().zip(base.params().iter().zip(tuned.params())) {
        if name.starts_with("adaptor.") {
            adaptor_moved |= b.data() != t.data();
        } else if b.data() != t.data() {
            changed.push(name.clone());
        }
    }
    (changed, adaptor_moved)
}

/// Numerical rank of every merged weight update `ΔW`.
pub fn update_ranks(base: &TransformerLM, tuned: &TransformerLM) -> Vec<(String, usize)> {
    let merged = tuned.merged();
    tuned
        .adapters()
        .iter()
        .map(|ad| {
            let before = base.param(&ad.target).unwrap();
            let after = merged.param(&ad.target).unwrap();
            let delta: Vec<f64> = after.data().iter().zip(before.data()).map(|(a, b)| a - b).collect();
            (ad.target.clone(), numerical_rank(&Tensor::new(before.shape(), delta).unwrap()))
        })
        .collect()
}
