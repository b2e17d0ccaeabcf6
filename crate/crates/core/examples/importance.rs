//! Gradient-times-weight importance of a briefly trained model, checked
//! against exact nullification on a handful of elements, and summed per layer.

use parashift::data::{generate_corpus, Modality, TaskKind, TaskSpec, World};
use parashift::importance::{aggregate_layers, estimate_importance, exact_importance};
use parashift::model::{ModelConfig, TransformerLM};
use parashift::training::{train, Strategy, TrainingData, TrainingPlan};

fn main() -> parashift::Result<()> {
    let cfg = ModelConfig { vocab_size: 64, d_model: 32, n_layers: 3, d_ff: 64, max_seq: 8, feature_dim: 8, ..Default::default() };
    let world = World { vocab_size: cfg.vocab_size, feature_dim: cfg.feature_dim, seed: 0 };
    let mut spec = TaskSpec::new(TaskKind::KvRetrieval, 1000, 0, 1);
    spec.n_keys = 16;
    let data = generate_corpus(&world, &spec)?.train;

    let mut plan = TrainingPlan::new(Strategy::PretrainText);
    plan.base_lr = 3e-3;
    let model = train(TransformerLM::new(&cfg)?, TrainingData { train: &data, eval: &[], probe: &[], profile: None }, &plan)?.model;

    let probe = &data[..64];
    let map = estimate_importance(&model, probe, Modality::Text)?;
    let wq = model.param_index("layer.1.wq").unwrap();
    let picks: Vec<(usize, usize)> = (0..6).map(|e| (wq, e * 37)).collect();
    let exact = exact_importance(&model, probe, Modality::Text, &picks)?;
    println!("layer.1.wq   estimate      exact");
    for (&(p, e), x) in picks.iter().zip(exact) {
        println!("  [{e:>4}]   {:.3e}   {x:.3e}", map.scores[p].data()[e]);
    }
    let profile = aggregate_layers(&map);
    println!("layer profile {:.4?}", profile.normalized()?);
    for (group, score) in &profile.other {
        println!("{group:<12} {score:.3e}");
    }
    Ok(())
}
