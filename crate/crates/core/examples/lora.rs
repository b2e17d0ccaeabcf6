//! Low-rank adapters on every block matrix: train on speech input with the
//! base frozen, then merge into plain weights.

use parashift::data::{generate_corpus, Modality, TaskKind, TaskSpec, World};
use parashift::importance::perplexity;
use parashift::model::{ModelConfig, TransformerLM};
use parashift::training::{train, Strategy, TrainingData, TrainingPlan};

fn main() -> parashift::Result<()> {
    let cfg = ModelConfig { vocab_size: 64, d_model: 32, n_layers: 2, d_ff: 64, max_seq: 8, feature_dim: 8, ..Default::default() };
    let world = World { vocab_size: cfg.vocab_size, feature_dim: cfg.feature_dim, seed: 0 };
    let mut spec = TaskSpec::new(TaskKind::KvRetrieval, 600, 60, 1);
    spec.n_keys = 16;
    let corpus = generate_corpus(&world, &spec)?;
    let base = TransformerLM::new(&cfg)?;

    let mut plan = TrainingPlan::new(Strategy::Lora);
    plan.lora_rank = 4;
    plan.base_lr = 3e-3;
    let data = TrainingData { train: &corpus.train, eval: &[], probe: &[], profile: None };
    let tuned = train(base.clone(), data, &plan)?.model;
    println!(
        "{} adapters, rank {}, alpha {} ({} trainable of {} parameters)",
        tuned.adapters().len(),
        plan.lora_rank,
        plan.lora_alpha(),
        tuned.num_trainable(),
        tuned.num_params()
    );
    let frozen = base.names().iter().zip(base.params().iter().zip(tuned.params()))
        .filter(|(n, _)| !n.starts_with("adaptor."))
        .all(|(_, (a, b))| a.data() == b.data());
    println!("base weights untouched: {frozen}");

    let merged = tuned.merged();
    for (name, m) in [("base", &base), ("adapters", &tuned), ("merged", &merged)] {
        println!("{name:<9} speech ppl {:.4}", perplexity(m, &corpus.eval, Modality::Speech)?);
    }
    Ok(())
}
