//! Zeroing the most, least and randomly chosen 3% of parameters by
//! importance, and what it does to perplexity.

use parashift::data::{generate_corpus, Modality, TaskKind, TaskSpec, World};
use parashift::importance::{apply_mask, build_mask, estimate_importance, perplexity, MaskMode};
use parashift::model::{ModelConfig, TransformerLM};
use parashift::training::{train, Strategy, TrainingData, TrainingPlan};

fn main() -> parashift::Result<()> {
    let cfg = ModelConfig { vocab_size: 64, d_model: 32, n_layers: 2, d_ff: 64, max_seq: 8, feature_dim: 8, ..Default::default() };
    let world = World { vocab_size: cfg.vocab_size, feature_dim: cfg.feature_dim, seed: 0 };
    let mut spec = TaskSpec::new(TaskKind::KvRetrieval, 1500, 100, 1);
    spec.n_keys = 16;
    let corpus = generate_corpus(&world, &spec)?;

    let mut plan = TrainingPlan::new(Strategy::PretrainText);
    plan.base_lr = 3e-3;
    plan.epochs = 4;
    let data = TrainingData { train: &corpus.train, eval: &[], probe: &[], profile: None };
    let model = train(TransformerLM::new(&cfg)?, data, &plan)?.model;
    let map = estimate_importance(&model, &corpus.train[..100], Modality::Text)?;

    println!("base     ppl {:.3}", perplexity(&model, &corpus.eval, Modality::Text)?);
    for mode in MaskMode::ALL {
        let mask = build_mask(&map, 0.03, mode, 0)?;
        let ppl = perplexity(&apply_mask(&model, &mask)?, &corpus.eval, Modality::Text)?;
        println!("{mode:<8} ppl {ppl:.3}  ({} parameters zeroed)", mask.count());
    }
    Ok(())
}
