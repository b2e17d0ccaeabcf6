//! A decoder-only transformer with a speech adaptor: the same question as
//! token ids and as feature vectors, answered greedily.

use parashift::data::{generate_corpus, ModalBatch, Modality, TaskKind, TaskSpec, World, EOS};
use parashift::model::{ModelConfig, TransformerLM};

fn main() -> parashift::Result<()> {
    let cfg = ModelConfig {
        d_model: 32,
        n_layers: 2,
        d_ff: 64,
        ..ModelConfig::default()
    };
    let model = TransformerLM::new(&cfg)?;
    println!("{} parameters in {} tensors", model.num_params(), model.params().len());
    for name in model.names().iter().take(6) {
        println!("  {name:<16} {:?}", model.param(name).unwrap().shape());
    }

    let world = World { vocab_size: cfg.vocab_size, feature_dim: cfg.feature_dim, seed: 0 };
    let corpus = generate_corpus(&world, &TaskSpec::new(TaskKind::KvRetrieval, 4, 0, 1))?;
    let examples: Vec<_> = corpus.train.iter().collect();
    for modality in [Modality::Text, Modality::Speech] {
        let batch = ModalBatch::from_examples(&examples, modality, cfg.feature_dim)?;
        let loss = model.loss(&batch)?;
        let answers = model.generate_greedy(&batch.prompt_only(), batch.response_len(), EOS)?;
        println!("{modality}: untrained loss {loss:.3}, answers {answers:?}");
    }
    Ok(())
}
