//! Checkpoints and importance maps share one hashed binary container;
//! a damaged file is refused.

use parashift::data::{generate_corpus, Modality, TaskKind, TaskSpec, World};
use parashift::importance::{estimate_importance, ImportanceMap};
use parashift::model::{ModelConfig, TransformerLM};

fn main() -> parashift::Result<()> {
    let cfg = ModelConfig { d_model: 16, n_layers: 2, d_ff: 32, ..Default::default() };
    let model = TransformerLM::new(&cfg)?;
    let world = World { vocab_size: cfg.vocab_size, feature_dim: cfg.feature_dim, seed: 0 };
    let probe = generate_corpus(&world, &TaskSpec::new(TaskKind::Copy, 32, 0, 1))?.train;
    let map = estimate_importance(&model, &probe, Modality::Speech)?;

    let dir = std::env::temp_dir().join("parashift-checkpoint");
    std::fs::create_dir_all(&dir)?;
    let (ckpt, map_path) = (dir.join("model.ckpt"), dir.join("speech.map"));
    model.save(&ckpt)?;
    map.save(&map_path)?;
    let back = TransformerLM::load(&ckpt)?;
    println!("checkpoint {} -> same weights: {}", back.checkpoint_hash(), back.same_weights(&model));
    println!("map reloads equal: {}", ImportanceMap::load(&map_path)? == map);

    let mut bytes = std::fs::read(&ckpt)?;
    bytes[100] ^= 1;
    std::fs::write(&ckpt, &bytes)?;
    match TransformerLM::load(&ckpt) {
        Err(e) => println!("corrupted checkpoint: {e} (exit code {})", e.exit_code()),
        Ok(_) => println!("corruption went unnoticed"),
    }
    Ok(())
}
