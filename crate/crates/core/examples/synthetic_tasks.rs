//! The three synthetic tasks of one world, with their disjoint eval splits
//! and the tab-separated record dump.

use parashift::data::{generate_corpus, write_records, TaskKind, TaskSpec, World};

fn main() -> parashift::Result<()> {
    let world = World { vocab_size: 64, feature_dim: 4, seed: 7 };
    for kind in [TaskKind::KvRetrieval, TaskKind::Copy, TaskKind::ToyQa] {
        let mut spec = TaskSpec::new(kind, 200, 20, 1);
        spec.n_keys = 16;
        let corpus = generate_corpus(&world, &spec)?;
        let e = &corpus.train[0];
        println!(
            "{kind:<13} train {} eval {}  e.g. {:?} -> {:?}",
            corpus.train.len(),
            corpus.eval.len(),
            e.prompt,
            e.response
        );
    }
    let corpus = generate_corpus(&world, &TaskSpec::new(TaskKind::Copy, 1, 0, 1))?;
    let mut out = Vec::new();
    write_records(&corpus.train, &mut out)?;
    print!("{}", String::from_utf8_lossy(&out));
    Ok(())
}
