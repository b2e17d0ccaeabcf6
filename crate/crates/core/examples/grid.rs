//! Speech fine-tuning grid on a small pretrained model: full fine-tuning,
//! layer-wise learning rates and LoRA, scored on text and speech questions.

use parashift::data::{generate_corpus, Corpus, Example, TaskKind, TaskSpec, World};
use parashift::model::{ModelConfig, TransformerLM};
use parashift::training::{run_experiment_grid, train, write_results_csv, GridData, Strategy, TrainingData, TrainingPlan};

fn main() -> parashift::Result<()> {
    let cfg = ModelConfig { vocab_size: 64, d_model: 32, n_layers: 3, d_ff: 64, max_seq: 8, feature_dim: 8, ..Default::default() };
    let world = World { vocab_size: cfg.vocab_size, feature_dim: cfg.feature_dim, seed: 0 };
    let mut kv = TaskSpec::new(TaskKind::KvRetrieval, 1500, 100, 1);
    kv.n_keys = 24;
    let pretrain = generate_corpus(&world, &kv)?;

    let mut plan = TrainingPlan::new(Strategy::PretrainText);
    plan.base_lr = 3e-3;
    plan.epochs = 4;
    let data = TrainingData { train: &pretrain.train, eval: &[], probe: &[], profile: None };
    let model = train(TransformerLM::new(&cfg)?, data, &plan)?.model;

    // speech fine-tuning on half of the keys
    let mut ft = TaskSpec::new(TaskKind::KvRetrieval, 300, 0, 2);
    ft.n_keys = 24;
    ft.key_fraction = 0.5;
    let finetune: Vec<Example> = generate_corpus(&world, &ft)?.train;

    let mut plans: Vec<TrainingPlan> = [Strategy::FullFt, Strategy::LayerLr, Strategy::Lora]
        .into_iter()
        .map(TrainingPlan::new)
        .collect();
    for p in &mut plans {
        p.base_lr = 1e-3;
        p.epochs = 2;
    }
    let probe = Corpus::probe_subset(&pretrain.train, 1.0 / 30.0);
    let outcome = run_experiment_grid(&model, &plans, GridData { finetune: &finetune, benchmark: &pretrain.eval, text_probe: &probe })?;
    write_results_csv(&outcome.rows, std::io::stdout())?;
    Ok(())
}
