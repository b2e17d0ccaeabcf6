//! The command-line pipeline driven in-process on a seconds-scale config:
//! every subcommand writes under `<out>/<config hash>/`.

use std::path::Path;

const CONFIG: &str = r#"
seed = 1
probe_ratio = 0.25
[model]
vocab_size = 48
d_model = 16
n_layers = 2
n_heads = 2
d_ff = 32
max_seq = 12
feature_dim = 4
[data]
benchmark = ["kv-retrieval"]
[[data.pretrain]]
kind = "kv-retrieval"
n_train = 200
n_eval = 24
n_keys = 16
[[data.finetune]]
kind = "kv-retrieval"
n_train = 64
n_eval = 0
n_keys = 16
key_fraction = 0.5
seed = 11
[pretrain]
strategy = "pretrain-text"
base_lr = 3e-3
[[arms]]
strategy = "full-ft"
base_lr = 1e-3
[[arms]]
strategy = "lora"
base_lr = 1e-3
lora_rank = 4
[rank_cluster]
matrices = ["layer.0.wq"]
"#;

fn main() {
    let root = std::env::temp_dir().join("parashift-pipeline");
    let config = root.join("run.toml");
    std::fs::create_dir_all(&root).unwrap();
    std::fs::write(&config, CONFIG).unwrap();
    let steps: [&[&str]; 6] = [
        &["pretrain"],
        &["importance", "--modality", "text"],
        &["importance", "--modality", "speech"],
        &["deactivate", "--fraction", "0.05"],
        &["rank-cluster"],
        &["grid"],
    ];
    for step in steps {
        let mut args = vec!["parashift", "--config", config.to_str().unwrap(), "--out", root.to_str().unwrap()];
        args.extend_from_slice(step);
        let code = parashift::cli::run_from(args);
        println!("{:<32} exit {code}", step.join(" "));
    }
    let cfg = parashift::cli::RunConfig::from_file(&config).unwrap();
    let dir = cfg.run_dir(&root);
    print!("{}", std::fs::read_to_string(dir.join("deactivation.md")).unwrap());
    print!("{}", std::fs::read_to_string(dir.join("grid/results.csv")).unwrap());
    list(&dir, &dir);
}

fn list(base: &Path, dir: &Path) {
    let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            list(base, &p);
        } else {
            println!("  {}", p.strip_prefix(base).unwrap().display());
        }
    }
}
