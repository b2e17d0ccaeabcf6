//! Acceptance suite: one `PASS`/`FAIL` line per criterion, tolerances pinned
//! below. Runs without the libtest harness so the verdicts always print;
//! pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test --release --test acceptance -- 4 5`.
//!
//! Expect about half an hour on one core: criterion 3 pretrains the default
//! model and criteria 6–8 run the five-seed grid.

mod oracles;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use parashift::cli::{
    build_datasets, change_maps, deactivation_stage, grid_stage, importance_stage, pretrain_stage, RunConfig,
};
use parashift::data::Modality;
use parashift::importance::{ImportanceMap, LayerImportanceProfile, MaskMode};
use parashift::model::{MergeStatus, TransformerLM};
use parashift::report::{encode_pgm, parse_pgm};
use parashift::training::layer_lr_coefficients;
use parashift::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// 1. gradient oracle
const N_RANDOM_CONFIGS: u64 = 20;
// 2. exact vs first-order importance
const N_SAMPLED_ELEMENTS: usize = 500;
// 3. deactivation ordering
const DEACTIVATION_FRACTION: f64 = 0.03;
const TOP_FACTOR: f64 = 10.0;
const BOTTOM_FACTOR: f64 = 1.2;
// 4. layer-wise learning rates
const LAMBDA: f64 = 0.4;
const N_RANDOM_PROFILES: usize = 100;
// 6–8. mitigation grid
const GRID_CONFIG: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/grid-small.toml");
const GRID_SEEDS: u64 = 5;
/// The LoRA arm of the mitigation comparison (rank 8, as for the smaller
/// model of the study); the rank sweep is reported alongside.
const LORA_ARM: &str = "lora-r8";
/// Allowed S2T shortfall of a mitigation arm below full fine-tuning.
const S2T_SLACK: f64 = 0.02;
// 9. reproducibility
const TINY_CONFIG: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/tiny.toml");
// 10. format round trips: one 16-bit quantum, half-width
const PGM_TOL: f64 = 0.5 / 65535.0;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn criterion_1() -> Verdict {
    let primitives = oracles::gradient::primitive_errors();
    let (worst_name, worst_prim) = primitives
        .iter()
        .copied()
        .fold(("", 0.0f64), |acc, (n, e)| if e > acc.1 { (n, e) } else { acc });
    let models = oracles::gradient::random_model_errors(N_RANDOM_CONFIGS);
    let worst_model = models.iter().copied().fold(0.0, f64::max);
    let adapters = oracles::gradient::lora_adapter_error();
    verdict(
        worst_prim <= oracles::gradient::PRIMITIVE_TOL
            && worst_model <= oracles::gradient::MODEL_TOL
            && adapters <= oracles::gradient::MODEL_TOL,
        format!(
            "{} primitives worst {worst_prim:.1e} ({worst_name}) <= 1e-6; {N_RANDOM_CONFIGS} models worst {worst_model:.1e}, adapters {adapters:.1e} <= 1e-4",
            primitives.len()
        ),
    )
}

fn criterion_2() -> Verdict {
    let (rho, params) = oracles::importance::exact_vs_estimate(N_SAMPLED_ELEMENTS);
    verdict(
        rho >= oracles::importance::MIN_SPEARMAN && params <= oracles::importance::MAX_PARAMS,
        format!("spearman {rho:.4} >= 0.8 over {N_SAMPLED_ELEMENTS} elements, {params} parameters"),
    )
}

fn criterion_3() -> Verdict {
    let cfg = RunConfig::default_config();
    let data = build_datasets(&cfg).unwrap();
    let pretrained = pretrain_stage(&cfg, &data).unwrap();
    let model = pretrained.analysis_model();
    let maps: Vec<ImportanceMap> = [Modality::Text, Modality::Speech]
        .iter()
        .map(|&m| importance_stage(model, &data, m).unwrap())
        .collect();
    let rows = deactivation_stage(&cfg, model, &maps, &data, DEACTIVATION_FRACTION, &MaskMode::ALL).unwrap();
    let mut pass = true;
    let mut detail = Vec::new();
    for r in &rows {
        let ok = r.top >= TOP_FACTOR * r.base
            && r.bottom <= BOTTOM_FACTOR * r.base
            && r.base.max(r.bottom) < r.random
            && r.random < r.top;
        pass &= ok;
        detail.push(format!(
            "{} base {:.3} top {:.1} bottom {:.3} random {:.3}",
            r.modality, r.base, r.top, r.bottom, r.random
        ));
    }
    verdict(pass, detail.join("; "))
}

fn criterion_4() -> Verdict {
    let exact = layer_lr_coefficients(&LayerImportanceProfile::from_layers(vec![10.0, 30.0, 20.0]), LAMBDA).unwrap();
    let mut pass = exact.layers == [1.0, 0.6, 0.8];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..N_RANDOM_PROFILES {
        let n = rng.gen_range(2..16);
        let layers: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1e3)).collect();
        let s = layer_lr_coefficients(&LayerImportanceProfile::from_layers(layers.clone()), LAMBDA).unwrap();
        for i in 0..n {
            pass &= s.layers[i] >= 1.0 - LAMBDA - 1e-12 && s.layers[i] <= 1.0;
            for j in 0..n {
                pass &= layers[i] <= layers[j] || s.layers[i] <= s.layers[j];
            }
        }
    }
    verdict(
        pass,
        format!("[10,30,20] -> {:?}; bounds and monotonicity on {N_RANDOM_PROFILES} random profiles", exact.layers),
    )
}

fn criterion_5() -> Verdict {
    use oracles::lora::*;
    let (identical, _) = attach_identity();
    let (base, tuned) = trained_lora(4);
    let (merge_diff, first, again) = merge_fidelity(&tuned);
    let (changed, adaptor_moved) = frozen_base_changes(&base, &tuned);
    let mut rank_ok = true;
    for r in [1, 3, 4] {
        let (base, tuned) = trained_lora(r);
        rank_ok &= update_ranks(&base, &tuned).iter().all(|(_, k)| (1..=r).contains(k));
    }
    let merged_ok = matches!(first, MergeStatus::Merged(_)) && again == MergeStatus::NothingToMerge;
    verdict(
        identical && merge_diff <= MERGE_TOL && merged_ok && changed.is_empty() && adaptor_moved && rank_ok,
        format!(
            "attach identical {identical}; merge diff {merge_diff:.1e} <= 1e-10; frozen base changed {}; rank(dW) <= r {rank_ok}",
            changed.len()
        ),
    )
}

/// Per-seed grid measurements, keyed by arm label.
#[derive(Default)]
struct GridRuns {
    drop: BTreeMap<String, Vec<f64>>,
    s2t: BTreeMap<String, Vec<f64>>,
    shift: BTreeMap<String, Vec<f64>>,
    cluster: BTreeMap<String, Vec<f64>>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn run_grid() -> GridRuns {
    let mut runs = GridRuns::default();
    let base = RunConfig::from_file(Path::new(GRID_CONFIG)).unwrap();
    for seed in 0..GRID_SEEDS {
        let t = Instant::now();
        let mut cfg = base.clone();
        cfg.seed = seed;
        let data = build_datasets(&cfg).unwrap();
        let pretrained = pretrain_stage(&cfg, &data).unwrap().text;
        let outcome = grid_stage(&pretrained, &parashift::cli::grid_plans(&cfg, None, None), &data).unwrap();
        assert_eq!(outcome.failures(), 0, "grid arms failed: {:?}", outcome.failed);
        let maps = change_maps(&pretrained, &outcome, &cfg.cluster_matrices(), cfg.rank_cluster.top_fraction).unwrap();
        let no_ft = outcome.rows[0].t2t_accuracy;
        for row in &outcome.rows[1..] {
            runs.drop.entry(row.arm.clone()).or_default().push(no_ft - row.t2t_accuracy);
            runs.s2t.entry(row.arm.clone()).or_default().push(row.s2t_accuracy.unwrap());
            runs.shift.entry(row.arm.clone()).or_default().push(row.shift_l1);
        }
        for arm in &outcome.arms {
            let label = arm.plan.label();
            let v: Vec<f64> = maps.iter().filter(|(r, _)| r.arm == label).map(|(r, _)| r.summary).collect();
            runs.cluster.entry(label).or_default().push(mean(&v));
        }
        eprintln!("  grid seed {seed}: {:.0}s", t.elapsed().as_secs_f64());
    }
    for (name, table) in [("T2T drop", &runs.drop), ("S2T", &runs.s2t), ("shift", &runs.shift), ("cluster", &runs.cluster)] {
        let cells: Vec<String> = table.iter().map(|(arm, v)| format!("{arm} {:.3}", mean(v))).collect();
        eprintln!("  mean {name}: {}", cells.join(", "));
    }
    runs
}

fn criterion_6(g: &GridRuns) -> Verdict {
    let d = |a: &str| mean(&g.drop[a]);
    let s = |a: &str| mean(&g.s2t[a]);
    let pass = d("full-ft") >= d("layer-lr")
        && d("full-ft") >= d(LORA_ARM)
        && s("layer-lr") >= s("full-ft") - S2T_SLACK
        && s(LORA_ARM) >= s("full-ft") - S2T_SLACK;
    verdict(
        pass,
        format!(
            "T2T drop full-ft {:.3} >= layer-lr {:.3}, {LORA_ARM} {:.3}; S2T full-ft {:.3}, layer-lr {:.3}, {LORA_ARM} {:.3} (slack {S2T_SLACK})",
            d("full-ft"),
            d("layer-lr"),
            d(LORA_ARM),
            s("full-ft"),
            s("layer-lr"),
            s(LORA_ARM)
        ),
    )
}

fn criterion_7(g: &GridRuns) -> Verdict {
    let s = |a: &str| mean(&g.shift[a]);
    verdict(
        s("full-ft") > s("layer-lr") && s("full-ft") > s(LORA_ARM),
        format!(
            "shift full-ft {:.4} > layer-lr {:.4}, {LORA_ARM} {:.4}",
            s("full-ft"),
            s("layer-lr"),
            s(LORA_ARM)
        ),
    )
}

fn criterion_8(g: &GridRuns) -> Verdict {
    let c = |a: &str| mean(&g.cluster[a]);
    verdict(
        c(LORA_ARM) > c("full-ft"),
        format!("change-map cluster {LORA_ARM} {:.4} > full-ft {:.4}", c(LORA_ARM), c("full-ft")),
    )
}

fn parashift(root: &Path, args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_parashift"))
        .args(["--config", TINY_CONFIG])
        .args(args)
        .env("PARASHIFT_OUT", root)
        .env("RUST_LOG", "error")
        .output()
        .is_ok_and(|out| {
            if !out.status.success() {
                eprintln!("{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
            }
            out.status.success()
        })
}

/// Every CSV, PGM and checkpoint-like artifact under `dir`.
fn outputs(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x != "json") {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn criterion_9() -> Verdict {
    const COMMANDS: [&[&str]; 7] = [
        &["pretrain"],
        &["importance", "--modality", "text"],
        &["importance", "--modality", "speech"],
        &["deactivate"],
        &["rank-cluster"],
        &["grid"],
        &["report"],
    ];
    let run_dir = |root: &Path| RunConfig::from_file(Path::new(TINY_CONFIG)).unwrap().run_dir(root);
    let roots = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut ok = true;
    for root in &roots {
        for args in COMMANDS {
            ok &= parashift(root.path(), args);
        }
    }
    let first = outputs(&run_dir(roots[0].path()));
    // rerun every command in place: nothing may change
    for args in COMMANDS {
        ok &= parashift(roots[0].path(), args);
    }
    let rerun = outputs(&run_dir(roots[0].path()));
    let second = outputs(&run_dir(roots[1].path()));
    let differing: Vec<String> = first
        .iter()
        .filter(|(k, v)| second.get(*k) != Some(*v) || rerun.get(*k) != Some(*v))
        .map(|(k, _)| k.display().to_string())
        .collect();
    let csv_pgm = first
        .keys()
        .filter(|k| k.extension().is_some_and(|x| x == "csv" || x == "pgm"))
        .count();
    verdict(
        ok && differing.is_empty() && first.len() == second.len() && csv_pgm > 0,
        format!(
            "{} files ({csv_pgm} CSV/PGM) over 7 commands, fresh and in-place reruns; differing {differing:?}",
            first.len()
        ),
    )
}

fn criterion_10() -> Verdict {
    let (_, tuned) = oracles::lora::trained_lora(3);
    let ckpt_bytes = tuned.to_container().encode().unwrap();
    let reloaded = TransformerLM::from_container(parashift::model::Container::decode(&ckpt_bytes).unwrap()).unwrap();
    let ckpt_ok = reloaded.to_container().encode().unwrap() == ckpt_bytes && reloaded.same_weights(&tuned);

    let (model, probe) = oracles::importance::trained();
    let map = parashift::importance::estimate_importance(&model, &probe, Modality::Text).unwrap();
    let map_bytes = map.to_container().encode().unwrap();
    let map_back = ImportanceMap::from_container(parashift::model::Container::decode(&map_bytes).unwrap()).unwrap();
    let map_ok = map_back.to_container().encode().unwrap() == map_bytes && map_back == map;

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let m = Tensor::new(&[17, 23], (0..17 * 23).map(|_| rng.gen_range(0.0..=1.0)).collect()).unwrap();
    let back = parse_pgm(&encode_pgm(&m, Some("round trip")).unwrap()).unwrap();
    let pgm_err = m.max_abs_diff(&back).unwrap();
    verdict(
        ckpt_ok && map_ok && pgm_err <= PGM_TOL,
        format!(
            "checkpoint ({} bytes) {ckpt_ok}, importance map ({} bytes) {map_ok}, pgm max error {pgm_err:.2e} <= {PGM_TOL:.2e}",
            ckpt_bytes.len(),
            map_bytes.len()
        ),
    )
}

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let selected = |n: u32| wanted.is_empty() || wanted.contains(&n);
    let mut failed = Vec::new();
    let mut report = |n: u32, name: &str, run: &mut dyn FnMut() -> Verdict| {
        if !selected(n) {
            return;
        }
        let t = Instant::now();
        let v = run();
        println!(
            "criterion {n:>2} {name}: {} ({}) [{:.1}s]",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            t.elapsed().as_secs_f64()
        );
        if !v.pass {
            failed.push(n);
        }
    };
    report(1, "gradient oracle", &mut criterion_1);
    report(2, "exact vs first-order importance", &mut criterion_2);
    report(3, "deactivation ordering", &mut criterion_3);
    report(4, "layer-wise learning rates", &mut criterion_4);
    report(5, "LoRA invariants", &mut criterion_5);
    let grid = [6, 7, 8].iter().any(|&n| selected(n)).then(run_grid);
    if let Some(g) = &grid {
        report(6, "mitigation ordering", &mut || criterion_6(g));
        report(7, "distribution shift", &mut || criterion_7(g));
        report(8, "change-map rank clustering", &mut || criterion_8(g));
    }
    report(9, "reproducibility", &mut criterion_9);
    report(10, "format round trips", &mut criterion_10);
    if !failed.is_empty() {
        println!("acceptance: criteria {failed:?} FAILED");
        std::process::exit(1);
    }
    println!("acceptance: all selected criteria PASS");
}
