//! Command-line front end: one subcommand per pipeline stage, all writing
//! under a run directory named by the config hash.
//!
//! Exit codes: 0 success, 2 usage or config error, 3 data or integrity
//! error, 4 numerical failure.

pub mod config;
pub mod pipeline;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand};

use crate::data::{write_records, Modality};
use crate::error::{Error, Result};
use crate::importance::{ImportanceMap, MaskMode};
use crate::model::TransformerLM;
use crate::report::{deactivation_report, heatmap_report, layer_profile_plot, ReportKind};

pub use config::{RunConfig, DEFAULT_CONFIG, OUT_ENV};
pub use pipeline::{
    build_datasets, change_maps, deactivation_stage, grid_plans, grid_reports, grid_stage, grid_summary,
    importance_stage, pretrain_stage, rank_cluster_reports, ClusterRow, Datasets, GridSummary, Pretrained, RunDir,
};

/// Checkpoint written by `pretrain` before adaptor alignment.
pub const PRETRAINED_CKPT: &str = "pretrained.ckpt";
/// Checkpoint written by `pretrain` after adaptor alignment.
pub const ALIGNED_CKPT: &str = "aligned.ckpt";
pub const GRID_SUMMARY: &str = "grid/summary.json";

pub fn map_file(modality: Modality) -> String {
    format!("importance_{modality}.map")
}

#[derive(Debug, Parser)]
#[command(
    name = "parashift",
    version,
    about = "Parameter-importance analysis of speech fine-tuning on a toy language model",
    after_help = "Exit codes: 0 success, 2 usage/config error, 3 data/integrity error, 4 numerical failure.\n\
                  Outputs go to <root>/<config hash>/, where <root> is --out, else $PARASHIFT_OUT, else out_dir from the config."
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Run configuration (TOML). The checked-in default is used when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output root; overrides the config and the environment.
    #[arg(long, global = true, env = OUT_ENV)]
    pub out: Option<PathBuf>,
    /// Global seed; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Print the execution plan and write nothing.
    #[arg(long, global = true)]
    pub dry_run: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Text-pretrain the model, then align the adaptor; writes checkpoints and metrics.
    Pretrain {
        /// Also write the pretraining corpus as TSV records.
        #[arg(long)]
        dump_corpus: bool,
    },
    /// Estimate |gradient x weight| importance on the probe subset.
    Importance {
        #[arg(long, default_value = "text")]
        modality: Modality,
        /// Checkpoint to analyse; defaults to the aligned (else pretrained) checkpoint of the run.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Deactivate a fraction of parameters by importance and compare perplexities.
    Deactivate {
        /// Share of all parameters to zero; defaults to the config value.
        #[arg(long)]
        fraction: Option<f64>,
        /// Selection rule; all three when omitted.
        #[arg(long)]
        mode: Option<MaskMode>,
        /// Restrict the table to one input modality.
        #[arg(long)]
        modality: Option<Modality>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Render importance heatmaps and rank-cluster density maps.
    RankCluster {
        #[arg(long, default_value = "text")]
        modality: Modality,
    },
    /// Fine-tune every arm on speech data and score text and speech ability.
    Grid {
        /// λ of the layer-wise learning-rate arms.
        #[arg(long)]
        lambda: Option<f64>,
        /// Replace the LoRA rank sweep by a single rank.
        #[arg(long)]
        lora_rank: Option<usize>,
    },
    /// Re-render every report from the artifacts already in the run directory.
    Report,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Pretrain { .. } => "pretrain",
            Command::Importance { .. } => "importance",
            Command::Deactivate { .. } => "deactivate",
            Command::RankCluster { .. } => "rank-cluster",
            Command::Grid { .. } => "grid",
            Command::Report => "report",
        }
    }
}

/// Parses `args`, runs the command and returns the process exit code.
/// Diagnostics go to stderr, the plan of a dry run to stdout.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, Error::Config(_)) {
                eprintln!("\n{}", Cli::command().render_usage());
            }
            e.exit_code()
        }
    }
}

/// Loads the config named on the command line (or the default) with the
/// seed override applied.
pub fn load_config(global: &GlobalArgs) -> Result<RunConfig> {
    let mut cfg = match &global.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default_config(),
    };
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Output root: `--out` / `$PARASHIFT_OUT` (clap merges the two), else the config.
pub fn output_root(global: &GlobalArgs, cfg: &RunConfig) -> PathBuf {
    global.out.clone().unwrap_or_else(|| cfg.out_dir.clone())
}

pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = load_config(&cli.global)?;
    let mut run = RunDir::new(&cfg, &output_root(&cli.global, &cfg));
    if cli.global.dry_run {
        print!("{}", plan_text(&cli.command, &cfg, &run));
        return Ok(());
    }
    match &cli.command {
        Command::Pretrain { dump_corpus } => cmd_pretrain(&cfg, &mut run, *dump_corpus)?,
        Command::Importance { modality, checkpoint } => {
            cmd_importance(&cfg, &mut run, *modality, checkpoint.as_deref())?
        }
        Command::Deactivate {
            fraction,
            mode,
            modality,
            checkpoint,
        } => cmd_deactivate(&cfg, &mut run, *fraction, *mode, *modality, checkpoint.as_deref())?,
        Command::RankCluster { modality } => cmd_rank_cluster(&cfg, &mut run, *modality)?,
        Command::Grid { lambda, lora_rank } => cmd_grid(&cfg, &mut run, *lambda, *lora_rank)?,
        Command::Report => cmd_report(&cfg, &mut run)?,
    }
    let manifest = run.finish(cli.command.name(), &cfg)?;
    eprintln!("wrote {}", manifest.display());
    Ok(())
}

/// Human-readable execution plan printed by `--dry-run`.
pub fn plan_text(command: &Command, cfg: &RunConfig, run: &RunDir) -> String {
    let mut out = format!(
        "command: {}\nrun directory: {}\n{}\nmodel: d_model={} n_layers={} n_heads={} d_ff={} vocab={}\n",
        command.name(),
        run.path.display(),
        run.provenance,
        cfg.model.d_model,
        cfg.model.n_layers,
        cfg.model.n_heads,
        cfg.model.d_ff,
        cfg.model.vocab_size,
    );
    let task_list = |specs: &[crate::data::TaskSpec]| {
        specs
            .iter()
            .map(|s| format!("{}x{}", s.kind, s.n_train))
            .collect::<Vec<_>>()
            .join(", ")
    };
    match command {
        Command::Pretrain { .. } => {
            out += &format!(
                "pretrain: {} epochs at lr {} on [{}]\n",
                cfg.pretrain.epochs,
                cfg.pretrain.base_lr,
                task_list(&cfg.data.pretrain)
            );
            match &cfg.align {
                Some(a) => {
                    out += &format!(
                        "align adaptor: {} epochs at lr {} on {} of the pretraining set\n",
                        a.epochs, a.base_lr, cfg.data.align_ratio
                    )
                }
                None => out += "align adaptor: skipped\n",
            }
        }
        Command::Importance { modality, .. } => {
            out += &format!("importance: {modality} probe, ratio {}\n", cfg.probe_ratio)
        }
        Command::Deactivate { fraction, mode, .. } => {
            out += &format!(
                "deactivate: fraction {} mode {}\n",
                fraction.unwrap_or(cfg.deactivation.fraction),
                mode.map_or("top,bottom,random".to_string(), |m| m.to_string())
            )
        }
        Command::RankCluster { modality } => {
            out += &format!(
                "rank-cluster: {modality} map, top fraction {}, matrices {}\n",
                cfg.rank_cluster.top_fraction,
                cfg.cluster_matrices().join(",")
            )
        }
        Command::Grid { lambda, lora_rank } => {
            out += &format!("finetune (speech): [{}]\n", task_list(&cfg.data.finetune));
            for p in grid_plans(cfg, *lambda, *lora_rank) {
                out += &format!(
                    "arm {}: {} epochs at lr {} (lambda {}, rank {})\n",
                    p.label(),
                    p.epochs,
                    p.base_lr,
                    p.lambda,
                    p.lora_rank
                );
            }
        }
        Command::Report => out += "report: re-render from existing artifacts\n",
    }
    out
}

fn cmd_pretrain(cfg: &RunConfig, run: &mut RunDir, dump_corpus: bool) -> Result<()> {
    let data = build_datasets(cfg)?;
    if dump_corpus {
        let mut tsv = Vec::new();
        write_records(&data.pretrain, &mut tsv)?;
        run.write("corpus_pretrain.tsv", &tsv)?;
    }
    let out = pretrain_stage(cfg, &data)?;
    run.write(PRETRAINED_CKPT, &out.text.to_container().encode()?)?;
    run.write("metrics_pretrain.csv", &pipeline::metrics_csv(&out.text_log, &run.provenance)?)?;
    if let Some((model, log)) = &out.aligned {
        run.write(ALIGNED_CKPT, &model.to_container().encode()?)?;
        run.write("metrics_align.csv", &pipeline::metrics_csv(log, &run.provenance)?)?;
    }
    eprintln!("checkpoint {}", out.analysis_model().checkpoint_hash());
    Ok(())
}

/// The explicit checkpoint, else the run's aligned one, else its pretrained one.
fn analysis_checkpoint(run: &RunDir, explicit: Option<&Path>) -> Result<TransformerLM> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => [ALIGNED_CKPT, PRETRAINED_CKPT]
            .iter()
            .map(|f| run.file(f))
            .find(|p| p.exists())
            .ok_or_else(|| {
                Error::Integrity(format!("no checkpoint in {}; run `pretrain` first", run.path.display()))
            })?,
    };
    TransformerLM::load(&path)
}

fn check_config(model: &TransformerLM, cfg: &RunConfig) -> Result<()> {
    if model.config() != &cfg.resolved().model {
        return Err(Error::Integrity(
            "checkpoint was trained under a different model config".into(),
        ));
    }
    Ok(())
}

fn cmd_importance(cfg: &RunConfig, run: &mut RunDir, modality: Modality, ckpt: Option<&Path>) -> Result<()> {
    let model = analysis_checkpoint(run, ckpt)?;
    check_config(&model, cfg)?;
    let data = build_datasets(cfg)?;
    let map = importance_stage(&model, &data, modality)?;
    run.write(&map_file(modality), &map.to_container().encode()?)?;
    run.write(
        &format!("layer_profile_{modality}.csv"),
        &pipeline::profile_csv(&map, &run.provenance)?,
    )?;
    Ok(())
}

fn load_map(run: &RunDir, modality: Modality) -> Result<ImportanceMap> {
    let p = run.file(&map_file(modality));
    if !p.exists() {
        return Err(Error::Integrity(format!(
            "missing {}; run `importance --modality {modality}` first",
            p.display()
        )));
    }
    ImportanceMap::load(&p)
}

fn cmd_deactivate(
    cfg: &RunConfig,
    run: &mut RunDir,
    fraction: Option<f64>,
    mode: Option<MaskMode>,
    modality: Option<Modality>,
    ckpt: Option<&Path>,
) -> Result<()> {
    let fraction = fraction.unwrap_or(cfg.deactivation.fraction);
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("fraction {fraction} outside [0, 1]")));
    }
    let model = analysis_checkpoint(run, ckpt)?;
    check_config(&model, cfg)?;
    let modalities = modality.map_or(vec![Modality::Text, Modality::Speech], |m| vec![m]);
    let maps: Vec<ImportanceMap> = modalities.iter().map(|&m| load_map(run, m)).collect::<Result<_>>()?;
    let modes = mode.map_or(MaskMode::ALL.to_vec(), |m| vec![m]);
    let data = build_datasets(cfg)?;
    let rows = deactivation_stage(cfg, &model, &maps, &data, fraction, &modes)?;
    for r in &rows {
        eprintln!(
            "{}: base {:.4} top {:.4} bottom {:.4} random {:.4}",
            r.modality, r.base, r.top, r.bottom, r.random
        );
    }
    run.write_report("", &deactivation_report(&rows, fraction, &run.provenance)?)
}

fn cmd_rank_cluster(cfg: &RunConfig, run: &mut RunDir, modality: Modality) -> Result<()> {
    let map = load_map(run, modality)?;
    let reports = rank_cluster_reports(
        &map,
        &cfg.cluster_matrices(),
        cfg.rank_cluster.top_fraction,
        &run.provenance,
    )?;
    for r in &reports {
        run.write_report(&format!("rank_cluster_{modality}"), r)?;
    }
    Ok(())
}

fn cmd_grid(cfg: &RunConfig, run: &mut RunDir, lambda: Option<f64>, lora_rank: Option<usize>) -> Result<()> {
    let plans = grid_plans(cfg, lambda, lora_rank);
    for p in &plans {
        p.validate()?;
    }
    let data = build_datasets(cfg)?;
    let pretrained = match run.file(PRETRAINED_CKPT) {
        p if p.exists() => TransformerLM::load(&p)?,
        _ => {
            eprintln!("no pretrained checkpoint; running pretrain first");
            let out = pretrain_stage(cfg, &data)?;
            run.write(PRETRAINED_CKPT, &out.text.to_container().encode()?)?;
            out.text
        }
    };
    check_config(&pretrained, cfg)?;
    let outcome = grid_stage(&pretrained, &plans, &data)?;
    let matrices = cfg.cluster_matrices();
    let maps = change_maps(&pretrained, &outcome, &matrices, cfg.rank_cluster.top_fraction)?;
    for arm in &outcome.arms {
        let label = arm.plan.label();
        run.write(&format!("grid/{label}.ckpt"), &arm.model.to_container().encode()?)?;
        run.write(
            &format!("grid/metrics_{label}.csv"),
            &pipeline::metrics_csv(&arm.log, &run.provenance)?,
        )?;
    }
    for (row, change) in &maps {
        let r = heatmap_report(
            ReportKind::ChangeHeatmap,
            &format!("change.{}.{}", row.arm, row.matrix),
            change,
            &run.provenance,
        )?;
        run.write_report("grid/change", &r)?;
    }
    let summary = grid_summary(&outcome, maps.into_iter().map(|(row, _)| row).collect());
    run.write(GRID_SUMMARY, &serde_json::to_vec_pretty(&summary)?)?;
    for r in grid_reports(&summary, &run.provenance)? {
        run.write_report("grid", &r)?;
    }
    for row in &summary.rows {
        eprintln!(
            "{:>10}: t2t {:.3} s2t {} shift {:.4}{}",
            row.arm,
            row.t2t_accuracy,
            row.s2t_accuracy.map_or("-".into(), |x| format!("{x:.3}")),
            row.shift_l1,
            row.error.as_ref().map_or(String::new(), |e| format!(" FAILED: {e}"))
        );
    }
    if let Some((label, code)) = outcome.failed.first() {
        // the other arms' artifacts are complete; record them before failing
        run.finish("grid", cfg)?;
        return Err(match code {
            4 => Error::Numerical {
                step: 0,
                batch: 0,
                detail: format!("{} arm(s) failed, first: {label}", outcome.failures()),
            },
            2 => Error::Config(format!("{} arm(s) failed, first: {label}", outcome.failures())),
            _ => Error::Integrity(format!("{} arm(s) failed, first: {label}", outcome.failures())),
        });
    }
    Ok(())
}

fn cmd_report(cfg: &RunConfig, run: &mut RunDir) -> Result<()> {
    let mut rendered = 0;
    let maps: Vec<ImportanceMap> = [Modality::Text, Modality::Speech]
        .iter()
        .filter(|&&m| run.file(&map_file(m)).exists())
        .map(|&m| load_map(run, m))
        .collect::<Result<_>>()?;
    if !maps.is_empty() {
        let profiles: Vec<(String, _)> = maps
            .iter()
            .map(|m| (m.modality.to_string(), crate::importance::aggregate_layers(m)))
            .collect();
        run.write_report("", &layer_profile_plot(&profiles, true, &[], &run.provenance)?)?;
        for m in &maps {
            for r in rank_cluster_reports(
                m,
                &cfg.cluster_matrices(),
                cfg.rank_cluster.top_fraction,
                &run.provenance,
            )? {
                run.write_report(&format!("rank_cluster_{}", m.modality), &r)?;
            }
        }
        rendered += 1;
    }
    let summary_path = run.file(GRID_SUMMARY);
    if summary_path.exists() {
        let summary: GridSummary = serde_json::from_slice(&std::fs::read(&summary_path)?)
            .map_err(|e| Error::Integrity(format!("unreadable grid summary: {e}")))?;
        for r in grid_reports(&summary, &run.provenance)? {
            run.write_report("grid", &r)?;
        }
        rendered += 1;
    }
    if rendered == 0 {
        return Err(Error::Integrity(format!(
            "nothing to report in {}; run `importance` or `grid` first",
            run.path.display()
        )));
    }
    Ok(())
}
