//! The stages behind the subcommands, usable without the command line.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use crate::data::{generate_corpus, Corpus, Example, Modality};
use crate::error::{Error, Result};
use crate::importance::{
    aggregate_layers, estimate_importance, parameter_change_map, rank_cluster_density, ImportanceMap,
    LayerImportanceProfile, MaskMode,
};
use crate::model::TransformerLM;
use crate::report::{
    deactivation_row_for, heatmap_report, layer_profile_plot, results_report, DeactivationRow, Provenance, Report,
    ReportKind,
};
use crate::training::{
    run_experiment_grid, train, write_metrics_csv, GridData, GridOutcome, MetricRecord, ResultRow, Strategy,
    TrainingData, TrainingPlan,
};

/// Every example set a run needs, generated deterministically from the config.
#[derive(Debug, Clone)]
pub struct Datasets {
    /// Text pretraining set (train splits of all pretraining tasks).
    pub pretrain: Vec<Example>,
    /// Eval splits of all pretraining tasks: the perplexity set.
    pub eval: Vec<Example>,
    /// Importance probe: `probe_ratio` of the pretraining set.
    pub probe: Vec<Example>,
    /// Adaptor-alignment subset of the pretraining set.
    pub align: Vec<Example>,
    /// Speech fine-tuning set of the grid.
    pub finetune: Vec<Example>,
    /// Eval splits of the benchmark tasks, scored as T2T and S2T.
    pub benchmark: Vec<Example>,
}

pub fn build_datasets(cfg: &RunConfig) -> Result<Datasets> {
    let world = cfg.world();
    let corpora: Vec<Corpus> = cfg
        .data
        .pretrain
        .iter()
        .map(|s| generate_corpus(&world, &cfg.task_spec(s)))
        .collect::<Result<_>>()?;
    let pretrain: Vec<Example> = corpora.iter().flat_map(|c| c.train.iter().cloned()).collect();
    let eval: Vec<Example> = corpora.iter().flat_map(|c| c.eval.iter().cloned()).collect();
    let benchmark = eval
        .iter()
        .filter(|e| cfg.data.benchmark.contains(&e.task))
        .cloned()
        .collect();
    let mut finetune = Vec::new();
    for spec in &cfg.data.finetune {
        finetune.extend(generate_corpus(&world, &cfg.task_spec(spec))?.train);
    }
    Ok(Datasets {
        probe: Corpus::probe_subset(&pretrain, cfg.probe_ratio),
        align: Corpus::probe_subset(&pretrain, cfg.data.align_ratio),
        pretrain,
        eval,
        finetune,
        benchmark,
    })
}

/// Output of the pretraining stage.
#[derive(Debug, Clone)]
pub struct Pretrained {
    /// Text-pretrained model; the adaptor is untouched.
    pub text: TransformerLM,
    pub text_log: Vec<MetricRecord>,
    /// Same model after adaptor alignment, when the config has an align plan.
    pub aligned: Option<(TransformerLM, Vec<MetricRecord>)>,
}

impl Pretrained {
    /// The aligned model when there is one, otherwise the text model.
    pub fn analysis_model(&self) -> &TransformerLM {
        self.aligned.as_ref().map_or(&self.text, |(m, _)| m)
    }
}

pub fn pretrain_stage(cfg: &RunConfig, data: &Datasets) -> Result<Pretrained> {
    let cfg = cfg.resolved();
    let model = TransformerLM::new(&cfg.model)?;
    log::info!("pretraining {} parameters on {} examples", model.num_params(), data.pretrain.len());
    let text = train(
        model,
        TrainingData {
            train: &data.pretrain,
            eval: &data.eval,
            probe: &[],
            profile: None,
        },
        &cfg.pretrain,
    )?;
    let aligned = match &cfg.align {
        Some(plan) => {
            log::info!("aligning the adaptor on {} examples", data.align.len());
            let out = train(
                text.model.clone(),
                TrainingData {
                    train: &data.align,
                    eval: &data.eval,
                    probe: &[],
                    profile: None,
                },
                plan,
            )?;
            Some((out.model, out.log))
        }
        None => None,
    };
    Ok(Pretrained {
        text: text.model,
        text_log: text.log,
        aligned,
    })
}

pub fn importance_stage(model: &TransformerLM, data: &Datasets, modality: Modality) -> Result<ImportanceMap> {
    log::info!("estimating {modality} importance on {} probe examples", data.probe.len());
    estimate_importance(model, &data.probe, modality)
}

/// One deactivation row per map, on the pretraining eval set.
pub fn deactivation_stage(
    cfg: &RunConfig,
    model: &TransformerLM,
    maps: &[ImportanceMap],
    data: &Datasets,
    fraction: f64,
    modes: &[MaskMode],
) -> Result<Vec<DeactivationRow>> {
    maps.iter()
        .map(|m| deactivation_row_for(model, m, &data.eval, fraction, cfg.seed, modes))
        .collect()
}

/// Grid arms after command-line overrides: `lambda` replaces every
/// layer-LR arm's λ; `lora_rank` collapses the LoRA sweep to one rank.
pub fn grid_plans(cfg: &RunConfig, lambda: Option<f64>, lora_rank: Option<usize>) -> Vec<TrainingPlan> {
    let cfg = cfg.resolved();
    let mut plans = Vec::new();
    let mut lora_done = false;
    for p in &cfg.arms {
        let mut p = p.clone();
        match p.strategy {
            Strategy::LayerLr => p.lambda = lambda.unwrap_or(p.lambda),
            Strategy::Lora if lora_rank.is_some() => {
                if lora_done {
                    continue;
                }
                lora_done = true;
                p.lora_rank = lora_rank.unwrap_or(p.lora_rank);
                p.lora_alpha = None;
            }
            _ => {}
        }
        plans.push(p);
    }
    plans
}

pub fn grid_stage(pretrained: &TransformerLM, plans: &[TrainingPlan], data: &Datasets) -> Result<GridOutcome> {
    if data.finetune.is_empty() || data.benchmark.is_empty() {
        return Err(Error::Config("the grid needs data.finetune and data.benchmark".into()));
    }
    run_experiment_grid(
        pretrained,
        plans,
        GridData {
            finetune: &data.finetune,
            benchmark: &data.benchmark,
            text_probe: &data.probe,
        },
    )
}

/// Rank-cluster summary of one arm's parameter-change map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRow {
    pub arm: String,
    pub matrix: String,
    pub summary: f64,
}

/// Everything the grid reports are rendered from; persisted as JSON so the
/// `report` command can re-render without retraining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSummary {
    pub rows: Vec<ResultRow>,
    /// `no-ft` first, then every completed arm.
    pub profiles: Vec<(String, LayerImportanceProfile)>,
    pub clusters: Vec<ClusterRow>,
}

impl GridSummary {
    /// Mean change-map cluster summary of one arm over all matrices.
    pub fn mean_cluster(&self, arm: &str) -> Option<f64> {
        let v: Vec<f64> = self.clusters.iter().filter(|c| c.arm == arm).map(|c| c.summary).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Change maps of every completed arm on `matrices`, with their summaries.
pub fn change_maps(
    pretrained: &TransformerLM,
    outcome: &GridOutcome,
    matrices: &[String],
    top_fraction: f64,
) -> Result<Vec<(ClusterRow, crate::tensor::Tensor)>> {
    let mut out = Vec::new();
    for arm in &outcome.arms {
        for name in matrices {
            let change = parameter_change_map(pretrained, &arm.model, name)?;
            let summary = rank_cluster_density(name, &change, top_fraction)?.summary;
            out.push((
                ClusterRow {
                    arm: arm.plan.label(),
                    matrix: name.clone(),
                    summary,
                },
                change,
            ));
        }
    }
    Ok(out)
}

pub fn grid_summary(outcome: &GridOutcome, clusters: Vec<ClusterRow>) -> GridSummary {
    let mut profiles = vec![("no-ft".to_string(), outcome.base_profile.clone())];
    profiles.extend(outcome.arms.iter().map(|a| (a.plan.label(), a.profile.clone())));
    GridSummary {
        rows: outcome.rows.clone(),
        profiles,
        clusters,
    }
}

/// Results table, profile chart (shift in the legend) and cluster table.
pub fn grid_reports(summary: &GridSummary, provenance: &Provenance) -> Result<Vec<Report>> {
    let legend: Vec<String> = summary
        .profiles
        .iter()
        .map(|(name, _)| {
            summary
                .rows
                .iter()
                .find(|r| &r.arm == name && r.arm != "no-ft")
                .map_or(String::new(), |r| format!("shift {:.4}", r.shift_l1))
        })
        .collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["arm", "matrix", "cluster_summary"])?;
    for c in &summary.clusters {
        w.write_record([c.arm.clone(), c.matrix.clone(), format!("{:.6}", c.summary)])?;
    }
    let body = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    let mut cluster_csv = format!("# {provenance}\n").into_bytes();
    cluster_csv.extend(body);
    Ok(vec![
        results_report(&summary.rows, provenance)?,
        layer_profile_plot(&summary.profiles, true, &legend, provenance)?,
        Report {
            kind: ReportKind::ChangeHeatmap,
            provenance: provenance.clone(),
            artifacts: vec![("change_cluster.csv".into(), cluster_csv)],
        },
    ])
}

/// Normalized importance heatmaps and rank-cluster density maps of `map`.
pub fn rank_cluster_reports(
    map: &ImportanceMap,
    matrices: &[String],
    top_fraction: f64,
    provenance: &Provenance,
) -> Result<Vec<Report>> {
    let mut reports = Vec::new();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["matrix", "rows", "cols", "top_fraction", "cluster_summary"])?;
    for name in matrices {
        let scores = map
            .get(name)
            .ok_or_else(|| Error::Config(format!("no parameter `{name}` in the importance map")))?;
        let density = rank_cluster_density(name, scores, top_fraction)?;
        let max = scores.data().iter().copied().fold(0.0, f64::max);
        let mut scaled = scores.clone();
        if max > 0.0 {
            scaled.data_mut().iter_mut().for_each(|x| *x /= max);
        }
        reports.push(heatmap_report(
            ReportKind::RankClusterHeatmap,
            &format!("importance.{name}"),
            &scaled,
            provenance,
        )?);
        reports.push(heatmap_report(
            ReportKind::RankClusterHeatmap,
            &format!("density.{name}"),
            &density.density,
            provenance,
        )?);
        let shape = scores.shape();
        w.write_record([
            name.clone(),
            shape[0].to_string(),
            shape[1].to_string(),
            format!("{top_fraction}"),
            format!("{:.6}", density.summary),
        ])?;
    }
    let body = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    let mut csv = format!("# {provenance}\n").into_bytes();
    csv.extend(body);
    reports.push(Report {
        kind: ReportKind::RankClusterHeatmap,
        provenance: provenance.clone(),
        artifacts: vec![("rank_cluster.csv".into(), csv)],
    });
    Ok(reports)
}

/// Layer profile of one map as CSV with a provenance line.
pub fn profile_csv(map: &ImportanceMap, provenance: &Provenance) -> Result<Vec<u8>> {
    let mut out = format!("# {provenance}\n").into_bytes();
    aggregate_layers(map).write_csv(&mut out)?;
    Ok(out)
}

pub fn metrics_csv(log: &[MetricRecord], provenance: &Provenance) -> Result<Vec<u8>> {
    let mut out = format!("# {provenance}\n").into_bytes();
    write_metrics_csv(log, &mut out)?;
    Ok(out)
}

/// A run directory and the manifest of the files written into it.
#[derive(Debug)]
pub struct RunDir {
    pub path: PathBuf,
    pub provenance: Provenance,
    written: BTreeMap<String, String>,
}

impl RunDir {
    pub fn new(cfg: &RunConfig, root: &Path) -> Self {
        Self {
            path: cfg.run_dir(root),
            provenance: Provenance {
                config_hash: cfg.hash(),
                seed: cfg.seed,
            },
            written: BTreeMap::new(),
        }
    }

    pub fn file(&self, rel: &str) -> PathBuf {
        self.path.join(rel)
    }

    /// Writes `bytes` to `rel` (creating directories) and records its digest.
    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let p = self.file(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&p, bytes)?;
        self.written.insert(rel.to_string(), hex(&Sha256::digest(bytes)));
        Ok(p)
    }

    pub fn write_report(&mut self, subdir: &str, report: &Report) -> Result<()> {
        for (name, bytes) in &report.artifacts {
            let rel = if subdir.is_empty() {
                name.clone()
            } else {
                format!("{subdir}/{name}")
            };
            self.write(&rel, bytes)?;
        }
        Ok(())
    }

    /// Merges this command's files into `manifest.json`. The only
    /// time-dependent value is the `written_at` field.
    pub fn finish(&mut self, command: &str, cfg: &RunConfig) -> Result<PathBuf> {
        self.write("config.toml", cfg.canonical().as_bytes())?;
        let path = self.file("manifest.json");
        let mut manifest: serde_json::Value = match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map_err(|e| Error::Integrity(format!("unreadable manifest {}: {e}", path.display())))?,
            Err(_) => json!({}),
        };
        let files: BTreeMap<String, String> = manifest
            .get("files")
            .and_then(|f| serde_json::from_value(f.clone()).ok())
            .unwrap_or_default();
        let mut files = files;
        files.extend(std::mem::take(&mut self.written));
        let mut commands: Vec<String> = manifest
            .get("commands")
            .and_then(|c| serde_json::from_value(c.clone()).ok())
            .unwrap_or_default();
        if !commands.iter().any(|c| c == command) {
            commands.push(command.to_string());
        }
        let now = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        manifest = json!({
            "config_hash": self.provenance.config_hash,
            "seed": self.provenance.seed,
            "version": env!("CARGO_PKG_VERSION"),
            "commands": commands,
            "files": files,
            "written_at": now,
        });
        fs::create_dir_all(&self.path)?;
        fs::write(&path, serde_json::to_vec_pretty(&manifest)?)?;
        Ok(path)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
