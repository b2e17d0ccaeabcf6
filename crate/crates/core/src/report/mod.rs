//! Report artifacts: deactivation tables, layer-profile charts, heatmaps and
//! results tables. Every report carries the config hash and seed of the run
//! that produced it, and its bytes are a pure function of its inputs.

mod pgm;
mod svg;

pub use pgm::{encode_pgm, parse_pgm, quantize};

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Example, Modality};
use crate::error::{Error, Result};
use crate::importance::{apply_mask, build_mask, perplexity, ImportanceMap, LayerImportanceProfile, MaskMode};
use crate::model::TransformerLM;
use crate::tensor::Tensor;
use crate::training::{write_results_csv, ResultRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportKind {
    DeactivationTable,
    LayerProfile,
    RankClusterHeatmap,
    ChangeHeatmap,
    ResultsTable,
}

impl fmt::Display for ReportKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReportKind::DeactivationTable => "deactivation-table",
            ReportKind::LayerProfile => "layer-profile",
            ReportKind::RankClusterHeatmap => "rank-cluster-heatmap",
            ReportKind::ChangeHeatmap => "change-heatmap",
            ReportKind::ResultsTable => "results-table",
        })
    }
}

/// Identifies the run behind a report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config_hash={} seed={}", self.config_hash, self.seed)
    }
}

/// A named set of files ready to be written under a run directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub kind: ReportKind,
    pub provenance: Provenance,
    /// `(file name, bytes)` pairs.
    pub artifacts: Vec<(String, Vec<u8>)>,
}

impl Report {
    pub fn artifact(&self, name: &str) -> Option<&[u8]> {
        self.artifacts.iter().find(|(n, _)| n == name).map(|(_, b)| b.as_slice())
    }

    /// Writes every artifact into `dir`, returning the paths written.
    pub fn write_to(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut paths = Vec::new();
        for (name, bytes) in &self.artifacts {
            let p = dir.join(name);
            fs::write(&p, bytes)?;
            paths.push(p);
        }
        Ok(paths)
    }
}

/// CSV whose first line is a `#` comment holding the provenance.
fn csv_with_provenance(provenance: &Provenance, body: Vec<u8>) -> Vec<u8> {
    let mut out = format!("# {provenance}\n").into_bytes();
    out.extend(body);
    out
}

fn fmt_num(x: f64) -> String {
    if x.is_nan() {
        "-".into()
    } else {
        format!("{x:.6e}")
    }
}

/// One modality row of the deactivation table. Columns that were not
/// evaluated hold NaN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeactivationRow {
    pub modality: Modality,
    pub base: f64,
    pub top: f64,
    pub bottom: f64,
    pub random: f64,
}

impl DeactivationRow {
    /// `top ≥ 10 × base`.
    pub fn top_ok(&self) -> bool {
        self.top >= 10.0 * self.base
    }

    /// `bottom ≤ 1.2 × base`.
    pub fn bottom_ok(&self) -> bool {
        self.bottom <= 1.2 * self.base
    }

    /// `base < random < top`.
    pub fn random_ok(&self) -> bool {
        self.base < self.random && self.random < self.top
    }

    pub fn passed(&self) -> bool {
        self.top_ok() && self.bottom_ok() && self.random_ok()
    }

    /// Whether every column was evaluated.
    pub fn complete(&self) -> bool {
        ![self.base, self.top, self.bottom, self.random].iter().any(|x| x.is_nan())
    }
}

/// Perplexity on `eval` in the map's modality before and after deactivating
/// `fraction` of all parameters by top, bottom and random selection.
pub fn deactivation_row(
    model: &TransformerLM,
    map: &ImportanceMap,
    eval: &[Example],
    fraction: f64,
    seed: u64,
) -> Result<DeactivationRow> {
    deactivation_row_for(model, map, eval, fraction, seed, &MaskMode::ALL)
}

/// [`deactivation_row`] restricted to `modes`; the other columns are NaN.
pub fn deactivation_row_for(
    model: &TransformerLM,
    map: &ImportanceMap,
    eval: &[Example],
    fraction: f64,
    seed: u64,
    modes: &[MaskMode],
) -> Result<DeactivationRow> {
    map.check_matches(model)?;
    let modality = map.modality;
    let base = perplexity(model, eval, modality)?;
    let mut ppl = [f64::NAN; 3];
    for (slot, mode) in ppl.iter_mut().zip(MaskMode::ALL) {
        if modes.contains(&mode) {
            let mask = build_mask(map, fraction, mode, seed)?;
            *slot = perplexity(&apply_mask(model, &mask)?, eval, modality)?;
        }
    }
    Ok(DeactivationRow {
        modality,
        base,
        top: ppl[0],
        bottom: ppl[1],
        random: ppl[2],
    })
}

fn flag(column: f64, ok: bool) -> String {
    if column.is_nan() {
        "-".into()
    } else {
        ok.to_string()
    }
}

/// Table with one row per modality and columns base/top/bottom/random, plus
/// the per-row ordering checks.
pub fn deactivation_report(rows: &[DeactivationRow], fraction: f64, provenance: &Provenance) -> Result<Report> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["input", "base", "top", "bottom", "random", "fraction", "top_ok", "bottom_ok", "random_ok"])?;
    for r in rows {
        w.write_record([
            r.modality.to_string(),
            fmt_num(r.base),
            fmt_num(r.top),
            fmt_num(r.bottom),
            fmt_num(r.random),
            format!("{fraction}"),
            flag(r.top, r.top_ok()),
            flag(r.bottom, r.bottom_ok()),
            flag(r.random, r.random_ok()),
        ])?;
    }
    let csv = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    let mut md = format!(
        "<!-- {provenance} -->\n| Input | Base | Top {p}% | Bottom {p}% | Random {p}% | ordering |\n|---|---|---|---|---|---|\n",
        p = fraction * 100.0
    );
    for r in rows {
        md.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} |\n",
            r.modality,
            fmt_num(r.base),
            fmt_num(r.top),
            fmt_num(r.bottom),
            fmt_num(r.random),
            match (r.complete(), r.passed()) {
                (false, _) => "n/a",
                (true, true) => "pass",
                (true, false) => "FAIL",
            }
        ));
    }
    Ok(Report {
        kind: ReportKind::DeactivationTable,
        provenance: provenance.clone(),
        artifacts: vec![
            ("deactivation.csv".into(), csv_with_provenance(provenance, csv)),
            ("deactivation.md".into(), md.into_bytes()),
        ],
    })
}

/// Line chart (SVG) and CSV mirror of several layer profiles. With
/// `normalize`, each series is scaled to sum to one. `legend` entries, when
/// given, are appended to the series names (e.g. shift statistics).
pub fn layer_profile_plot(
    profiles: &[(String, LayerImportanceProfile)],
    normalize: bool,
    legend: &[String],
    provenance: &Provenance,
) -> Result<Report> {
    let Some((_, first)) = profiles.first() else {
        return Err(Error::Degenerate("no profiles to plot".into()));
    };
    let n = first.layers.len();
    if let Some((name, p)) = profiles.iter().find(|(_, p)| p.layers.len() != n) {
        return Err(Error::Contract(format!(
            "profile `{name}` has {} layers, expected {n}",
            p.layers.len()
        )));
    }
    let values: Vec<Vec<f64>> = profiles
        .iter()
        .map(|(_, p)| if normalize { p.normalized() } else { Ok(p.layers.clone()) })
        .collect::<Result<_>>()?;
    let formatted: Vec<Vec<String>> = values.iter().map(|v| v.iter().map(|&x| fmt_num(x)).collect()).collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["series", "layer_index", "value"])?;
    for ((name, _), vals) in profiles.iter().zip(&formatted) {
        for (i, v) in vals.iter().enumerate() {
            w.write_record([name.clone(), i.to_string(), v.clone()])?;
        }
    }
    let csv = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    let names: Vec<String> = profiles
        .iter()
        .enumerate()
        .map(|(i, (name, _))| match legend.get(i) {
            Some(extra) if !extra.is_empty() => format!("{name} ({extra})"),
            _ => name.clone(),
        })
        .collect();
    // plot the numbers exactly as the CSV states them
    let plotted: Vec<Vec<f64>> = formatted
        .iter()
        .map(|v| v.iter().map(|s| s.parse().expect("formatted float parses")).collect())
        .collect();
    let title = if normalize {
        "Layer-wise text importance (normalized)"
    } else {
        "Layer-wise text importance"
    };
    let svg = svg::line_chart(title, &names, &plotted, &formatted, Some(&provenance.to_string()));
    Ok(Report {
        kind: ReportKind::LayerProfile,
        provenance: provenance.clone(),
        artifacts: vec![
            ("layer_profile.csv".into(), csv_with_provenance(provenance, csv)),
            ("layer_profile.svg".into(), svg.into_bytes()),
        ],
    })
}

/// PGM and SVG renderings of a `[0,1]` matrix, without provenance.
pub fn heatmap_bytes(matrix: &Tensor, provenance: Option<&Provenance>) -> Result<(Vec<u8>, Vec<u8>)> {
    let (rows, cols) = pgm::check_heatmap(matrix)?;
    let p = provenance.map(ToString::to_string);
    let pgm = encode_pgm(matrix, p.as_deref())?;
    let svg = svg::heatmap(rows, cols, matrix.data(), p.as_deref());
    Ok((pgm, svg.into_bytes()))
}

/// Writes `<stem>.pgm` and `<stem>.svg`.
pub fn heatmap_export(matrix: &Tensor, stem: &Path) -> Result<(PathBuf, PathBuf)> {
    let (pgm, svg) = heatmap_bytes(matrix, None)?;
    let (pp, sp) = (stem.with_extension("pgm"), stem.with_extension("svg"));
    if let Some(dir) = stem.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(&pp, pgm)?;
    fs::write(&sp, svg)?;
    Ok((pp, sp))
}

/// Heatmap report for a rank-cluster density or parameter-change matrix;
/// artifacts are `<name>.pgm` and `<name>.svg` with `.` in `name` replaced.
pub fn heatmap_report(kind: ReportKind, name: &str, matrix: &Tensor, provenance: &Provenance) -> Result<Report> {
    let (pgm, svg) = heatmap_bytes(matrix, Some(provenance))?;
    let stem = name.replace('.', "_");
    Ok(Report {
        kind,
        provenance: provenance.clone(),
        artifacts: vec![(format!("{stem}.pgm"), pgm), (format!("{stem}.svg"), svg)],
    })
}

pub fn results_report(rows: &[ResultRow], provenance: &Provenance) -> Result<Report> {
    let mut body = Vec::new();
    write_results_csv(rows, &mut body)?;
    Ok(Report {
        kind: ReportKind::ResultsTable,
        provenance: provenance.clone(),
        artifacts: vec![("results.csv".into(), csv_with_provenance(provenance, body))],
    })
}
