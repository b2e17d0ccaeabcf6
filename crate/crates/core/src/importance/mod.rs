//! Per-parameter importance: the first-order estimate `|g · θ|`, the exact
//! nullification oracle, deactivation masks, layer aggregation and the
//! rank-cluster density of a weight matrix.

mod cluster;
mod mask;
mod profile;

pub use cluster::{parameter_change_map, rank_cluster_density, rank_cluster_map, RankClusterMap};
pub use mask::{apply_mask, build_mask, DeactivationMask, MaskMode};
pub use profile::{aggregate_layers, distribution_shift, LayerImportanceProfile, ShiftStats};

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{batches, Example, Modality};
use crate::error::{Error, Result};
use crate::model::checkpoint::{Container, ContainerKind};
use crate::model::{GradMode, ModelConfig, TransformerLM};
use crate::tensor::Tensor;

/// Largest selection `exact_importance` will evaluate.
pub const EXACT_BUDGET: usize = 10_000;

/// How per-batch gradients are folded into one score per element.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Mean over batches of `|g_b · θ|`.
    #[default]
    MeanOfAbs,
    /// `|mean_b(g_b) · θ|`; signs of different batches can cancel.
    AbsOfMean,
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::MeanOfAbs => "mean-of-abs",
            Aggregation::AbsOfMean => "abs-of-mean",
        })
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean-of-abs" => Ok(Aggregation::MeanOfAbs),
            "abs-of-mean" => Ok(Aggregation::AbsOfMean),
            _ => Err(Error::Config(format!("unknown aggregation `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImportanceOptions {
    pub aggregation: Aggregation,
    pub batch_size: usize,
}

impl Default for ImportanceOptions {
    fn default() -> Self {
        Self {
            aggregation: Aggregation::MeanOfAbs,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MapMeta {
    modality: Modality,
    n_examples: usize,
    aggregation: Aggregation,
}

/// Nonnegative scores aligned one-to-one with a model's base parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceMap {
    pub config: ModelConfig,
    pub names: Vec<String>,
    pub scores: Vec<Tensor>,
    pub modality: Modality,
    pub n_examples: usize,
    pub aggregation: Aggregation,
}

impl ImportanceMap {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.scores[i])
    }

    pub fn num_elements(&self) -> usize {
        self.scores.iter().map(Tensor::numel).sum()
    }

    pub fn total(&self) -> f64 {
        self.scores.iter().flat_map(|t| t.data()).sum()
    }

    /// Errors unless the map was computed on a model with this registry.
    pub fn check_matches(&self, model: &TransformerLM) -> Result<()> {
        let same = self.config == *model.config()
            && self.names == model.names()
            && self.scores.iter().zip(model.params()).all(|(s, p)| s.shape() == p.shape());
        if same {
            Ok(())
        } else {
            Err(Error::Integrity("importance map was computed on a different model".into()))
        }
    }

    pub fn to_container(&self) -> Container {
        let meta = MapMeta {
            modality: self.modality,
            n_examples: self.n_examples,
            aggregation: self.aggregation,
        };
        Container {
            kind: ContainerKind::ImportanceMap,
            config: self.config.clone(),
            meta: serde_json::to_value(meta).expect("meta serializes"),
            records: self.names.iter().cloned().zip(self.scores.iter().cloned()).collect(),
        }
    }

    pub fn from_container(c: Container) -> Result<Self> {
        if c.kind != ContainerKind::ImportanceMap {
            return Err(Error::Integrity("container is not an importance map".into()));
        }
        let meta: MapMeta = serde_json::from_value(c.meta)?;
        let (names, scores): (Vec<String>, Vec<Tensor>) = c.records.into_iter().unzip();
        if scores.iter().any(|s| s.data().iter().any(|&x| !(x >= 0.0 && x.is_finite()))) {
            return Err(Error::Integrity("importance scores must be finite and nonnegative".into()));
        }
        Ok(Self {
            config: c.config,
            names,
            scores,
            modality: meta.modality,
            n_examples: meta.n_examples,
            aggregation: meta.aggregation,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }
}

/// The model whose base weights are analysed: adapters, if any, are folded in.
fn effective(model: &TransformerLM) -> std::borrow::Cow<'_, TransformerLM> {
    if model.adapters().is_empty() {
        std::borrow::Cow::Borrowed(model)
    } else {
        std::borrow::Cow::Owned(model.merged())
    }
}

/// First-order importance `|∂L/∂θ · θ|` with default options.
pub fn estimate_importance(model: &TransformerLM, probe: &[Example], modality: Modality) -> Result<ImportanceMap> {
    estimate_importance_with(model, probe, modality, &ImportanceOptions::default())
}

/// First-order importance of every base parameter, computed from gradients
/// of the mean response loss of each probe batch. The model is not modified.
pub fn estimate_importance_with(
    model: &TransformerLM,
    probe: &[Example],
    modality: Modality,
    opts: &ImportanceOptions,
) -> Result<ImportanceMap> {
    if probe.is_empty() {
        return Err(Error::Degenerate("importance probe set is empty".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("importance batch_size must be at least 1".into()));
    }
    let model = effective(model);
    let params = model.params();
    let mut acc: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.numel()]).collect();
    let probe_batches = batches(probe, opts.batch_size, modality, model.config().feature_dim)?;
    for (bi, batch) in probe_batches.iter().enumerate() {
        let mut fp = model.forward(batch, GradMode::AllBase)?;
        let (targets, mask) = batch.targets_and_mask();
        let loss = fp.graph.cross_entropy(fp.logits, &targets, &mask)?;
        let value = fp.graph.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Numerical {
                step: 0,
                batch: bi,
                detail: format!("probe loss is {value}"),
            });
        }
        fp.graph.backward(loss)?;
        for (i, (a, p)) in acc.iter_mut().zip(params).enumerate() {
            let Some(g) = fp.param_var(i).and_then(|v| fp.graph.grad(v)) else {
                continue;
            };
            match opts.aggregation {
                Aggregation::MeanOfAbs => {
                    for ((s, &gi), &w) in a.iter_mut().zip(g).zip(p.data()) {
                        *s += (gi * w).abs();
                    }
                }
                Aggregation::AbsOfMean => a.iter_mut().zip(g).for_each(|(s, &gi)| *s += gi),
            }
        }
    }
    let n = probe_batches.len() as f64;
    let scores = acc
        .into_iter()
        .zip(params)
        .map(|(a, p)| {
            let data = match opts.aggregation {
                Aggregation::MeanOfAbs => a.into_iter().map(|s| s / n).collect(),
                Aggregation::AbsOfMean => a.into_iter().zip(p.data()).map(|(s, &w)| (s / n * w).abs()).collect(),
            };
            Tensor::new(p.shape(), data)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ImportanceMap {
        config: model.config().clone(),
        names: model.names().to_vec(),
        scores,
        modality,
        n_examples: probe.len(),
        aggregation: opts.aggregation,
    })
}

/// Mean of the per-batch mean response losses — the `L(D, θ)` that the
/// first-order estimate linearizes.
pub fn probe_loss(model: &TransformerLM, probe: &[Example], modality: Modality, batch_size: usize) -> Result<f64> {
    if probe.is_empty() {
        return Err(Error::Degenerate("probe set is empty".into()));
    }
    let bs = batches(probe, batch_size, modality, model.config().feature_dim)?;
    let mut total = 0.0;
    for b in &bs {
        total += model.loss(b)?;
    }
    Ok(total / bs.len() as f64)
}

/// Exact nullification importance `|L(θ) − L(θ with element zeroed)|` for each
/// `(parameter index, element index)` in `selection`.
pub fn exact_importance(
    model: &TransformerLM,
    probe: &[Example],
    modality: Modality,
    selection: &[(usize, usize)],
) -> Result<Vec<f64>> {
    if selection.len() > EXACT_BUDGET {
        return Err(Error::Budget {
            requested: selection.len(),
            limit: EXACT_BUDGET,
        });
    }
    let mut work = effective(model).into_owned();
    let bs = ImportanceOptions::default().batch_size;
    let base = probe_loss(&work, probe, modality, bs)?;
    let mut out = Vec::with_capacity(selection.len());
    for &(pi, ei) in selection {
        let Some(p) = work.params().get(pi) else {
            return Err(Error::Contract(format!("parameter index {pi} out of range")));
        };
        if ei >= p.numel() {
            return Err(Error::Contract(format!("element {ei} out of range for `{}`", work.names()[pi])));
        }
        let saved = p.data()[ei];
        if saved == 0.0 {
            out.push(0.0);
            continue;
        }
        work.params_mut()[pi].data_mut()[ei] = 0.0;
        let nulled = probe_loss(&work, probe, modality, bs);
        work.params_mut()[pi].data_mut()[ei] = saved;
        out.push((base - nulled?).abs());
    }
    Ok(out)
}

/// Exponential of the mean cross-entropy over every response token.
pub fn perplexity(model: &TransformerLM, eval: &[Example], modality: Modality) -> Result<f64> {
    if eval.is_empty() {
        return Err(Error::Degenerate("perplexity over an empty eval set".into()));
    }
    let (mut sum, mut tokens) = (0.0, 0usize);
    for b in batches(eval, 64, modality, model.config().feature_dim)? {
        let n = b.batch_size() * b.response_len();
        sum += model.loss(&b)? * n as f64;
        tokens += n;
    }
    Ok((sum / tokens as f64).exp())
}

/// Fractional ranks (1-based); tied values share their average rank.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("spearman", &[a.len()], &[b.len()]));
    }
    if a.len() < 2 {
        return Err(Error::Degenerate("spearman needs at least two points".into()));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let mean = (a.len() as f64 + 1.0) / 2.0;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - mean) * (y - mean);
        va += (x - mean).powi(2);
        vb += (y - mean).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::Degenerate("spearman of a constant sequence".into()));
    }
    Ok(cov / (va * vb).sqrt())
}
