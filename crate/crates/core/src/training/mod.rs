//! Optimization strategies: text pretraining, full fine-tuning, layer-wise
//! learning-rate scaling from a text-importance profile, and LoRA.

mod grid;
mod optim;

pub use grid::{run_experiment_grid, write_results_csv, ArmOutcome, GridData, GridOutcome, ResultRow, RESULT_COLUMNS};
pub use optim::Optimizer;

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{batches_of, Example, Modality};
use crate::error::{Error, Result};
use crate::importance::{aggregate_layers, estimate_importance, perplexity, LayerImportanceProfile};
use crate::model::{GradMode, ParamGroup, TransformerLM, DEFAULT_LORA_TARGETS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    PretrainText,
    /// Trains only the adaptor on speech data; every LLM weight stays frozen.
    AlignAdaptor,
    FullFt,
    LayerLr,
    Lora,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::PretrainText => "pretrain-text",
            Strategy::AlignAdaptor => "align-adaptor",
            Strategy::FullFt => "full-ft",
            Strategy::LayerLr => "layer-lr",
            Strategy::Lora => "lora",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain-text" => Ok(Strategy::PretrainText),
            "align-adaptor" => Ok(Strategy::AlignAdaptor),
            "full-ft" => Ok(Strategy::FullFt),
            "layer-lr" => Ok(Strategy::LayerLr),
            "lora" => Ok(Strategy::Lora),
            _ => Err(Error::Config(format!("unknown strategy `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

/// Which parameters of layer `i` receive that layer's learning-rate multiplier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerLrScope {
    /// Every parameter registered under `layer.{i}.*`, norm gains included.
    #[default]
    AllLayerParams,
    /// Attention and MLP matrices only; norm gains keep multiplier 1.0.
    MatricesOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingPlan {
    pub strategy: Strategy,
    #[serde(default = "default_lr")]
    pub base_lr: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_rank")]
    pub lora_rank: usize,
    /// Defaults to `2 · lora_rank`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora_alpha: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_betas")]
    pub betas: [f64; 2],
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Global gradient-norm clip; none when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_grad_norm: Option<f64>,
    #[serde(default)]
    pub layer_lr_scope: LayerLrScope,
}

fn default_lr() -> f64 {
    1e-4
}
fn default_epochs() -> usize {
    3
}
fn default_batch() -> usize {
    32
}
fn default_lambda() -> f64 {
    0.4
}
fn default_rank() -> usize {
    8
}
fn default_betas() -> [f64; 2] {
    [0.9, 0.999]
}
fn default_eps() -> f64 {
    1e-8
}

impl TrainingPlan {
    /// Defaults for `strategy`: Adam, batch 32, 3e-4 for pretraining and 1e-4
    /// with 3 epochs for fine-tuning.
    pub fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            base_lr: if strategy == Strategy::PretrainText { 3e-4 } else { default_lr() },
            epochs: default_epochs(),
            batch_size: default_batch(),
            lambda: default_lambda(),
            lora_rank: default_rank(),
            lora_alpha: None,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            betas: default_betas(),
            eps: default_eps(),
            max_grad_norm: None,
            layer_lr_scope: LayerLrScope::AllLayerParams,
        }
    }

    pub fn lora_alpha(&self) -> f64 {
        self.lora_alpha.unwrap_or(2.0 * self.lora_rank as f64)
    }

    /// Short arm label, e.g. `layer-lr` or `lora-r16`.
    pub fn label(&self) -> String {
        match self.strategy {
            Strategy::Lora => format!("lora-r{}", self.lora_rank),
            s => s.to_string(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must be in [0,1), got {}", self.lambda)));
        }
        if self.strategy == Strategy::Lora {
            if self.lora_rank == 0 {
                return Err(Error::Config("lora_rank must be at least 1".into()));
            }
            if !(self.lora_alpha() > 0.0) {
                return Err(Error::Config("lora_alpha must be positive".into()));
            }
        }
        if !self.betas.iter().all(|b| (0.0..1.0).contains(b)) || !(self.eps > 0.0) {
            return Err(Error::Config("adam betas must be in [0,1) and eps positive".into()));
        }
        if matches!(self.max_grad_norm, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("max_grad_norm must be positive".into()));
        }
        Ok(())
    }

    fn expected_modality(&self) -> Modality {
        match self.strategy {
            Strategy::PretrainText => Modality::Text,
            _ => Modality::Speech,
        }
    }
}

/// Per-layer learning-rate multipliers `1 − λ·d(l)`; non-layer groups use 1.0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub layers: Vec<f64>,
    /// The profile was flat, so every multiplier fell back to 1.0.
    pub flat: bool,
    pub scope: LayerLrScope,
}

impl LrSchedule {
    pub fn uniform(n_layers: usize) -> Self {
        Self {
            layers: vec![1.0; n_layers],
            flat: false,
            scope: LayerLrScope::AllLayerParams,
        }
    }

    /// Multiplier for a registry (or adapter) name.
    pub fn multiplier(&self, name: &str) -> f64 {
        match ParamGroup::of(name) {
            Some(ParamGroup::Layer(i)) if i < self.layers.len() => {
                if self.scope == LayerLrScope::MatricesOnly && name.ends_with("norm") {
                    1.0
                } else {
                    self.layers[i]
                }
            }
            _ => 1.0,
        }
    }
}

/// `lr(i) = 1 − λ · (I(i) − min) / (max − min)`.
pub fn layer_lr_coefficients(profile: &LayerImportanceProfile, lambda: f64) -> Result<LrSchedule> {
    let xs = &profile.layers;
    if xs.len() < 2 {
        return Err(Error::Config("layer-wise learning rates need at least two layers".into()));
    }
    if !(0.0..1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda must be in [0,1), got {lambda}")));
    }
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(Error::Degenerate("layer profile is not finite".into()));
    }
    let min = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        log::warn!("flat layer importance profile; every layer keeps multiplier 1.0");
        return Ok(LrSchedule {
            layers: vec![1.0; xs.len()],
            flat: true,
            scope: LayerLrScope::AllLayerParams,
        });
    }
    let layers = xs.iter().map(|x| 1.0 - lambda * (x - min) / (max - min)).collect();
    Ok(LrSchedule {
        layers,
        flat: false,
        scope: LayerLrScope::AllLayerParams,
    })
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

pub fn write_metrics_csv<W: Write>(log: &[MetricRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "split", "metric", "value"])?;
    for r in log {
        w.write_record([r.epoch.to_string(), r.split.clone(), r.metric.clone(), format!("{:.12e}", r.value)])?;
    }
    w.flush()?;
    Ok(())
}

/// What a training run reads.
#[derive(Debug, Clone, Copy)]
pub struct TrainingData<'a> {
    /// Training examples, fed in the plan's modality.
    pub train: &'a [Example],
    /// Held-out examples for the per-epoch text and speech perplexities;
    /// empty to skip them.
    pub eval: &'a [Example],
    /// Text probe for the layer-lr importance profile.
    pub probe: &'a [Example],
    /// Precomputed profile of the starting model; estimated from `probe`
    /// when absent.
    pub profile: Option<&'a LayerImportanceProfile>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TransformerLM,
    pub log: Vec<MetricRecord>,
    /// The per-layer schedule used by a layer-lr run.
    pub schedule: Option<LrSchedule>,
    /// The text-importance profile that schedule was derived from.
    pub profile: Option<LayerImportanceProfile>,
}

/// Trains `model` under `plan`. The result is a deterministic function of
/// the inputs. LoRA runs return the model with adapters still attached.
pub fn train(mut model: TransformerLM, data: TrainingData<'_>, plan: &TrainingPlan) -> Result<TrainOutcome> {
    plan.validate()?;
    if data.train.is_empty() {
        return Err(Error::Degenerate("training set is empty".into()));
    }
    let modality = plan.expected_modality();
    let (mut schedule, mut profile) = (None, None);
    match plan.strategy {
        Strategy::PretrainText | Strategy::FullFt => {}
        Strategy::AlignAdaptor => {
            model.set_trainable(|name| ParamGroup::of(name) == Some(ParamGroup::Adaptor));
        }
        Strategy::LayerLr => {
            let p = match data.profile {
                Some(p) => p.clone(),
                None => aggregate_layers(&estimate_importance(&model, data.probe, Modality::Text)?),
            };
            let mut s = layer_lr_coefficients(&p, plan.lambda)?;
            s.scope = plan.layer_lr_scope;
            schedule = Some(s);
            profile = Some(p);
        }
        Strategy::Lora => {
            model.attach_lora(DEFAULT_LORA_TARGETS, plan.lora_rank, plan.lora_alpha(), plan.seed)?;
        }
    }
    let lr_schedule = schedule.clone().unwrap_or_else(|| LrSchedule::uniform(model.config().n_layers));
    let mut opt = Optimizer::new(plan);
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed ^ 0x7a11);
    let mut log = Vec::new();
    let feature_dim = model.config().feature_dim;
    let mut step = 0usize;
    model.zero_grad();
    for epoch in 1..=plan.epochs {
        let mut order: Vec<&Example> = data.train.iter().collect();
        order.shuffle(&mut rng);
        let mut epoch_batches = batches_of(&order, plan.batch_size, modality, feature_dim)?;
        epoch_batches.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (bi, batch) in epoch_batches.iter().enumerate() {
            let loss = model.accumulate_gradients(batch, GradMode::Trainable)?;
            if !loss.is_finite() {
                return Err(Error::Numerical {
                    step,
                    batch: bi,
                    detail: format!("training loss is {loss} in epoch {epoch}"),
                });
            }
            loss_sum += loss;
            opt.step(&mut model, &lr_schedule, step)?;
            model.zero_grad();
            step += 1;
        }
        let mut record = |split: &str, metric: &str, value: f64| {
            log.push(MetricRecord {
                epoch,
                split: split.into(),
                metric: metric.into(),
                value,
            })
        };
        record("train", "loss", loss_sum / epoch_batches.len() as f64);
        if !data.eval.is_empty() {
            record("eval", "text_ppl", perplexity(&model, data.eval, Modality::Text)?);
            record("eval", "speech_ppl", perplexity(&model, data.eval, Modality::Speech)?);
        }
    }
    if plan.strategy == Strategy::AlignAdaptor {
        model.set_trainable(|_| true);
    }
    Ok(TrainOutcome {
        model,
        log,
        schedule,
        profile,
    })
}
