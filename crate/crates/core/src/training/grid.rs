use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{train, MetricRecord, Strategy, TrainingData, TrainingPlan};
use crate::data::{answer_accuracy, Example, Modality};
use crate::error::{Error, Result};
use crate::importance::{aggregate_layers, distribution_shift, estimate_importance, perplexity, LayerImportanceProfile};
use crate::model::TransformerLM;

/// Shared inputs of every arm.
#[derive(Debug, Clone, Copy)]
pub struct GridData<'a> {
    /// Speech-modality fine-tuning set.
    pub finetune: &'a [Example],
    /// Question set scored in both modalities (T2T and S2T) and used for the
    /// perplexity columns.
    pub benchmark: &'a [Example],
    /// Text probe for the importance profiles.
    pub text_probe: &'a [Example],
}

/// One line of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub arm: String,
    #[serde(with = "nan_as_null")]
    pub t2t_accuracy: f64,
    /// Absent for the unfine-tuned baseline.
    pub s2t_accuracy: Option<f64>,
    #[serde(with = "nan_as_null")]
    pub text_ppl: f64,
    #[serde(with = "nan_as_null")]
    pub speech_ppl: f64,
    #[serde(with = "nan_as_null")]
    pub shift_l1: f64,
    pub peak_moved: i64,
    #[serde(with = "nan_as_null")]
    pub mass_ratio: f64,
    /// Failure message of an arm that did not complete.
    pub error: Option<String>,
}

/// Failed rows carry NaN metrics, which JSON cannot represent.
mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        (!x.is_nan()).then_some(*x).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

impl ResultRow {
    fn failed(arm: String, e: &Error) -> Self {
        Self {
            arm,
            t2t_accuracy: f64::NAN,
            s2t_accuracy: None,
            text_ppl: f64::NAN,
            speech_ppl: f64::NAN,
            shift_l1: f64::NAN,
            peak_moved: 0,
            mass_ratio: f64::NAN,
            error: Some(e.to_string()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ArmOutcome {
    pub plan: TrainingPlan,
    /// The fine-tuned model; LoRA arms keep their adapters attached.
    pub model: TransformerLM,
    /// Text-importance profile after fine-tuning.
    pub profile: LayerImportanceProfile,
    pub log: Vec<MetricRecord>,
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    /// The baseline row first, then one row per plan in input order.
    pub rows: Vec<ResultRow>,
    /// Text-importance profile of the shared starting checkpoint.
    pub base_profile: LayerImportanceProfile,
    /// Completed arms, in plan order.
    pub arms: Vec<ArmOutcome>,
    /// `(arm label, exit code)` of every arm that failed.
    pub failed: Vec<(String, i32)>,
}

impl GridOutcome {
    pub fn failures(&self) -> usize {
        self.failed.len()
    }

    pub fn arm(&self, label: &str) -> Option<&ArmOutcome> {
        self.arms.iter().find(|a| a.plan.label() == label)
    }
}

/// Fine-tunes a copy of `pretrained` under every plan and scores all arms on
/// the same benchmark. A failing arm becomes a row with an error message;
/// the remaining arms still run.
pub fn run_experiment_grid(pretrained: &TransformerLM, plans: &[TrainingPlan], data: GridData<'_>) -> Result<GridOutcome> {
    let base_profile = aggregate_layers(&estimate_importance(pretrained, data.text_probe, Modality::Text)?);
    let mut rows = vec![ResultRow {
        arm: "no-ft".into(),
        t2t_accuracy: answer_accuracy(pretrained, data.benchmark, Modality::Text)?,
        s2t_accuracy: None,
        text_ppl: perplexity(pretrained, data.benchmark, Modality::Text)?,
        speech_ppl: perplexity(pretrained, data.benchmark, Modality::Speech)?,
        shift_l1: 0.0,
        peak_moved: 0,
        mass_ratio: 1.0,
        error: None,
    }];
    let (mut arms, mut failed) = (Vec::new(), Vec::new());
    for plan in plans {
        match run_arm(pretrained, plan, data, &base_profile) {
            Ok((row, arm)) => {
                rows.push(row);
                arms.push(arm);
            }
            Err(e) => {
                log::error!("arm {} failed: {e}", plan.label());
                rows.push(ResultRow::failed(plan.label(), &e));
                failed.push((plan.label(), e.exit_code()));
            }
        }
    }
    Ok(GridOutcome {
        rows,
        base_profile,
        arms,
        failed,
    })
}

fn run_arm(
    pretrained: &TransformerLM,
    plan: &TrainingPlan,
    data: GridData<'_>,
    base_profile: &LayerImportanceProfile,
) -> Result<(ResultRow, ArmOutcome)> {
    if matches!(plan.strategy, Strategy::PretrainText | Strategy::AlignAdaptor) {
        return Err(Error::Config("grid arms must be fine-tuning strategies".into()));
    }
    let outcome = train(
        pretrained.clone(),
        TrainingData {
            train: data.finetune,
            eval: &[],
            probe: data.text_probe,
            profile: Some(base_profile),
        },
        plan,
    )?;
    let model = outcome.model;
    let profile = aggregate_layers(&estimate_importance(&model, data.text_probe, Modality::Text)?);
    let shift = distribution_shift(base_profile, &profile)?;
    let row = ResultRow {
        arm: plan.label(),
        t2t_accuracy: answer_accuracy(&model, data.benchmark, Modality::Text)?,
        s2t_accuracy: Some(answer_accuracy(&model, data.benchmark, Modality::Speech)?),
        text_ppl: perplexity(&model, data.benchmark, Modality::Text)?,
        speech_ppl: perplexity(&model, data.benchmark, Modality::Speech)?,
        shift_l1: shift.l1,
        peak_moved: shift.peak_moved,
        mass_ratio: shift.mass_ratio,
        error: None,
    };
    Ok((
        row,
        ArmOutcome {
            plan: plan.clone(),
            model,
            profile,
            log: outcome.log,
        },
    ))
}

pub const RESULT_COLUMNS: [&str; 9] = [
    "arm",
    "t2t_accuracy",
    "s2t_accuracy",
    "text_ppl",
    "speech_ppl",
    "shift_l1",
    "peak_moved",
    "mass_ratio",
    "status",
];

/// Results table with a fixed column order; absent values are written as `-`.
pub fn write_results_csv<W: Write>(rows: &[ResultRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RESULT_COLUMNS)?;
    let num = |x: f64| if x.is_nan() { "-".to_string() } else { format!("{x:.6}") };
    for r in rows {
        w.write_record([
            r.arm.clone(),
            num(r.t2t_accuracy),
            r.s2t_accuracy.map_or("-".to_string(), num),
            num(r.text_ppl),
            num(r.speech_ppl),
            num(r.shift_l1),
            r.peak_moved.to_string(),
            num(r.mass_ratio),
            r.error.clone().map_or("ok".to_string(), |e| format!("failed: {e}")),
        ])?;
    }
    w.flush()?;
    Ok(())
}
