use std::collections::HashMap;

use super::{LrSchedule, OptimizerKind, TrainingPlan};
use crate::error::{Error, Result};
use crate::model::TransformerLM;

/// SGD or Adam over a model's trainable tensors, with per-group learning
/// rates from an [`LrSchedule`] and an optional global-norm clip.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    betas: [f64; 2],
    eps: f64,
    max_grad_norm: Option<f64>,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Optimizer {
    pub fn new(plan: &TrainingPlan) -> Self {
        Self {
            kind: plan.optimizer,
            lr: plan.base_lr,
            betas: plan.betas,
            eps: plan.eps,
            max_grad_norm: plan.max_grad_norm,
            moments: HashMap::new(),
        }
    }

    /// Applies one update from the gradients currently held by `model`.
    /// `step` counts from zero.
    pub fn step(&mut self, model: &mut TransformerLM, schedule: &LrSchedule, step: usize) -> Result<()> {
        let mut params = model.trainable_mut();
        let clip = match self.max_grad_norm {
            Some(max) => {
                let sq: f64 = params.iter().filter_map(|(_, p)| p.grad()).flatten().map(|g| g * g).sum();
                let norm = sq.sqrt();
                if !norm.is_finite() {
                    return Err(Error::Numerical {
                        step,
                        batch: step,
                        detail: format!("gradient norm is {norm}"),
                    });
                }
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let t = (step + 1) as i32;
        let [b1, b2] = self.betas;
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for (name, p) in params.iter_mut() {
            let Some(g) = p.grad().map(|g| g.to_vec()) else {
                continue;
            };
            let lr = self.lr * schedule.multiplier(name);
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, gi) in p.data_mut().iter_mut().zip(&g) {
                        *w -= lr * gi * clip;
                    }
                }
                OptimizerKind::Adam => {
                    let n = g.len();
                    let (m, v) = self
                        .moments
                        .entry(name.clone())
                        .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
                    for (((w, gi), mi), vi) in p.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        let gi = gi * clip;
                        *mi = b1 * *mi + (1.0 - b1) * gi;
                        *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                        *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
                    }
                }
            }
        }
        Ok(())
    }
}
