use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ImportanceMap;
use crate::error::{Error, Result};
use crate::model::TransformerLM;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    Top,
    Bottom,
    Random,
}

impl MaskMode {
    pub const ALL: [MaskMode; 3] = [MaskMode::Top, MaskMode::Bottom, MaskMode::Random];
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskMode::Top => "top",
            MaskMode::Bottom => "bottom",
            MaskMode::Random => "random",
        })
    }
}

impl FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top" => Ok(MaskMode::Top),
            "bottom" => Ok(MaskMode::Bottom),
            "random" => Ok(MaskMode::Random),
            _ => Err(Error::Config(format!("unknown mask mode `{s}` (top, bottom, random)"))),
        }
    }
}

/// Elements selected for deactivation, aligned with a model's registry.
#[derive(Debug, Clone, PartialEq)]
pub struct DeactivationMask {
    pub names: Vec<String>,
    pub masks: Vec<Vec<bool>>,
    pub mode: MaskMode,
    pub fraction: f64,
}

impl DeactivationMask {
    pub fn count(&self) -> usize {
        self.masks.iter().flatten().filter(|&&m| m).count()
    }

    /// Elementwise OR of two masks over the same registry.
    pub fn union(&self, other: &Self) -> Result<Self> {
        if self.names != other.names || self.masks.iter().zip(&other.masks).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::Contract("mask registries differ".into()));
        }
        let masks = self
            .masks
            .iter()
            .zip(&other.masks)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| *x || *y).collect())
            .collect();
        Ok(Self {
            masks,
            ..self.clone()
        })
    }
}

/// Selects `round(fraction · total)` elements globally across every
/// parameter. Ties in score are broken by registry order, then element index.
pub fn build_mask(map: &ImportanceMap, fraction: f64, mode: MaskMode, seed: u64) -> Result<DeactivationMask> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("mask fraction must be in [0,1], got {fraction}")));
    }
    let total = map.num_elements();
    let count = (fraction * total as f64).round() as usize;
    let flat: Vec<f64> = map.scores.iter().flat_map(|t| t.data().iter().copied()).collect();
    let chosen: Vec<usize> = match mode {
        MaskMode::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rand::seq::index::sample(&mut rng, total, count).into_vec()
        }
        MaskMode::Top | MaskMode::Bottom => {
            let mut order: Vec<usize> = (0..total).collect();
            let cmp = |a: &usize, b: &usize| {
                let by_score = match mode {
                    MaskMode::Top => flat[*b].total_cmp(&flat[*a]),
                    _ => flat[*a].total_cmp(&flat[*b]),
                };
                by_score.then(a.cmp(b))
            };
            if count > 0 && count < total {
                order.select_nth_unstable_by(count - 1, cmp);
            }
            order.truncate(count);
            order
        }
    };
    let mut flat_mask = vec![false; total];
    for i in chosen {
        flat_mask[i] = true;
    }
    let mut masks = Vec::with_capacity(map.scores.len());
    let mut off = 0;
    for s in &map.scores {
        masks.push(flat_mask[off..off + s.numel()].to_vec());
        off += s.numel();
    }
    Ok(DeactivationMask {
        names: map.names.clone(),
        masks,
        mode,
        fraction,
    })
}

/// Copy of `model` with every masked element set to zero.
pub fn apply_mask(model: &TransformerLM, mask: &DeactivationMask) -> Result<TransformerLM> {
    if mask.names != model.names() || mask.masks.iter().zip(model.params()).any(|(m, p)| m.len() != p.numel()) {
        return Err(Error::Contract("mask does not match the model's parameter registry".into()));
    }
    let mut out = model.clone();
    for (p, m) in out.params_mut().iter_mut().zip(&mask.masks) {
        for (x, &off) in p.data_mut().iter_mut().zip(m) {
            if off {
                *x = 0.0;
            }
        }
    }
    Ok(out)
}
