use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::ImportanceMap;
use crate::error::{Error, Result};
use crate::model::ParamGroup;

/// Summed importance per transformer layer; non-layer groups are kept apart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerImportanceProfile {
    pub layers: Vec<f64>,
    /// Totals for `embedding`, `position`, `final_norm`, `lm_head`, `adaptor`.
    pub other: BTreeMap<String, f64>,
}

impl LayerImportanceProfile {
    pub fn from_layers(layers: Vec<f64>) -> Self {
        Self {
            layers,
            other: BTreeMap::new(),
        }
    }

    pub fn layer_total(&self) -> f64 {
        self.layers.iter().sum()
    }

    pub fn total(&self) -> f64 {
        self.layer_total() + self.other.values().sum::<f64>()
    }

    /// Layer totals scaled to sum to one.
    pub fn normalized(&self) -> Result<Vec<f64>> {
        let s = self.layer_total();
        if !(s > 0.0) {
            return Err(Error::Degenerate("layer profile has no mass".into()));
        }
        Ok(self.layers.iter().map(|x| x / s).collect())
    }

    /// CSV with columns `layer_index,total,normalized`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let norm = self.normalized().unwrap_or_else(|_| vec![0.0; self.layers.len()]);
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["layer_index", "total", "normalized"])?;
        for (i, (t, n)) in self.layers.iter().zip(&norm).enumerate() {
            w.write_record([i.to_string(), format!("{t:.12e}"), format!("{n:.12e}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn aggregate_layers(map: &ImportanceMap) -> LayerImportanceProfile {
    let mut layers = vec![0.0; map.config.n_layers];
    let mut other = BTreeMap::new();
    for (name, scores) in map.names.iter().zip(&map.scores) {
        let sum: f64 = scores.data().iter().map(|x| x.abs()).sum();
        let key = match ParamGroup::of(name) {
            Some(ParamGroup::Layer(i)) if i < layers.len() => {
                layers[i] += sum;
                continue;
            }
            Some(ParamGroup::Adaptor) => "adaptor",
            Some(ParamGroup::Embedding) => "embedding",
            Some(ParamGroup::Position) => "position",
            Some(ParamGroup::FinalNorm) => "final_norm",
            Some(ParamGroup::Head) => "lm_head",
            _ => name.as_str(),
        };
        *other.entry(key.to_string()).or_insert(0.0) += sum;
    }
    LayerImportanceProfile { layers, other }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftStats {
    /// L1 distance between the sum-normalized layer profiles, in [0, 2].
    pub l1: f64,
    /// `argmax(after) − argmax(before)`.
    pub peak_moved: i64,
    /// Raw layer mass of `after` over that of `before`.
    pub mass_ratio: f64,
}

pub fn distribution_shift(before: &LayerImportanceProfile, after: &LayerImportanceProfile) -> Result<ShiftStats> {
    if before.layers.len() != after.layers.len() {
        return Err(Error::shape("distribution_shift", &[before.layers.len()], &[after.layers.len()]));
    }
    let (p, q) = (before.normalized()?, after.normalized()?);
    let l1 = p.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum();
    let peak = |xs: &[f64]| crate::model::argmax(xs) as i64;
    Ok(ShiftStats {
        l1,
        peak_moved: peak(&after.layers) - peak(&before.layers),
        mass_ratio: after.layer_total() / before.layer_total(),
    })
}
