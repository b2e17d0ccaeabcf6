use super::ImportanceMap;
use crate::error::{Error, Result};
use crate::model::TransformerLM;
use crate::tensor::Tensor;

/// Local density of the Top region of one matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RankClusterMap {
    pub name: String,
    /// Same shape as the matrix; values in [0, 1].
    pub density: Tensor,
    pub top_fraction: f64,
    /// Mean density over the Top cells.
    pub summary: f64,
}

/// Top region = the `round(top_fraction · n)` largest cells (at least one;
/// ties by index). Each cell's density is the share of its 3×3 neighbourhood,
/// clamped at the borders and including the cell itself, that lies in the
/// Top region.
pub fn rank_cluster_density(name: &str, matrix: &Tensor, top_fraction: f64) -> Result<RankClusterMap> {
    if matrix.ndim() != 2 {
        return Err(Error::Contract(format!("rank clustering needs a 2-D matrix, `{name}` is {:?}", matrix.shape())));
    }
    if !(top_fraction > 0.0 && top_fraction <= 1.0) {
        return Err(Error::Config(format!("top_fraction must be in (0,1], got {top_fraction}")));
    }
    let (rows, cols) = (matrix.shape()[0], matrix.shape()[1]);
    let n = rows * cols;
    let k = ((top_fraction * n as f64).round() as usize).clamp(1, n);
    let x = matrix.data();
    let mut order: Vec<usize> = (0..n).collect();
    let cmp = |a: &usize, b: &usize| x[*b].total_cmp(&x[*a]).then(a.cmp(b));
    if k < n {
        order.select_nth_unstable_by(k - 1, cmp);
    }
    let mut top = vec![false; n];
    for &i in &order[..k] {
        top[i] = true;
    }
    let mut density = vec![0.0; n];
    for r in 0..rows {
        for c in 0..cols {
            let (r0, r1) = (r.saturating_sub(1), (r + 1).min(rows - 1));
            let (c0, c1) = (c.saturating_sub(1), (c + 1).min(cols - 1));
            let mut hits = 0usize;
            for rr in r0..=r1 {
                for cc in c0..=c1 {
                    hits += top[rr * cols + cc] as usize;
                }
            }
            density[r * cols + c] = hits as f64 / ((r1 - r0 + 1) * (c1 - c0 + 1)) as f64;
        }
    }
    let summary = top.iter().zip(&density).filter(|(t, _)| **t).map(|(_, d)| d).sum::<f64>() / k as f64;
    Ok(RankClusterMap {
        name: name.to_string(),
        density: Tensor::new(matrix.shape(), density)?,
        top_fraction,
        summary,
    })
}

pub fn rank_cluster_map(map: &ImportanceMap, matrix_name: &str, top_fraction: f64) -> Result<RankClusterMap> {
    let scores = map
        .get(matrix_name)
        .ok_or_else(|| Error::Contract(format!("no parameter named `{matrix_name}`")))?;
    rank_cluster_density(matrix_name, scores, top_fraction)
}

/// `|θ_after − θ_before|` of one parameter scaled by its maximum into [0, 1];
/// all zeros when nothing changed. Adapters are folded in first.
pub fn parameter_change_map(before: &TransformerLM, after: &TransformerLM, name: &str) -> Result<Tensor> {
    let (before, after) = (before.merged(), after.merged());
    let (Some(a), Some(b)) = (before.param(name), after.param(name)) else {
        return Err(Error::Contract(format!("no parameter named `{name}` in both models")));
    };
    if a.shape() != b.shape() {
        return Err(Error::shape("parameter_change_map", a.shape(), b.shape()));
    }
    let diff: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| (y - x).abs()).collect();
    let max = diff.iter().copied().fold(0.0, f64::max);
    let scaled = if max > 0.0 { diff.into_iter().map(|d| d / max).collect() } else { diff };
    Tensor::new(a.shape(), scaled)
}
