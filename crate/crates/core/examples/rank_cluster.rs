//! Rank-cluster density of a matrix whose large entries sit on a few rows
//! and columns, next to one with scattered large entries; both exported as
//! 16-bit PGM and SVG heatmaps.

use parashift::importance::rank_cluster_density;
use parashift::report::heatmap_export;
use parashift::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> parashift::Result<()> {
    let (n, mut rng) = (32, ChaCha8Rng::seed_from_u64(0));
    let clustered: Vec<f64> = (0..n * n)
        .map(|i| {
            let (r, c) = (i / n, i % n);
            let line = r % 11 == 3 || c % 13 == 5;
            rng.gen_range(0.0..0.1) + if line { 1.0 } else { 0.0 }
        })
        .collect();
    let scattered: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0.0..1.0f64).powi(8)).collect();
    let out = std::env::temp_dir().join("parashift-rank-cluster");
    for (name, data) in [("clustered", clustered), ("scattered", scattered)] {
        let m = Tensor::new(&[n, n], data)?;
        let map = rank_cluster_density(name, &m, 0.05)?;
        let (pgm, _) = heatmap_export(&map.density, &out.join(name))?;
        println!("{name:<10} summary {:.3}  -> {}", map.summary, pgm.display());
    }
    Ok(())
}
