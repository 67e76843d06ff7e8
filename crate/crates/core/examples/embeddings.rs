//! Global PPMI factorization and GraphWave structural embeddings.

use vnoip::embed::{embed_cascade, embed_global, GlobalEmbedConfig, GlobalGraph, GraphWaveConfig};

fn main() -> vnoip::Result<()> {
    // two triangles joined by a bridge 2 - 3
    let edges = [(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5), (2, 3)];
    let g = GlobalGraph::new(6, edges)?;
    let table = embed_global(
        &g,
        &GlobalEmbedConfig {
            dim: 3,
            window: 4,
            negative: 1.0,
        },
    )?;
    println!("global embeddings (dim 3):");
    for u in 0..table.rows() {
        println!("  node {u}: {:+.4?}", table.row(u));
    }

    // a star: the hub differs from the leaves, and all leaves coincide
    let star: Vec<(usize, usize)> = (1..6).map(|l| (0, l)).collect();
    let cfg = GraphWaveConfig {
        dim: 8,
        ..GraphWaveConfig::default()
    };
    let wave = embed_cascade(6, &star, &cfg)?;
    println!("\nGraphWave on a 5-leaf star (dim 8):");
    for u in [0, 1, 2] {
        println!("  node {u}: {:+.4?}", wave.row(u));
    }
    Ok(())
}
