//! Generate a synthetic corpus, filter and split it, and round-trip it
//! through the text format.

use vnoip::cascade::{parse_dataset, write_dataset};
use vnoip::pipeline::{split_cascades, SplitConfig};
use vnoip::synth::{generate_synthetic, GenConfig};

fn main() -> vnoip::Result<()> {
    let gen = GenConfig {
        cascades: 4000,
        ..GenConfig::default()
    };
    let (graph, cascades) = generate_synthetic(&gen)?;
    let sizes: Vec<usize> = cascades.iter().map(|c| c.size()).collect();
    let mean = sizes.iter().sum::<usize>() as f64 / sizes.len() as f64;
    println!(
        "{} users, {} edges, {} cascades, mean size {mean:.2} (1 / (1 - {}) = {:.2}), largest {}",
        graph.node_count(),
        graph.edges().len(),
        cascades.len(),
        gen.branching,
        1.0 / (1.0 - gen.branching),
        sizes.iter().max().unwrap()
    );

    let t_o = 0.3 * gen.horizon;
    let splits = split_cascades(&cascades, t_o, &SplitConfig::default())?;
    let (tr, va, te) = splits.sizes();
    println!("observed at t_o = {t_o}: {tr} train / {va} validation / {te} test after the 10-participant filter");
    let c = &splits.train[0];
    println!(
        "example cascade {}: P(t_o) = {}, P(t_p) = {}, increment {}",
        c.id,
        c.popularity_at(t_o),
        c.popularity_at(gen.horizon),
        c.increment(t_o, gen.horizon)
    );
    println!("  {}", c.to_line().chars().take(120).collect::<String>());

    let dir = std::env::temp_dir().join("vnoip-synthetic-corpus");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("cascades.txt");
    write_dataset(&path, &cascades)?;
    let back = parse_dataset(&path)?;
    println!("round trip through {} lossless: {}", path.display(), back == cascades);
    Ok(())
}
