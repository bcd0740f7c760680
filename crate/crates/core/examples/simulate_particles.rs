//! Simulates charged-particle systems and writes a small dataset.
//!
//! Run with `cargo run --example simulate_particles`.

use rain::sim::{generate_dataset, simulate, DatasetSizes, ParticleConfig, Split};

fn main() -> rain::Result<()> {
    let config = ParticleConfig { seed: 42, ..ParticleConfig::default() };
    let run = simulate(&config)?;
    let sample = &run.sample;
    println!("charges: {:?}", sample.charges);
    println!("ground-truth graph ({} directed edges):\n{:?}", sample.truth_graph.num_edges(), sample.truth_graph);
    println!("states: {} agents x {} frames x 4, {} blow-ups discarded", sample.n_agents(), sample.n_steps(), run.regenerations);

    // Uncharged particles feel no force, so their velocity never changes.
    let last = sample.n_steps() - 1;
    for (i, q) in sample.charges.iter().enumerate() {
        let v0 = (sample.states[[i, 0, 2]], sample.states[[i, 0, 3]]);
        let v1 = (sample.states[[i, last, 2]], sample.states[[i, last, 3]]);
        println!("agent {i} charge {q:>2}: velocity {v0:.3?} -> {v1:.3?}");
    }

    let dir = std::env::temp_dir().join("rain_example_dataset");
    let sizes = DatasetSizes { train: 40, val: 10, test: 10 };
    let handle = generate_dataset(&config, sizes, 7, &dir)?;
    println!("\nwrote {:?} to {}", handle.sizes, dir.display());
    let train = handle.load(Split::Train)?;
    println!("first training case has {} truth edges", train[0].truth_graph.num_edges());
    println!("standardizer: {:?}", handle.standardizer);
    Ok(())
}
