//! Trains the soft-attention motion generator on a fixed graph and compares
//! static against dynamic prediction.
//!
//! Run with `cargo run --release --example predict_trajectories`.

use rain::batch::{prepare_cases, Case};
use rain::generator::{evaluate_loss, predict, train_generator, FixedGraphs, FnProvider, GeneratorConfig, PredictionMode};
use rain::learners::OptimizerSpec;
use rain::rng::{substream, Stream};
use rain::sim::{generate_dataset, DatasetSizes, ParticleConfig, Split};
use rain::RelationGraph;

fn main() -> rain::Result<()> {
    let particles = ParticleConfig { total_steps: 20, history_steps: 10, future_steps: 10, ..ParticleConfig::default() };
    let dir = std::env::temp_dir().join("rain_example_generator");
    let handle = generate_dataset(&particles, DatasetSizes { train: 64, val: 16, test: 4 }, 11, &dir)?;
    let train = prepare_cases(&handle.load(Split::Train)?, &handle.standardizer);
    let val = prepare_cases(&handle.load(Split::Val)?, &handle.standardizer);

    let cfg = GeneratorConfig {
        hidden: 32,
        n_heads: 2,
        burn_in: particles.history_steps,
        horizon: particles.future_steps,
        tau: particles.future_steps,
        ..GeneratorConfig::default()
    };
    let init = cfg.init(&mut substream(2, Stream::Init))?;
    let val_refs: Vec<&Case> = val.iter().collect();
    let truth: Vec<&RelationGraph> = val.iter().map(|c| &c.truth).collect();
    println!("validation loss before training: {:.4}", evaluate_loss(&cfg, &init, &val_refs, &truth, 16));

    let opt = OptimizerSpec { batch_size: 16, learning_rate: 3e-3, ..OptimizerSpec::default() };
    let trained = train_generator(&cfg, &train, |_, c| c.truth.clone(), init, opt, 15, 9)?;
    let params = trained.params;
    println!("validation loss after 15 epochs:  {:.4}", evaluate_loss(&cfg, &params, &val_refs, &truth, 16));

    let case = &val[0];
    let history = case.states.slice(ndarray::s![.., ..cfg.burn_in, ..]).to_owned();
    let mut rng = substream(3, Stream::Noise);
    let mut fixed = FixedGraphs(vec![case.truth.clone()]);
    let stat = predict(&cfg, &params, &history, &mut fixed, PredictionMode::Static, &mut rng);

    // Dynamic mode asks for a graph every tau steps; here it simply counts the calls.
    let mut calls = 0;
    let mut provider = FnProvider(|w: &[ndarray::Array3<f32>]| {
        calls += 1;
        w.iter().map(|_| case.truth.clone()).collect()
    });
    let dynamic = predict(&cfg, &params, &history, &mut provider, PredictionMode::Dynamic { tau: 3 }, &mut rng);
    println!("\nstatic mode used {} graph, dynamic mode with tau=3 used {}", stat.masks.len(), dynamic.masks.len());
    println!("provider was queried {calls} times");

    let same = stat.samples == dynamic.samples;
    println!("identical futures with a fixed graph: {same}");
    let last = cfg.horizon - 1;
    for i in 0..case.n_agents() {
        let p = stat.samples[[0, i, last, 0]];
        let t = case.states[[i, cfg.burn_in + last, 0]];
        println!("agent {i}: predicted x {p:+.3}, true x {t:+.3}");
    }
    Ok(())
}
