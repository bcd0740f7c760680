//! Encodes observed histories with the graph message-passing encoder and
//! pretrains it as an autoencoder.
//!
//! Run with `cargo run --release --example encode_histories`.

use rain::batch::{prepare_cases, Case};
use rain::gmp::{alpha_row_sums, encode_cases, pretrain_autoencoder, GmpConfig};
use rain::learners::OptimizerSpec;
use rain::rng::{substream, Stream};
use rain::sim::{generate_dataset, DatasetSizes, ParticleConfig, Split};

fn main() -> rain::Result<()> {
    let particles = ParticleConfig { total_steps: 20, history_steps: 10, future_steps: 10, ..ParticleConfig::default() };
    let dir = std::env::temp_dir().join("rain_example_encoder");
    let handle = generate_dataset(&particles, DatasetSizes { train: 64, val: 8, test: 8 }, 3, &dir)?;
    let cases = prepare_cases(&handle.load(Split::Train)?, &handle.standardizer);

    let cfg = GmpConfig { history_steps: particles.history_steps, hidden: 32, layers: 2 };
    let encoder = cfg.init(&mut substream(1, Stream::Init))?;
    let refs: Vec<&Case> = cases[..2].iter().collect();
    let attrs = encode_cases(&cfg, &refs, &encoder);
    println!("encoded {} agents into {} features each", attrs.v_encoded.nrows(), attrs.v_encoded.ncols());
    println!("neighbor weights of case 0 (rows sum to one, zero diagonal):");
    for row in attrs.alpha.rows().into_iter().take(6) {
        println!("  {:.3?}", row.to_vec());
    }
    println!("row sums: {:.6?}", alpha_row_sums(&attrs.alpha));

    let opt = OptimizerSpec { batch_size: 16, ..OptimizerSpec::default() };
    let trained = pretrain_autoencoder(&cfg, &cases, encoder, opt, 10, 5)?;
    println!("\nreconstruction loss {:.4} before, per epoch:", trained.initial_loss);
    for (k, l) in trained.epoch_losses.iter().enumerate() {
        println!("  epoch {:>2}: {l:.4}", k + 1);
    }
    Ok(())
}
