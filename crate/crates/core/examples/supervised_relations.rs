//! Supervised relation recognition on frozen encoder features, the upper
//! bound the learned hard attention is compared against.
//!
//! Run with `cargo run --release --example supervised_relations`.

use rain::batch::prepare_cases;
use rain::classifier::{classify, train_classifier, ClassifierConfig};
use rain::eval::relation_metrics;
use rain::gmp::{pretrain_autoencoder, GmpConfig};
use rain::learners::OptimizerSpec;
use rain::pipeline::case_features;
use rain::rng::{substream, Stream};
use rain::sim::{generate_dataset, DatasetSizes, ParticleConfig, Split};
use rain::RelationGraph;

fn main() -> rain::Result<()> {
    let particles = ParticleConfig { total_steps: 40, history_steps: 30, future_steps: 10, ..ParticleConfig::default() };
    let dir = std::env::temp_dir().join("rain_example_supervised");
    let handle = generate_dataset(&particles, DatasetSizes { train: 400, val: 8, test: 100 }, 21, &dir)?;
    let train = prepare_cases(&handle.load(Split::Train)?, &handle.standardizer);
    let test = prepare_cases(&handle.load(Split::Test)?, &handle.standardizer);

    let gmp_cfg = GmpConfig { history_steps: particles.history_steps, hidden: 32, layers: 3 };
    let opt = OptimizerSpec { batch_size: 32, ..OptimizerSpec::default() };
    let encoder = pretrain_autoencoder(&gmp_cfg, &train, gmp_cfg.init(&mut substream(1, Stream::Init))?, opt, 60, 2)?.encoder;

    let train_f = case_features(&gmp_cfg, &encoder, &train, 64);
    let test_f = case_features(&gmp_cfg, &encoder, &test, 64);
    let truth: Vec<RelationGraph> = train.iter().map(|c| c.truth.clone()).collect();
    let cfg = ClassifierConfig { hidden: 64, epochs: 80, optimizer: opt, ..ClassifierConfig::default() };
    let fit = train_classifier(&cfg, &train_f, &truth, 4)?;
    println!("classifier loss: first epoch {:.4}, last {:.4}", fit.epoch_losses[0], fit.epoch_losses.last().unwrap());

    let inferred = test_f.iter().map(|f| classify(&cfg, &fit.params, f)).collect::<rain::Result<Vec<_>>>()?;
    let test_truth: Vec<RelationGraph> = test.iter().map(|c| c.truth.clone()).collect();
    let report = relation_metrics(&inferred, &test_truth)?;
    println!("test accuracy {:.4}, precision {:.4}, recall {:.4}, F1 {:.4}", report.accuracy, report.precision, report.recall, report.f1);

    let all = vec![RelationGraph::fully_connected(particles.n_agents()); test.len()];
    println!("all-edges baseline F1 {:.4}", relation_metrics(&all, &test_truth)?.f1);
    println!("case 0 truth:\n{:?}\ncase 0 inferred:\n{:?}", test_truth[0], inferred[0]);
    Ok(())
}
