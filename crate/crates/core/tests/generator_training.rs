use ndarray::s;
use rain::batch::{prepare_cases, Case};
use rain::generator::{predict_static, train_generator, GeneratorConfig};
use rain::learners::OptimizerSpec;
use rain::rng::{indexed_substream, Stream};
use rain::sim::{generate_dataset, DatasetSizes, ParticleConfig, Split};
use rain::RelationGraph;
use tempfile::tempdir;

/// Uncharged particles move in straight lines, which a generator with no
/// neighbours should learn to extrapolate over the whole horizon.
#[test]
fn uncharged_motion_is_learnable_with_the_empty_graph() {
    let tmp = tempdir().unwrap();
    let particles = ParticleConfig {
        n_charged: 0,
        n_uncharged: 6,
        ..ParticleConfig::default()
    };
    let sizes = DatasetSizes {
        train: 64,
        val: 16,
        test: 1,
    };
    let handle = generate_dataset(&particles, sizes, 21, tmp.path()).unwrap();
    let train = prepare_cases(&handle.load(Split::Train).unwrap(), &handle.standardizer);
    let val = prepare_cases(&handle.load(Split::Val).unwrap(), &handle.standardizer);
    let cfg = GeneratorConfig {
        hidden: 32,
        ..GeneratorConfig::default()
    };
    let init = cfg.init(&mut indexed_substream(21, Stream::Init, 2)).unwrap();
    let opt = OptimizerSpec {
        batch_size: 16,
        learning_rate: 3e-3,
        ..OptimizerSpec::default()
    };
    let fit = train_generator(&cfg, &train, |_, c| RelationGraph::empty(c.n_agents()), init, opt, 40, 21).unwrap();

    let refs: Vec<&Case> = val.iter().collect();
    let graphs = vec![RelationGraph::empty(6); refs.len()];
    let preds = predict_static(&cfg, &fit.params, &refs, &graphs, 16);
    let last = cfg.horizon - 1;
    let mut se = 0.0;
    let mut count = 0.0;
    for (p, c) in preds.iter().zip(&refs) {
        let truth = c.states.slice(s![.., cfg.burn_in + last, ..]);
        for (a, b) in p.slice(s![.., last, ..]).iter().zip(truth.iter()) {
            se += ((a - b) as f64).powi(2);
            count += 1.0;
        }
    }
    let mse = se / count;
    assert!(mse <= 1e-2, "standardized MSE at the final step {mse}");
}
