#![allow(dead_code)]

pub mod properties;

use std::path::Path;

use rain::kv::KvDoc;
use rain::pipeline::{Dataset, TrainConfig};
use rain::sim::{generate_dataset, DatasetSizes, ParticleConfig};

/// Short trajectories so pipeline tests finish in seconds.
pub fn tiny_particles() -> ParticleConfig {
    ParticleConfig {
        history_steps: 6,
        future_steps: 6,
        total_steps: 12,
        ..ParticleConfig::default()
    }
}

pub const TINY_SIZES: DatasetSizes = DatasetSizes {
    train: 24,
    val: 8,
    test: 8,
};

pub fn tiny_dataset(dir: &Path, seed: u64) -> Dataset {
    generate_dataset(&tiny_particles(), TINY_SIZES, seed, dir).unwrap();
    Dataset::open(dir).unwrap()
}

/// Small networks and short schedules, as `key=value` overrides.
pub const TINY_OVERRIDES: &[(&str, &str)] = &[
    ("train.epochs", "4"),
    ("train.n_s", "2"),
    ("train.n_ft", "2"),
    ("train.gmp_epochs", "2"),
    ("train.generator_epochs", "2"),
    ("train.rollouts_per_epoch", "4"),
    ("train.ddqn_updates_per_epoch", "3"),
    ("eval.batch", "8"),
    ("eval.attention_maps", "2"),
    ("gmp.hidden", "8"),
    ("gmp.layers", "2"),
    ("gmp.optimizer.batch_size", "8"),
    ("generator.hidden", "8"),
    ("generator.n_heads", "2"),
    ("generator.k_samples", "3"),
    ("generator.optimizer.batch_size", "8"),
    ("generator.finetune.batch_size", "8"),
    ("rl.t_rl", "3"),
    ("rl.q_hidden", "8"),
    ("rl.q_layers", "2"),
    ("rl.target_sync", "2"),
    ("rl.optimizer.batch_size", "16"),
    ("classifier.hidden", "8"),
    ("classifier.epochs", "2"),
    ("classifier.optimizer.batch_size", "8"),
];

pub fn tiny_doc(seed: u64) -> KvDoc {
    let mut doc = KvDoc::new();
    for (k, v) in TINY_OVERRIDES {
        doc.set(k, v);
    }
    doc.set("seed", seed);
    doc
}

pub fn tiny_config(seed: u64) -> TrainConfig {
    TrainConfig::from_kv(&tiny_doc(seed), &tiny_particles()).unwrap()
}

pub fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}
