//! On-disk dataset layout.
//!
//! A dataset directory holds `manifest.txt` plus one binary file per split.
//! Each split file is little-endian: a 16-byte header (`b"RAIN"`, `u32` rank
//! = 2, `u32` sample count, `u32` floats per sample) followed by `f32`
//! records of `states[N×T×4]`, `charges[N]` and `graph[N×N]` per sample.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array3, Axis};
use rayon::prelude::*;

use super::{simulate, ParticleConfig, TrajectorySample, STATE_DIM};
use crate::error::{ensure, RainError, Result};
use crate::graph::RelationGraph;
use crate::kv::KvDoc;
use crate::rng::derive_seed;

pub const SPLIT_MAGIC: &[u8; 4] = b"RAIN";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.bin", self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl DatasetSizes {
    pub const DESK: DatasetSizes = DatasetSizes {
        train: 1000,
        val: 500,
        test: 500,
    };
    pub const PAPER: DatasetSizes = DatasetSizes {
        train: 8000,
        val: 4000,
        test: 4000,
    };

    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    fn offset(&self, split: Split) -> usize {
        match split {
            Split::Train => 0,
            Split::Val => self.train,
            Split::Test => self.train + self.val,
        }
    }
}

/// Per-channel standardization of the 4-D state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Standardizer {
    pub mean: [f64; STATE_DIM],
    pub std: [f64; STATE_DIM],
}

impl Standardizer {
    pub fn identity() -> Self {
        Standardizer {
            mean: [0.0; STATE_DIM],
            std: [1.0; STATE_DIM],
        }
    }

    /// Mean and standard deviation of every channel over all frames.
    pub fn fit(samples: &[TrajectorySample]) -> Self {
        let mut sum = [0.0f64; STATE_DIM];
        let mut sq = [0.0f64; STATE_DIM];
        let mut count = 0usize;
        for s in samples {
            for lane in s.states.lanes(Axis(2)) {
                for c in 0..STATE_DIM {
                    sum[c] += lane[c];
                    sq[c] += lane[c] * lane[c];
                }
                count += 1;
            }
        }
        let mut mean = [0.0; STATE_DIM];
        let mut std = [1.0; STATE_DIM];
        if count > 0 {
            for c in 0..STATE_DIM {
                mean[c] = sum[c] / count as f64;
                let var = (sq[c] / count as f64 - mean[c] * mean[c]).max(0.0);
                std[c] = if var > 0.0 { var.sqrt() } else { 1.0 };
            }
        }
        Standardizer { mean, std }
    }

    pub fn apply(&self, states: &Array3<f64>) -> Array3<f64> {
        let mut out = states.clone();
        for mut lane in out.lanes_mut(Axis(2)) {
            for c in 0..STATE_DIM {
                lane[c] = (lane[c] - self.mean[c]) / self.std[c];
            }
        }
        out
    }

    pub fn invert(&self, states: &Array3<f64>) -> Array3<f64> {
        let mut out = states.clone();
        for mut lane in out.lanes_mut(Axis(2)) {
            for c in 0..STATE_DIM {
                lane[c] = lane[c] * self.std[c] + self.mean[c];
            }
        }
        out
    }

    fn to_kv(self, doc: &mut KvDoc) {
        for c in 0..STATE_DIM {
            doc.set(&format!("mean_{c}"), self.mean[c]);
            doc.set(&format!("std_{c}"), self.std[c]);
        }
    }

    fn from_kv(doc: &KvDoc) -> Result<Self> {
        let mut s = Standardizer::identity();
        for c in 0..STATE_DIM {
            s.mean[c] = doc.parse_key(&format!("mean_{c}"))?;
            s.std[c] = doc.parse_key(&format!("std_{c}"))?;
        }
        Ok(s)
    }
}

/// A dataset directory on disk with its parsed manifest.
#[derive(Debug, Clone)]
pub struct DatasetHandle {
    pub dir: PathBuf,
    pub config: ParticleConfig,
    pub sizes: DatasetSizes,
    pub standardizer: Standardizer,
    pub seed: u64,
    pub regenerations: u64,
}

impl DatasetHandle {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let manifest = dir.join("manifest.txt");
        if !manifest.exists() {
            return Err(RainError::MissingPrerequisite(format!(
                "no dataset manifest at {}",
                manifest.display()
            )));
        }
        let doc = KvDoc::read(&manifest)?;
        let config = ParticleConfig::from_kv(&doc)?;
        config.validate()?;
        Ok(DatasetHandle {
            sizes: DatasetSizes {
                train: doc.parse_key("n_train")?,
                val: doc.parse_key("n_val")?,
                test: doc.parse_key("n_test")?,
            },
            standardizer: Standardizer::from_kv(&doc)?,
            seed: doc.parse_key("dataset_seed")?,
            regenerations: doc.parse_or("regenerations", 0)?,
            config,
            dir,
        })
    }

    pub fn split_path(&self, split: Split) -> PathBuf {
        self.dir.join(split.file_name())
    }

    pub fn load(&self, split: Split) -> Result<Vec<TrajectorySample>> {
        read_split(&self.split_path(split), &self.config)
    }

    pub fn manifest(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        self.config.to_kv(&mut doc);
        doc.set("dataset_seed", self.seed);
        doc.set("n_train", self.sizes.train);
        doc.set("n_val", self.sizes.val);
        doc.set("n_test", self.sizes.test);
        doc.set("regenerations", self.regenerations);
        self.standardizer.to_kv(&mut doc);
        doc
    }
}

/// Seed of the sample at `global_index`, counted across all splits.
pub fn sample_seed(dataset_seed: u64, global_index: usize) -> u64 {
    derive_seed(dataset_seed, global_index as u64)
}

/// Simulates three seeded splits and writes them with a manifest.
///
/// Samples are generated in parallel, each from its own seed, so the output
/// does not depend on scheduling.
pub fn generate_dataset(
    config: &ParticleConfig,
    sizes: DatasetSizes,
    seed: u64,
    dir: impl AsRef<Path>,
) -> Result<DatasetHandle> {
    config.validate()?;
    ensure(sizes.train >= 1 && sizes.val >= 1 && sizes.test >= 1, || {
        format!("split sizes must be >= 1, got {sizes:?}")
    })?;
    let dir = dir.as_ref().to_path_buf();
    fs::create_dir_all(&dir).map_err(|e| RainError::io(&dir, e))?;

    let mut regenerations = 0u64;
    let mut train = Vec::new();
    for split in Split::ALL {
        let offset = sizes.offset(split);
        let runs: Vec<_> = (0..sizes.get(split))
            .into_par_iter()
            .map(|k| {
                let cfg = ParticleConfig {
                    seed: sample_seed(seed, offset + k),
                    ..config.clone()
                };
                simulate(&cfg)
            })
            .collect::<Result<_>>()?;
        regenerations += runs.iter().map(|r| r.regenerations as u64).sum::<u64>();
        let samples: Vec<TrajectorySample> = runs.into_iter().map(|r| r.sample).collect();
        write_split(&dir.join(split.file_name()), &samples)?;
        if split == Split::Train {
            train = samples;
        }
    }
    if regenerations > 0 {
        log::info!("{regenerations} samples regenerated after numerical blow-up");
    }
    let handle = DatasetHandle {
        dir: dir.clone(),
        config: config.clone(),
        sizes,
        standardizer: Standardizer::fit(&train),
        seed,
        regenerations,
    };
    handle.manifest().write(&dir.join("manifest.txt"))?;
    Ok(handle)
}

fn floats_per_sample(n: usize, t: usize) -> usize {
    n * t * STATE_DIM + n + n * n
}

pub fn write_split(path: &Path, samples: &[TrajectorySample]) -> Result<()> {
    let (n, t) = samples
        .first()
        .map(|s| (s.n_agents(), s.n_steps()))
        .unwrap_or((0, 0));
    let file = fs::File::create(path).map_err(|e| RainError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| RainError::io(path, e);
    w.write_all(SPLIT_MAGIC).map_err(io)?;
    w.write_all(&2u32.to_le_bytes()).map_err(io)?;
    w.write_all(&(samples.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&(floats_per_sample(n, t) as u32).to_le_bytes()).map_err(io)?;
    let mut buf = Vec::with_capacity(floats_per_sample(n, t) * 4);
    for s in samples {
        ensure(s.n_agents() == n && s.n_steps() == t, || {
            "all samples in a split must share N and T".into()
        })?;
        buf.clear();
        for &v in s.states.iter() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for &q in &s.charges {
            buf.extend_from_slice(&(q as f32).to_le_bytes());
        }
        for &e in s.truth_graph.as_slice() {
            buf.extend_from_slice(&(if e { 1.0f32 } else { 0.0 }).to_le_bytes());
        }
        w.write_all(&buf).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_split(path: &Path, config: &ParticleConfig) -> Result<Vec<TrajectorySample>> {
    let bytes = fs::read(path).map_err(|e| RainError::io(path, e))?;
    if bytes.len() < 16 || &bytes[0..4] != SPLIT_MAGIC {
        return Err(RainError::Format(format!("{}: bad split header", path.display())));
    }
    let word = |k: usize| u32::from_le_bytes(bytes[4 * k..4 * k + 4].try_into().unwrap()) as usize;
    let (rank, count, per) = (word(1), word(2), word(3));
    let n = config.n_agents();
    let t = config.total_steps;
    if rank != 2 || per != floats_per_sample(n, t) {
        return Err(RainError::Format(format!(
            "{}: record layout rank={rank} len={per} does not match manifest (N={n}, T={t})",
            path.display()
        )));
    }
    if bytes.len() != 16 + count * per * 4 {
        return Err(RainError::Format(format!("{}: truncated split file", path.display())));
    }
    let floats: Vec<f64> = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let mut out = Vec::with_capacity(count);
    for rec in floats.chunks_exact(per) {
        let (states, rest) = rec.split_at(n * t * STATE_DIM);
        let (charges, graph) = rest.split_at(n);
        let states = Array3::from_shape_vec((n, t, STATE_DIM), states.to_vec())
            .map_err(|e| RainError::Format(e.to_string()))?;
        let truth_graph = RelationGraph::from_fn(n, |i, j| graph[i * n + j] != 0.0);
        out.push(TrajectorySample {
            states,
            charges: charges.to_vec(),
            truth_graph,
        });
    }
    Ok(out)
}
