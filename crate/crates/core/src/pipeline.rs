//! Two-stage training, ablations and evaluation over a run directory.
//!
//! Layout of a run directory:
//!
//! ```text
//! config.txt                 every setting, defaults included
//! log.txt                    one line per epoch, append-only
//! checkpoints/gmp.rnck       frozen encoder
//! checkpoints/generator_pretrained.rnck
//! checkpoints/epoch_NNN/     formal-stage state after epoch NNN
//! checkpoints/generator.rnck, policy.rnck   final formal-stage parameters
//! metrics/                   key=value reports and curve tables
//! maps/                      attention grids
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3, Array4, Axis};
use rand::seq::index::sample;

use crate::batch::{prepare_cases, Case};
use crate::classifier::{classify, train_classifier, ClassifierConfig};
use crate::error::{ensure, RainError, Result};
use crate::eval::{format_curve, format_grid, min_ade_fde, miss_rate, mse_curve, relation_metrics, write_text, RelationReport};
use crate::generator::{
    predict_batch, train_generator, train_step, FnProvider, GeneratorConfig, PredictOptions,
    PredictionMode,
};
use crate::gmp::{encode_window, pretrain_autoencoder, GmpConfig};
use crate::graph::RelationGraph;
use crate::kv::KvDoc;
use crate::learners::{load_checkpoint, save_checkpoint, Adam, OptimizerSpec, ParamSet};
use crate::rl::{
    infer_graphs, init_q_network, rollout_batch, split_features, CaseFeatures, DdqnAgent, ReplayBuffer, RlConfig,
    RolloutEnv,
};
use crate::rng::{derive_seed, indexed_substream, Stream};
use crate::sim::{DatasetHandle, ParticleConfig, Split, Standardizer, TrajectorySample, STATE_DIM};

/// Everything that shapes a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub desk_scale: bool,
    /// Formal-stage epochs.
    pub epochs: usize,
    /// Rollout-generation steps before the first policy update.
    pub n_s: usize,
    /// Generator finetune minibatches per epoch.
    pub n_ft: usize,
    pub gmp_epochs: usize,
    pub generator_epochs: usize,
    /// Cases rolled out together in each epoch's rollout step.
    pub rollouts_per_epoch: usize,
    /// Policy minibatch updates per epoch once updates are enabled.
    pub ddqn_updates_per_epoch: usize,
    pub eval_batch: usize,
    /// Final-position threshold for the miss rate, in standardized units.
    pub miss_threshold: f64,
    pub dynamic_tau: usize,
    /// Test cases whose attention grids are exported.
    pub attention_maps: usize,
    pub gmp: GmpConfig,
    pub generator: GeneratorConfig,
    pub rl: RlConfig,
    pub classifier: ClassifierConfig,
    pub gmp_optimizer: OptimizerSpec,
    pub generator_optimizer: OptimizerSpec,
    pub finetune_optimizer: OptimizerSpec,
}

impl TrainConfig {
    /// Defaults for a dataset simulated with `particles`.
    pub fn for_dataset(particles: &ParticleConfig, desk_scale: bool) -> Self {
        let (th, tf) = (particles.history_steps, particles.future_steps);
        TrainConfig {
            seed: 0,
            desk_scale,
            epochs: if desk_scale { 30 } else { 100 },
            n_s: 10,
            n_ft: 5,
            gmp_epochs: 100,
            generator_epochs: 20,
            rollouts_per_epoch: 64,
            ddqn_updates_per_epoch: 200,
            eval_batch: 64,
            miss_threshold: 1.0,
            dynamic_tau: 2,
            attention_maps: 4,
            gmp: GmpConfig {
                history_steps: th,
                ..GmpConfig::default()
            },
            generator: GeneratorConfig {
                burn_in: th,
                horizon: tf,
                tau: tf,
                ..GeneratorConfig::default()
            },
            rl: RlConfig::default(),
            classifier: ClassifierConfig::default(),
            gmp_optimizer: OptimizerSpec::default(),
            generator_optimizer: OptimizerSpec::default(),
            finetune_optimizer: OptimizerSpec::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.epochs >= 1, || "epochs must be >= 1".into())?;
        ensure(self.n_ft >= 1, || "n_ft must be >= 1".into())?;
        ensure(self.rollouts_per_epoch >= 1 && self.eval_batch >= 1, || {
            "rollouts_per_epoch and eval_batch must be >= 1".into()
        })?;
        ensure(self.miss_threshold > 0.0, || "miss_threshold must be positive".into())?;
        ensure(self.dynamic_tau >= 1 && self.dynamic_tau <= self.generator.horizon, || {
            format!("dynamic_tau must lie in [1, {}]", self.generator.horizon)
        })?;
        ensure(self.gmp.history_steps == self.generator.burn_in, || {
            "encoder history and generator burn-in must agree".into()
        })?;
        self.generator.validate()?;
        self.rl.validate()?;
        for o in [
            &self.gmp_optimizer,
            &self.generator_optimizer,
            &self.finetune_optimizer,
            &self.classifier.optimizer,
        ] {
            o.validate()?;
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        doc.set("seed", self.seed);
        doc.set("train.desk_scale", self.desk_scale);
        doc.set("train.epochs", self.epochs);
        doc.set("train.n_s", self.n_s);
        doc.set("train.n_ft", self.n_ft);
        doc.set("train.gmp_epochs", self.gmp_epochs);
        doc.set("train.generator_epochs", self.generator_epochs);
        doc.set("train.rollouts_per_epoch", self.rollouts_per_epoch);
        doc.set("train.ddqn_updates_per_epoch", self.ddqn_updates_per_epoch);
        doc.set("eval.batch", self.eval_batch);
        doc.set("eval.miss_threshold", self.miss_threshold);
        doc.set("eval.dynamic_tau", self.dynamic_tau);
        doc.set("eval.attention_maps", self.attention_maps);
        self.gmp.to_kv(&mut doc);
        self.gmp_optimizer.to_kv("gmp.optimizer", &mut doc);
        self.generator.to_kv(&mut doc);
        self.generator_optimizer.to_kv("generator.optimizer", &mut doc);
        self.finetune_optimizer.to_kv("generator.finetune", &mut doc);
        self.rl.to_kv(&mut doc);
        doc.set("classifier.hidden", self.classifier.hidden);
        doc.set("classifier.layers", self.classifier.layers);
        doc.set("classifier.epochs", self.classifier.epochs);
        self.classifier.optimizer.to_kv("classifier.optimizer", &mut doc);
        doc
    }

    /// Every key [`Self::from_kv`] understands.
    pub fn known_keys() -> BTreeSet<String> {
        let d = TrainConfig::for_dataset(&ParticleConfig::default(), true);
        d.to_kv().keys().map(str::to_string).collect()
    }

    /// Overlays `doc` on the defaults; unknown keys are a usage error.
    pub fn from_kv(doc: &KvDoc, particles: &ParticleConfig) -> Result<Self> {
        doc.reject_unknown(&Self::known_keys())?;
        let desk = doc.parse_or("train.desk_scale", true)?;
        let d = TrainConfig::for_dataset(particles, desk);
        let (th, tf) = (particles.history_steps, particles.future_steps);
        let cfg = TrainConfig {
            seed: doc.parse_or("seed", d.seed)?,
            desk_scale: desk,
            epochs: doc.parse_or("train.epochs", d.epochs)?,
            n_s: doc.parse_or("train.n_s", d.n_s)?,
            n_ft: doc.parse_or("train.n_ft", d.n_ft)?,
            gmp_epochs: doc.parse_or("train.gmp_epochs", d.gmp_epochs)?,
            generator_epochs: doc.parse_or("train.generator_epochs", d.generator_epochs)?,
            rollouts_per_epoch: doc.parse_or("train.rollouts_per_epoch", d.rollouts_per_epoch)?,
            ddqn_updates_per_epoch: doc.parse_or("train.ddqn_updates_per_epoch", d.ddqn_updates_per_epoch)?,
            eval_batch: doc.parse_or("eval.batch", d.eval_batch)?,
            miss_threshold: doc.parse_or("eval.miss_threshold", d.miss_threshold)?,
            dynamic_tau: doc.parse_or("eval.dynamic_tau", d.dynamic_tau)?,
            attention_maps: doc.parse_or("eval.attention_maps", d.attention_maps)?,
            gmp: GmpConfig::from_kv(doc, th)?,
            generator: GeneratorConfig::from_kv(doc, th, tf)?,
            rl: RlConfig::from_kv(doc)?,
            classifier: ClassifierConfig {
                hidden: doc.parse_or("classifier.hidden", d.classifier.hidden)?,
                layers: doc.parse_or("classifier.layers", d.classifier.layers)?,
                epochs: doc.parse_or("classifier.epochs", d.classifier.epochs)?,
                optimizer: OptimizerSpec::from_kv_or("classifier.optimizer", doc, d.classifier.optimizer)?,
            },
            gmp_optimizer: OptimizerSpec::from_kv_or("gmp.optimizer", doc, d.gmp_optimizer)?,
            generator_optimizer: OptimizerSpec::from_kv_or("generator.optimizer", doc, d.generator_optimizer)?,
            finetune_optimizer: OptimizerSpec::from_kv_or("generator.finetune", doc, d.finetune_optimizer)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A loaded dataset in network units, with raw states kept for metrics.
pub struct Dataset {
    pub handle: DatasetHandle,
    pub train: Vec<Case>,
    pub val: Vec<Case>,
    pub test: Vec<Case>,
    pub val_raw: Vec<TrajectorySample>,
    pub test_raw: Vec<TrajectorySample>,
}

impl Dataset {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let handle = DatasetHandle::open(dir)?;
        let st = handle.standardizer;
        let train = prepare_cases(&handle.load(Split::Train)?, &st);
        let val_raw = handle.load(Split::Val)?;
        let test_raw = handle.load(Split::Test)?;
        ensure(!train.is_empty(), || "dataset has an empty training split".into())?;
        Ok(Dataset {
            val: prepare_cases(&val_raw, &st),
            test: prepare_cases(&test_raw, &st),
            train,
            val_raw,
            test_raw,
            handle,
        })
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.handle.standardizer
    }

    pub fn split(&self, split: Split) -> (&[Case], &[TrajectorySample]) {
        match split {
            Split::Val => (&self.val, &self.val_raw),
            Split::Test => (&self.test, &self.test_raw),
            Split::Train => (&self.train, &[]),
        }
    }
}

/// Paths inside a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let run = RunDir { root: root.into() };
        for d in [run.checkpoints(), run.metrics(), run.maps()] {
            std::fs::create_dir_all(&d).map_err(|e| RainError::io(&d, e))?;
        }
        Ok(run)
    }

    /// An existing run; its absence is a missing prerequisite.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let run = RunDir { root: root.into() };
        if !run.config_path().exists() {
            return Err(RainError::MissingPrerequisite(format!("no run at {}", run.root.display())));
        }
        Ok(run)
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.txt")
    }

    pub fn log_path(&self) -> PathBuf {
        self.root.join("log.txt")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics")
    }

    pub fn maps(&self) -> PathBuf {
        self.root.join("maps")
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.checkpoints().join(format!("{name}.rnck"))
    }

    pub fn epoch_dir(&self, epoch: usize) -> PathBuf {
        self.checkpoints().join(format!("epoch_{epoch:03}"))
    }

    pub fn log(&self, line: &str) -> Result<()> {
        use std::io::Write;
        let path = self.log_path();
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| RainError::io(&path, e))?;
        writeln!(f, "{line}").map_err(|e| RainError::io(&path, e))
    }

    pub fn load(&self, name: &str) -> Result<ParamSet<f32>> {
        let path = self.checkpoint(name);
        if !path.exists() {
            return Err(RainError::MissingPrerequisite(format!("checkpoint {} not found", path.display())));
        }
        load_checkpoint(&path)
    }

    /// Latest formal-stage epoch whose state was fully written.
    pub fn latest_epoch(&self) -> Option<usize> {
        let entries = std::fs::read_dir(self.checkpoints()).ok()?;
        entries
            .filter_map(|e| {
                let name = e.ok()?.file_name().into_string().ok()?;
                let k: usize = name.strip_prefix("epoch_")?.parse().ok()?;
                self.epoch_dir(k).join("state.txt").exists().then_some(k)
            })
            .max()
    }
}

/// GMP encodings (`v_encoded`) of the history window of each case.
pub fn case_features(cfg: &GmpConfig, gmp: &ParamSet<f32>, cases: &[Case], batch: usize) -> Vec<CaseFeatures> {
    let mut out = Vec::with_capacity(cases.len());
    for chunk in cases.chunks(batch.max(1)) {
        let refs: Vec<&Case> = chunk.iter().collect();
        let attrs = encode_window(cfg, &refs, 0, gmp);
        out.extend(split_features(&attrs.v_encoded, chunk[0].n_agents()));
    }
    out
}

/// Encodings of arbitrary `[N × T_h × 4]` windows.
pub fn window_features(cfg: &GmpConfig, gmp: &ParamSet<f32>, windows: &[Array3<f32>]) -> Vec<CaseFeatures> {
    let n = windows[0].shape()[0];
    let cases: Vec<Case> = windows
        .iter()
        .map(|w| Case {
            states: w.clone(),
            truth: RelationGraph::empty(n),
        })
        .collect();
    let refs: Vec<&Case> = cases.iter().collect();
    split_features(&encode_window(cfg, &refs, 0, gmp).v_encoded, n)
}

/// Outcome of the pretraining stage.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub gmp: ParamSet<f32>,
    pub generator: ParamSet<f32>,
}

/// Deterministic static predictions, converted to raw units.
fn predict_raw(
    cfg: &GeneratorConfig,
    params: &ParamSet<f32>,
    cases: &[Case],
    provider: &mut dyn FnMut(&[usize], &[Array3<f32>]) -> Vec<RelationGraph>,
    mode: PredictionMode,
    st: &Standardizer,
    batch: usize,
) -> Vec<Array3<f64>> {
    let mut out = Vec::with_capacity(cases.len());
    for (chunk_no, chunk) in cases.chunks(batch.max(1)).enumerate() {
        let ids: Vec<usize> = (0..chunk.len()).map(|k| chunk_no * batch + k).collect();
        let hist: Vec<Array3<f32>> = chunk.iter().map(|c| c.states.slice(s![.., ..cfg.burn_in, ..]).to_owned()).collect();
        let mut p = FnProvider(|w: &[Array3<f32>]| provider(&ids, w));
        let pred = predict_batch::<rand_chacha::ChaCha8Rng>(
            cfg,
            params,
            &hist,
            &mut p,
            PredictOptions {
                mode,
                noise: None,
                record_weights: false,
            },
        );
        out.extend(pred.futures.iter().map(|f| st.invert(&f.mapv(f64::from))));
    }
    out
}

/// Stacks raw futures of `samples` into `[cases × N × T_f × 4]`.
fn raw_futures(samples: &[TrajectorySample], burn_in: usize, horizon: usize) -> Array4<f64> {
    let views: Vec<_> = samples.iter().map(|s| s.states.slice(s![.., burn_in..burn_in + horizon, ..])).collect();
    ndarray::stack(Axis(0), &views).expect("equal case shapes")
}

fn stack3(arrays: &[Array3<f64>]) -> Array4<f64> {
    let views: Vec<_> = arrays.iter().map(|a| a.view()).collect();
    ndarray::stack(Axis(0), &views).expect("equal case shapes")
}

/// Position MSE curve of a generator on a split with fixed per-case graphs.
pub fn split_mse_curve(
    cfg: &TrainConfig,
    data: &Dataset,
    split: Split,
    generator: &ParamSet<f32>,
    graphs: &[RelationGraph],
) -> Result<Vec<f64>> {
    let (cases, raw) = data.split(split);
    let mut provider = |ids: &[usize], _: &[Array3<f32>]| ids.iter().map(|&k| graphs[k].clone()).collect();
    let preds = predict_raw(
        &cfg.generator,
        generator,
        cases,
        &mut provider,
        PredictionMode::Static,
        data.standardizer(),
        cfg.eval_batch,
    );
    mse_curve(stack3(&preds).view(), raw_futures(raw, cfg.generator.burn_in, cfg.generator.horizon).view())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Pretrains the encoder as an autoencoder and saves it.
pub fn pretrain_encoder(data: &Dataset, cfg: &TrainConfig, run: &RunDir) -> Result<ParamSet<f32>> {
    let init = cfg.gmp.init(&mut indexed_substream(cfg.seed, Stream::Init, 1))?;
    log::info!("pretraining encoder for {} epochs", cfg.gmp_epochs);
    let gmp = pretrain_autoencoder(&cfg.gmp, &data.train, init, cfg.gmp_optimizer, cfg.gmp_epochs, derive_seed(cfg.seed, 1))?;
    for (k, l) in gmp.epoch_losses.iter().enumerate() {
        run.log(&format!("pretrain gmp epoch={} loss={l:.6}", k + 1))?;
    }
    save_checkpoint(&gmp.encoder, &run.checkpoint("gmp"))?;
    let mut doc = KvDoc::new();
    doc.set("gmp.initial_loss", gmp.initial_loss);
    doc.set("gmp.final_loss", gmp.epoch_losses.last().copied().unwrap_or(gmp.initial_loss));
    doc.write(&run.metrics().join("pretrain_gmp.txt"))?;
    Ok(gmp.encoder)
}

/// Pretrains the generator on fully connected graphs and saves it.
pub fn pretrain_generator(data: &Dataset, cfg: &TrainConfig, run: &RunDir) -> Result<ParamSet<f32>> {
    let init = cfg.generator.init(&mut indexed_substream(cfg.seed, Stream::Init, 2))?;
    let fc: Vec<RelationGraph> = data.val.iter().map(|c| RelationGraph::fully_connected(c.n_agents())).collect();
    let untrained = split_mse_curve(cfg, data, Split::Val, &init, &fc)?;
    log::info!("pretraining generator for {} epochs", cfg.generator_epochs);
    let gen = train_generator(
        &cfg.generator,
        &data.train,
        |_, c| RelationGraph::fully_connected(c.n_agents()),
        init,
        cfg.generator_optimizer,
        cfg.generator_epochs,
        derive_seed(cfg.seed, 2),
    )?;
    for (k, l) in gen.epoch_losses.iter().enumerate() {
        run.log(&format!("pretrain generator epoch={} loss={l:.6}", k + 1))?;
    }
    save_checkpoint(&gen.params, &run.checkpoint("generator_pretrained"))?;
    let pretrained = split_mse_curve(cfg, data, Split::Val, &gen.params, &fc)?;
    let mut doc = KvDoc::new();
    doc.set("generator.first_loss", gen.epoch_losses.first().copied().unwrap_or(f64::NAN));
    doc.set("generator.final_loss", gen.epoch_losses.last().copied().unwrap_or(f64::NAN));
    doc.set("val.mse_untrained", mean(&untrained));
    doc.set("val.mse_pretrained", mean(&pretrained));
    doc.write(&run.metrics().join("pretrain_generator.txt"))?;
    Ok(gen.params)
}

/// Both pretraining steps; the encoder is frozen from here on.
pub fn run_pretraining(data: &Dataset, cfg: &TrainConfig, run: &RunDir) -> Result<Pretrained> {
    Ok(Pretrained {
        gmp: pretrain_encoder(data, cfg, run)?,
        generator: pretrain_generator(data, cfg, run)?,
    })
}

pub fn load_pretrained(run: &RunDir) -> Result<Pretrained> {
    Ok(Pretrained {
        gmp: run.load("gmp")?,
        generator: run.load("generator_pretrained")?,
    })
}

/// Summary of one formal-stage epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub epsilon: f64,
    /// Rollout-generation steps so far, the counter compared against `n_s`.
    pub rollout_steps: usize,
    pub transitions: usize,
    pub mean_reward: f64,
    pub ddqn_updates: usize,
    pub ddqn_loss: f64,
    pub finetune_steps: usize,
    pub finetune_loss: f64,
    /// Mean selected edges per case in the finetune minibatches.
    pub mean_edges: f64,
}

impl EpochReport {
    fn line(&self) -> String {
        format!(
            "formal epoch={} epsilon={:.4} rollout_steps={} transitions={} reward={:.6} ddqn_updates={} ddqn_loss={:.6} finetune_steps={} finetune_loss={:.6} edges={:.3}",
            self.epoch,
            self.epsilon,
            self.rollout_steps,
            self.transitions,
            self.mean_reward,
            self.ddqn_updates,
            self.ddqn_loss,
            self.finetune_steps,
            self.finetune_loss,
            self.mean_edges
        )
    }
}

/// Mutable state of the formal stage, saved after each epoch.
pub struct FormalState {
    /// Completed epochs.
    pub epoch: usize,
    pub rollout_steps: usize,
    pub episodes: u64,
    pub generator: ParamSet<f32>,
    pub generator_opt: Adam,
    pub agent: DdqnAgent,
    pub buffer: ReplayBuffer,
}

impl FormalState {
    fn fresh(cfg: &TrainConfig, pre: &Pretrained, feature_dim: usize) -> Result<Self> {
        let q = init_q_network(&cfg.rl, feature_dim, &mut indexed_substream(cfg.seed, Stream::Init, 3))?;
        Ok(FormalState {
            epoch: 0,
            rollout_steps: 0,
            episodes: 0,
            generator_opt: Adam::new(cfg.finetune_optimizer, &pre.generator),
            generator: pre.generator.clone(),
            agent: DdqnAgent::new(&cfg.rl, feature_dim, q),
            buffer: ReplayBuffer::new(cfg.rl.buffer_capacity),
        })
    }

    fn save(&self, run: &RunDir) -> Result<()> {
        let dir = run.epoch_dir(self.epoch);
        std::fs::create_dir_all(&dir).map_err(|e| RainError::io(&dir, e))?;
        save_checkpoint(&self.generator, &dir.join("generator.rnck"))?;
        save_checkpoint(&self.generator_opt.to_state(), &dir.join("generator_opt.rnck"))?;
        save_checkpoint(&self.agent.online, &dir.join("policy.rnck"))?;
        save_checkpoint(&self.agent.target, &dir.join("target.rnck"))?;
        save_checkpoint(&self.agent.optimizer.to_state(), &dir.join("policy_opt.rnck"))?;
        self.buffer.save(&dir.join("replay.bin"))?;
        // Written last: its presence marks the epoch as complete.
        let mut doc = KvDoc::new();
        doc.set("epoch", self.epoch);
        doc.set("rollout_steps", self.rollout_steps);
        doc.set("episodes", self.episodes);
        doc.set("ddqn_updates", self.agent.updates);
        doc.write(&dir.join("state.txt"))
    }

    fn load(run: &RunDir, epoch: usize, cfg: &TrainConfig, features: &[CaseFeatures]) -> Result<Self> {
        let dir = run.epoch_dir(epoch);
        let doc = KvDoc::read(&dir.join("state.txt"))?;
        let online = load_checkpoint(&dir.join("policy.rnck"))?;
        let mut agent = DdqnAgent::new(&cfg.rl, features[0].ncols(), online);
        agent.target = load_checkpoint(&dir.join("target.rnck"))?;
        agent.optimizer = Adam::from_state(cfg.rl.optimizer, &load_checkpoint(&dir.join("policy_opt.rnck"))?);
        agent.updates = doc.parse_key("ddqn_updates")?;
        Ok(FormalState {
            epoch: doc.parse_key("epoch")?,
            rollout_steps: doc.parse_key("rollout_steps")?,
            episodes: doc.parse_key("episodes")?,
            generator: load_checkpoint(&dir.join("generator.rnck"))?,
            generator_opt: Adam::from_state(cfg.finetune_optimizer, &load_checkpoint(&dir.join("generator_opt.rnck"))?),
            agent,
            buffer: ReplayBuffer::load(&dir.join("replay.bin"), features)?,
        })
    }
}

/// Final parameters of the formal stage.
#[derive(Debug, Clone)]
pub struct FormalOutcome {
    pub generator: ParamSet<f32>,
    pub policy: ParamSet<f32>,
    /// Reports of the epochs run by this call (resumed epochs are not repeated).
    pub epochs: Vec<EpochReport>,
}

/// Runs one formal-stage epoch: rollouts, conditional policy updates, generator finetuning.
fn formal_epoch(cfg: &TrainConfig, data: &Dataset, features: &[CaseFeatures], state: &mut FormalState) -> Result<EpochReport> {
    let epoch = state.epoch;
    let seed = cfg.seed;
    let epsilon = cfg.rl.epsilon_at(epoch as f64 / cfg.epochs as f64);
    let mut rng = indexed_substream(seed, Stream::Exploration, epoch as u64);
    let n_train = data.train.len();
    let picks: Vec<usize> = sample(&mut rng, n_train, cfg.rollouts_per_epoch.min(n_train)).into_vec();
    let env = RolloutEnv {
        generator: &cfg.generator,
        generator_params: &state.generator,
        cases: picks.iter().map(|&k| &data.train[k]).collect(),
        case_ids: picks.clone(),
        features: picks.iter().map(|&k| features[k].clone()).collect(),
        batch: cfg.eval_batch,
    };
    let rollouts = rollout_batch(&env, &cfg.rl, &state.agent.online, epsilon, state.episodes, &mut rng)?;
    state.episodes += picks.len() as u64;
    let mut transitions = 0;
    let mut reward_sum = 0.0;
    let mut reward_count = 0usize;
    for r in rollouts {
        match r {
            Ok(r) => {
                transitions += r.transitions.len();
                reward_sum += r.rewards.iter().sum::<f64>();
                reward_count += r.rewards.len();
                state.buffer.extend(r.transitions);
            }
            Err(e) => log::warn!("rollout aborted: {e}"),
        }
    }
    state.rollout_steps += 1;

    let mut ddqn_updates = 0;
    let mut ddqn_loss = 0.0;
    if state.rollout_steps > cfg.n_s {
        let mut rng = indexed_substream(seed, Stream::Replay, epoch as u64);
        for _ in 0..cfg.ddqn_updates_per_epoch {
            if let Some(l) = state.agent.update_from(&state.buffer, cfg.rl.replay, &mut rng)? {
                ddqn_loss += l;
                ddqn_updates += 1;
            }
        }
    }

    let mut rng = indexed_substream(seed, Stream::Training, 0x6674_0000 + epoch as u64);
    let mut ft_loss = 0.0;
    let mut edges = 0.0;
    let batch = cfg.finetune_optimizer.batch_size.min(n_train);
    for _ in 0..cfg.n_ft {
        let idx = sample(&mut rng, n_train, batch).into_vec();
        let f: Vec<CaseFeatures> = idx.iter().map(|&k| features[k].clone()).collect();
        let graphs = infer_graphs(&cfg.rl, &state.agent.online, &f)?;
        edges += graphs.iter().map(|g| g.num_edges() as f64).sum::<f64>() / graphs.len() as f64;
        let cases: Vec<&Case> = idx.iter().map(|&k| &data.train[k]).collect();
        let grefs: Vec<&RelationGraph> = graphs.iter().collect();
        ft_loss += train_step(&cfg.generator, &mut state.generator, &mut state.generator_opt, &cases, &grefs)?;
    }
    state.epoch += 1;
    Ok(EpochReport {
        epoch: state.epoch,
        epsilon,
        rollout_steps: state.rollout_steps,
        transitions,
        mean_reward: reward_sum / reward_count.max(1) as f64,
        ddqn_updates,
        ddqn_loss: ddqn_loss / ddqn_updates.max(1) as f64,
        finetune_steps: cfg.n_ft,
        finetune_loss: ft_loss / cfg.n_ft as f64,
        mean_edges: edges / cfg.n_ft as f64,
    })
}

/// Paired validation comparison of the final model against the pretrained one on full graphs.
fn write_formal_metrics(data: &Dataset, pre: &Pretrained, cfg: &TrainConfig, run: &RunDir, state: &FormalState) -> Result<()> {
    let features = case_features(&cfg.gmp, &pre.gmp, &data.val, cfg.eval_batch);
    let inferred = infer_graphs(&cfg.rl, &state.agent.online, &features)?;
    let fc: Vec<RelationGraph> = data.val.iter().map(|c| RelationGraph::fully_connected(c.n_agents())).collect();
    let truth: Vec<RelationGraph> = data.val.iter().map(|c| c.truth.clone()).collect();
    let mut doc = KvDoc::new();
    doc.set("epochs", state.epoch);
    doc.set("ddqn_updates", state.agent.updates);
    doc.set("val.mse_pretrained_full", mean(&split_mse_curve(cfg, data, Split::Val, &pre.generator, &fc)?));
    doc.set("val.mse_final_hybrid", mean(&split_mse_curve(cfg, data, Split::Val, &state.generator, &inferred)?));
    relation_metrics(&inferred, &truth)?.to_kv("val.relation.", &mut doc);
    doc.write(&run.metrics().join("formal.txt"))
}

/// Alternating policy and generator training, resuming from the latest complete epoch.
///
/// `stop_after` limits how many epochs this call runs, which is how an
/// interruption is simulated in tests.
pub fn run_formal_training(
    data: &Dataset,
    pre: &Pretrained,
    cfg: &TrainConfig,
    run: &RunDir,
    stop_after: Option<usize>,
) -> Result<FormalOutcome> {
    let features = case_features(&cfg.gmp, &pre.gmp, &data.train, cfg.eval_batch);
    let mut state = match run.latest_epoch() {
        Some(k) => {
            log::info!("resuming formal training after epoch {k}");
            FormalState::load(run, k, cfg, &features)?
        }
        None => FormalState::fresh(cfg, pre, features[0].ncols())?,
    };
    let mut reports = Vec::new();
    while state.epoch < cfg.epochs && stop_after.is_none_or(|n| reports.len() < n) {
        let report = formal_epoch(cfg, data, &features, &mut state)?;
        log::info!("{}", report.line());
        run.log(&report.line())?;
        state.save(run)?;
        reports.push(report);
    }
    if state.epoch == cfg.epochs {
        save_checkpoint(&state.generator, &run.checkpoint("generator"))?;
        save_checkpoint(&state.agent.online, &run.checkpoint("policy"))?;
        write_formal_metrics(data, pre, cfg, run, &state)?;
    }
    Ok(FormalOutcome {
        generator: state.generator,
        policy: state.agent.online,
        epochs: reports,
    })
}

/// Named evaluation configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    TrueSoft,
    FullSoft,
    HybridStatic,
    HybridDynamic,
    Supervised,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::TrueSoft,
        Ablation::FullSoft,
        Ablation::HybridStatic,
        Ablation::HybridDynamic,
        Ablation::Supervised,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::TrueSoft => "true+soft",
            Ablation::FullSoft => "full+soft",
            Ablation::HybridStatic => "hybrid_static",
            Ablation::HybridDynamic => "hybrid_dynamic",
            Ablation::Supervised => "supervised",
        }
    }

    /// File-name friendly form.
    pub fn slug(self) -> String {
        self.name().replace('+', "_")
    }
}

impl std::str::FromStr for Ablation {
    type Err = RainError;
    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s || a.slug() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Ablation::ALL.iter().map(|a| a.name()).collect();
                RainError::Usage(format!("unknown ablation {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

/// How test graphs are chosen during evaluation.
pub enum GraphSource<'a> {
    Truth,
    Full,
    Policy { gmp: &'a ParamSet<f32>, policy: &'a ParamSet<f32> },
}

/// Metrics of one evaluated configuration.
#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub relations: Option<RelationReport>,
    /// Per-step position MSE in raw units.
    pub mse_curve: Vec<f64>,
    pub displacement: Option<(f64, f64, f64)>,
    pub mean_edges: f64,
}

impl EvalSummary {
    pub fn to_kv(&self, doc: &mut KvDoc) {
        if let Some(r) = &self.relations {
            r.to_kv("relation.", doc);
        }
        if let (Some(first), Some(last)) = (self.mse_curve.first(), self.mse_curve.last()) {
            doc.set("mse.first", first);
            doc.set("mse.final", last);
            doc.set("mse.mean", mean(&self.mse_curve));
            doc.set("mse.steps", self.mse_curve.len());
        }
        if let Some((ade, fde, mr)) = self.displacement {
            doc.set("min_ade", ade);
            doc.set("min_fde", fde);
            doc.set("miss_rate", mr);
        }
        doc.set("mean_edges", self.mean_edges);
    }

    pub fn write(&self, run: &RunDir, name: &str) -> Result<()> {
        let mut doc = KvDoc::new();
        self.to_kv(&mut doc);
        doc.write(&run.metrics().join(format!("{name}.txt")))?;
        write_text(&run.metrics().join(format!("{name}_mse.tsv")), &format_curve("mse", &self.mse_curve))
    }
}

/// Options for [`evaluate_model`].
pub struct EvalOptions {
    pub mode: PredictionMode,
    /// Draw `k_samples` noisy futures for displacement metrics.
    pub sampled: bool,
    /// Export attention grids for this many cases into this directory.
    pub maps: Option<(usize, PathBuf)>,
}

/// Evaluates a generator and graph source on the test split.
pub fn evaluate_model(
    cfg: &TrainConfig,
    data: &Dataset,
    generator: &ParamSet<f32>,
    source: &GraphSource<'_>,
    opts: &EvalOptions,
) -> Result<EvalSummary> {
    let gen = &cfg.generator;
    let cases = &data.test;
    ensure(!cases.is_empty(), || "test split is empty".into())?;
    let st = data.standardizer();
    let graph_for = |ids: &[usize], windows: &[Array3<f32>]| -> Vec<RelationGraph> {
        match source {
            GraphSource::Truth => ids.iter().map(|&k| cases[k].truth.clone()).collect(),
            GraphSource::Full => windows.iter().map(|w| RelationGraph::fully_connected(w.shape()[0])).collect(),
            GraphSource::Policy { gmp, policy } => {
                let f = window_features(&cfg.gmp, gmp, windows);
                infer_graphs(&cfg.rl, policy, &f).expect("policy shapes match encodings")
            }
        }
    };
    // Relation metrics and edge counts come from the history window.
    let first: Vec<RelationGraph> = {
        let hist: Vec<Array3<f32>> = cases.iter().map(|c| c.states.slice(s![.., ..gen.burn_in, ..]).to_owned()).collect();
        let ids: Vec<usize> = (0..cases.len()).collect();
        let mut out = Vec::with_capacity(cases.len());
        for (i, w) in ids.chunks(cfg.eval_batch).zip(hist.chunks(cfg.eval_batch)) {
            out.extend(graph_for(i, w));
        }
        out
    };
    let truth: Vec<RelationGraph> = cases.iter().map(|c| c.truth.clone()).collect();
    let relations = match source {
        GraphSource::Policy { .. } => Some(relation_metrics(&first, &truth)?),
        _ => None,
    };
    let mut provider = graph_for;
    let preds = predict_raw(gen, generator, cases, &mut provider, opts.mode, st, cfg.eval_batch);
    let truth_raw = raw_futures(&data.test_raw, gen.burn_in, gen.horizon);
    let curve = mse_curve(stack3(&preds).view(), truth_raw.view())?;

    let displacement = if opts.sampled {
        Some(sampled_displacement(cfg, data, generator, &mut provider, opts.mode)?)
    } else {
        None
    };
    if let Some((count, dir)) = &opts.maps {
        export_maps(cfg, data, generator, &mut provider, opts.mode, *count, dir)?;
    }
    Ok(EvalSummary {
        relations,
        mse_curve: curve,
        displacement,
        mean_edges: mean(&first.iter().map(|g| g.num_edges() as f64).collect::<Vec<_>>()),
    })
}

/// `(minADE, minFDE, MR)` over `k_samples` noisy futures per test case.
///
/// Displacements are in raw units; the miss threshold applies to standardized positions.
fn sampled_displacement(
    cfg: &TrainConfig,
    data: &Dataset,
    generator: &ParamSet<f32>,
    provider: &mut dyn FnMut(&[usize], &[Array3<f32>]) -> Vec<RelationGraph>,
    mode: PredictionMode,
) -> Result<(f64, f64, f64)> {
    let gen = &cfg.generator;
    let k = gen.k_samples;
    let std = [gen.sampling_var.sqrt(); STATE_DIM];
    let st = data.standardizer();
    let mut rng = indexed_substream(cfg.seed, Stream::Noise, 0);
    let per_batch = (cfg.eval_batch / k).max(1);
    let (mut ade, mut fde, mut mr) = (0.0, 0.0, 0.0);
    for (chunk_no, chunk) in data.test.chunks(per_batch).enumerate() {
        let mut hist = Vec::with_capacity(chunk.len() * k);
        let mut ids = Vec::with_capacity(chunk.len() * k);
        for (c_idx, c) in chunk.iter().enumerate() {
            for _ in 0..k {
                hist.push(c.states.slice(s![.., ..gen.burn_in, ..]).to_owned());
                ids.push(chunk_no * per_batch + c_idx);
            }
        }
        let mut p = FnProvider(|w: &[Array3<f32>]| provider(&ids, w));
        let pred = predict_batch(
            gen,
            generator,
            &hist,
            &mut p,
            PredictOptions {
                mode,
                noise: Some((std, &mut rng)),
                record_weights: false,
            },
        );
        for (c_idx, c) in chunk.iter().enumerate() {
            let futures = &pred.futures[c_idx * k..(c_idx + 1) * k];
            let std_samples = stack3(&futures.iter().map(|f| f.mapv(f64::from)).collect::<Vec<_>>());
            let raw_samples = stack3(&futures.iter().map(|f| st.invert(&f.mapv(f64::from))).collect::<Vec<_>>());
            let global = chunk_no * per_batch + c_idx;
            let raw_truth = data.test_raw[global].states.slice(s![.., gen.burn_in..gen.burn_in + gen.horizon, ..]).to_owned();
            let std_truth = c.states.slice(s![.., gen.burn_in..gen.burn_in + gen.horizon, ..]).mapv(f64::from);
            let (a, f) = min_ade_fde(raw_samples.view(), raw_truth.view())?;
            ade += a;
            fde += f;
            mr += miss_rate(std_samples.view(), std_truth.view(), cfg.miss_threshold)?;
        }
    }
    let n = data.test.len() as f64;
    Ok((ade / n, fde / n, mr / n))
}

/// Hard mask and head-averaged soft weights for the first `count` test cases.
fn export_maps(
    cfg: &TrainConfig,
    data: &Dataset,
    generator: &ParamSet<f32>,
    provider: &mut dyn FnMut(&[usize], &[Array3<f32>]) -> Vec<RelationGraph>,
    mode: PredictionMode,
    count: usize,
    dir: &Path,
) -> Result<()> {
    let gen = &cfg.generator;
    let count = count.min(data.test.len());
    if count == 0 {
        return Ok(());
    }
    let hist: Vec<Array3<f32>> = data.test[..count].iter().map(|c| c.states.slice(s![.., ..gen.burn_in, ..]).to_owned()).collect();
    let ids: Vec<usize> = (0..count).collect();
    let mut p = FnProvider(|w: &[Array3<f32>]| provider(&ids, w));
    let pred = predict_batch::<rand_chacha::ChaCha8Rng>(
        gen,
        generator,
        &hist,
        &mut p,
        PredictOptions {
            mode,
            noise: None,
            record_weights: true,
        },
    );
    for k in 0..count {
        let hard = &pred.masks[k][0];
        let n = hard.n();
        let grid = Array2::from_shape_fn((n, n), |(i, j)| if hard.get(i, j) { 1.0 } else { 0.0 });
        write_text(&dir.join(format!("case_{k:03}_hard.txt")), &format_grid(&grid))?;
        let w = &pred.weights[k][0];
        let soft = w.mean_axis(Axis(0)).expect("at least one head").mapv(f64::from);
        write_text(&dir.join(format!("case_{k:03}_soft.txt")), &format_grid(&soft))?;
    }
    Ok(())
}

/// Continues the pretrained generator for the formal stage's finetune budget on fixed graphs.
fn finetune_on(
    cfg: &TrainConfig,
    data: &Dataset,
    start: &ParamSet<f32>,
    graph_of: impl Fn(&Case) -> RelationGraph,
    stream_key: u64,
) -> Result<ParamSet<f32>> {
    let mut params = start.clone();
    let mut opt = Adam::new(cfg.finetune_optimizer, &params);
    let n = data.train.len();
    let batch = cfg.finetune_optimizer.batch_size.min(n);
    for epoch in 0..cfg.epochs {
        let mut rng = indexed_substream(cfg.seed, Stream::Ablation, stream_key + epoch as u64);
        for _ in 0..cfg.n_ft {
            let idx = sample(&mut rng, n, batch).into_vec();
            let cases: Vec<&Case> = idx.iter().map(|&k| &data.train[k]).collect();
            let graphs: Vec<RelationGraph> = cases.iter().map(|c| graph_of(c)).collect();
            let grefs: Vec<&RelationGraph> = graphs.iter().collect();
            train_step(&cfg.generator, &mut params, &mut opt, &cases, &grefs)?;
        }
    }
    Ok(params)
}

/// Runs the named configuration on the test split and writes `metrics/ablation_<name>.txt`.
pub fn run_ablation(ablation: Ablation, data: &Dataset, cfg: &TrainConfig, run: &RunDir) -> Result<KvDoc> {
    let gmp = run.load("gmp")?;
    let static_opts = EvalOptions {
        mode: PredictionMode::Static,
        sampled: false,
        maps: None,
    };
    let mut doc = KvDoc::new();
    doc.set("ablation", ablation.name());
    match ablation {
        Ablation::TrueSoft | Ablation::FullSoft => {
            let (source, key, ckpt) = match ablation {
                Ablation::TrueSoft => (GraphSource::Truth, 0x7472_0000, "generator_true_soft"),
                _ => (GraphSource::Full, 0x6663_0000, "generator_full_soft"),
            };
            let params = match run.load(ckpt) {
                Ok(p) => p,
                Err(RainError::MissingPrerequisite(_)) => {
                    let truth = matches!(source, GraphSource::Truth);
                    let p = finetune_on(
                        cfg,
                        data,
                        &run.load("generator_pretrained")?,
                        |c| if truth { c.truth.clone() } else { RelationGraph::fully_connected(c.n_agents()) },
                        key,
                    )?;
                    save_checkpoint(&p, &run.checkpoint(ckpt))?;
                    p
                }
                Err(e) => return Err(e),
            };
            evaluate_model(cfg, data, &params, &source, &static_opts)?.to_kv(&mut doc);
        }
        Ablation::HybridStatic | Ablation::HybridDynamic => {
            let generator = run.load("generator")?;
            let policy = run.load("policy")?;
            let mode = match ablation {
                Ablation::HybridStatic => PredictionMode::Static,
                _ => PredictionMode::Dynamic { tau: cfg.dynamic_tau },
            };
            let source = GraphSource::Policy {
                gmp: &gmp,
                policy: &policy,
            };
            let opts = EvalOptions { mode, ..static_opts };
            evaluate_model(cfg, data, &generator, &source, &opts)?.to_kv(&mut doc);
        }
        Ablation::Supervised => {
            let train_f = case_features(&cfg.gmp, &gmp, &data.train, cfg.eval_batch);
            let truth: Vec<RelationGraph> = data.train.iter().map(|c| c.truth.clone()).collect();
            let fit = train_classifier(&cfg.classifier, &train_f, &truth, derive_seed(cfg.seed, 4))?;
            save_checkpoint(&fit.params, &run.checkpoint("classifier"))?;
            let test_f = case_features(&cfg.gmp, &gmp, &data.test, cfg.eval_batch);
            let inferred = test_f
                .iter()
                .map(|f| classify(&cfg.classifier, &fit.params, f))
                .collect::<Result<Vec<_>>>()?;
            let test_truth: Vec<RelationGraph> = data.test.iter().map(|c| c.truth.clone()).collect();
            relation_metrics(&inferred, &test_truth)?.to_kv("relation.", &mut doc);
            doc.set("classifier.final_loss", fit.epoch_losses.last().copied().unwrap_or(f64::NAN));
        }
    }
    let name = format!("ablation_{}", ablation.slug());
    doc.write(&run.metrics().join(format!("{name}.txt")))?;
    Ok(doc)
}

/// Output name of an evaluation in `mode`.
pub fn evaluation_name(mode: PredictionMode) -> String {
    match mode {
        PredictionMode::Static => "evaluation_static".into(),
        PredictionMode::Dynamic { tau } => format!("evaluation_dynamic_tau{tau}"),
    }
}

/// Test-split evaluation of the trained hybrid model with metrics, curve and attention grids.
pub fn evaluate_run(data: &Dataset, cfg: &TrainConfig, run: &RunDir, mode: PredictionMode) -> Result<EvalSummary> {
    let pre = load_pretrained(run)?;
    let generator = run.load("generator")?;
    let policy = run.load("policy")?;
    let source = GraphSource::Policy {
        gmp: &pre.gmp,
        policy: &policy,
    };
    let name = evaluation_name(mode);
    let opts = EvalOptions {
        mode,
        sampled: true,
        maps: Some((cfg.attention_maps, run.maps().join(&name))),
    };
    let summary = evaluate_model(cfg, data, &generator, &source, &opts)?;
    summary.write(run, &name)?;
    Ok(summary)
}
