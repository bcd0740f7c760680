//! Hard attention over edges as a Markov decision process.
//!
//! Every directed edge of the fully connected graph is an agent-independent
//! decision: keep its current selection status or flip it. One shared
//! Q-network scores both actions from the two endpoint encodings and the
//! current status, and all edges of a case receive the same reward, derived
//! from the generator's prediction error on the resulting graph.

use std::collections::VecDeque;
use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayView3, Axis};
use rand::seq::index::sample;
use rand::Rng;

use crate::batch::Case;
use crate::error::{ensure, RainError, Result};
use crate::generator::{predict_static, GeneratorConfig};
use crate::graph::RelationGraph;
use crate::kv::KvDoc;
use crate::learners::{clip_global_norm, mlp_forward, Adam, Graph, MlpSpec, OptimizerSpec, ParamSet, Scalar};

pub const POLICY_PREFIX: &str = "q";

/// What the edge agent sees: both endpoint encodings and whether the edge is selected.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeObservation {
    /// Receiver encoding.
    pub v_i: Vec<f32>,
    /// Sender encoding.
    pub v_j: Vec<f32>,
    pub s_ij: bool,
}

impl EdgeObservation {
    pub fn dim(&self) -> usize {
        self.v_i.len() + self.v_j.len() + 1
    }

    /// Writes `[v_i, v_j, s_ij]` into `out`.
    pub fn write_row(&self, out: &mut [f32]) {
        let k = self.v_i.len();
        out[..k].copy_from_slice(&self.v_i);
        out[k..2 * k].copy_from_slice(&self.v_j);
        out[2 * k] = if self.s_ij { 1.0 } else { 0.0 };
    }

    pub fn with_status(&self, s_ij: bool) -> Self {
        EdgeObservation { s_ij, ..self.clone() }
    }
}

pub fn stack_observations<'a>(obs: impl ExactSizeIterator<Item = &'a EdgeObservation>, dim: usize) -> Array2<f32> {
    let mut x = Array2::zeros((obs.len(), dim));
    for (mut row, o) in x.rows_mut().into_iter().zip(obs) {
        o.write_row(row.as_slice_mut().unwrap());
    }
    x
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    Stay = 0,
    Flip = 1,
}

impl Action {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(k: usize) -> Self {
        if k == 0 {
            Action::Stay
        } else {
            Action::Flip
        }
    }
}

pub fn apply_action(s_ij: bool, action: Action) -> bool {
    match action {
        Action::Stay => s_ij,
        Action::Flip => !s_ij,
    }
}

/// Weights of the reward terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardSpec {
    pub beta_imp: f64,
    pub beta_sti: f64,
    pub beta_pun: f64,
    pub omega_s: f64,
    pub omega_p: f64,
    /// Stimulation and punishment only make sense with a success notion; off by default.
    pub sti_pun_enabled: bool,
    /// Final displacement below which a case counts as a success.
    pub success_threshold: f64,
}

impl Default for RewardSpec {
    fn default() -> Self {
        RewardSpec {
            beta_imp: 0.01,
            beta_sti: 0.01,
            beta_pun: 0.01,
            omega_s: 1.0,
            omega_p: 1.0,
            sti_pun_enabled: false,
            success_threshold: 1.0,
        }
    }
}

impl RewardSpec {
    pub fn validate(&self) -> Result<()> {
        let all = [self.beta_imp, self.beta_sti, self.beta_pun, self.omega_s, self.omega_p];
        ensure(all.iter().all(|v| v.is_finite() && *v >= 0.0), || {
            "reward weights must be finite and non-negative".into()
        })?;
        ensure(self.success_threshold.is_finite() && self.success_threshold > 0.0, || {
            "success threshold must be positive".into()
        })
    }
}

/// Negative prediction error summed over steps and averaged over agents, over the full state.
pub fn regular_reward<F: Scalar>(pred: ArrayView3<F>, truth: ArrayView3<F>) -> Result<f64> {
    ensure(pred.dim() == truth.dim(), || {
        format!("prediction {:?} and truth {:?} differ in shape", pred.dim(), truth.dim())
    })?;
    let n = pred.shape()[0];
    let mut total = 0.0;
    for (p, t) in pred.iter().zip(truth.iter()) {
        let d = p.as_f64() - t.as_f64();
        total += d * d;
    }
    if !total.is_finite() {
        return Err(RainError::NonFinite("prediction error in reward".into()));
    }
    Ok(-total / n.max(1) as f64)
}

/// Sign of the change in regular reward between consecutive steps.
pub fn improvement_reward(r_now: f64, r_prev: f64) -> f64 {
    match r_now.partial_cmp(&r_prev) {
        Some(std::cmp::Ordering::Greater) => 1.0,
        Some(std::cmp::Ordering::Less) => -1.0,
        _ => 0.0,
    }
}

pub fn total_reward(spec: &RewardSpec, r_reg: f64, r_imp: f64, sti_fired: bool, pun_fired: bool) -> Result<f64> {
    ensure(!(sti_fired && pun_fired), || "stimulation and punishment cannot fire together".into())?;
    let ind = |b: bool| if b { 1.0 } else { 0.0 };
    Ok(r_reg + spec.beta_imp * r_imp + spec.beta_sti * spec.omega_s * ind(sti_fired)
        - spec.beta_pun * spec.omega_p * ind(pun_fired))
}

/// Largest final position error over agents.
fn worst_final_error(pred: ArrayView3<f32>, truth: ArrayView3<f32>) -> f64 {
    let last = pred.shape()[1] - 1;
    (0..pred.shape()[0])
        .map(|i| {
            let dx = (pred[[i, last, 0]] - truth[[i, last, 0]]) as f64;
            let dy = (pred[[i, last, 1]] - truth[[i, last, 1]]) as f64;
            dx.hypot(dy)
        })
        .fold(0.0, f64::max)
}

/// Stimulation fires on a failure-to-success change, punishment on the reverse.
pub fn indicator_flags(spec: &RewardSpec, was_success: bool, is_success: bool) -> (bool, bool) {
    if !spec.sti_pun_enabled {
        return (false, false);
    }
    (!was_success && is_success, was_success && !is_success)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: EdgeObservation,
    pub action: Action,
    pub reward: f64,
    pub next_obs: EdgeObservation,
    pub done: bool,
    /// Rollout this transition came from.
    pub episode: u64,
    pub origin: EdgeOrigin,
}

/// Where an observation's encodings came from, so stored transitions can be rebuilt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EdgeOrigin {
    /// Index of the case in its split.
    pub case: usize,
    pub receiver: usize,
    pub sender: usize,
}

/// Bounded FIFO of transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer {
            capacity: capacity.max(1),
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn extend(&mut self, ts: impl IntoIterator<Item = Transition>) {
        for t in ts {
            self.push(t);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// `batch` distinct transitions drawn uniformly, or `None` if too few are stored.
    pub fn sample(&self, batch: usize, rng: &mut impl Rng) -> Option<Vec<&Transition>> {
        if batch == 0 || self.items.len() < batch {
            return None;
        }
        Some(sample(rng, self.items.len(), batch).iter().map(|k| &self.items[k]).collect())
    }

    /// Every stored transition of one uniformly chosen rollout.
    pub fn sample_episode(&self, rng: &mut impl Rng) -> Option<Vec<&Transition>> {
        let pick = self.items.get(rng.gen_range(0..self.items.len().max(1)))?.episode;
        Some(self.items.iter().filter(|t| t.episode == pick).collect())
    }
}

const REPLAY_MAGIC: &[u8; 4] = b"RNRB";

impl ReplayBuffer {
    /// Writes transitions by origin; encodings are rebuilt from the features on load.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(24 + self.items.len() * 28);
        buf.extend_from_slice(REPLAY_MAGIC);
        buf.extend_from_slice(&(self.capacity as u64).to_le_bytes());
        buf.extend_from_slice(&(self.items.len() as u64).to_le_bytes());
        for t in &self.items {
            buf.extend_from_slice(&t.episode.to_le_bytes());
            buf.extend_from_slice(&(t.origin.case as u32).to_le_bytes());
            buf.extend_from_slice(&(t.origin.receiver as u16).to_le_bytes());
            buf.extend_from_slice(&(t.origin.sender as u16).to_le_bytes());
            buf.extend_from_slice(&[t.obs.s_ij as u8, t.action as u8, t.next_obs.s_ij as u8, t.done as u8]);
            buf.extend_from_slice(&t.reward.to_le_bytes());
        }
        write_atomic(path, &buf)
    }

    pub fn load(path: &Path, features: &[CaseFeatures]) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| RainError::io(path, e))?;
        let bad = |m: &str| RainError::Format(format!("{}: {m}", path.display()));
        if bytes.len() < 20 || &bytes[..4] != REPLAY_MAGIC {
            return Err(bad("not a replay file"));
        }
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let capacity = u64_at(4) as usize;
        let count = u64_at(12) as usize;
        const REC: usize = 8 + 4 + 2 + 2 + 4 + 8;
        if bytes.len() != 20 + count * REC {
            return Err(bad("truncated or oversized"));
        }
        let mut out = ReplayBuffer::new(capacity);
        for rec in bytes[20..].chunks_exact(REC) {
            let case = u32::from_le_bytes(rec[8..12].try_into().unwrap()) as usize;
            let receiver = u16::from_le_bytes(rec[12..14].try_into().unwrap()) as usize;
            let sender = u16::from_le_bytes(rec[14..16].try_into().unwrap()) as usize;
            let f = features.get(case).ok_or_else(|| bad("case index out of range"))?;
            if receiver >= f.nrows() || sender >= f.nrows() {
                return Err(bad("agent index out of range"));
            }
            let obs = EdgeObservation {
                v_i: f.row(receiver).to_vec(),
                v_j: f.row(sender).to_vec(),
                s_ij: rec[16] != 0,
            };
            out.push(Transition {
                next_obs: obs.with_status(rec[18] != 0),
                obs,
                action: Action::from_index(rec[17] as usize),
                reward: f64::from_le_bytes(rec[20..28].try_into().unwrap()),
                done: rec[19] != 0,
                episode: u64::from_le_bytes(rec[..8].try_into().unwrap()),
                origin: EdgeOrigin { case, receiver, sender },
            });
        }
        Ok(out)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| RainError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| RainError::io(path, e))
}

/// How minibatches are drawn from the buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplayMode {
    Transitions,
    Episodes,
}

impl std::str::FromStr for ReplayMode {
    type Err = RainError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transitions" => Ok(ReplayMode::Transitions),
            "episodes" => Ok(ReplayMode::Episodes),
            _ => Err(RainError::Format(format!("unknown replay mode {s:?}"))),
        }
    }
}

impl std::fmt::Display for ReplayMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ReplayMode::Transitions => "transitions",
            ReplayMode::Episodes => "episodes",
        })
    }
}

/// Agent and learning settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RlConfig {
    pub t_rl: usize,
    pub q_hidden: usize,
    pub q_layers: usize,
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of training over which exploration anneals linearly.
    pub epsilon_anneal: f64,
    pub target_sync: u64,
    pub buffer_capacity: usize,
    pub replay: ReplayMode,
    pub reward: RewardSpec,
    pub optimizer: OptimizerSpec,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            t_rl: 10,
            q_hidden: 128,
            q_layers: 3,
            gamma: 0.95,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_anneal: 0.5,
            target_sync: 100,
            buffer_capacity: 50_000,
            replay: ReplayMode::Transitions,
            reward: RewardSpec::default(),
            optimizer: OptimizerSpec::default(),
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.t_rl >= 1, || "t_rl must be >= 1".into())?;
        ensure(self.q_hidden >= 1 && self.q_layers >= 1, || "Q-network needs a positive size".into())?;
        ensure((0.0..=1.0).contains(&self.gamma), || format!("gamma {} outside [0, 1]", self.gamma))?;
        let eps_ok = |e: f64| (0.0..=1.0).contains(&e);
        ensure(eps_ok(self.epsilon_start) && eps_ok(self.epsilon_end), || "epsilon outside [0, 1]".into())?;
        ensure(self.epsilon_anneal > 0.0 && self.epsilon_anneal <= 1.0, || {
            "epsilon_anneal must lie in (0, 1]".into()
        })?;
        ensure(self.target_sync >= 1 && self.buffer_capacity >= 1, || {
            "target_sync and buffer_capacity must be >= 1".into()
        })?;
        self.reward.validate()?;
        self.optimizer.validate()
    }

    pub fn q_spec(&self, feature_dim: usize) -> MlpSpec {
        MlpSpec::uniform(2 * feature_dim + 1, self.q_hidden, 2, self.q_layers)
    }

    /// Exploration rate after `progress` (0 to 1) of training.
    pub fn epsilon_at(&self, progress: f64) -> f64 {
        let f = (progress / self.epsilon_anneal).clamp(0.0, 1.0);
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * f
    }

    pub fn to_kv(&self, doc: &mut KvDoc) {
        doc.set("rl.t_rl", self.t_rl);
        doc.set("rl.q_hidden", self.q_hidden);
        doc.set("rl.q_layers", self.q_layers);
        doc.set("rl.gamma", self.gamma);
        doc.set("rl.epsilon_start", self.epsilon_start);
        doc.set("rl.epsilon_end", self.epsilon_end);
        doc.set("rl.epsilon_anneal", self.epsilon_anneal);
        doc.set("rl.target_sync", self.target_sync);
        doc.set("rl.buffer_capacity", self.buffer_capacity);
        doc.set("rl.replay", self.replay);
        doc.set("rl.beta_imp", self.reward.beta_imp);
        doc.set("rl.beta_sti", self.reward.beta_sti);
        doc.set("rl.beta_pun", self.reward.beta_pun);
        doc.set("rl.omega_s", self.reward.omega_s);
        doc.set("rl.omega_p", self.reward.omega_p);
        doc.set("rl.sti_pun_enabled", self.reward.sti_pun_enabled);
        doc.set("rl.success_threshold", self.reward.success_threshold);
        self.optimizer.to_kv("rl.optimizer", doc);
    }

    pub fn from_kv(doc: &KvDoc) -> Result<Self> {
        let d = RlConfig::default();
        let r = d.reward;
        let cfg = RlConfig {
            t_rl: doc.parse_or("rl.t_rl", d.t_rl)?,
            q_hidden: doc.parse_or("rl.q_hidden", d.q_hidden)?,
            q_layers: doc.parse_or("rl.q_layers", d.q_layers)?,
            gamma: doc.parse_or("rl.gamma", d.gamma)?,
            epsilon_start: doc.parse_or("rl.epsilon_start", d.epsilon_start)?,
            epsilon_end: doc.parse_or("rl.epsilon_end", d.epsilon_end)?,
            epsilon_anneal: doc.parse_or("rl.epsilon_anneal", d.epsilon_anneal)?,
            target_sync: doc.parse_or("rl.target_sync", d.target_sync)?,
            buffer_capacity: doc.parse_or("rl.buffer_capacity", d.buffer_capacity)?,
            replay: doc.parse_or("rl.replay", d.replay)?,
            reward: RewardSpec {
                beta_imp: doc.parse_or("rl.beta_imp", r.beta_imp)?,
                beta_sti: doc.parse_or("rl.beta_sti", r.beta_sti)?,
                beta_pun: doc.parse_or("rl.beta_pun", r.beta_pun)?,
                omega_s: doc.parse_or("rl.omega_s", r.omega_s)?,
                omega_p: doc.parse_or("rl.omega_p", r.omega_p)?,
                sti_pun_enabled: doc.parse_or("rl.sti_pun_enabled", r.sti_pun_enabled)?,
                success_threshold: doc.parse_or("rl.success_threshold", r.success_threshold)?,
            },
            optimizer: OptimizerSpec::from_kv("rl.optimizer", doc)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Random Q-network parameters for node encodings of width `feature_dim`.
pub fn init_q_network(cfg: &RlConfig, feature_dim: usize, rng: &mut impl Rng) -> Result<ParamSet<f32>> {
    let mut p = ParamSet::new();
    cfg.q_spec(feature_dim).init(&mut p, POLICY_PREFIX, rng)?;
    Ok(p)
}

/// Q-values `[M × 2]` for stacked observation rows.
pub fn q_values(spec: &MlpSpec, params: &ParamSet<f32>, rows: &Array2<f32>) -> Result<Array2<f32>> {
    mlp_forward(params, POLICY_PREFIX, spec, rows)
}

/// Greedy action per row; ties keep the edge unchanged.
pub fn greedy_actions(q: &Array2<f32>) -> Vec<Action> {
    q.rows()
        .into_iter()
        .map(|r| if r[1] > r[0] { Action::Flip } else { Action::Stay })
        .collect()
}

/// Node encodings of one case, `[N × D]`.
pub type CaseFeatures = Array2<f32>;

/// Splits stacked encodings `[B·N × D]` into per-case blocks.
pub fn split_features(stacked: &Array2<f32>, n: usize) -> Vec<CaseFeatures> {
    stacked
        .axis_chunks_iter(Axis(0), n)
        .map(|c| c.to_owned())
        .collect()
}

/// One observation per directed edge, in [`RelationGraph::directed_pairs`] order.
pub fn edge_observations(features: &CaseFeatures, graph: &RelationGraph) -> Vec<EdgeObservation> {
    RelationGraph::directed_pairs(graph.n())
        .map(|(i, j)| EdgeObservation {
            v_i: features.row(i).to_vec(),
            v_j: features.row(j).to_vec(),
            s_ij: graph.get(i, j),
        })
        .collect()
}

/// Picks actions for every edge of several cases at once, ε-greedily.
fn choose_actions(
    spec: &MlpSpec,
    q: &ParamSet<f32>,
    obs: &[Vec<EdgeObservation>],
    epsilon: f64,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<Action>>> {
    let per: Vec<usize> = obs.iter().map(Vec::len).collect();
    let flat: Vec<&EdgeObservation> = obs.iter().flatten().collect();
    let greedy = if epsilon >= 1.0 || flat.is_empty() {
        vec![Action::Stay; flat.len()]
    } else {
        let rows = stack_observations(flat.iter().copied(), spec.input());
        greedy_actions(&q_values(spec, q, &rows)?)
    };
    let mut out = Vec::with_capacity(obs.len());
    let mut k = 0;
    for m in per {
        let mut acts = Vec::with_capacity(m);
        for _ in 0..m {
            let explore = epsilon > 0.0 && rng.gen::<f64>() < epsilon;
            acts.push(if explore { Action::from_index(rng.gen_range(0..2)) } else { greedy[k] });
            k += 1;
        }
        out.push(acts);
    }
    Ok(out)
}

fn apply_all(graph: &RelationGraph, actions: &[Action]) -> RelationGraph {
    let mut next = graph.clone();
    for ((i, j), a) in RelationGraph::directed_pairs(graph.n()).zip(actions) {
        next.set(i, j, apply_action(graph.get(i, j), *a));
    }
    next
}

/// Frozen generator and the cases a batch of rollouts runs on.
pub struct RolloutEnv<'a> {
    pub generator: &'a GeneratorConfig,
    pub generator_params: &'a ParamSet<f32>,
    pub cases: Vec<&'a Case>,
    /// Split indices of `cases`, recorded in each transition's origin.
    pub case_ids: Vec<usize>,
    /// GMP encodings of each case's history.
    pub features: Vec<CaseFeatures>,
    /// Cases predicted together.
    pub batch: usize,
}

impl RolloutEnv<'_> {
    fn truth(&self, k: usize) -> ArrayView3<'_, f32> {
        let h = self.generator.burn_in;
        self.cases[k].states.slice(s![.., h..h + self.generator.horizon, ..])
    }

    /// Regular reward and worst final error of every case under `graphs`.
    fn score(&self, graphs: &[RelationGraph]) -> Vec<Result<(f64, f64)>> {
        let preds: Vec<Array3<f32>> = predict_static(self.generator, self.generator_params, &self.cases, graphs, self.batch);
        preds
            .iter()
            .enumerate()
            .map(|(k, p)| {
                let r = regular_reward(p.view(), self.truth(k))?;
                Ok((r, worst_final_error(p.view(), self.truth(k))))
            })
            .collect()
    }
}

/// One episode on one case.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub transitions: Vec<Transition>,
    pub final_graph: RelationGraph,
    /// Regular reward of the fully connected starting graph.
    pub baseline: f64,
    /// Shared total reward at each step.
    pub rewards: Vec<f64>,
}

/// Runs one episode per case of `env`, all cases advancing in lockstep.
///
/// Each episode starts from the fully connected selection. A case whose
/// generator output turns non-finite yields an error and no transitions.
pub fn rollout_batch(
    env: &RolloutEnv<'_>,
    cfg: &RlConfig,
    q: &ParamSet<f32>,
    epsilon: f64,
    first_episode: u64,
    rng: &mut impl Rng,
) -> Result<Vec<Result<Rollout>>> {
    let b = env.cases.len();
    ensure(env.features.len() == b, || "one feature block per case required".into())?;
    let spec = cfg.q_spec(env.features.first().map_or(0, |f| f.ncols()));
    let mut graphs: Vec<RelationGraph> = env.cases.iter().map(|c| RelationGraph::fully_connected(c.n_agents())).collect();
    let mut failed: Vec<Option<RainError>> = (0..b).map(|_| None).collect();
    let mut prev: Vec<(f64, f64)> = vec![(0.0, 0.0); b];
    for (k, s) in env.score(&graphs).into_iter().enumerate() {
        match s {
            Ok(v) => prev[k] = v,
            Err(e) => failed[k] = Some(e),
        }
    }
    let baseline: Vec<f64> = prev.iter().map(|p| p.0).collect();
    let thr = cfg.reward.success_threshold;
    let mut transitions: Vec<Vec<Transition>> = vec![Vec::new(); b];
    let mut rewards: Vec<Vec<f64>> = vec![Vec::new(); b];
    for eta in 1..=cfg.t_rl {
        let obs: Vec<Vec<EdgeObservation>> = (0..b).map(|k| edge_observations(&env.features[k], &graphs[k])).collect();
        let actions = choose_actions(&spec, q, &obs, epsilon, rng)?;
        let next: Vec<RelationGraph> = (0..b).map(|k| apply_all(&graphs[k], &actions[k])).collect();
        let scores = env.score(&next);
        for (k, sc) in scores.into_iter().enumerate() {
            if failed[k].is_some() {
                continue;
            }
            let (r_reg, fde) = match sc {
                Ok(v) => v,
                Err(e) => {
                    failed[k] = Some(e);
                    continue;
                }
            };
            let (sti, pun) = indicator_flags(&cfg.reward, prev[k].1 < thr, fde < thr);
            let r = total_reward(&cfg.reward, r_reg, improvement_reward(r_reg, prev[k].0), sti, pun)?;
            prev[k] = (r_reg, fde);
            rewards[k].push(r);
            let done = eta == cfg.t_rl;
            for ((o, a), (i, j)) in obs[k].iter().zip(&actions[k]).zip(RelationGraph::directed_pairs(next[k].n())) {
                transitions[k].push(Transition {
                    obs: o.clone(),
                    action: *a,
                    reward: r,
                    next_obs: o.with_status(next[k].get(i, j)),
                    done,
                    episode: first_episode + k as u64,
                    origin: EdgeOrigin {
                        case: env.case_ids.get(k).copied().unwrap_or(k),
                        receiver: i,
                        sender: j,
                    },
                });
            }
        }
        graphs = next;
    }
    Ok((0..b)
        .map(|k| match failed[k].take() {
            Some(e) => Err(e),
            None => Ok(Rollout {
                transitions: std::mem::take(&mut transitions[k]),
                final_graph: graphs[k].clone(),
                baseline: baseline[k],
                rewards: std::mem::take(&mut rewards[k]),
            }),
        })
        .collect())
}

/// Single-case episode.
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    case: &Case,
    features: &CaseFeatures,
    generator: &GeneratorConfig,
    generator_params: &ParamSet<f32>,
    cfg: &RlConfig,
    q: &ParamSet<f32>,
    epsilon: f64,
    rng: &mut impl Rng,
) -> Result<Rollout> {
    let env = RolloutEnv {
        generator,
        generator_params,
        cases: vec![case],
        case_ids: vec![0],
        features: vec![features.clone()],
        batch: 1,
    };
    rollout_batch(&env, cfg, q, epsilon, 0, rng)?.pop().expect("one rollout")
}

/// Greedy episodes from the fully connected selection; no generator needed.
pub fn infer_graphs(cfg: &RlConfig, q: &ParamSet<f32>, features: &[CaseFeatures]) -> Result<Vec<RelationGraph>> {
    let Some(first) = features.first() else { return Ok(Vec::new()) };
    let spec = cfg.q_spec(first.ncols());
    let mut graphs: Vec<RelationGraph> = features.iter().map(|f| RelationGraph::fully_connected(f.nrows())).collect();
    let mut unused = rand::rngs::mock::StepRng::new(0, 0);
    for _ in 0..cfg.t_rl {
        let obs: Vec<Vec<EdgeObservation>> = features.iter().zip(&graphs).map(|(f, g)| edge_observations(f, g)).collect();
        let actions = choose_actions(&spec, q, &obs, 0.0, &mut unused)?;
        graphs = graphs.iter().zip(&actions).map(|(g, a)| apply_all(g, a)).collect();
    }
    Ok(graphs)
}

pub fn infer_graph(cfg: &RlConfig, q: &ParamSet<f32>, features: &CaseFeatures) -> Result<RelationGraph> {
    Ok(infer_graphs(cfg, q, std::slice::from_ref(features))?.remove(0))
}

/// Double-Q targets `r + γ(1 − done) Q_target(o', argmax_a Q(o', a))`.
pub fn ddqn_targets(spec: &MlpSpec, online: &ParamSet<f32>, target: &ParamSet<f32>, batch: &[&Transition], gamma: f64) -> Result<Vec<f64>> {
    let next = stack_observations(batch.iter().map(|t| &t.next_obs), spec.input());
    let pick = greedy_actions(&q_values(spec, online, &next)?);
    let eval = q_values(spec, target, &next)?;
    Ok(batch
        .iter()
        .enumerate()
        .map(|(r, t)| {
            let boot = if t.done { 0.0 } else { eval[[r, pick[r].index()]] as f64 };
            t.reward + gamma * boot
        })
        .collect())
}

/// Mean squared TD error of the taken actions against fixed targets, recorded on `g`.
pub fn td_loss<F: Scalar>(spec: &MlpSpec, g: &mut Graph<F>, params: &ParamSet<F>, obs: Array2<F>, actions: &[Action], targets: &[f64]) -> crate::learners::Var {
    let m = spec.bind(g, params, POLICY_PREFIX);
    let x = g.constant(obs);
    let q = m.apply(g, x);
    let taken = g.gather_cols(q, actions.iter().map(|a| a.index()).collect());
    let y = g.constant(Array2::from_shape_fn((targets.len(), 1), |(r, _)| F::of(targets[r])));
    let d = g.sub(taken, y);
    let ss = g.sum_squares(d);
    g.scale(ss, 1.0 / targets.len().max(1) as f64)
}

/// Online and target Q-networks with their optimizer.
#[derive(Debug, Clone)]
pub struct DdqnAgent {
    pub spec: MlpSpec,
    pub online: ParamSet<f32>,
    pub target: ParamSet<f32>,
    pub optimizer: Adam,
    pub gamma: f64,
    pub target_sync: u64,
    pub updates: u64,
}

impl DdqnAgent {
    pub fn new(cfg: &RlConfig, feature_dim: usize, online: ParamSet<f32>) -> Self {
        DdqnAgent {
            spec: cfg.q_spec(feature_dim),
            target: online.clone(),
            optimizer: Adam::new(cfg.optimizer, &online),
            online,
            gamma: cfg.gamma,
            target_sync: cfg.target_sync,
            updates: 0,
        }
    }

    /// One gradient step on `batch`; the loss is measured before the step.
    pub fn update(&mut self, batch: &[&Transition]) -> Result<f64> {
        ensure(!batch.is_empty(), || "empty DDQN batch".into())?;
        let targets = ddqn_targets(&self.spec, &self.online, &self.target, batch, self.gamma)?;
        let obs = stack_observations(batch.iter().map(|t| &t.obs), self.spec.input());
        let actions: Vec<Action> = batch.iter().map(|t| t.action).collect();
        let mut g = Graph::new();
        let l = td_loss(&self.spec, &mut g, &self.online, obs, &actions, &targets);
        let loss = g.scalar(l) as f64;
        if !loss.is_finite() {
            return Err(RainError::Divergence(format!("TD loss became {loss}")));
        }
        let mut grads = g.backward(l);
        clip_global_norm(&mut grads, self.optimizer.spec.clip_norm);
        self.optimizer.step(&mut self.online, &grads);
        self.updates += 1;
        if self.updates.is_multiple_of(self.target_sync) {
            self.target = self.online.clone();
        }
        Ok(loss)
    }

    /// Samples from `buffer` and updates; `None` when the buffer cannot fill a batch.
    pub fn update_from(&mut self, buffer: &ReplayBuffer, mode: ReplayMode, rng: &mut impl Rng) -> Result<Option<f64>> {
        let batch = match mode {
            ReplayMode::Transitions => buffer.sample(self.optimizer.spec.batch_size, rng),
            ReplayMode::Episodes => buffer.sample_episode(rng),
        };
        match batch {
            Some(b) => self.update(&b).map(Some),
            None => Ok(None),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learners::{grad_check, GradProbe};
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// A single affine layer, so Q-values can be written down by hand.
    fn linear_q() -> RlConfig {
        RlConfig {
            q_layers: 1,
            q_hidden: 1,
            ..RlConfig::default()
        }
    }

    /// Linear Q-network over `[v_i, v_j, s]` with explicit weights `[3 × 2]` and bias.
    fn linear_params(w: [[f32; 2]; 3], b: [f32; 2]) -> ParamSet<f32> {
        let mut p = ParamSet::new();
        p.insert("q.0.w", Array2::from_shape_fn((3, 2), |(r, c)| w[r][c])).unwrap();
        p.insert("q.0.b", Array2::from_shape_fn((1, 2), |(_, c)| b[c])).unwrap();
        p
    }

    fn obs(vi: f32, vj: f32, s: bool) -> EdgeObservation {
        EdgeObservation {
            v_i: vec![vi],
            v_j: vec![vj],
            s_ij: s,
        }
    }

    fn transition(o: EdgeObservation, action: Action, reward: f64, next: EdgeObservation, done: bool) -> Transition {
        Transition {
            obs: o,
            action,
            reward,
            next_obs: next,
            done,
            episode: 0,
            origin: EdgeOrigin::default(),
        }
    }

    #[test]
    fn actions_keep_or_flip() {
        assert!(apply_action(true, Action::Stay));
        assert!(!apply_action(true, Action::Flip));
        for s in [false, true] {
            assert_eq!(apply_action(apply_action(s, Action::Flip), Action::Flip), s);
        }
    }

    #[test]
    fn regular_reward_examples() {
        let truth = Array3::<f64>::zeros((2, 3, 4));
        assert_eq!(regular_reward(truth.view(), truth.view()).unwrap(), 0.0);
        // Per-step squared error 0.25 from a 0.5 offset in one component.
        let mut pred = truth.clone();
        pred.slice_mut(s![.., .., 0]).fill(0.5);
        let r = regular_reward(pred.view(), truth.view()).unwrap();
        assert!((r + 0.75).abs() < 1e-12, "{r}");
        let doubled = pred.mapv(|x| 2.0 * x);
        let r2 = regular_reward(doubled.view(), truth.view()).unwrap();
        assert!((r2 - 4.0 * r).abs() < 1e-12);
    }

    #[test]
    fn regular_reward_rejects_bad_input() {
        let truth = Array3::<f64>::zeros((2, 3, 4));
        let mut pred = truth.clone();
        pred[[0, 1, 2]] = f64::NAN;
        assert!(matches!(regular_reward(pred.view(), truth.view()), Err(RainError::NonFinite(_))));
        let short = Array3::<f64>::zeros((2, 2, 4));
        assert!(regular_reward(short.view(), truth.view()).is_err());
    }

    #[test]
    fn improvement_is_a_sign() {
        assert_eq!(improvement_reward(-0.4, -0.5), 1.0);
        assert_eq!(improvement_reward(-0.5, -0.4), -1.0);
        assert_eq!(improvement_reward(-0.5, -0.5), 0.0);
    }

    #[test]
    fn total_reward_examples() {
        let spec = RewardSpec::default();
        let a = total_reward(&spec, -0.5, 1.0, false, false).unwrap();
        assert!((a + 0.49).abs() < 1e-12, "{a}");
        let b = total_reward(&spec, -0.5, 1.0, true, false).unwrap();
        assert!((b + 0.48).abs() < 1e-12, "{b}");
        assert_eq!(total_reward(&spec, 0.0, 0.0, false, false).unwrap(), 0.0);
        let p = total_reward(&spec, -0.5, 0.0, false, true).unwrap();
        assert!((p + 0.51).abs() < 1e-12);
        assert!(matches!(total_reward(&spec, 0.0, 0.0, true, true), Err(RainError::Contract(_))));
    }

    #[test]
    fn indicators_follow_success_changes() {
        let off = RewardSpec::default();
        assert_eq!(indicator_flags(&off, false, true), (false, false));
        let on = RewardSpec {
            sti_pun_enabled: true,
            ..off
        };
        assert_eq!(indicator_flags(&on, false, true), (true, false));
        assert_eq!(indicator_flags(&on, true, false), (false, true));
        assert_eq!(indicator_flags(&on, true, true), (false, false));
    }

    #[test]
    fn replay_is_bounded_fifo() {
        let mut buf = ReplayBuffer::new(5);
        for k in 0..8 {
            buf.push(transition(obs(k as f32, 0.0, true), Action::Stay, k as f64, obs(0.0, 0.0, true), false));
        }
        assert_eq!(buf.len(), 5);
        let rewards: Vec<f64> = buf.iter().map(|t| t.reward).collect();
        assert_eq!(rewards, vec![3.0, 4.0, 5.0, 6.0, 7.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(buf.sample(6, &mut rng).is_none());
        let batch = buf.sample(5, &mut rng).unwrap();
        let mut seen: Vec<f64> = batch.iter().map(|t| t.reward).collect();
        seen.sort_by(f64::total_cmp);
        assert_eq!(seen, rewards);
    }

    #[test]
    fn replay_file_round_trips() {
        let f: Vec<CaseFeatures> = (0..3).map(|k| Array2::from_shape_fn((4, 2), |(i, c)| (k * 10 + i) as f32 + c as f32 * 0.5)).collect();
        let mut buf = ReplayBuffer::new(7);
        for e in 0..9u64 {
            let origin = EdgeOrigin {
                case: (e % 3) as usize,
                receiver: (e % 4) as usize,
                sender: ((e + 1) % 4) as usize,
            };
            let o = EdgeObservation {
                v_i: f[origin.case].row(origin.receiver).to_vec(),
                v_j: f[origin.case].row(origin.sender).to_vec(),
                s_ij: e % 2 == 0,
            };
            let a = Action::from_index((e % 3 == 0) as usize);
            let mut t = transition(o.clone(), a, -0.1 * e as f64, o.with_status(apply_action(o.s_ij, a)), e == 8);
            t.episode = e / 2;
            t.origin = origin;
            buf.push(t);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("replay.bin");
        buf.save(&path).unwrap();
        let back = ReplayBuffer::load(&path, &f).unwrap();
        assert_eq!(back.capacity(), 7);
        assert!(back.iter().eq(buf.iter()));
        std::fs::write(&path, b"RNRB").unwrap();
        assert!(matches!(ReplayBuffer::load(&path, &f), Err(RainError::Format(_))));
    }

    #[test]
    fn episode_replay_returns_one_rollout() {
        let mut buf = ReplayBuffer::new(100);
        for e in 0..3u64 {
            for _ in 0..4 {
                let mut t = transition(obs(0.0, 0.0, true), Action::Stay, e as f64, obs(0.0, 0.0, true), false);
                t.episode = e;
                buf.push(t);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ep = buf.sample_episode(&mut rng).unwrap();
        assert_eq!(ep.len(), 4);
        assert!(ep.iter().all(|t| t.episode == ep[0].episode));
        assert!(ReplayBuffer::new(3).sample_episode(&mut rng).is_none());
    }

    #[test]
    fn terminal_target_ignores_discount() {
        let cfg = linear_q();
        let spec = cfg.q_spec(1);
        let p = linear_params([[0.3, -0.2], [0.1, 0.4], [0.5, 0.7]], [0.2, -0.1]);
        let t = transition(obs(1.0, 2.0, true), Action::Flip, 1.0, obs(1.0, 2.0, false), true);
        for gamma in [0.0, 0.5, 0.95, 1.0] {
            let y = ddqn_targets(&spec, &p, &p, &[&t], gamma).unwrap();
            assert_eq!(y, vec![1.0]);
        }
    }

    #[test]
    fn double_q_target_uses_online_choice_and_target_value() {
        let spec = linear_q().q_spec(1);
        // Online prefers flip at the next observation, target values it at 3.
        let online = linear_params([[0.0; 2]; 3], [1.0, 2.0]);
        let target = linear_params([[0.0; 2]; 3], [5.0, 3.0]);
        let t = transition(obs(0.2, 0.3, true), Action::Stay, 0.5, obs(0.2, 0.3, false), false);
        let y = ddqn_targets(&spec, &online, &target, &[&t], 0.9).unwrap();
        assert!((y[0] - (0.5 + 0.9 * 3.0)).abs() < 1e-6, "{y:?}");
    }

    #[test]
    fn zero_td_error_is_a_fixpoint() {
        let cfg = linear_q();
        let p = linear_params([[0.0; 2]; 3], [0.0, 0.0]);
        let mut agent = DdqnAgent::new(&cfg, 1, p.clone());
        let t1 = transition(obs(0.4, -0.3, true), Action::Flip, 0.0, obs(0.4, -0.3, false), true);
        let t2 = transition(obs(1.0, 2.0, false), Action::Stay, 0.0, obs(1.0, 2.0, false), false);
        let loss = agent.update(&[&t1, &t2]).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(agent.online, p);
    }

    #[test]
    fn target_network_syncs_on_schedule() {
        let cfg = RlConfig {
            target_sync: 3,
            ..linear_q()
        };
        let p = linear_params([[0.1, 0.2], [0.3, 0.4], [0.5, 0.6]], [0.0, 0.0]);
        let mut agent = DdqnAgent::new(&cfg, 1, p.clone());
        let t = transition(obs(1.0, 1.0, true), Action::Flip, 1.0, obs(1.0, 1.0, false), true);
        agent.update(&[&t]).unwrap();
        agent.update(&[&t]).unwrap();
        assert_eq!(agent.target, p);
        assert_ne!(agent.online, p);
        agent.update(&[&t]).unwrap();
        assert_eq!(agent.target, agent.online);
    }

    #[test]
    fn empty_buffer_update_is_a_no_op() {
        let cfg = linear_q();
        let p = linear_params([[0.1; 2]; 3], [0.0, 0.0]);
        let mut agent = DdqnAgent::new(&cfg, 1, p.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = agent.update_from(&ReplayBuffer::new(10), ReplayMode::Transitions, &mut rng).unwrap();
        assert!(out.is_none());
        assert_eq!(agent.online, p);
        assert_eq!(agent.updates, 0);
    }

    #[test]
    fn td_loss_gradient_matches_differences() {
        let cfg = RlConfig {
            q_hidden: 6,
            ..RlConfig::default()
        };
        let spec = cfg.q_spec(3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ParamSet::<f64>::new();
        spec.init(&mut p, POLICY_PREFIX, &mut rng).unwrap();
        for (_, t) in p.iter_mut() {
            t.mapv_inplace(|x| x + rng.gen_range(-0.1..0.1));
        }
        let x = Array2::from_shape_fn((5, 7), |_| rng.gen_range(-1.0..1.0));
        let actions = [Action::Stay, Action::Flip, Action::Flip, Action::Stay, Action::Flip];
        let targets = [0.3, -0.2, 1.0, 0.0, -0.7];
        let err = grad_check(|g, p| td_loss(&spec, g, p, x.clone(), &actions, &targets), &p, &GradProbe::default());
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn observation_width_ignores_agent_count() {
        for n in [2, 6, 9] {
            let f = Array2::<f32>::ones((n, 64));
            let o = edge_observations(&f, &RelationGraph::fully_connected(n));
            assert_eq!(o.len(), n * (n - 1));
            assert!(o.iter().all(|e| e.dim() == 129));
        }
    }

    #[test]
    fn greedy_inference_reaches_empty_and_full() {
        let cfg = linear_q();
        let f = Array2::from_shape_fn((4, 1), |(i, _)| i as f32);
        // Flip is worth 2s - 1: discard every selected edge, then stay.
        let drop_all = linear_params([[0.0, 0.0], [0.0, 0.0], [0.0, 2.0]], [0.0, -1.0]);
        assert_eq!(infer_graph(&cfg, &drop_all, &f).unwrap(), RelationGraph::empty(4));
        let keep_all = linear_params([[0.0; 2]; 3], [0.0, -1.0]);
        assert_eq!(infer_graph(&cfg, &keep_all, &f).unwrap(), RelationGraph::fully_connected(4));
    }

    #[test]
    fn greedy_inference_is_deterministic() {
        let cfg = RlConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = init_q_network(&cfg, 8, &mut rng).unwrap();
        let f = Array2::from_shape_fn((5, 8), |_| rng.gen_range(-1.0f32..1.0));
        let a = infer_graph(&cfg, &q, &f).unwrap();
        let b = infer_graph(&cfg, &q, &f).unwrap();
        assert_eq!(a, b);
        assert!(a.has_zero_diagonal());
    }

    fn tiny_world(n: usize) -> (GeneratorConfig, ParamSet<f32>, Case, CaseFeatures) {
        let gen = GeneratorConfig {
            n_heads: 2,
            hidden: 8,
            burn_in: 4,
            horizon: 3,
            tau: 3,
            ..GeneratorConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let params = gen.init(&mut rng).unwrap();
        let case = Case {
            states: Array3::from_shape_fn((n, 7, 4), |_| rng.gen_range(-1.0f32..1.0)),
            truth: RelationGraph::empty(n),
        };
        let f = Array2::from_shape_fn((n, 5), |_| rng.gen_range(-1.0f32..1.0));
        (gen, params, case, f)
    }

    #[test]
    fn rollout_emits_one_transition_per_edge_and_step() {
        let (gen, gp, case, f) = tiny_world(6);
        let cfg = RlConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = init_q_network(&cfg, 5, &mut rng).unwrap();
        let r = rollout(&case, &f, &gen, &gp, &cfg, &q, 0.5, &mut rng).unwrap();
        assert_eq!(r.transitions.len(), 300);
        assert_eq!(r.rewards.len(), 10);
        for (eta, chunk) in r.transitions.chunks(30).enumerate() {
            assert!(chunk.iter().all(|t| t.reward == r.rewards[eta]));
            assert!(chunk.iter().all(|t| t.done == (eta == 9)));
            assert!(chunk.iter().all(|t| t.reward.is_finite()));
        }
        // Each next status is the action applied to the current one.
        for t in &r.transitions {
            assert_eq!(t.next_obs.s_ij, apply_action(t.obs.s_ij, t.action));
        }
        // The first step starts from the fully connected selection.
        assert!(r.transitions[..30].iter().all(|t| t.obs.s_ij));
    }

    #[test]
    fn staying_policy_keeps_full_graph_and_baseline_reward() {
        let (gen, gp, case, f) = tiny_world(6);
        let cfg = linear_q();
        let cfg = RlConfig { t_rl: 3, ..cfg };
        let mut q = ParamSet::new();
        q.insert("q.0.w", Array2::zeros((11, 2))).unwrap();
        q.insert("q.0.b", Array2::from_shape_vec((1, 2), vec![0.0, -1.0]).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = rollout(&case, &f, &gen, &gp, &cfg, &q, 0.0, &mut rng).unwrap();
        assert_eq!(r.final_graph, RelationGraph::fully_connected(6));
        let pred = predict_static(&gen, &gp, &[&case], &[RelationGraph::fully_connected(6)], 1);
        let direct = regular_reward(pred[0].view(), case.states.slice(s![.., 4..7, ..])).unwrap();
        assert_eq!(r.baseline, direct);
        // No change in error, so no improvement term.
        assert_eq!(r.rewards[0], direct);
    }

    #[test]
    fn batched_rollouts_match_single_ones_when_greedy() {
        let (gen, gp, case, f) = tiny_world(4);
        let (_, _, case2, f2) = {
            let (g, p, mut c, f) = tiny_world(4);
            c.states.mapv_inplace(|x| 0.5 * x);
            (g, p, c, f.mapv(|x| -x))
        };
        let cfg = RlConfig {
            t_rl: 3,
            ..RlConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = init_q_network(&cfg, 5, &mut rng).unwrap();
        let env = RolloutEnv {
            generator: &gen,
            generator_params: &gp,
            cases: vec![&case, &case2],
            case_ids: vec![0, 1],
            features: vec![f.clone(), f2.clone()],
            batch: 2,
        };
        let both = rollout_batch(&env, &cfg, &q, 0.0, 0, &mut rng).unwrap();
        let one = rollout(&case2, &f2, &gen, &gp, &cfg, &q, 0.0, &mut rng).unwrap();
        let b = both[1].as_ref().unwrap();
        assert_eq!(b.final_graph, one.final_graph);
        for (x, y) in b.rewards.iter().zip(&one.rewards) {
            assert!((x - y).abs() <= 1e-4 * y.abs().max(1.0), "{x} vs {y}");
        }
    }
}
