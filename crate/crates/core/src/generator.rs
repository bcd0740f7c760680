//! Soft-graph-attention motion generator.
//!
//! Two embedding LSTMs read each agent's state every step, a multi-head soft
//! attention aggregates neighbor embeddings over the selected graph, and a
//! generation LSTM outputs the state change. The first `burn_in` frames are
//! teacher-forced; afterwards the generator consumes its own predictions.

use ndarray::{s, Array2, Array3, Array4, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::batch::{frame_rows, graph_mask, minibatches, Case};
use crate::error::{ensure, RainError, Result};
use crate::graph::RelationGraph;
use crate::kv::KvDoc;
use crate::learners::{
    clip_global_norm, Adam, BoundLinear, BoundLstm, BoundMlp, Graph, LinearSpec, LstmSpec, MlpSpec, OptimizerSpec,
    ParamSet, Scalar, Var,
};
use crate::rng::{indexed_substream, Stream};
use crate::sim::STATE_DIM;

pub const GENERATOR_PREFIX: &str = "gen.";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorConfig {
    pub n_heads: usize,
    pub hidden: usize,
    /// Diagonal of the output-noise covariance.
    pub noise_var: [f64; STATE_DIM],
    /// Variance used when drawing several samples for displacement metrics.
    pub sampling_var: f64,
    pub k_samples: usize,
    /// Predicted steps between graph re-inference in dynamic mode.
    pub tau: usize,
    pub burn_in: usize,
    pub horizon: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_heads: 4,
            hidden: 128,
            noise_var: [0.0; STATE_DIM],
            sampling_var: 1e-4,
            k_samples: 20,
            tau: 50,
            burn_in: 30,
            horizon: 50,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.n_heads >= 1 && self.hidden.is_multiple_of(self.n_heads), || {
            format!("hidden {} must split evenly into {} heads", self.hidden, self.n_heads)
        })?;
        ensure(self.tau >= 1 && self.tau <= self.horizon, || {
            format!("tau must lie in [1, {}], got {}", self.horizon, self.tau)
        })?;
        ensure(self.k_samples >= 1, || "k_samples must be >= 1".into())?;
        ensure(self.burn_in >= 1 && self.horizon >= 1, || "burn_in and horizon must be >= 1".into())?;
        ensure(
            self.noise_var.iter().all(|v| *v >= 0.0) && self.sampling_var >= 0.0,
            || "noise variances must be non-negative".into(),
        )
    }

    pub fn to_kv(&self, doc: &mut KvDoc) {
        doc.set("generator.n_heads", self.n_heads);
        doc.set("generator.hidden", self.hidden);
        doc.set("generator.sampling_var", self.sampling_var);
        doc.set("generator.k_samples", self.k_samples);
        doc.set("generator.tau", self.tau);
    }

    pub fn from_kv(doc: &KvDoc, burn_in: usize, horizon: usize) -> Result<Self> {
        let d = GeneratorConfig {
            burn_in,
            horizon,
            tau: horizon,
            ..Self::default()
        };
        let cfg = GeneratorConfig {
            n_heads: doc.parse_or("generator.n_heads", d.n_heads)?,
            hidden: doc.parse_or("generator.hidden", d.hidden)?,
            sampling_var: doc.parse_or("generator.sampling_var", d.sampling_var)?,
            k_samples: doc.parse_or("generator.k_samples", d.k_samples)?,
            tau: doc.parse_or("generator.tau", d.tau)?,
            ..d
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn lstm_embed(&self) -> LstmSpec {
        LstmSpec::new(STATE_DIM, self.hidden)
    }

    fn lstm_gen(&self) -> LstmSpec {
        LstmSpec::new(2 * self.hidden, self.hidden)
    }

    fn social_spec(&self) -> MlpSpec {
        MlpSpec::uniform(self.hidden, self.hidden, self.hidden, 2)
    }

    fn out_spec(&self) -> LinearSpec {
        LinearSpec::new(self.hidden, STATE_DIM)
    }

    pub fn init<F: Scalar>(&self, rng: &mut impl Rng) -> Result<ParamSet<F>> {
        let h = self.hidden;
        let mut p = ParamSet::new();
        self.lstm_embed().init(&mut p, "gen.es", rng)?;
        self.lstm_embed().init(&mut p, "gen.en", rng)?;
        p.insert_uniform("gen.att.ws", h, h, rng)?;
        p.insert_uniform("gen.att.wn", h, h, rng)?;
        p.insert_constant("gen.att.b", 1, h, 0.0)?;
        let bound = 1.0 / ((h / self.n_heads) as f64).sqrt();
        p.insert("gen.att.w", Array2::from_shape_fn((1, h), |_| F::of(rng.gen_range(-bound..bound))))?;
        self.social_spec().init(&mut p, "gen.fv", rng)?;
        self.lstm_gen().init(&mut p, "gen.g", rng)?;
        self.out_spec().init(&mut p, "gen.out", rng)?;
        // Small output weights so the untrained generator starts near a constant-state model.
        p.get_mut("gen.out.w").unwrap().mapv_inplace(|x| x * F::of(0.1));
        Ok(p)
    }
}

/// Parameters of one generator placed on a tape.
pub struct BoundGenerator {
    es: BoundLstm,
    en: BoundLstm,
    ws: Var,
    wn: Var,
    b: Var,
    w: Var,
    fv: BoundMlp,
    gl: BoundLstm,
    out: BoundLinear,
    heads: usize,
}

impl BoundGenerator {
    pub fn bind<F: Scalar>(cfg: &GeneratorConfig, g: &mut Graph<F>, p: &ParamSet<F>) -> Self {
        BoundGenerator {
            es: cfg.lstm_embed().bind(g, p, "gen.es"),
            en: cfg.lstm_embed().bind(g, p, "gen.en"),
            ws: g.param(p, "gen.att.ws"),
            wn: g.param(p, "gen.att.wn"),
            b: g.param(p, "gen.att.b"),
            w: g.param(p, "gen.att.w"),
            fv: cfg.social_spec().bind(g, p, "gen.fv"),
            gl: cfg.lstm_gen().bind(g, p, "gen.g"),
            out: cfg.out_spec().bind(g, p, "gen.out"),
            heads: cfg.n_heads,
        }
    }

    /// One embedding step; returns `(v_self, v_neighbor)` and the new states.
    pub fn embed<F: Scalar>(&self, g: &mut Graph<F>, x: Var, st: &StepVars) -> (Var, Var, StepVars) {
        let (hs, cs) = self.es.step(g, x, st.hs, st.cs);
        let (hn, cn) = self.en.step(g, x, st.hn, st.cn);
        (hs, hn, StepVars { hs, cs, hn, cn, ..*st })
    }

    /// Masked multi-head attention; returns the social attribute and `[R × H·N]` weights.
    pub fn social<F: Scalar>(&self, g: &mut Graph<F>, vs: Var, vn: Var, mask: &[bool], group: usize) -> (Var, Var) {
        let p = g.matmul(vs, self.ws);
        let p = g.add_row(p, self.b);
        let q = g.matmul(vn, self.wn);
        let scores = g.pair_scores(p, q, self.w, group, self.heads);
        let weights = g.masked_softmax(scores, mask, group, self.heads);
        let agg = g.attend(weights, vn, group, self.heads);
        (self.fv.apply(g, agg), weights)
    }

    /// State change from the assembled attributes.
    pub fn generate<F: Scalar>(&self, g: &mut Graph<F>, vs: Var, social: Var, st: &StepVars) -> (Var, StepVars) {
        let input = g.concat(&[vs, social]);
        let (hg, cg) = self.gl.step(g, input, st.hg, st.cg);
        (self.out.apply(g, hg), StepVars { hg, cg, ..*st })
    }

    /// Full step: embed, attend, generate. Returns `(Δx, weights, states)`.
    pub fn step<F: Scalar>(&self, g: &mut Graph<F>, x: Var, st: &StepVars, mask: &[bool], group: usize) -> (Var, Var, StepVars) {
        let (vs, vn, st) = self.embed(g, x, st);
        let (social, weights) = self.social(g, vs, vn, mask, group);
        let (delta, st) = self.generate(g, vs, social, &st);
        (delta, weights, st)
    }
}

/// Recurrent state handles on a tape.
#[derive(Debug, Clone, Copy)]
pub struct StepVars {
    pub hs: Var,
    pub cs: Var,
    pub hn: Var,
    pub cn: Var,
    pub hg: Var,
    pub cg: Var,
}

impl StepVars {
    pub fn zeros<F: Scalar>(g: &mut Graph<F>, rows: usize, hidden: usize) -> Self {
        let z = g.zeros(rows, hidden);
        StepVars {
            hs: z,
            cs: z,
            hn: z,
            cn: z,
            hg: z,
            cg: z,
        }
    }

    fn load<F: Scalar>(g: &mut Graph<F>, st: &RecurrentState<F>) -> Self {
        StepVars {
            hs: g.constant(st.hs.clone()),
            cs: g.constant(st.cs.clone()),
            hn: g.constant(st.hn.clone()),
            cn: g.constant(st.cn.clone()),
            hg: g.constant(st.hg.clone()),
            cg: g.constant(st.cg.clone()),
        }
    }

    fn store<F: Scalar>(&self, g: &Graph<F>) -> RecurrentState<F> {
        RecurrentState {
            hs: g.value(self.hs).clone(),
            cs: g.value(self.cs).clone(),
            hn: g.value(self.hn).clone(),
            cn: g.value(self.cn).clone(),
            hg: g.value(self.hg).clone(),
            cg: g.value(self.cg).clone(),
        }
    }
}

/// Hidden and cell states of the three recurrent cells.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentState<F = f32> {
    pub hs: Array2<F>,
    pub cs: Array2<F>,
    pub hn: Array2<F>,
    pub cn: Array2<F>,
    pub hg: Array2<F>,
    pub cg: Array2<F>,
}

impl<F: Scalar> RecurrentState<F> {
    pub fn zeros(rows: usize, hidden: usize) -> Self {
        let z = Array2::zeros((rows, hidden));
        RecurrentState {
            hs: z.clone(),
            cs: z.clone(),
            hn: z.clone(),
            cn: z.clone(),
            hg: z.clone(),
            cg: z,
        }
    }
}

/// `[H × N × N]` view of one case's `[N × H·N]` weight rows.
fn weights_by_head<F: Scalar>(w: &Array2<F>, heads: usize, n: usize, case: usize) -> Array3<F> {
    Array3::from_shape_fn((heads, n, n), |(h, i, j)| w[[case * n + i, h * n + j]])
}

/// One untaped embedding step for a single case.
pub fn embed_step<F: Scalar>(
    cfg: &GeneratorConfig,
    params: &ParamSet<F>,
    x_t: &Array2<F>,
    state: &RecurrentState<F>,
) -> (Array2<F>, Array2<F>, RecurrentState<F>) {
    let mut g = Graph::new();
    let bound = BoundGenerator::bind(cfg, &mut g, params);
    let st = StepVars::load(&mut g, state);
    let x = g.constant(x_t.clone());
    let (vs, vn, st2) = bound.embed(&mut g, x, &st);
    (g.value(vs).clone(), g.value(vn).clone(), st2.store(&g))
}

/// Social attribute and `[H × N × N]` attention weights of one case.
pub fn soft_attention<F: Scalar>(
    cfg: &GeneratorConfig,
    params: &ParamSet<F>,
    v_self: &Array2<F>,
    v_neighbor: &Array2<F>,
    graph: &RelationGraph,
) -> (Array2<F>, Array3<F>) {
    let n = graph.n();
    let mut g = Graph::new();
    let bound = BoundGenerator::bind(cfg, &mut g, params);
    let vs = g.constant(v_self.clone());
    let vn = g.constant(v_neighbor.clone());
    let (social, w) = bound.social(&mut g, vs, vn, graph.as_slice(), n);
    (g.value(social).clone(), weights_by_head(g.value(w), cfg.n_heads, n, 0))
}

/// One generation step: `x_{t+1} = x_t + Δx + noise`.
pub fn generate_step<F: Scalar>(
    cfg: &GeneratorConfig,
    params: &ParamSet<F>,
    v_self: &Array2<F>,
    v_social: &Array2<F>,
    state: &RecurrentState<F>,
    x_t: &Array2<F>,
    noise: &Array2<F>,
) -> (Array2<F>, RecurrentState<F>) {
    let mut g = Graph::new();
    let bound = BoundGenerator::bind(cfg, &mut g, params);
    let st = StepVars::load(&mut g, state);
    let vs = g.constant(v_self.clone());
    let soc = g.constant(v_social.clone());
    let (delta, st2) = bound.generate(&mut g, vs, soc, &st);
    let next = x_t + g.value(delta) + noise;
    (next, st2.store(&g))
}

/// Mean squared error over predicted future states, recorded on `g`.
///
/// `states` is `[B·N × T × 4]` flattened per frame: `frames[t]` is the
/// `[B·N × 4]` state at frame `t`. Loss is `Σ‖x − x̂‖² / (B·N·T_f)`.
pub fn sequence_loss<F: Scalar>(
    cfg: &GeneratorConfig,
    g: &mut Graph<F>,
    params: &ParamSet<F>,
    frames: &[Array2<F>],
    mask: &[bool],
    group: usize,
) -> Var {
    let rows = frames[0].nrows();
    let bound = BoundGenerator::bind(cfg, g, params);
    let mut st = StepVars::zeros(g, rows, cfg.hidden);
    let total = cfg.burn_in + cfg.horizon;
    assert!(frames.len() >= total, "need {total} frames, got {}", frames.len());
    let mut x = g.constant(frames[0].clone());
    let mut errs = Vec::with_capacity(cfg.horizon);
    for t in 0..total - 1 {
        let (delta, _, st2) = bound.step(g, x, &st, mask, group);
        st = st2;
        if t + 1 >= cfg.burn_in {
            let pred = g.add(x, delta);
            let truth = g.constant(frames[t + 1].clone());
            let d = g.sub(pred, truth);
            errs.push(g.sum_squares(d));
            x = pred;
        } else {
            x = g.constant(frames[t + 1].clone());
        }
    }
    let mut loss = errs[0];
    for &e in &errs[1..] {
        loss = g.add(loss, e);
    }
    g.scale(loss, 1.0 / (rows * cfg.horizon) as f64)
}

fn case_frames<F: Scalar>(cases: &[&Case], frames: usize) -> Vec<Array2<F>> {
    (0..frames).map(|t| frame_rows(cases, t)).collect()
}

/// Training loss of a minibatch with one static graph per case.
pub fn minibatch_loss<F: Scalar>(
    cfg: &GeneratorConfig,
    g: &mut Graph<F>,
    params: &ParamSet<F>,
    cases: &[&Case],
    graphs: &[&RelationGraph],
) -> Var {
    let n = cases[0].n_agents();
    let frames = case_frames(cases, cfg.burn_in + cfg.horizon);
    sequence_loss(cfg, g, params, &frames, &graph_mask(graphs), n)
}

/// One optimizer step on a minibatch; returns the loss before the update.
pub fn train_step(
    cfg: &GeneratorConfig,
    params: &mut ParamSet<f32>,
    opt: &mut Adam,
    cases: &[&Case],
    graphs: &[&RelationGraph],
) -> Result<f64> {
    let grads = {
        let mut g = Graph::new();
        let l = minibatch_loss(cfg, &mut g, params, cases, graphs);
        let loss = g.scalar(l) as f64;
        if !loss.is_finite() {
            return Err(RainError::Divergence(format!("generator loss became {loss}")));
        }
        let mut grads = g.backward(l);
        clip_global_norm(&mut grads, opt.spec.clip_norm);
        (grads, loss)
    };
    opt.step(params, &grads.0);
    Ok(grads.1)
}

/// Outcome of [`train_generator`].
#[derive(Debug, Clone)]
pub struct GeneratorTraining {
    pub params: ParamSet<f32>,
    pub optimizer: Adam,
    pub epoch_losses: Vec<f64>,
}

/// Trains on `cases` with the graph chosen for each case by `graph_of`.
pub fn train_generator(
    cfg: &GeneratorConfig,
    cases: &[Case],
    graph_of: impl Fn(usize, &Case) -> RelationGraph,
    params: ParamSet<f32>,
    optimizer: OptimizerSpec,
    epochs: usize,
    seed: u64,
) -> Result<GeneratorTraining> {
    ensure(!cases.is_empty(), || "no training cases for the generator".into())?;
    optimizer.validate()?;
    let graphs: Vec<RelationGraph> = cases.iter().enumerate().map(|(k, c)| graph_of(k, c)).collect();
    let mut params = params;
    let mut opt = Adam::new(optimizer, &params);
    let mut epoch_losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut rng = indexed_substream(seed, Stream::Training, 0x6765_0000 + epoch as u64);
        let batches = minibatches(cases.len(), optimizer.batch_size, &mut rng);
        let mut sum = 0.0;
        for idx in &batches {
            let cs: Vec<&Case> = idx.iter().map(|&k| &cases[k]).collect();
            let gs: Vec<&RelationGraph> = idx.iter().map(|&k| &graphs[k]).collect();
            sum += train_step(cfg, &mut params, &mut opt, &cs, &gs)?;
        }
        let mean = sum / batches.len() as f64;
        log::debug!("generator epoch {epoch}: loss {mean:.5}");
        epoch_losses.push(mean);
    }
    Ok(GeneratorTraining {
        params,
        optimizer: opt,
        epoch_losses,
    })
}

/// Mean sequence loss over `cases` (standardized full state), no updates.
pub fn evaluate_loss(cfg: &GeneratorConfig, params: &ParamSet<f32>, cases: &[&Case], graphs: &[&RelationGraph], batch: usize) -> f64 {
    let mut total = 0.0;
    for (cs, gs) in cases.chunks(batch.max(1)).zip(graphs.chunks(batch.max(1))) {
        let mut g = Graph::new();
        let l = minibatch_loss(cfg, &mut g, params, cs, gs);
        total += g.scalar(l) as f64 * cs.len() as f64;
    }
    total / cases.len().max(1) as f64
}

/// Supplies the graph for each case of a batch given the latest `T_h`-frame window.
pub trait GraphProvider {
    /// `windows[b]` is `[N × T_h × 4]` in standardized units.
    fn graphs(&mut self, windows: &[Array3<f32>]) -> Vec<RelationGraph>;
}

impl<P: GraphProvider + ?Sized> GraphProvider for &mut P {
    fn graphs(&mut self, windows: &[Array3<f32>]) -> Vec<RelationGraph> {
        (**self).graphs(windows)
    }
}

/// The same fixed graph per case regardless of the window.
pub struct FixedGraphs(pub Vec<RelationGraph>);

impl GraphProvider for FixedGraphs {
    fn graphs(&mut self, windows: &[Array3<f32>]) -> Vec<RelationGraph> {
        assert_eq!(windows.len(), self.0.len());
        self.0.clone()
    }
}

/// Adapts a closure to [`GraphProvider`].
pub struct FnProvider<T>(pub T);

impl<T: FnMut(&[Array3<f32>]) -> Vec<RelationGraph>> GraphProvider for FnProvider<T> {
    fn graphs(&mut self, windows: &[Array3<f32>]) -> Vec<RelationGraph> {
        (self.0)(windows)
    }
}

/// How often the graph is re-inferred while predicting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictionMode {
    /// One graph from the history, kept for the whole horizon.
    Static,
    /// Re-inferred every `tau` predicted steps from the latest window.
    Dynamic { tau: usize },
}

/// Free-running prediction for a batch of cases.
#[derive(Debug, Clone)]
pub struct BatchPrediction {
    /// Per case, `[N × T_f × 4]` standardized future states.
    pub futures: Vec<Array3<f32>>,
    /// Per case, the graph used for each window.
    pub masks: Vec<Vec<RelationGraph>>,
    /// Per case and predicted step, `[H × N × N]` soft weights (empty unless recorded).
    pub weights: Vec<Vec<Array3<f32>>>,
}

/// Options for [`predict_batch`].
pub struct PredictOptions<'a, R: Rng> {
    pub mode: PredictionMode,
    /// Noise standard deviation per channel and its generator; `None` disables noise.
    pub noise: Option<([f64; STATE_DIM], &'a mut R)>,
    pub record_weights: bool,
}

/// Runs burn-in on each case's history and predicts `horizon` steps.
///
/// `histories[b]` is `[N × T_h × 4]`. The graph provider is queried once
/// before burn-in and then every `tau` predicted steps in dynamic mode, with
/// the most recent `T_h` frames (true and predicted) as the window. When the
/// horizon is not a multiple of `tau` the last window is shorter.
pub fn predict_batch<R: Rng>(
    cfg: &GeneratorConfig,
    params: &ParamSet<f32>,
    histories: &[Array3<f32>],
    provider: &mut dyn GraphProvider,
    opts: PredictOptions<'_, R>,
) -> BatchPrediction {
    let b = histories.len();
    let n = histories[0].shape()[0];
    let th = cfg.burn_in;
    let tau = match opts.mode {
        PredictionMode::Static => cfg.horizon,
        PredictionMode::Dynamic { tau } => tau.clamp(1, cfg.horizon),
    };
    let mut noise = opts.noise;
    // Full sequences grow as predictions are appended.
    let mut seqs: Vec<Array3<f32>> = histories
        .iter()
        .map(|h| {
            let mut s = Array3::zeros((n, th + cfg.horizon, STATE_DIM));
            s.slice_mut(s![.., ..th, ..]).assign(&h.slice(s![.., ..th, ..]));
            s
        })
        .collect();
    let mut masks: Vec<Vec<RelationGraph>> = vec![Vec::new(); b];
    let mut weights: Vec<Vec<Array3<f32>>> = vec![Vec::new(); b];
    let mut current = provider.graphs(histories);
    for (m, gph) in masks.iter_mut().zip(&current) {
        m.push(gph.clone());
    }
    let mut mask = graph_mask(&current.iter().collect::<Vec<_>>());
    let mut state = RecurrentState::<f32>::zeros(b * n, cfg.hidden);
    let frame = |seqs: &[Array3<f32>], t: usize| -> Array2<f32> {
        let mut x = Array2::zeros((b * n, STATE_DIM));
        for (k, s) in seqs.iter().enumerate() {
            x.slice_mut(s![k * n..(k + 1) * n, ..]).assign(&s.slice(s![.., t, ..]));
        }
        x
    };
    for t in 0..th + cfg.horizon - 1 {
        let predicting = t + 1 >= th;
        let k = t + 1 - th.min(t + 1);
        if predicting && k > 0 && k.is_multiple_of(tau) {
            let windows: Vec<Array3<f32>> = seqs.iter().map(|s| s.slice(s![.., t + 1 - th..t + 1, ..]).to_owned()).collect();
            current = provider.graphs(&windows);
            for (m, gph) in masks.iter_mut().zip(&current) {
                m.push(gph.clone());
            }
            mask = graph_mask(&current.iter().collect::<Vec<_>>());
        }
        let mut g = Graph::<f32>::new();
        let bound = BoundGenerator::bind(cfg, &mut g, params);
        let st = StepVars::load(&mut g, &state);
        let x = g.constant(frame(&seqs, t));
        let (delta, w, st2) = bound.step(&mut g, x, &st, &mask, n);
        state = st2.store(&g);
        if !predicting {
            continue;
        }
        let mut next = g.value(x) + g.value(delta);
        if let Some((std, rng)) = noise.as_mut() {
            for mut row in next.rows_mut() {
                for c in 0..STATE_DIM {
                    if std[c] > 0.0 {
                        let e: f64 = StandardNormal.sample(&mut **rng);
                        row[c] += (std[c] * e) as f32;
                    }
                }
            }
        }
        for (kk, s) in seqs.iter_mut().enumerate() {
            s.slice_mut(s![.., t + 1, ..]).assign(&next.slice(s![kk * n..(kk + 1) * n, ..]));
        }
        if opts.record_weights {
            for (kk, wv) in weights.iter_mut().enumerate() {
                wv.push(weights_by_head(g.value(w), cfg.n_heads, n, kk));
            }
        }
    }
    BatchPrediction {
        futures: seqs.into_iter().map(|s| s.slice(s![.., th.., ..]).to_owned()).collect(),
        masks,
        weights,
    }
}

/// `K` sampled futures for one case plus the masks and soft weights that produced them.
#[derive(Debug, Clone)]
pub struct PredictionBundle {
    /// `[K × N × T_f × 4]` standardized states.
    pub samples: Array4<f32>,
    /// Graph of each window, in order.
    pub masks: Vec<RelationGraph>,
    /// Soft weights `[H × N × N]` of the first sample at each predicted step.
    pub weights: Vec<Array3<f32>>,
}

/// Predicts `K` futures of one case from its `[N × T_h × 4]` history.
///
/// With zero noise all samples coincide, so the generator runs once.
pub fn predict<R: Rng>(
    cfg: &GeneratorConfig,
    params: &ParamSet<f32>,
    history: &Array3<f32>,
    provider: &mut dyn GraphProvider,
    mode: PredictionMode,
    rng: &mut R,
) -> PredictionBundle {
    let n = history.shape()[0];
    let std: [f64; STATE_DIM] = cfg.noise_var.map(f64::sqrt);
    let noisy = std.iter().any(|&s| s > 0.0);
    let k = cfg.k_samples;
    let runs = if noisy { k } else { 1 };
    let mut samples = Array4::zeros((k, n, cfg.horizon, STATE_DIM));
    let mut masks = Vec::new();
    let mut weights = Vec::new();
    for r in 0..runs {
        let opts = PredictOptions {
            mode,
            noise: noisy.then_some((std, &mut *rng)),
            record_weights: r == 0,
        };
        let out = predict_batch(cfg, params, std::slice::from_ref(history), provider, opts);
        if r == 0 {
            masks = out.masks[0].clone();
            weights = out.weights[0].clone();
            if !noisy {
                for s in 0..k {
                    samples.index_axis_mut(Axis(0), s).assign(&out.futures[0]);
                }
            }
        }
        if noisy {
            samples.index_axis_mut(Axis(0), r).assign(&out.futures[0]);
        }
    }
    PredictionBundle {
        samples,
        masks,
        weights,
    }
}

/// Deterministic static predictions for many cases with fixed graphs, batched.
pub fn predict_static(cfg: &GeneratorConfig, params: &ParamSet<f32>, cases: &[&Case], graphs: &[RelationGraph], batch: usize) -> Vec<Array3<f32>> {
    let mut out = Vec::with_capacity(cases.len());
    for (cs, gs) in cases.chunks(batch.max(1)).zip(graphs.chunks(batch.max(1))) {
        let hist: Vec<Array3<f32>> = cs.iter().map(|c| c.states.slice(s![.., ..cfg.burn_in, ..]).to_owned()).collect();
        let mut provider = FixedGraphs(gs.to_vec());
        let pred = predict_batch::<rand_chacha::ChaCha8Rng>(
            cfg,
            params,
            &hist,
            &mut provider,
            PredictOptions {
                mode: PredictionMode::Static,
                noise: None,
                record_weights: false,
            },
        );
        out.extend(pred.futures);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learners::{grad_check, recurrent_step, GradProbe, LstmState};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            n_heads: 2,
            hidden: 6,
            burn_in: 3,
            horizon: 4,
            tau: 4,
            k_samples: 3,
            ..GeneratorConfig::default()
        }
    }

    fn jitter(p: &mut ParamSet<f64>, rng: &mut impl Rng) {
        for (_, t) in p.iter_mut() {
            t.mapv_inplace(|x| x + rng.gen_range(-0.1..0.1));
        }
    }

    fn rand_rows(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn single_neighbor_gets_full_weight() {
        let cfg = small();
        let p: ParamSet<f64> = cfg.init(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut graph = RelationGraph::empty(3);
        graph.set(0, 2, true);
        let (_, w) = soft_attention(&cfg, &p, &rand_rows(3, 6, 2), &rand_rows(3, 6, 3), &graph);
        for h in 0..2 {
            assert_eq!(w[[h, 0, 2]], 1.0);
            assert_eq!(w[[h, 0, 1]], 0.0);
        }
    }

    #[test]
    fn empty_neighborhood_gives_social_of_zero() {
        let cfg = small();
        let p: ParamSet<f64> = cfg.init(&mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let graph = RelationGraph::empty(3);
        let (soc, w) = soft_attention(&cfg, &p, &rand_rows(3, 6, 5), &rand_rows(3, 6, 6), &graph);
        assert!(w.iter().all(|&x| x == 0.0));
        let zero = crate::learners::mlp_forward(&p, "gen.fv", &cfg.social_spec(), &Array2::zeros((3, 6))).unwrap();
        assert_eq!(soc, zero);
    }

    #[test]
    fn masked_weights_normalize_over_selected() {
        let cfg = small();
        let p: ParamSet<f64> = cfg.init(&mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let graph = RelationGraph::from_fn(5, |i, j| (i + 2 * j) % 3 != 0);
        let (_, w) = soft_attention(&cfg, &p, &rand_rows(5, 6, 8), &rand_rows(5, 6, 9), &graph);
        for h in 0..2 {
            for i in 0..5 {
                let sum: f64 = (0..5).map(|j| w[[h, i, j]]).sum();
                if graph.in_degree(i) > 0 {
                    assert!((sum - 1.0).abs() < 1e-6);
                } else {
                    assert_eq!(sum, 0.0);
                }
                for j in 0..5 {
                    if !graph.get(i, j) {
                        assert_eq!(w[[h, i, j]], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn embed_step_matches_recurrent_oracle() {
        let cfg = small();
        let p: ParamSet<f64> = cfg.init(&mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        let x = rand_rows(3, 4, 11);
        let mut st = RecurrentState::zeros(3, 6);
        st.hs = rand_rows(3, 6, 12);
        st.cn = rand_rows(3, 6, 13);
        let (vs, vn, _) = embed_step(&cfg, &p, &x, &st);
        let os = recurrent_step(&p, "gen.es", &cfg.lstm_embed(), &x, &LstmState { h: st.hs.clone(), c: st.cs.clone() }).unwrap();
        let on = recurrent_step(&p, "gen.en", &cfg.lstm_embed(), &x, &LstmState { h: st.hn.clone(), c: st.cn.clone() }).unwrap();
        for (a, b) in vs.iter().zip(os.h.iter()).chain(vn.iter().zip(on.h.iter())) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn shared_weights_give_identical_embeddings() {
        let cfg = small();
        let p: ParamSet<f64> = cfg.init(&mut ChaCha8Rng::seed_from_u64(14)).unwrap();
        let mut x = rand_rows(2, 4, 15);
        let r0 = x.row(0).to_owned();
        x.row_mut(1).assign(&r0);
        let (vs, vn, _) = embed_step(&cfg, &p, &x, &RecurrentState::zeros(2, 6));
        assert_eq!(vs.row(0), vs.row(1));
        assert_eq!(vn.row(0), vn.row(1));
        let z = p.zeros_like();
        let (vs, vn, st) = embed_step(&cfg, &z, &x, &RecurrentState::zeros(2, 6));
        assert!(vs.iter().chain(vn.iter()).chain(st.cs.iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn zero_change_is_identity_step() {
        let cfg = small();
        let mut p: ParamSet<f64> = cfg.init(&mut ChaCha8Rng::seed_from_u64(16)).unwrap();
        p.get_mut("gen.out.w").unwrap().fill(0.0);
        p.get_mut("gen.out.b").unwrap().fill(0.0);
        let x = rand_rows(3, 4, 17);
        let (next, _) = generate_step(&cfg, &p, &rand_rows(3, 6, 18), &rand_rows(3, 6, 19), &RecurrentState::zeros(3, 6), &x, &Array2::zeros((3, 4)));
        assert_eq!(next, x);
    }

    #[test]
    fn generate_step_matches_gate_oracle() {
        let cfg = small();
        let p: ParamSet<f64> = cfg.init(&mut ChaCha8Rng::seed_from_u64(20)).unwrap();
        let vs = rand_rows(2, 6, 21);
        let soc = rand_rows(2, 6, 22);
        let x = rand_rows(2, 4, 23);
        let mut st = RecurrentState::zeros(2, 6);
        st.hg = rand_rows(2, 6, 24);
        st.cg = rand_rows(2, 6, 25);
        let (next, st2) = generate_step(&cfg, &p, &vs, &soc, &st, &x, &Array2::zeros((2, 4)));
        let input = ndarray::concatenate(Axis(1), &[vs.view(), soc.view()]).unwrap();
        let o = recurrent_step(&p, "gen.g", &cfg.lstm_gen(), &input, &LstmState { h: st.hg.clone(), c: st.cg.clone() }).unwrap();
        let want = &x + &(o.h.dot(p.expect("gen.out.w")) + p.expect("gen.out.b"));
        for (a, b) in next.iter().zip(want.iter()).chain(st2.hg.iter().zip(o.h.iter())) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    fn tiny_case(seed: u64, n: usize, t: usize) -> Case {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Case {
            states: Array3::from_shape_fn((n, t, 4), |_| rng.gen_range(-1.0f32..1.0)),
            truth: RelationGraph::from_fn(n, |i, j| (i + j) % 2 == 1),
        }
    }

    #[test]
    fn sequence_loss_gradient_check() {
        let cfg = small();
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let mut p: ParamSet<f64> = cfg.init(&mut rng).unwrap();
        jitter(&mut p, &mut rng);
        let cases = [tiny_case(27, 3, 7), tiny_case(28, 3, 7)];
        let refs: Vec<&Case> = cases.iter().collect();
        let graphs: Vec<&RelationGraph> = cases.iter().map(|c| &c.truth).collect();
        let err = grad_check(|g, p| minibatch_loss(&cfg, g, p, &refs, &graphs), &p, &GradProbe::default());
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn attention_scorer_gradient_check() {
        let cfg = small();
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let mut p: ParamSet<f64> = cfg.init(&mut rng).unwrap();
        jitter(&mut p, &mut rng);
        let p = p.filtered("gen.att.");
        let vs = rand_rows(8, 6, 30);
        let vn = rand_rows(8, 6, 31);
        let target = rand_rows(8, 6, 32);
        let mask: Vec<bool> = (0..8 * 4).map(|k| (k % 4) != (k / 4) % 4 && k % 3 != 0).collect();
        let err = grad_check(
            |g, p| {
                let ws = g.param(p, "gen.att.ws");
                let wn = g.param(p, "gen.att.wn");
                let b = g.param(p, "gen.att.b");
                let w = g.param(p, "gen.att.w");
                let a = g.constant(vs.clone());
                let c = g.constant(vn.clone());
                let pp = g.matmul(a, ws);
                let pp = g.add_row(pp, b);
                let qq = g.matmul(c, wn);
                let sc = g.pair_scores(pp, qq, w, 4, 2);
                let al = g.masked_softmax(sc, &mask, 4, 2);
                let agg = g.attend(al, c, 4, 2);
                let t = g.constant(target.clone());
                let d = g.sub(agg, t);
                g.sum_squares(d)
            },
            &p,
            &GradProbe::default(),
        );
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn loss_is_zero_for_perfect_prediction() {
        // Constant trajectories and a zero state-change head predict exactly.
        let cfg = small();
        let mut p: ParamSet<f64> = cfg.init(&mut ChaCha8Rng::seed_from_u64(33)).unwrap();
        p.get_mut("gen.out.w").unwrap().fill(0.0);
        p.get_mut("gen.out.b").unwrap().fill(0.0);
        let mut case = tiny_case(34, 3, 7);
        for i in 0..3 {
            let first = case.states.slice(s![i, 0, ..]).to_owned();
            for t in 0..7 {
                case.states.slice_mut(s![i, t, ..]).assign(&first);
            }
        }
        let mut g = Graph::new();
        let l = minibatch_loss(&cfg, &mut g, &p, &[&case], &[&case.truth]);
        assert_eq!(g.scalar(l), 0.0);
    }

    fn f32_setup() -> (GeneratorConfig, ParamSet<f32>, Case) {
        let cfg = small();
        let p: ParamSet<f32> = cfg.init(&mut ChaCha8Rng::seed_from_u64(35)).unwrap();
        (cfg, p, tiny_case(36, 4, 7))
    }

    #[test]
    fn prediction_shapes_and_zero_noise_samples() {
        let (cfg, p, case) = f32_setup();
        let hist = case.states.slice(s![.., ..3, ..]).to_owned();
        let mut prov = FixedGraphs(vec![case.truth.clone()]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = predict(&cfg, &p, &hist, &mut prov, PredictionMode::Static, &mut rng);
        assert_eq!(b.samples.shape(), &[3, 4, 4, 4]);
        assert_eq!(b.samples.index_axis(Axis(0), 0), b.samples.index_axis(Axis(0), 2));
        assert_eq!(b.weights.len(), 4);
        assert_eq!(b.masks.len(), 1);
    }

    #[test]
    fn noisy_samples_differ() {
        let (mut cfg, p, case) = f32_setup();
        cfg.noise_var = [1e-4; 4];
        let hist = case.states.slice(s![.., ..3, ..]).to_owned();
        let mut prov = FixedGraphs(vec![case.truth.clone()]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = predict(&cfg, &p, &hist, &mut prov, PredictionMode::Static, &mut rng);
        assert_ne!(b.samples.index_axis(Axis(0), 0), b.samples.index_axis(Axis(0), 1));
    }

    #[test]
    fn dynamic_with_full_window_equals_static() {
        let (cfg, p, case) = f32_setup();
        let hist = case.states.slice(s![.., ..3, ..]).to_owned();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut prov = FixedGraphs(vec![case.truth.clone()]);
        let a = predict(&cfg, &p, &hist, &mut prov, PredictionMode::Static, &mut rng);
        let b = predict(&cfg, &p, &hist, &mut prov, PredictionMode::Dynamic { tau: 4 }, &mut rng);
        assert_eq!(a.samples, b.samples);
        let c = predict(&cfg, &p, &hist, &mut prov, PredictionMode::Dynamic { tau: 1 }, &mut rng);
        assert_eq!(c.masks.len(), 4);
        let d = predict(&cfg, &p, &hist, &mut prov, PredictionMode::Dynamic { tau: 3 }, &mut rng);
        assert_eq!(d.masks.len(), 2);
    }

    #[test]
    fn batched_prediction_matches_single_case() {
        let (cfg, p, case) = f32_setup();
        let other = tiny_case(37, 4, 7);
        let both = predict_static(&cfg, &p, &[&case, &other], &[case.truth.clone(), other.truth.clone()], 8);
        let single = predict_static(&cfg, &p, &[&other], std::slice::from_ref(&other.truth), 8);
        for (a, b) in both[1].iter().zip(single[0].iter()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn predictions_are_permutation_equivariant() {
        let (cfg, p, case) = f32_setup();
        let perm = [3, 1, 0, 2];
        let mut inverse = [0; 4];
        for (k, &p) in perm.iter().enumerate() {
            inverse[p] = k;
        }
        let permuted = Case {
            states: case.states.select(Axis(0), &perm),
            truth: case.truth.permuted(&inverse),
        };
        let a = predict_static(&cfg, &p, &[&case], std::slice::from_ref(&case.truth), 1);
        let b = predict_static(&cfg, &p, &[&permuted], std::slice::from_ref(&permuted.truth), 1);
        for i in 0..4 {
            for (x, y) in b[0].index_axis(Axis(0), i).iter().zip(a[0].index_axis(Axis(0), perm[i]).iter()) {
                assert!((x - y).abs() < 1e-5);
            }
        }
    }
}
