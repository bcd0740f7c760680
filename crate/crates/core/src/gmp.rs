//! Graph message passing over the fully connected graph.
//!
//! Every agent's standardized history is embedded twice (self and neighbor
//! views), neighbors are aggregated with a learned softmax over all other
//! agents, and the result is encoded into one 64-wide attribute per agent.
//! The encoder is pretrained as an autoencoder and then frozen.

use ndarray::{Array2, Array3, Axis};
use rand::Rng;

use crate::batch::{fc_mask, minibatches, window_rows, Case};
use crate::error::{ensure, RainError, Result};
use crate::learners::{clip_global_norm, Adam, Graph, MlpSpec, OptimizerSpec, ParamSet, Scalar, Var};
use crate::kv::KvDoc;
use crate::rng::{indexed_substream, substream, Stream};
use crate::sim::STATE_DIM;

/// Name prefix of every encoder parameter.
pub const GMP_PREFIX: &str = "gmp.";
/// Name prefix of the auxiliary decoder used only during pretraining.
pub const DECODER_PREFIX: &str = "gmpdec.";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GmpConfig {
    pub history_steps: usize,
    /// Width of every attribute and hidden layer.
    pub hidden: usize,
    /// Affine layers per MLP.
    pub layers: usize,
}

impl Default for GmpConfig {
    fn default() -> Self {
        GmpConfig {
            history_steps: 30,
            hidden: 64,
            layers: 3,
        }
    }
}

impl GmpConfig {
    pub fn to_kv(&self, doc: &mut KvDoc) {
        doc.set("gmp.hidden", self.hidden);
        doc.set("gmp.layers", self.layers);
    }

    pub fn from_kv(doc: &KvDoc, history_steps: usize) -> Result<Self> {
        let d = GmpConfig::default();
        let cfg = GmpConfig {
            history_steps,
            hidden: doc.parse_or("gmp.hidden", d.hidden)?,
            layers: doc.parse_or("gmp.layers", d.layers)?,
        };
        ensure(cfg.hidden >= 1 && cfg.layers >= 1 && history_steps >= 1, || {
            "encoder sizes must be positive".into()
        })?;
        Ok(cfg)
    }

    pub fn input_dim(&self) -> usize {
        self.history_steps * STATE_DIM
    }

    fn embed_spec(&self) -> MlpSpec {
        MlpSpec::uniform(self.input_dim(), self.hidden, self.hidden, self.layers)
    }

    fn social_spec(&self) -> MlpSpec {
        MlpSpec::uniform(self.hidden, self.hidden, self.hidden, self.layers)
    }

    fn encode_spec(&self) -> MlpSpec {
        MlpSpec::uniform(3 * self.hidden, self.hidden, self.hidden, self.layers)
    }

    fn decoder_spec(&self) -> MlpSpec {
        MlpSpec::uniform(self.hidden, self.hidden, self.input_dim(), self.layers)
    }

    /// Fresh encoder parameters.
    pub fn init<F: Scalar>(&self, rng: &mut impl Rng) -> Result<ParamSet<F>> {
        let h = self.hidden;
        let mut p = ParamSet::new();
        self.embed_spec().init(&mut p, "gmp.fs", rng)?;
        self.embed_spec().init(&mut p, "gmp.fn", rng)?;
        // Pair scorer: relu(v_self Ws + b + v_nb Wn) · w, a two-layer MLP on the concatenation.
        p.insert_uniform("gmp.score.ws", h, h, rng)?;
        p.insert_uniform("gmp.score.wn", h, h, rng)?;
        p.insert_constant("gmp.score.b", 1, h, 0.0)?;
        p.insert_uniform("gmp.score.w", h, 1, rng)?;
        self.social_spec().init(&mut p, "gmp.fv", rng)?;
        self.encode_spec().init(&mut p, "gmp.enc", rng)?;
        // Stored as a row so the scorer can broadcast it.
        let w = p.expect("gmp.score.w").t().to_owned();
        *p.get_mut("gmp.score.w").unwrap() = w;
        Ok(p)
    }

    pub fn init_decoder<F: Scalar>(&self, rng: &mut impl Rng) -> Result<ParamSet<F>> {
        let mut p = ParamSet::new();
        self.decoder_spec().init(&mut p, "gmpdec", rng)?;
        Ok(p)
    }
}

/// Per-agent attributes produced by one encoder pass, one row per agent.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeAttributes<F = f32> {
    pub v_self: Array2<F>,
    pub v_neighbor: Array2<F>,
    pub v_social: Array2<F>,
    /// Always zero for particles; kept so the encoder input has its full width.
    pub v_context: Array2<F>,
    pub v_encoded: Array2<F>,
    /// `[B·N × N]` neighbor weights with a zero diagonal.
    pub alpha: Array2<F>,
}

/// Handles to the encoder outputs on a tape.
#[derive(Debug, Clone, Copy)]
pub struct GmpVars {
    pub v_self: Var,
    pub v_neighbor: Var,
    pub alpha: Var,
    pub v_social: Var,
    pub v_context: Var,
    pub v_encoded: Var,
}

fn embed_vars<F: Scalar>(cfg: &GmpConfig, g: &mut Graph<F>, p: &ParamSet<F>, x: Var) -> (Var, Var) {
    let spec = cfg.embed_spec();
    let fs = spec.bind(g, p, "gmp.fs");
    let fnb = spec.bind(g, p, "gmp.fn");
    (fs.apply(g, x), fnb.apply(g, x))
}

fn message_vars<F: Scalar>(cfg: &GmpConfig, g: &mut Graph<F>, p: &ParamSet<F>, vs: Var, vn: Var, group: usize) -> (Var, Var) {
    let rows = g.value(vs).nrows();
    let ws = g.param(p, "gmp.score.ws");
    let wn = g.param(p, "gmp.score.wn");
    let b = g.param(p, "gmp.score.b");
    let w = g.param(p, "gmp.score.w");
    let ps = g.matmul(vs, ws);
    let ps = g.add_row(ps, b);
    let qs = g.matmul(vn, wn);
    let scores = g.pair_scores(ps, qs, w, group, 1);
    let mask = fc_mask(group, rows / group);
    let alpha = g.masked_softmax(scores, &mask, group, 1);
    let agg = g.attend(alpha, vn, group, 1);
    let fv = cfg.social_spec().bind(g, p, "gmp.fv");
    (fv.apply(g, agg), alpha)
}

fn encode_vars<F: Scalar>(cfg: &GmpConfig, g: &mut Graph<F>, p: &ParamSet<F>, vs: Var, vsoc: Var, vctx: Var) -> Var {
    let x = g.concat(&[vs, vsoc, vctx]);
    cfg.encode_spec().bind(g, p, "gmp.enc").apply(g, x)
}

/// Records the full encoder on `g` for `[B·N × T_h·4]` histories.
pub fn gmp_vars<F: Scalar>(cfg: &GmpConfig, g: &mut Graph<F>, p: &ParamSet<F>, histories: Var, group: usize) -> GmpVars {
    let rows = g.value(histories).nrows();
    let (v_self, v_neighbor) = embed_vars(cfg, g, p, histories);
    let (v_social, alpha) = message_vars(cfg, g, p, v_self, v_neighbor, group);
    let v_context = g.zeros(rows, cfg.hidden);
    let v_encoded = encode_vars(cfg, g, p, v_self, v_social, v_context);
    GmpVars {
        v_self,
        v_neighbor,
        alpha,
        v_social,
        v_context,
        v_encoded,
    }
}

fn check_history<F>(cfg: &GmpConfig, history: &Array3<F>) -> Result<()> {
    let s = history.shape();
    ensure(s[1] == cfg.history_steps && s[2] == STATE_DIM, || {
        format!(
            "history must be [N x {} x {}], got {:?}",
            cfg.history_steps, STATE_DIM, s
        )
    })?;
    ensure(s[0] >= 1, || "history has no agents".into())
}

fn flatten<F: Scalar>(history: &Array3<F>) -> Array2<F> {
    let (n, t, c) = history.dim();
    history
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((n, t * c))
        .expect("contiguous")
}

/// Self and neighbor embeddings of one case's `[N × T_h × 4]` history.
pub fn embed_nodes<F: Scalar>(cfg: &GmpConfig, history: &Array3<F>, params: &ParamSet<F>) -> Result<(Array2<F>, Array2<F>)> {
    check_history(cfg, history)?;
    let mut g = Graph::new();
    let x = g.constant(flatten(history));
    let (a, b) = embed_vars(cfg, &mut g, params, x);
    Ok((g.value(a).clone(), g.value(b).clone()))
}

/// Social aggregate and neighbor weights for one case.
pub fn message_pass<F: Scalar>(
    cfg: &GmpConfig,
    v_self: &Array2<F>,
    v_neighbor: &Array2<F>,
    params: &ParamSet<F>,
) -> Result<(Array2<F>, Array2<F>)> {
    ensure(v_self.dim() == v_neighbor.dim() && v_self.ncols() == cfg.hidden, || {
        "attribute shapes disagree".into()
    })?;
    let n = v_self.nrows();
    let mut g = Graph::new();
    let vs = g.constant(v_self.clone());
    let vn = g.constant(v_neighbor.clone());
    let (soc, alpha) = message_vars(cfg, &mut g, params, vs, vn, n);
    Ok((g.value(soc).clone(), g.value(alpha).clone()))
}

pub fn encode<F: Scalar>(
    cfg: &GmpConfig,
    v_self: &Array2<F>,
    v_social: &Array2<F>,
    v_context: &Array2<F>,
    params: &ParamSet<F>,
) -> Result<Array2<F>> {
    ensure(
        v_self.dim() == v_social.dim() && v_self.dim() == v_context.dim() && v_self.ncols() == cfg.hidden,
        || "attribute shapes disagree".into(),
    )?;
    let mut g = Graph::new();
    let a = g.constant(v_self.clone());
    let b = g.constant(v_social.clone());
    let c = g.constant(v_context.clone());
    let e = encode_vars(cfg, &mut g, params, a, b, c);
    Ok(g.value(e).clone())
}

/// Full encoder pass over a stack of cases sharing the agent count.
pub fn encode_cases(cfg: &GmpConfig, cases: &[&Case], params: &ParamSet<f32>) -> NodeAttributes<f32> {
    encode_window(cfg, cases, 0, params)
}

/// Encoder pass over the `T_h` frames starting at `start`.
pub fn encode_window(cfg: &GmpConfig, cases: &[&Case], start: usize, params: &ParamSet<f32>) -> NodeAttributes<f32> {
    let n = cases[0].n_agents();
    let mut g = Graph::new();
    let x = g.constant(window_rows(cases, start, cfg.history_steps));
    let v = gmp_vars(cfg, &mut g, params, x, n);
    NodeAttributes {
        v_self: g.value(v.v_self).clone(),
        v_neighbor: g.value(v.v_neighbor).clone(),
        v_social: g.value(v.v_social).clone(),
        v_context: g.value(v.v_context).clone(),
        v_encoded: g.value(v.v_encoded).clone(),
        alpha: g.value(v.alpha).clone(),
    }
}

/// Records the reconstruction loss `(1/(B·N·T_h)) Σ ‖x − x̂‖²` on `g`.
pub fn reconstruction_loss<F: Scalar>(
    cfg: &GmpConfig,
    g: &mut Graph<F>,
    params: &ParamSet<F>,
    histories: Array2<F>,
    group: usize,
) -> Var {
    let rows = histories.nrows();
    let x = g.constant(histories);
    let v = gmp_vars(cfg, g, params, x, group);
    let dec = cfg.decoder_spec().bind(g, params, "gmpdec");
    let xhat = dec.apply(g, v.v_encoded);
    let d = g.sub(xhat, x);
    let ss = g.sum_squares(d);
    g.scale(ss, 1.0 / (rows * cfg.history_steps) as f64)
}

/// Outcome of autoencoder pretraining.
#[derive(Debug, Clone)]
pub struct GmpPretraining {
    /// Encoder parameters only; the decoder is discarded by callers.
    pub encoder: ParamSet<f32>,
    pub decoder: ParamSet<f32>,
    /// Training-split loss before the first update.
    pub initial_loss: f64,
    /// Mean minibatch loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Mean reconstruction loss of `params` (encoder and decoder) over `cases`.
pub fn evaluate_reconstruction(cfg: &GmpConfig, cases: &[Case], params: &ParamSet<f32>, batch: usize) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in cases.chunks(batch.max(1)) {
        let refs: Vec<&Case> = chunk.iter().collect();
        let mut g = Graph::new();
        let l = reconstruction_loss(cfg, &mut g, params, window_rows(&refs, 0, cfg.history_steps), refs[0].n_agents());
        total += g.scalar(l) as f64 * chunk.len() as f64;
        count += chunk.len();
    }
    total / count.max(1) as f64
}

/// Trains encoder and decoder to reconstruct the standardized history.
pub fn pretrain_autoencoder(
    cfg: &GmpConfig,
    cases: &[Case],
    encoder: ParamSet<f32>,
    optimizer: OptimizerSpec,
    epochs: usize,
    seed: u64,
) -> Result<GmpPretraining> {
    ensure(!cases.is_empty(), || "no training cases for the encoder".into())?;
    optimizer.validate()?;
    let mut init_rng = substream(seed ^ 0x6d70, Stream::Init);
    let mut params = encoder;
    params.extend_from(&cfg.init_decoder(&mut init_rng)?, DECODER_PREFIX)?;
    let initial_loss = evaluate_reconstruction(cfg, cases, &params, 64);
    let mut opt = Adam::new(optimizer, &params);
    let mut epoch_losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut rng = indexed_substream(seed, Stream::Training, 0x6d70_0000 + epoch as u64);
        let mut sum = 0.0;
        let batches = minibatches(cases.len(), optimizer.batch_size, &mut rng);
        for idx in &batches {
            let refs: Vec<&Case> = idx.iter().map(|&k| &cases[k]).collect();
            let mut g = Graph::new();
            let l = reconstruction_loss(cfg, &mut g, &params, window_rows(&refs, 0, cfg.history_steps), refs[0].n_agents());
            let loss = g.scalar(l) as f64;
            if !loss.is_finite() {
                return Err(RainError::Divergence(format!(
                    "encoder reconstruction loss became {loss} in epoch {epoch}"
                )));
            }
            let mut grads = g.backward(l);
            clip_global_norm(&mut grads, optimizer.clip_norm);
            opt.step(&mut params, &grads);
            sum += loss;
        }
        let mean = sum / batches.len() as f64;
        log::debug!("encoder pretraining epoch {epoch}: loss {mean:.5}");
        epoch_losses.push(mean);
    }
    Ok(GmpPretraining {
        encoder: params.filtered(GMP_PREFIX),
        decoder: params.filtered(DECODER_PREFIX),
        initial_loss,
        epoch_losses,
    })
}

/// Row-stochastic check helper: sums of each attention row.
pub fn alpha_row_sums<F: Scalar>(alpha: &Array2<F>) -> Vec<f64> {
    alpha.sum_axis(Axis(1)).iter().map(|x| x.as_f64()).collect()
}
