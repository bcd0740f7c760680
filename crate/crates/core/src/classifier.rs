//! Supervised edge classifier on frozen node encodings.
//!
//! An upper-bound reference for relation recognition: an MLP reads the two
//! endpoint encodings of a directed edge and predicts whether the edge exists.

use ndarray::Array2;
use rand::Rng;

use crate::batch::minibatches;
use crate::error::{ensure, RainError, Result};
use crate::graph::RelationGraph;
use crate::learners::{clip_global_norm, mlp_forward, Adam, Graph, MlpSpec, OptimizerSpec, ParamSet, Scalar, Var};
use crate::rl::CaseFeatures;
use crate::rng::{indexed_substream, Stream};

pub const CLASSIFIER_PREFIX: &str = "cls";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifierConfig {
    pub hidden: usize,
    pub layers: usize,
    pub epochs: usize,
    pub optimizer: OptimizerSpec,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            hidden: 128,
            layers: 3,
            epochs: 100,
            optimizer: OptimizerSpec::default(),
        }
    }
}

impl ClassifierConfig {
    pub fn spec(&self, feature_dim: usize) -> MlpSpec {
        MlpSpec::uniform(2 * feature_dim, self.hidden, 1, self.layers)
    }

    pub fn init(&self, feature_dim: usize, rng: &mut impl Rng) -> Result<ParamSet<f32>> {
        let mut p = ParamSet::new();
        self.spec(feature_dim).init(&mut p, CLASSIFIER_PREFIX, rng)?;
        Ok(p)
    }
}

/// `[v_i, v_j]` rows for every directed edge of every case, with `{0,1}` labels.
pub fn edge_rows<F: Scalar>(features: &[&CaseFeatures], truth: &[&RelationGraph]) -> (Array2<F>, Array2<F>) {
    let d = features.first().map_or(0, |f| f.ncols());
    let edges: usize = truth.iter().map(|g| g.n() * (g.n() - 1)).sum();
    let mut x = Array2::zeros((edges, 2 * d));
    let mut y = Array2::zeros((edges, 1));
    let mut r = 0;
    for (f, g) in features.iter().zip(truth) {
        for (i, j) in RelationGraph::directed_pairs(g.n()) {
            for c in 0..d {
                x[[r, c]] = F::of(f[[i, c]] as f64);
                x[[r, d + c]] = F::of(f[[j, c]] as f64);
            }
            y[[r, 0]] = if g.get(i, j) { F::one() } else { F::zero() };
            r += 1;
        }
    }
    (x, y)
}

/// Mean binary cross-entropy of the classifier on `rows`, recorded on `g`.
pub fn bce_loss<F: Scalar>(spec: &MlpSpec, g: &mut Graph<F>, params: &ParamSet<F>, rows: Array2<F>, labels: Array2<F>) -> Var {
    let n = rows.nrows();
    let m = spec.bind(g, params, CLASSIFIER_PREFIX);
    let x = g.constant(rows);
    let logits = m.apply(g, x);
    let l = g.bce_with_logits(logits, labels);
    g.scale(l, 1.0 / n.max(1) as f64)
}

#[derive(Debug, Clone)]
pub struct ClassifierTraining {
    pub params: ParamSet<f32>,
    pub epoch_losses: Vec<f64>,
}

/// Fits the classifier; minibatches hold every edge of `batch_size` cases.
pub fn train_classifier(
    cfg: &ClassifierConfig,
    features: &[CaseFeatures],
    truth: &[RelationGraph],
    seed: u64,
) -> Result<ClassifierTraining> {
    ensure(!features.is_empty() && features.len() == truth.len(), || {
        "classifier needs one truth graph per feature block".into()
    })?;
    cfg.optimizer.validate()?;
    let d = features[0].ncols();
    let spec = cfg.spec(d);
    let mut params = cfg.init(d, &mut indexed_substream(seed, Stream::Init, 0x636c_0000))?;
    let mut opt = Adam::new(cfg.optimizer, &params);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = indexed_substream(seed, Stream::Training, 0x636c_0000 + epoch as u64);
        let batches = minibatches(features.len(), cfg.optimizer.batch_size, &mut rng);
        let mut sum = 0.0;
        for idx in &batches {
            let f: Vec<&CaseFeatures> = idx.iter().map(|&k| &features[k]).collect();
            let t: Vec<&RelationGraph> = idx.iter().map(|&k| &truth[k]).collect();
            let (x, y) = edge_rows(&f, &t);
            let mut g = Graph::new();
            let l = bce_loss(&spec, &mut g, &params, x, y);
            let loss = g.scalar(l) as f64;
            if !loss.is_finite() {
                return Err(RainError::Divergence(format!("classifier loss became {loss}")));
            }
            let mut grads = g.backward(l);
            clip_global_norm(&mut grads, cfg.optimizer.clip_norm);
            opt.step(&mut params, &grads);
            sum += loss;
        }
        epoch_losses.push(sum / batches.len() as f64);
    }
    Ok(ClassifierTraining { params, epoch_losses })
}

/// Edges whose logit is positive.
pub fn classify(cfg: &ClassifierConfig, params: &ParamSet<f32>, features: &CaseFeatures) -> Result<RelationGraph> {
    let n = features.nrows();
    let spec = cfg.spec(features.ncols());
    let dummy = RelationGraph::empty(n);
    let (x, _) = edge_rows::<f32>(&[features], &[&dummy]);
    let logits = mlp_forward(params, CLASSIFIER_PREFIX, &spec, &x)?;
    let mut g = RelationGraph::empty(n);
    for ((i, j), l) in RelationGraph::directed_pairs(n).zip(logits.iter()) {
        g.set(i, j, *l > 0.0);
    }
    Ok(g)
}
