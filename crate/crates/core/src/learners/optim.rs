use ndarray::Array2;

use super::params::{Gradients, ParamSet};
use crate::error::{ensure, Result};
use crate::kv::KvDoc;

/// Adaptive-moment optimizer settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerSpec {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables it.
    pub clip_norm: f64,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        OptimizerSpec {
            learning_rate: 1e-3,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            clip_norm: 10.0,
        }
    }
}

impl OptimizerSpec {
    pub fn validate(&self) -> Result<()> {
        ensure(self.learning_rate > 0.0, || format!("learning_rate must be > 0, got {}", self.learning_rate))?;
        ensure(self.batch_size >= 1, || "batch_size must be >= 1".into())?;
        ensure((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2), || {
            "Adam betas must lie in [0, 1)".into()
        })?;
        ensure(self.weight_decay >= 0.0 && self.clip_norm >= 0.0, || {
            "weight_decay and clip_norm must be non-negative".into()
        })
    }

    pub fn to_kv(&self, prefix: &str, doc: &mut KvDoc) {
        doc.set(&format!("{prefix}.learning_rate"), self.learning_rate);
        doc.set(&format!("{prefix}.batch_size"), self.batch_size);
        doc.set(&format!("{prefix}.clip_norm"), self.clip_norm);
    }

    pub fn from_kv(prefix: &str, doc: &KvDoc) -> Result<Self> {
        Self::from_kv_or(prefix, doc, Self::default())
    }

    /// Like [`Self::from_kv`] with `d` supplying missing keys.
    pub fn from_kv_or(prefix: &str, doc: &KvDoc, d: Self) -> Result<Self> {
        let spec = OptimizerSpec {
            learning_rate: doc.parse_or(&format!("{prefix}.learning_rate"), d.learning_rate)?,
            batch_size: doc.parse_or(&format!("{prefix}.batch_size"), d.batch_size)?,
            clip_norm: doc.parse_or(&format!("{prefix}.clip_norm"), d.clip_norm)?,
            ..d
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Scales `grads` so their global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients<f32>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Adam with bias correction. Moments are kept per parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub spec: OptimizerSpec,
    pub step: u64,
    pub m: ParamSet<f32>,
    pub v: ParamSet<f32>,
}

impl Adam {
    pub fn new(spec: OptimizerSpec, params: &ParamSet<f32>) -> Self {
        Adam {
            spec,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// Applies one update. Parameters absent from `grads` are left alone.
    pub fn step(&mut self, params: &mut ParamSet<f32>, grads: &Gradients<f32>) {
        self.step += 1;
        let s = self.spec;
        let t = self.step as i32;
        let bc1 = 1.0 - s.beta1.powi(t);
        let bc2 = 1.0 - s.beta2.powi(t);
        let lr = (s.learning_rate * bc2.sqrt() / bc1) as f32;
        let (b1, b2, eps, wd) = (s.beta1 as f32, s.beta2 as f32, s.epsilon as f32, s.weight_decay as f32);
        let eps_hat = eps * (bc2.sqrt() as f32);
        for (name, g) in grads.iter() {
            let Some(p) = params.get_mut(name) else { continue };
            let m = self.m.get_mut(name).expect("moment buffer");
            let v = self.v.get_mut(name).expect("moment buffer");
            update(p, g, m, v, lr, b1, b2, eps_hat, wd);
        }
    }

    /// Moments packed as one tensor set (`m/<name>`, `v/<name>`) with the step count as version.
    pub fn to_state(&self) -> ParamSet<f32> {
        let mut out = ParamSet::new();
        for (k, t) in self.m.iter() {
            out.insert(format!("m/{k}"), t.clone()).expect("unique names");
        }
        for (k, t) in self.v.iter() {
            out.insert(format!("v/{k}"), t.clone()).expect("unique names");
        }
        out.version = self.step;
        out
    }

    pub fn from_state(spec: OptimizerSpec, state: &ParamSet<f32>) -> Self {
        let mut m = ParamSet::new();
        let mut v = ParamSet::new();
        for (k, t) in state.iter() {
            if let Some(name) = k.strip_prefix("m/") {
                m.insert(name, t.clone()).expect("unique names");
            } else if let Some(name) = k.strip_prefix("v/") {
                v.insert(name, t.clone()).expect("unique names");
            }
        }
        Adam {
            spec,
            step: state.version,
            m,
            v,
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn update(p: &mut Array2<f32>, g: &Array2<f32>, m: &mut Array2<f32>, v: &mut Array2<f32>, lr: f32, b1: f32, b2: f32, eps: f32, wd: f32) {
    ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
        let g = g + wd * *p;
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        *p -= lr * *m / (v.sqrt() + eps);
    });
}
