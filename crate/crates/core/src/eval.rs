//! Forecast and relation-recognition metrics, plus their text reports.
//!
//! Trajectory arrays follow the `[agents × steps × channels]` layout with the
//! two position coordinates in channels 0 and 1.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView3, ArrayView4, Axis};

use crate::error::{ensure, RainError, Result};
use crate::graph::RelationGraph;
use crate::kv::KvDoc;

/// Per-step mean squared position error over cases and agents.
///
/// `preds` and `truths` are `[cases × N × T_f × C]` with `C ≥ 2`.
pub fn mse_curve(preds: ArrayView4<f64>, truths: ArrayView4<f64>) -> Result<Vec<f64>> {
    ensure(preds.dim() == truths.dim(), || {
        format!("prediction {:?} and truth {:?} differ in shape", preds.dim(), truths.dim())
    })?;
    let (b, n, t, c) = preds.dim();
    ensure(c >= 2, || "need at least two position channels".into())?;
    let mut curve = vec![0.0; t];
    for k in 0..b {
        for i in 0..n {
            for (s, slot) in curve.iter_mut().enumerate() {
                let dx = preds[[k, i, s, 0]] - truths[[k, i, s, 0]];
                let dy = preds[[k, i, s, 1]] - truths[[k, i, s, 1]];
                *slot += dx * dx + dy * dy;
            }
        }
    }
    let count = (b * n).max(1) as f64;
    Ok(curve.into_iter().map(|v| v / count).collect())
}

/// Binary classification summary over directed off-diagonal edges.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelationReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
    /// False when nothing was predicted positive; precision is then reported as 0.
    pub precision_defined: bool,
}

impl RelationReport {
    pub fn from_counts(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        RelationReport {
            accuracy: ratio(tp + tn, tp + fp + tn + fn_),
            precision,
            recall,
            f1,
            tp,
            fp,
            tn,
            fn_,
            precision_defined: tp + fp > 0,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn to_kv(&self, prefix: &str, doc: &mut KvDoc) {
        doc.set(&format!("{prefix}accuracy"), self.accuracy);
        doc.set(&format!("{prefix}precision"), self.precision);
        doc.set(&format!("{prefix}recall"), self.recall);
        doc.set(&format!("{prefix}f1"), self.f1);
        doc.set(&format!("{prefix}tp"), self.tp);
        doc.set(&format!("{prefix}fp"), self.fp);
        doc.set(&format!("{prefix}tn"), self.tn);
        doc.set(&format!("{prefix}fn"), self.fn_);
        doc.set(&format!("{prefix}precision_defined"), self.precision_defined);
    }
}

/// Pools every directed off-diagonal pair of every case; an edge is the positive class.
pub fn relation_metrics(inferred: &[RelationGraph], truth: &[RelationGraph]) -> Result<RelationReport> {
    ensure(inferred.len() == truth.len(), || {
        format!("{} inferred graphs for {} cases", inferred.len(), truth.len())
    })?;
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (p, t) in inferred.iter().zip(truth) {
        ensure(p.n() == t.n(), || "graph sizes differ".into())?;
        for (i, j) in RelationGraph::directed_pairs(t.n()) {
            match (p.get(i, j), t.get(i, j)) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
                (false, true) => fn_ += 1,
            }
        }
    }
    Ok(RelationReport::from_counts(tp, fp, tn, fn_))
}

/// Position error of agent `i` in sample `k` at every step.
fn displacements(samples: &ArrayView4<f64>, truth: &ArrayView3<f64>, k: usize, i: usize) -> Vec<f64> {
    let s = samples.index_axis(Axis(0), k);
    (0..truth.shape()[1])
        .map(|step| {
            let dx = s[[i, step, 0]] - truth[[i, step, 0]];
            let dy = s[[i, step, 1]] - truth[[i, step, 1]];
            dx.hypot(dy)
        })
        .collect()
}

fn check_samples(samples: &ArrayView4<f64>, truth: &ArrayView3<f64>) -> Result<()> {
    let (k, n, t, c) = samples.dim();
    ensure(k >= 1, || "need at least one sample".into())?;
    ensure((n, t) == (truth.shape()[0], truth.shape()[1]) && c >= 2 && truth.shape()[2] >= 2, || {
        format!("samples {:?} do not match truth {:?}", samples.dim(), truth.dim())
    })
}

/// `(minADE, minFDE)` of one case: per agent the best of `K` samples, then averaged over agents.
///
/// `samples` is `[K × N × T_f × C]`, `truth` is `[N × T_f × C]`.
pub fn min_ade_fde(samples: ArrayView4<f64>, truth: ArrayView3<f64>) -> Result<(f64, f64)> {
    check_samples(&samples, &truth)?;
    let (k, n, t, _) = samples.dim();
    let (mut ade, mut fde) = (0.0, 0.0);
    for i in 0..n {
        let mut best_a = f64::INFINITY;
        let mut best_f = f64::INFINITY;
        for s in 0..k {
            let errs = displacements(&samples, &truth, s, i);
            best_a = best_a.min(errs.iter().sum::<f64>() / t as f64);
            best_f = best_f.min(errs[t - 1]);
        }
        ade += best_a;
        fde += best_f;
    }
    Ok((ade / n as f64, fde / n as f64))
}

/// Per-agent best final error over samples.
pub fn best_final_errors(samples: ArrayView4<f64>, truth: ArrayView3<f64>) -> Result<Vec<f64>> {
    check_samples(&samples, &truth)?;
    let (k, n, t, _) = samples.dim();
    Ok((0..n)
        .map(|i| {
            (0..k)
                .map(|s| displacements(&samples, &truth, s, i)[t - 1])
                .fold(f64::INFINITY, f64::min)
        })
        .collect())
}

/// Fraction of agents whose best final error exceeds `d`.
pub fn miss_rate(samples: ArrayView4<f64>, truth: ArrayView3<f64>, d: f64) -> Result<f64> {
    ensure(d > 0.0, || format!("miss threshold must be positive, got {d}"))?;
    let best = best_final_errors(samples, truth)?;
    Ok(best.iter().filter(|&&e| e > d).count() as f64 / best.len().max(1) as f64)
}

/// Two-column `step  value` table, steps counted from 1.
pub fn format_curve(header: &str, curve: &[f64]) -> String {
    let mut out = format!("step\t{header}\n");
    for (k, v) in curve.iter().enumerate() {
        let _ = writeln!(out, "{}\t{v:.9e}", k + 1);
    }
    out
}

/// Whitespace-separated matrix, one row per line.
pub fn format_grid(m: &Array2<f64>) -> String {
    let mut out = String::new();
    for row in m.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        out.push_str(&cells.join(" "));
        out.push('\n');
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| RainError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| RainError::io(path, e))
}
