//! Standardized cases and the row layout shared by every learned module.
//!
//! A minibatch of `B` cases with `N` agents each is stacked case-major: row
//! `b·N + i` holds agent `i` of case `b`.

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::graph::RelationGraph;
use crate::learners::Scalar;
use crate::sim::{Standardizer, TrajectorySample, STATE_DIM};

/// One case in standardized units, ready for the networks.
#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    /// `[N × T × 4]` standardized states.
    pub states: Array3<f32>,
    pub truth: RelationGraph,
}

impl Case {
    pub fn from_sample(sample: &TrajectorySample, standardizer: &Standardizer) -> Self {
        Case {
            states: standardizer.apply(&sample.states).mapv(|x| x as f32),
            truth: sample.truth_graph.clone(),
        }
    }

    pub fn n_agents(&self) -> usize {
        self.states.shape()[0]
    }

    pub fn n_steps(&self) -> usize {
        self.states.shape()[1]
    }
}

pub fn prepare_cases(samples: &[TrajectorySample], standardizer: &Standardizer) -> Vec<Case> {
    samples.iter().map(|s| Case::from_sample(s, standardizer)).collect()
}

/// Frames `start..start+len` of every agent flattened to `[B·N × len·4]`.
pub fn window_rows<F: Scalar>(cases: &[&Case], start: usize, len: usize) -> Array2<F> {
    let n = cases[0].n_agents();
    let mut out = Array2::zeros((cases.len() * n, len * STATE_DIM));
    for (b, case) in cases.iter().enumerate() {
        for i in 0..n {
            let mut row = out.row_mut(b * n + i);
            for t in 0..len {
                for c in 0..STATE_DIM {
                    row[t * STATE_DIM + c] = F::of(case.states[[i, start + t, c]] as f64);
                }
            }
        }
    }
    out
}

/// Frame `t` of every agent as `[B·N × 4]`.
pub fn frame_rows<F: Scalar>(cases: &[&Case], t: usize) -> Array2<F> {
    window_rows(cases, t, 1)
}

/// Attention mask for a stack of graphs: entry `(b·N + i)·N + j` allows `i` to attend to `j`.
pub fn graph_mask(graphs: &[&RelationGraph]) -> Vec<bool> {
    let mut mask = Vec::new();
    for g in graphs {
        mask.extend_from_slice(g.as_slice());
    }
    mask
}

/// Mask of `batch` fully connected graphs over `n` agents.
pub fn fc_mask(n: usize, batch: usize) -> Vec<bool> {
    let fc = RelationGraph::fully_connected(n);
    graph_mask(&vec![&fc; batch])
}

/// Shuffled index minibatches covering `0..n`; the last one may be short.
pub fn minibatches(n: usize, batch: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
}
