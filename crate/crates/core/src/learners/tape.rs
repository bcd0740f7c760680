//! Reverse-mode tape over 2-D arrays.
//!
//! Rows index batch items (agents of every case in a minibatch, stacked
//! case-major) and columns index features. Graph-attention ops take a
//! `group` size: rows `b*group .. (b+1)*group` belong to case `b` and only
//! interact with each other.

use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use super::params::{Gradients, ParamSet};
use super::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<F> {
    Constant,
    Param(String),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Concat(Vec<Var>),
    SliceCols(Var, usize, usize),
    /// `[σ(i), σ(f), tanh(g), σ(o)]` over four equal column blocks.
    LstmGates(Var),
    /// `c = f ⊙ c_prev + i ⊙ g` from activated gates.
    LstmCell(Var, Var),
    /// `h = o ⊙ tanh(c)` from activated gates.
    /// Keeps `tanh(c)` for the backward pass.
    LstmHidden(Var, Var, Array2<F>),
    /// `Σ_k x_k W_k + b` with a broadcast bias row.
    Affine(Vec<(Var, Var)>, Var),
    PairScores {
        p: Var,
        q: Var,
        w: Var,
        group: usize,
        heads: usize,
    },
    /// Disallowed entries come out exactly zero, so their gradient vanishes
    /// without consulting the mask again.
    MaskedSoftmax {
        scores: Var,
        group: usize,
        heads: usize,
    },
    Attend {
        weights: Var,
        values: Var,
        group: usize,
        heads: usize,
    },
    Sum(Var),
    SumSquares(Var),
    BceWithLogits(Var, Array2<F>),
    GatherCols(Var, Vec<usize>),
}

struct Node<F> {
    value: Arc<Array2<F>>,
    op: Op<F>,
    needs_grad: bool,
}

/// A forward computation recorded for differentiation.
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// `tanh` through a single exponential, `2σ(2x) − 1`; absolute error stays at rounding level.
fn tanh<F: Scalar>(x: F) -> F {
    let two = F::one() + F::one();
    two / (F::one() + (-two * x).exp()) - F::one()
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<F> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> F {
        let a = self.value(v);
        debug_assert_eq!(a.dim(), (1, 1));
        a[[0, 0]]
    }

    fn push(&mut self, value: Array2<F>, op: Op<F>, needs_grad: bool) -> Var {
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().into_owned()
        };
        self.push_shared(Arc::new(value), op, needs_grad)
    }

    fn push_shared(&mut self, value: Arc<Array2<F>>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Array2<F>) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.constant(Array2::zeros((rows, cols)))
    }

    /// Records a named parameter; its gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, params: &ParamSet<F>, name: &str) -> Var {
        let value = params
            .shared(name)
            .unwrap_or_else(|| panic!("parameter {name:?} not present"));
        let value = if value.is_standard_layout() {
            value
        } else {
            Arc::new(value.as_standard_layout().into_owned())
        };
        self.push_shared(value, Op::Param(name.to_string()), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    /// `a + bias` with a `1 × c` bias broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        assert_eq!(self.value(bias).nrows(), 1, "bias must be a single row");
        let v = self.value(a) + self.value(bias);
        let ng = self.ng(a) || self.ng(bias);
        self.push(v, Op::AddRow(a, bias), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = F::of(s);
        let v = self.value(a).mapv(|x| x * s);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(F::zero()));
        let ng = self.ng(a);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        let ng = self.ng(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(tanh);
        let ng = self.ng(a);
        self.push(v, Op::Tanh(a), ng)
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<F>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat rows must agree");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::Concat(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        let ng = self.ng(a);
        self.push(v, Op::SliceCols(a, start, end), ng)
    }

    /// `Σ_k x_k W_k + b`, one node for what would otherwise be several.
    pub fn affine(&mut self, terms: &[(Var, Var)], bias: Var) -> Var {
        let mut v = self.value(terms[0].0).dot(self.value(terms[0].1));
        for &(x, w) in &terms[1..] {
            ndarray::linalg::general_mat_mul(F::one(), self.value(x), self.value(w), F::one(), &mut v);
        }
        v += self.value(bias);
        let ng = self.ng(bias) || terms.iter().any(|&(x, w)| self.ng(x) || self.ng(w));
        self.push(v, Op::Affine(terms.to_vec(), bias), ng)
    }

    pub fn lstm_gates(&mut self, pre: Var) -> Var {
        let x = self.value(pre);
        let h = x.ncols() / 4;
        let mut v = x.clone();
        for row in v.as_slice_mut().unwrap().chunks_exact_mut(4 * h) {
            let (sig, rest) = row.split_at_mut(2 * h);
            let (cand, out) = rest.split_at_mut(h);
            for e in sig.iter_mut().chain(out.iter_mut()) {
                *e = sigmoid(*e);
            }
            for e in cand.iter_mut() {
                *e = tanh(*e);
            }
        }
        let ng = self.ng(pre);
        self.push(v, Op::LstmGates(pre), ng)
    }

    pub fn lstm_cell(&mut self, gates: Var, c_prev: Var) -> Var {
        let a = self.value(gates);
        let h = a.ncols() / 4;
        let i = a.slice(s![.., 0..h]);
        let f = a.slice(s![.., h..2 * h]);
        let g = a.slice(s![.., 2 * h..3 * h]);
        let mut v = &f * self.value(c_prev);
        Zip::from(&mut v).and(&i).and(&g).for_each(|c, &i, &g| *c += i * g);
        let ng = self.ng(gates) || self.ng(c_prev);
        self.push(v, Op::LstmCell(gates, c_prev), ng)
    }

    pub fn lstm_hidden(&mut self, gates: Var, cell: Var) -> Var {
        let a = self.value(gates);
        let h = a.ncols() / 4;
        let o = a.slice(s![.., 3 * h..4 * h]);
        let tc = self.value(cell).mapv(tanh);
        let v = &tc * &o;
        let ng = self.ng(gates) || self.ng(cell);
        self.push(v, Op::LstmHidden(gates, cell, tc), ng)
    }

    /// Pairwise two-layer scores inside each case.
    ///
    /// With `p`, `q` of shape `[R × heads·d]` and `w` of shape `[1 × heads·d]`,
    /// returns `[R × heads·group]` where entry `(r=b·group+i, h·group+j)` is
    /// `Σ_k w[h,k]·relu(p[r,h,k] + q[b·group+j,h,k])`. Diagonal entries are
    /// left at zero.
    pub fn pair_scores(&mut self, p: Var, q: Var, w: Var, group: usize, heads: usize) -> Var {
        let pv = self.value(p);
        let qv = self.value(q);
        let wv = self.value(w);
        let rows = pv.nrows();
        let width = pv.ncols();
        assert_eq!(qv.dim(), (rows, width));
        assert_eq!(wv.dim(), (1, width));
        assert_eq!(rows % group, 0);
        assert_eq!(width % heads, 0);
        let d = width / heads;
        let ps = pv.as_slice().unwrap();
        let qs = qv.as_slice().unwrap();
        let ws = wv.as_slice().unwrap();
        let mut out = Array2::zeros((rows, heads * group));
        {
            let os = out.as_slice_mut().unwrap();
            for r in 0..rows {
                let base = r - r % group;
                let i = r % group;
                for h in 0..heads {
                    let prow = &ps[r * width + h * d..r * width + (h + 1) * d];
                    let wrow = &ws[h * d..(h + 1) * d];
                    for j in 0..group {
                        if j == i {
                            continue;
                        }
                        let qrow = &qs[(base + j) * width + h * d..(base + j) * width + (h + 1) * d];
                        let mut acc = F::zero();
                        for k in 0..d {
                            let z = prow[k] + qrow[k];
                            if z > F::zero() {
                                acc += wrow[k] * z;
                            }
                        }
                        os[r * heads * group + h * group + j] = acc;
                    }
                }
            }
        }
        let ng = self.ng(p) || self.ng(q) || self.ng(w);
        self.push(
            out,
            Op::PairScores {
                p,
                q,
                w,
                group,
                heads,
            },
            ng,
        )
    }

    /// Softmax over the allowed neighbors of each row, per head.
    ///
    /// `mask[r·group + j]` allows column `j` for row `r`. Disallowed entries
    /// get weight exactly zero; a row with no allowed entry is all zero.
    pub fn masked_softmax(&mut self, scores: Var, mask: &[bool], group: usize, heads: usize) -> Var {
        let sv = self.value(scores);
        let rows = sv.nrows();
        assert_eq!(sv.ncols(), heads * group);
        assert_eq!(mask.len(), rows * group);
        let ss = sv.as_slice().unwrap();
        let mut out = Array2::zeros((rows, heads * group));
        {
            let os = out.as_slice_mut().unwrap();
            for r in 0..rows {
                let m = &mask[r * group..(r + 1) * group];
                if !m.iter().any(|&x| x) {
                    continue;
                }
                for h in 0..heads {
                    let off = r * heads * group + h * group;
                    let mut mx = F::neg_infinity();
                    for j in 0..group {
                        if m[j] {
                            mx = mx.max(ss[off + j]);
                        }
                    }
                    let mut total = F::zero();
                    for j in 0..group {
                        if m[j] {
                            let e = (ss[off + j] - mx).exp();
                            os[off + j] = e;
                            total += e;
                        }
                    }
                    for j in 0..group {
                        os[off + j] = os[off + j] / total;
                    }
                }
            }
        }
        let ng = self.ng(scores);
        self.push(
            out,
            Op::MaskedSoftmax { scores, group, heads },
            ng,
        )
    }

    /// Head-averaged weighted sum of neighbor values inside each case.
    pub fn attend(&mut self, weights: Var, values: Var, group: usize, heads: usize) -> Var {
        let combined = combine_heads(self.value(weights), group, heads);
        let vv = self.value(values);
        let rows = vv.nrows();
        let mut out = Array2::zeros((rows, vv.ncols()));
        for b in 0..rows / group {
            let wblock = combined.slice(s![b * group..(b + 1) * group, ..]);
            let vblock = vv.slice(s![b * group..(b + 1) * group, ..]);
            out.slice_mut(s![b * group..(b + 1) * group, ..])
                .assign(&wblock.dot(&vblock));
        }
        let ng = self.ng(weights) || self.ng(values);
        self.push(
            out,
            Op::Attend {
                weights,
                values,
                group,
                heads,
            },
            ng,
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Array2::from_elem((1, 1), total), Op::Sum(a), ng)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let total = self.value(a).iter().map(|&x| x * x).sum();
        let ng = self.ng(a);
        self.push(Array2::from_elem((1, 1), total), Op::SumSquares(a), ng)
    }

    /// Summed binary cross-entropy of logits against `{0,1}` targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Array2<F>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.dim(), targets.dim());
        let mut total = F::zero();
        Zip::from(lv).and(&targets).for_each(|&x, &y| {
            // max(x,0) - x·y + log(1 + e^{-|x|})
            total += x.max(F::zero()) - x * y + (F::one() + (-x.abs()).exp()).ln();
        });
        let ng = self.ng(logits);
        self.push(Array2::from_elem((1, 1), total), Op::BceWithLogits(logits, targets), ng)
    }

    /// Picks column `idx[r]` from row `r`, giving `[R × 1]`.
    pub fn gather_cols(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let av = self.value(a);
        assert_eq!(av.nrows(), idx.len());
        let v = Array2::from_shape_fn((idx.len(), 1), |(r, _)| av[[r, idx[r]]]);
        let ng = self.ng(a);
        self.push(v, Op::GatherCols(a, idx), ng)
    }

    /// Gradients of the scalar `loss` with respect to every parameter node.
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        let adj = self.adjoints(loss);
        let mut out = Gradients::default();
        for (k, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(name), Some(g)) = (&node.op, &adj[k]) {
                out.accumulate(name, g);
            }
        }
        out
    }

    /// Adjoint of every node with respect to `loss`; `None` where unreachable.
    pub fn adjoints(&self, loss: Var) -> Vec<Option<Array2<F>>> {
        assert_eq!(self.value(loss).dim(), (1, 1), "loss must be a scalar node");
        let mut grads: Vec<Option<Array2<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::from_elem((1, 1), F::one()));
        for k in (0..=loss.0).rev() {
            if !self.nodes[k].needs_grad {
                continue;
            }
            let Some(g) = grads[k].take() else { continue };
            self.propagate(k, &g, &mut grads);
            grads[k] = Some(g);
        }
        grads
    }

    fn propagate(&self, k: usize, g: &Array2<F>, grads: &mut [Option<Array2<F>>]) {
        let node = &self.nodes[k];
        let mut acc = |v: Var, d: Array2<F>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(x) => *x += &d,
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.dot(&self.value(*b).t()));
                }
                if self.ng(*b) {
                    acc(*b, self.value(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, bias) => {
                acc(*a, g.clone());
                if self.ng(*bias) {
                    acc(*bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                if self.ng(*b) {
                    acc(*b, g.mapv(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g * self.value(*b));
                }
                if self.ng(*b) {
                    acc(*b, g * self.value(*a));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                acc(*a, g.mapv(|x| x * s));
            }
            Op::Relu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(&*node.value)
                    .for_each(|d, &y| {
                        if y <= F::zero() {
                            *d = F::zero();
                        }
                    });
                acc(*a, d);
            }
            Op::Sigmoid(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(&*node.value)
                    .for_each(|d, &y| *d *= y * (F::one() - y));
                acc(*a, d);
            }
            Op::Tanh(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(&*node.value)
                    .for_each(|d, &y| *d *= F::one() - y * y);
                acc(*a, d);
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).ncols();
                    if self.ng(p) {
                        acc(p, g.slice(s![.., start..start + w]).to_owned());
                    }
                    start += w;
                }
            }
            Op::SliceCols(a, start, end) => {
                let mut d = Array2::zeros(self.value(*a).raw_dim());
                d.slice_mut(s![.., *start..*end]).assign(g);
                acc(*a, d);
            }
            Op::LstmGates(pre) => {
                let h = g.ncols() / 4;
                let mut d = g.clone();
                let ys = node.value.as_slice().unwrap();
                for (drow, yrow) in d.as_slice_mut().unwrap().chunks_exact_mut(4 * h).zip(ys.chunks_exact(4 * h)) {
                    for (k, (dv, &y)) in drow.iter_mut().zip(yrow).enumerate() {
                        let cand = k >= 2 * h && k < 3 * h;
                        *dv *= if cand { F::one() - y * y } else { y * (F::one() - y) };
                    }
                }
                acc(*pre, d);
            }
            Op::Affine(terms, bias) => {
                for &(x, w) in terms {
                    if self.ng(x) {
                        acc(x, g.dot(&self.value(w).t()));
                    }
                    if self.ng(w) {
                        acc(w, self.value(x).t().dot(g));
                    }
                }
                if self.ng(*bias) {
                    acc(*bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::LstmCell(gates, c_prev) => {
                let a = self.value(*gates);
                let h = a.ncols() / 4;
                if self.ng(*gates) {
                    let mut d = Array2::zeros(a.raw_dim());
                    let cp = self.value(*c_prev);
                    // di = g·dc, df = c_prev·dc, dg = i·dc
                    Zip::from(d.slice_mut(s![.., 0..h]))
                        .and(g)
                        .and(a.slice(s![.., 2 * h..3 * h]))
                        .for_each(|d, &dc, &gg| *d = dc * gg);
                    Zip::from(d.slice_mut(s![.., h..2 * h]))
                        .and(g)
                        .and(cp)
                        .for_each(|d, &dc, &c| *d = dc * c);
                    Zip::from(d.slice_mut(s![.., 2 * h..3 * h]))
                        .and(g)
                        .and(a.slice(s![.., 0..h]))
                        .for_each(|d, &dc, &i| *d = dc * i);
                    acc(*gates, d);
                }
                if self.ng(*c_prev) {
                    acc(*c_prev, g * &a.slice(s![.., h..2 * h]));
                }
            }
            Op::LstmHidden(gates, cell, tc) => {
                let a = self.value(*gates);
                let h = a.ncols() / 4;
                if self.ng(*gates) {
                    let mut d = Array2::zeros(a.raw_dim());
                    Zip::from(d.slice_mut(s![.., 3 * h..4 * h]))
                        .and(g)
                        .and(tc)
                        .for_each(|d, &dh, &t| *d = dh * t);
                    acc(*gates, d);
                }
                if self.ng(*cell) {
                    let mut d = g.clone();
                    Zip::from(&mut d)
                        .and(a.slice(s![.., 3 * h..4 * h]))
                        .and(tc)
                        .for_each(|d, &o, &t| *d *= o * (F::one() - t * t));
                    acc(*cell, d);
                }
            }
            Op::PairScores {
                p,
                q,
                w,
                group,
                heads,
            } => {
                let (group, heads) = (*group, *heads);
                let pv = self.value(*p);
                let qv = self.value(*q);
                let wv = self.value(*w);
                let rows = pv.nrows();
                let width = pv.ncols();
                let d = width / heads;
                let ps = pv.as_slice().unwrap();
                let qs = qv.as_slice().unwrap();
                let ws = wv.as_slice().unwrap();
                let gs = g.as_slice().unwrap();
                let mut dp = Array2::<F>::zeros((rows, width));
                let mut dq = Array2::<F>::zeros((rows, width));
                let mut dw = Array2::<F>::zeros((1, width));
                {
                    let dps = dp.as_slice_mut().unwrap();
                    let dqs = dq.as_slice_mut().unwrap();
                    let dws = dw.as_slice_mut().unwrap();
                    for r in 0..rows {
                        let base = r - r % group;
                        let i = r % group;
                        for h in 0..heads {
                            for j in 0..group {
                                if j == i {
                                    continue;
                                }
                                let gval = gs[r * heads * group + h * group + j];
                                if gval == F::zero() {
                                    continue;
                                }
                                let po = r * width + h * d;
                                let qo = (base + j) * width + h * d;
                                for k in 0..d {
                                    let z = ps[po + k] + qs[qo + k];
                                    if z > F::zero() {
                                        let t = gval * ws[h * d + k];
                                        dps[po + k] += t;
                                        dqs[qo + k] += t;
                                        dws[h * d + k] += gval * z;
                                    }
                                }
                            }
                        }
                    }
                }
                acc(*p, dp);
                acc(*q, dq);
                acc(*w, dw);
            }
            Op::MaskedSoftmax { scores, group, heads } => {
                let (group, heads) = (*group, *heads);
                let a = &*node.value;
                let rows = a.nrows();
                let as_ = a.as_slice().unwrap();
                let gs = g.as_slice().unwrap();
                let mut d = Array2::<F>::zeros(a.raw_dim());
                {
                    let ds = d.as_slice_mut().unwrap();
                    for r in 0..rows {
                        for h in 0..heads {
                            let off = r * heads * group + h * group;
                            let mut dot = F::zero();
                            for j in 0..group {
                                dot += as_[off + j] * gs[off + j];
                            }
                            for j in 0..group {
                                ds[off + j] = as_[off + j] * (gs[off + j] - dot);
                            }
                        }
                    }
                }
                acc(*scores, d);
            }
            Op::Attend {
                weights,
                values,
                group,
                heads,
            } => {
                let (group, heads) = (*group, *heads);
                let wv = self.value(*weights);
                let vv = self.value(*values);
                let rows = vv.nrows();
                if self.ng(*weights) {
                    // d combined[r, j] = g[r]·v[b·group + j], shared by all heads.
                    let mut dw = Array2::<F>::zeros(wv.raw_dim());
                    let inv = F::one() / F::of(heads as f64);
                    for b in 0..rows / group {
                        let gblock = g.slice(s![b * group..(b + 1) * group, ..]);
                        let vblock = vv.slice(s![b * group..(b + 1) * group, ..]);
                        let dc = gblock.dot(&vblock.t());
                        for i in 0..group {
                            for h in 0..heads {
                                for j in 0..group {
                                    dw[[b * group + i, h * group + j]] = dc[[i, j]] * inv;
                                }
                            }
                        }
                    }
                    acc(*weights, dw);
                }
                if self.ng(*values) {
                    let combined = combine_heads(wv, group, heads);
                    let mut dv = Array2::<F>::zeros(vv.raw_dim());
                    for b in 0..rows / group {
                        let cblock = combined.slice(s![b * group..(b + 1) * group, ..]);
                        let gblock = g.slice(s![b * group..(b + 1) * group, ..]);
                        dv.slice_mut(s![b * group..(b + 1) * group, ..])
                            .assign(&cblock.t().dot(&gblock));
                    }
                    acc(*values, dv);
                }
            }
            Op::Sum(a) => {
                let gv = g[[0, 0]];
                acc(*a, Array2::from_elem(self.value(*a).raw_dim(), gv));
            }
            Op::SumSquares(a) => {
                let two = F::of(2.0) * g[[0, 0]];
                acc(*a, self.value(*a).mapv(|x| two * x));
            }
            Op::BceWithLogits(a, targets) => {
                let gv = g[[0, 0]];
                let mut d = self.value(*a).mapv(sigmoid);
                d -= targets;
                d.mapv_inplace(|x| x * gv);
                acc(*a, d);
            }
            Op::GatherCols(a, idx) => {
                let mut d = Array2::zeros(self.value(*a).raw_dim());
                for (r, &c) in idx.iter().enumerate() {
                    d[[r, c]] = g[[r, 0]];
                }
                acc(*a, d);
            }
        }
    }
}

/// `[R × group]` head-averaged weights from `[R × heads·group]`.
fn combine_heads<F: Scalar>(w: &Array2<F>, group: usize, heads: usize) -> Array2<F> {
    let rows = w.nrows();
    let inv = F::one() / F::of(heads as f64);
    Array2::from_shape_fn((rows, group), |(r, j)| {
        let mut t = F::zero();
        for h in 0..heads {
            t += w[[r, h * group + j]];
        }
        t * inv
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn finite_diff(f: impl Fn(&Array2<f64>) -> f64, x: &Array2<f64>) -> Array2<f64> {
        let h = 1e-6;
        let mut out = Array2::zeros(x.raw_dim());
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            out.as_slice_mut().unwrap()[idx] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        out
    }

    fn check_param_grad(build: impl Fn(&mut Graph<f64>, &ParamSet<f64>) -> Var, params: &ParamSet<f64>) {
        let mut g = Graph::new();
        let loss = build(&mut g, params);
        let grads = g.backward(loss);
        for (name, value) in params.iter() {
            let numeric = finite_diff(
                |x| {
                    let mut p = params.clone();
                    *p.get_mut(name).unwrap() = x.clone();
                    let mut g = Graph::new();
                    let l = build(&mut g, &p);
                    g.scalar(l)
                },
                value,
            );
            let analytic = grads.get(name).cloned().unwrap_or_else(|| Array2::zeros(value.raw_dim()));
            for (a, n) in analytic.iter().zip(numeric.iter()) {
                assert!((a - n).abs() < 1e-6 * (1.0 + n.abs()), "{name}: {a} vs {n}");
            }
        }
    }

    #[test]
    fn elementwise_chain_gradients() {
        let mut p = ParamSet::new();
        p.insert("x", array![[0.3, -0.7], [1.2, 0.1]]).unwrap();
        p.insert("y", array![[0.5, 0.2], [-0.4, 0.9]]).unwrap();
        p.insert("b", array![[0.1, -0.2]]).unwrap();
        check_param_grad(
            |g, p| {
                let x = g.param(p, "x");
                let y = g.param(p, "y");
                let b = g.param(p, "b");
                let m = g.matmul(x, y);
                let m = g.add_row(m, b);
                let s = g.sigmoid(m);
                let t = g.tanh(x);
                let u = g.mul(s, t);
                let r = g.relu(u);
                let c = g.concat(&[r, s]);
                let c = g.slice_cols(c, 1, 3);
                let c = g.scale(c, 1.5);
                let d = g.sub(c, y);
                g.sum_squares(d)
            },
            &p,
        );
    }

    #[test]
    fn lstm_gate_ops_gradients() {
        let mut p = ParamSet::new();
        p.insert("pre", array![[0.3, -0.7, 1.2, 0.1, 0.5, -0.2, 0.8, -1.1]]).unwrap();
        p.insert("c", array![[0.4, -0.6]]).unwrap();
        check_param_grad(
            |g, p| {
                let pre = g.param(p, "pre");
                let c = g.param(p, "c");
                let a = g.lstm_gates(pre);
                let c2 = g.lstm_cell(a, c);
                let h = g.lstm_hidden(a, c2);
                let both = g.concat(&[h, c2]);
                let w = g.constant(array![[1.0, -2.0, 0.5, 3.0]]);
                let m = g.mul(both, w);
                g.sum(m)
            },
            &p,
        );
    }

    #[test]
    fn attention_ops_gradients() {
        let group = 3;
        let heads = 2;
        let mut p = ParamSet::new();
        // two cases of three agents, two heads of width 2
        let pv = Array2::from_shape_fn((6, 4), |(r, c)| ((r * 7 + c * 3) % 5) as f64 * 0.3 - 0.5 + 0.013 * r as f64 + 0.007 * c as f64);
        let qv = Array2::from_shape_fn((6, 4), |(r, c)| ((r * 3 + c * 5) % 7) as f64 * 0.2 - 0.6 + 0.011 * c as f64 + 0.003 * r as f64);
        let vv = Array2::from_shape_fn((6, 3), |(r, c)| ((r + 2 * c) % 4) as f64 * 0.5 - 0.7);
        p.insert("p", pv).unwrap();
        p.insert("q", qv).unwrap();
        p.insert("w", array![[0.7, -0.4, 0.9, 0.3]]).unwrap();
        p.insert("v", vv).unwrap();
        let mut mask = vec![false; 6 * group];
        for (r, j) in [(0, 1), (0, 2), (1, 0), (2, 1), (3, 4 - 3), (4, 3 - 3), (4, 5 - 3)] {
            mask[r * group + j] = true;
        }
        check_param_grad(
            |g, p| {
                let pp = g.param(p, "p");
                let qq = g.param(p, "q");
                let ww = g.param(p, "w");
                let vv = g.param(p, "v");
                let s = g.pair_scores(pp, qq, ww, group, heads);
                let a = g.masked_softmax(s, &mask, group, heads);
                let o = g.attend(a, vv, group, heads);
                let t = g.tanh(o);
                let cst = g.constant(Array2::from_shape_fn((6, 3), |(r, c)| (r as f64 - c as f64) * 0.1));
                let d = g.sub(t, cst);
                g.sum_squares(d)
            },
            &p,
        );
    }

    #[test]
    fn bce_and_gather_gradients() {
        let mut p = ParamSet::new();
        p.insert("z", array![[0.3, -1.7], [2.2, 0.1], [-0.5, 0.4]]).unwrap();
        check_param_grad(
            |g, p| {
                let z = g.param(p, "z");
                let picked = g.gather_cols(z, vec![1, 0, 1]);
                let sq = g.sum_squares(picked);
                let l = g.bce_with_logits(z, array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]);
                g.add(sq, l)
            },
            &p,
        );
    }

    #[test]
    fn masked_softmax_rows() {
        let mut g = Graph::<f64>::new();
        let s = g.constant(array![[0.0, 1.0, 2.0], [5.0, 0.0, -1.0], [0.0, 0.0, 0.0]]);
        let mask = [false, true, true, false, false, false, true, false, false];
        let a = g.masked_softmax(s, &mask, 3, 1);
        let a = g.value(a);
        assert!((a.row(0).sum() - 1.0).abs() < 1e-12);
        assert_eq!(a[[0, 0]], 0.0);
        assert!(a.row(1).iter().all(|&x| x == 0.0));
        assert_eq!(a[[2, 0]], 1.0);
    }
}
