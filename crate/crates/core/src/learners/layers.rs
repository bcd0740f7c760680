//! Feed-forward and recurrent blocks.
//!
//! Each block has a spec (shapes), an `init` that registers its parameters
//! under a name prefix, a `bind` that places those parameters on a tape, and
//! a plain-array forward for inference without recording.

use ndarray::{s, Array2};
use rand::Rng;

use super::params::ParamSet;
use super::tape::{Graph, Var};
use super::Scalar;
use crate::error::{RainError, Result};

fn check_cols<F>(x: &Array2<F>, want: usize, what: &str) -> Result<()> {
    if x.ncols() != want {
        return Err(RainError::Contract(format!(
            "{what}: expected {want} input columns, got {}",
            x.ncols()
        )));
    }
    Ok(())
}

fn fetch<'a, F: Scalar>(params: &'a ParamSet<F>, name: &str) -> Result<&'a Array2<F>> {
    params
        .get(name)
        .ok_or_else(|| RainError::Contract(format!("missing parameter {name:?}")))
}

/// Single affine map `x W + b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearSpec {
    pub input: usize,
    pub output: usize,
}

impl LinearSpec {
    pub fn new(input: usize, output: usize) -> Self {
        LinearSpec { input, output }
    }

    pub fn init<F: Scalar>(&self, params: &mut ParamSet<F>, prefix: &str, rng: &mut impl Rng) -> Result<()> {
        params.insert_uniform(&format!("{prefix}.w"), self.input, self.output, rng)?;
        params.insert_constant(&format!("{prefix}.b"), 1, self.output, 0.0)
    }

    pub fn bind<F: Scalar>(&self, g: &mut Graph<F>, params: &ParamSet<F>, prefix: &str) -> BoundLinear {
        BoundLinear {
            w: g.param(params, &format!("{prefix}.w")),
            b: g.param(params, &format!("{prefix}.b")),
        }
    }

    pub fn forward<F: Scalar>(&self, params: &ParamSet<F>, prefix: &str, x: &Array2<F>) -> Result<Array2<F>> {
        check_cols(x, self.input, prefix)?;
        let w = fetch(params, &format!("{prefix}.w"))?;
        let b = fetch(params, &format!("{prefix}.b"))?;
        Ok(x.dot(w) + b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLinear {
    pub w: Var,
    pub b: Var,
}

impl BoundLinear {
    pub fn apply<F: Scalar>(&self, g: &mut Graph<F>, x: Var) -> Var {
        g.affine(&[(x, self.w)], self.b)
    }
}

/// Stack of affine layers with rectifiers between them (none after the last).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub dims: Vec<usize>,
}

impl MlpSpec {
    /// `dims = [input, hidden.., output]`; needs at least one layer.
    pub fn new(dims: &[usize]) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        MlpSpec { dims: dims.to_vec() }
    }

    /// `layers` affine maps of width `hidden` ending in `output`.
    pub fn uniform(input: usize, hidden: usize, output: usize, layers: usize) -> Self {
        let mut dims = vec![input];
        dims.extend(std::iter::repeat_n(hidden, layers.saturating_sub(1)));
        dims.push(output);
        Self::new(&dims)
    }

    pub fn input(&self) -> usize {
        self.dims[0]
    }

    pub fn output(&self) -> usize {
        *self.dims.last().unwrap()
    }

    fn layers(&self) -> impl Iterator<Item = (usize, LinearSpec)> + '_ {
        self.dims
            .windows(2)
            .enumerate()
            .map(|(k, w)| (k, LinearSpec::new(w[0], w[1])))
    }

    pub fn init<F: Scalar>(&self, params: &mut ParamSet<F>, prefix: &str, rng: &mut impl Rng) -> Result<()> {
        for (k, layer) in self.layers() {
            layer.init(params, &format!("{prefix}.{k}"), rng)?;
        }
        Ok(())
    }

    pub fn bind<F: Scalar>(&self, g: &mut Graph<F>, params: &ParamSet<F>, prefix: &str) -> BoundMlp {
        BoundMlp {
            layers: self
                .layers()
                .map(|(k, l)| l.bind(g, params, &format!("{prefix}.{k}")))
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoundMlp {
    pub layers: Vec<BoundLinear>,
}

impl BoundMlp {
    pub fn apply<F: Scalar>(&self, g: &mut Graph<F>, x: Var) -> Var {
        let mut h = x;
        for (k, layer) in self.layers.iter().enumerate() {
            h = layer.apply(g, h);
            if k + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        h
    }
}

/// Untaped MLP forward over a batch of row vectors.
pub fn mlp_forward<F: Scalar>(params: &ParamSet<F>, prefix: &str, spec: &MlpSpec, input: &Array2<F>) -> Result<Array2<F>> {
    let n = spec.dims.len() - 1;
    let mut h = input.clone();
    for (k, layer) in spec.layers() {
        h = layer.forward(params, &format!("{prefix}.{k}"), &h)?;
        if k + 1 < n {
            h.mapv_inplace(|v| v.max(F::zero()));
        }
    }
    Ok(h)
}

/// LSTM cell with gate order input, forget, candidate, output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmSpec {
    pub input: usize,
    pub hidden: usize,
}

/// Hidden and cell state for a batch of rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState<F = f32> {
    pub h: Array2<F>,
    pub c: Array2<F>,
}

impl<F: Scalar> LstmState<F> {
    pub fn zeros(rows: usize, hidden: usize) -> Self {
        LstmState {
            h: Array2::zeros((rows, hidden)),
            c: Array2::zeros((rows, hidden)),
        }
    }
}

impl LstmSpec {
    pub fn new(input: usize, hidden: usize) -> Self {
        LstmSpec { input, hidden }
    }

    pub fn init<F: Scalar>(&self, params: &mut ParamSet<F>, prefix: &str, rng: &mut impl Rng) -> Result<()> {
        let h4 = 4 * self.hidden;
        // Same bound for both weight blocks, scaled by the hidden width.
        let bound = 1.0 / (self.hidden as f64).sqrt();
        let mut draw = |rows: usize| Array2::from_shape_fn((rows, h4), |_| F::of(rng.gen_range(-bound..bound)));
        let wx = draw(self.input);
        let wh = draw(self.hidden);
        params.insert(format!("{prefix}.wx"), wx)?;
        params.insert(format!("{prefix}.wh"), wh)?;
        // Forget-gate bias starts at one so early gradients flow through the cell.
        let mut b = Array2::zeros((1, h4));
        b.slice_mut(s![.., self.hidden..2 * self.hidden]).fill(F::one());
        params.insert(format!("{prefix}.b"), b)
    }

    pub fn bind<F: Scalar>(&self, g: &mut Graph<F>, params: &ParamSet<F>, prefix: &str) -> BoundLstm {
        BoundLstm {
            wx: g.param(params, &format!("{prefix}.wx")),
            wh: g.param(params, &format!("{prefix}.wh")),
            b: g.param(params, &format!("{prefix}.b")),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLstm {
    pub wx: Var,
    pub wh: Var,
    pub b: Var,
}

impl BoundLstm {
    /// One step; returns `(h, c)`.
    pub fn step<F: Scalar>(&self, g: &mut Graph<F>, x: Var, h: Var, c: Var) -> (Var, Var) {
        let pre = g.affine(&[(x, self.wx), (h, self.wh)], self.b);
        let gates = g.lstm_gates(pre);
        let c2 = g.lstm_cell(gates, c);
        let h2 = g.lstm_hidden(gates, c2);
        (h2, c2)
    }
}

fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// Untaped LSTM step; the output is the new hidden state.
pub fn recurrent_step<F: Scalar>(
    params: &ParamSet<F>,
    prefix: &str,
    spec: &LstmSpec,
    input: &Array2<F>,
    state: &LstmState<F>,
) -> Result<LstmState<F>> {
    check_cols(input, spec.input, prefix)?;
    check_cols(&state.h, spec.hidden, prefix)?;
    if state.c.dim() != state.h.dim() || state.h.nrows() != input.nrows() {
        return Err(RainError::Contract(format!("{prefix}: inconsistent state shapes")));
    }
    let wx = fetch(params, &format!("{prefix}.wx"))?;
    let wh = fetch(params, &format!("{prefix}.wh"))?;
    let b = fetch(params, &format!("{prefix}.b"))?;
    let pre = input.dot(wx) + state.h.dot(wh) + b;
    let hd = spec.hidden;
    let mut c = state.c.clone();
    let mut h = state.h.clone();
    for r in 0..pre.nrows() {
        for k in 0..hd {
            let i = sigmoid(pre[[r, k]]);
            let f = sigmoid(pre[[r, hd + k]]);
            let gg = pre[[r, 2 * hd + k]].tanh();
            let o = sigmoid(pre[[r, 3 * hd + k]]);
            let cn = f * state.c[[r, k]] + i * gg;
            c[[r, k]] = cn;
            h[[r, k]] = o * cn.tanh();
        }
    }
    Ok(LstmState { h, c })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_mlp_gives_zero() {
        let spec = MlpSpec::uniform(5, 8, 3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ParamSet::<f64>::new();
        spec.init(&mut p, "m", &mut rng).unwrap();
        let p = p.zeros_like();
        let y = mlp_forward(&p, "m", &spec, &array![[1.0, -2.0, 3.0, 0.5, 9.0]]).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_passes_input() {
        let spec = MlpSpec::new(&[3, 3]);
        let mut p = ParamSet::<f64>::new();
        p.insert("m.0.w", Array2::eye(3)).unwrap();
        p.insert("m.0.b", Array2::zeros((1, 3))).unwrap();
        let x = array![[1.5, -2.0, 0.25]];
        assert_eq!(mlp_forward(&p, "m", &spec, &x).unwrap(), x);
    }

    #[test]
    fn small_mlp_matches_hand_arithmetic() {
        // 2 -> 3 -> 1 with explicit weights.
        let spec = MlpSpec::new(&[2, 3, 1]);
        let mut p = ParamSet::<f64>::new();
        p.insert("m.0.w", array![[0.5, -1.0, 0.25], [2.0, 0.5, -0.75]]).unwrap();
        p.insert("m.0.b", array![[0.1, 0.2, -0.3]]).unwrap();
        p.insert("m.1.w", array![[1.5], [-0.5], [2.0]]).unwrap();
        p.insert("m.1.b", array![[0.05]]).unwrap();
        let x = array![[1.0, 0.4]];
        // hidden pre: [0.5+0.8+0.1, -1+0.2+0.2, 0.25-0.3-0.3] = [1.4, -0.6, -0.35]
        // relu: [1.4, 0, 0]; out = 1.4*1.5 + 0.05 = 2.15
        let y = mlp_forward(&p, "m", &spec, &x).unwrap();
        assert!((y[[0, 0]] - 2.15).abs() < 1e-12);
    }

    #[test]
    fn mlp_shape_mismatch_is_contract_error() {
        let spec = MlpSpec::new(&[2, 1]);
        let mut p = ParamSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        spec.init(&mut p, "m", &mut rng).unwrap();
        let err = mlp_forward(&p, "m", &spec, &array![[1.0, 2.0, 3.0]]).unwrap_err();
        assert!(matches!(err, RainError::Contract(_)));
    }

    #[test]
    fn taped_and_plain_forward_agree() {
        let spec = MlpSpec::uniform(4, 6, 2, 3);
        let lstm = LstmSpec::new(4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ParamSet::<f64>::new();
        spec.init(&mut p, "m", &mut rng).unwrap();
        lstm.init(&mut p, "l", &mut rng).unwrap();
        let x = Array2::from_shape_fn((3, 4), |(r, c)| (r as f64 - c as f64) * 0.3);
        let s0 = LstmState {
            h: Array2::from_elem((3, 5), 0.1),
            c: Array2::from_elem((3, 5), -0.2),
        };
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let m = spec.bind(&mut g, &p, "m");
        let y = m.apply(&mut g, xv);
        let l = lstm.bind(&mut g, &p, "l");
        let h0 = g.constant(s0.h.clone());
        let c0 = g.constant(s0.c.clone());
        let (h1, c1) = l.step(&mut g, xv, h0, c0);
        assert_eq!(g.value(y), &mlp_forward(&p, "m", &spec, &x).unwrap());
        let s1 = recurrent_step(&p, "l", &lstm, &x, &s0).unwrap();
        for (a, b) in g.value(h1).iter().zip(s1.h.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in g.value(c1).iter().zip(s1.c.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_lstm_stays_zero() {
        let spec = LstmSpec::new(3, 4);
        let mut p = ParamSet::<f64>::new();
        p.insert("l.wx", Array2::zeros((3, 16))).unwrap();
        p.insert("l.wh", Array2::zeros((4, 16))).unwrap();
        p.insert("l.b", Array2::zeros((1, 16))).unwrap();
        let s = recurrent_step(&p, "l", &spec, &Array2::zeros((2, 3)), &LstmState::zeros(2, 4)).unwrap();
        assert!(s.h.iter().chain(s.c.iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_forget_gate_preserves_cell() {
        // Input gate pinned shut, forget gate pinned open.
        let spec = LstmSpec::new(2, 3);
        let mut p = ParamSet::<f64>::new();
        p.insert("l.wx", Array2::zeros((2, 12))).unwrap();
        p.insert("l.wh", Array2::zeros((3, 12))).unwrap();
        let mut b = Array2::zeros((1, 12));
        b.slice_mut(s![.., 0..3]).fill(-20.0);
        b.slice_mut(s![.., 3..6]).fill(20.0);
        p.insert("l.b", b).unwrap();
        let c0 = array![[0.7, -0.3, 1.2]];
        let mut st = LstmState {
            h: Array2::zeros((1, 3)),
            c: c0.clone(),
        };
        for _ in 0..10 {
            st = recurrent_step(&p, "l", &spec, &Array2::zeros((1, 2)), &st).unwrap();
        }
        for (a, b) in st.c.iter().zip(c0.iter()) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn lstm_step_matches_gate_equations() {
        let spec = LstmSpec::new(2, 1);
        let mut p = ParamSet::<f64>::new();
        p.insert("l.wx", array![[0.1, 0.2, 0.3, 0.4], [-0.5, 0.6, -0.7, 0.8]]).unwrap();
        p.insert("l.wh", array![[0.9, -0.1, 0.2, -0.3]]).unwrap();
        p.insert("l.b", array![[0.05, -0.05, 0.1, 0.0]]).unwrap();
        let x = array![[1.0, 2.0]];
        let st = LstmState {
            h: array![[0.5]],
            c: array![[-0.25]],
        };
        let sg = |v: f64| 1.0 / (1.0 + (-v).exp());
        let zi = 0.1 - 1.0 + 0.45 + 0.05;
        let zf = 0.2 + 1.2 - 0.05 - 0.05;
        let zg = 0.3 - 1.4 + 0.1 + 0.1;
        let zo = 0.4 + 1.6 - 0.15;
        let c = sg(zf) * -0.25 + sg(zi) * f64::tanh(zg);
        let h = sg(zo) * c.tanh();
        let out = recurrent_step(&p, "l", &spec, &x, &st).unwrap();
        assert!((out.c[[0, 0]] - c).abs() < 1e-12);
        assert!((out.h[[0, 0]] - h).abs() < 1e-12);
    }
}
