//! Tape-based reverse-mode differentiation over 2-D `f64` matrices.
//!
//! A [`Graph`] records every operation applied during one forward pass.
//! Values are row-major `rows × cols` matrices; sequences are `frames ×
//! channels`. Parameters are read from a borrowed [`ParamStore`] and never
//! copied into the tape.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::params::{Grads, ParamId, ParamStore};
use crate::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Const,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    Square(Var),
    MaxScalar(Var, f64),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize, usize),
    GatherRows(Var, Vec<usize>),
    BroadcastRows(Var),
    Im2Col {
        input: Var,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Transpose(Var),
    SoftmaxRows(Var),
    MaskMul(Var, Mat),
    DivByScalar(Var, Var),
    MulByScalar(Var, Var),
    LstmCell(Var, Var),
    GruCell(Var, Var, Var),
}

struct Node {
    op: Op,
    value: Option<Mat>,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    dropout_rng: Option<StdRng>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            dropout_rng: None,
        }
    }

    /// Enables training-mode dropout with masks drawn from `seed`.
    pub fn with_dropout(mut self, seed: u64) -> Self {
        self.dropout_rng = Some(StdRng::seed_from_u64(seed));
        self
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    /// Inverted dropout; identity at inference or when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Var {
        if p <= 0.0 {
            return a;
        }
        let shape = self.shape(a);
        let Some(rng) = self.dropout_rng.as_mut() else {
            return a;
        };
        let keep = 1.0 / (1.0 - p);
        let mask = Array2::from_shape_fn(shape, |_| {
            if rng.random::<f64>() < p {
                0.0
            } else {
                keep
            }
        });
        self.mask_mul(a, mask)
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    fn push(&mut self, op: Op, value: Mat) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(Op::Const, value)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = matmul(self.value(a).view(), self.value(b).view());
        self.push(Op::MatMul(a, b), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(Op::Add(a, b), out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        self.push(Op::Sub(a, b), out)
    }

    /// `a + row` with `row` (1×m) broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1, "add_row expects a 1×m row");
        let out = self.value(a) + r;
        self.push(Op::AddRow(a, row), out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        self.push(Op::Mul(a, b), out)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a) * k;
        self.push(Op::Scale(a, k), out)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a) + k;
        self.push(Op::AddScalar(a), out)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        self.push(Op::Tanh(a), out)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        self.push(Op::Sigmoid(a), out)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        self.push(Op::Relu(a), out)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self
            .value(a)
            .mapv(|x| if x > 0.0 { x } else { slope * x });
        self.push(Op::LeakyRelu(a, slope), out)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::exp);
        self.push(Op::Exp(a), out)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::ln);
        self.push(Op::Ln(a), out)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::abs);
        self.push(Op::Abs(a), out)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x * x);
        self.push(Op::Square(a), out)
    }

    /// Elementwise `max(a, floor)`; gradient flows only where `a > floor`.
    pub fn max_scalar(&mut self, a: Var, floor: f64) -> Var {
        let out = self.value(a).mapv(|x| x.max(floor));
        self.push(Op::MaxScalar(a, floor), out)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(Op::Sum(a), out)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let out = Array2::from_elem((1, 1), m.sum() / m.len() as f64);
        self.push(Op::Mean(a), out)
    }

    /// Column-wise mean over rows: `n×m → 1×m`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("mean over empty rows")
            .insert_axis(Axis(0));
        self.push(Op::MeanRows(a), out)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat_cols row mismatch");
        self.push(Op::ConcatCols(parts.to_vec()), out)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat_rows col mismatch");
        self.push(Op::ConcatRows(parts.to_vec()), out)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(Op::SliceCols(a, start, end), out)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push(Op::SliceRows(a, start, end), out)
    }

    /// `out[i] = a[index[i]]`; repeated indices accumulate gradient.
    pub fn gather_rows(&mut self, a: Var, index: Vec<usize>) -> Var {
        let src = self.value(a);
        let mut out = Array2::zeros((index.len(), src.ncols()));
        for (i, &j) in index.iter().enumerate() {
            out.row_mut(i).assign(&src.row(j));
        }
        self.push(Op::GatherRows(a, index), out)
    }

    /// Repeats a 1×m row `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Var {
        let r = self.value(a);
        assert_eq!(r.nrows(), 1, "broadcast_rows expects a 1×m row");
        let out = r
            .broadcast((n, r.ncols()))
            .expect("broadcast")
            .to_owned();
        self.push(Op::BroadcastRows(a), out)
    }

    /// Unfolds a `T×C` sequence into `T_out × (kernel·C)` patches with zero
    /// padding, where `T_out = (T + 2·pad − kernel)/stride + 1`. Column
    /// `j·C + c` holds input frame `t·stride + j − pad`, channel `c`.
    pub fn im2col(&mut self, input: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let x = self.value(input);
        let (t, c) = x.dim();
        let t_out = conv_out_len(t, kernel, stride, pad);
        let mut out = Array2::zeros((t_out, kernel * c));
        for o in 0..t_out {
            for j in 0..kernel {
                let src = (o * stride + j) as isize - pad as isize;
                if src >= 0 && (src as usize) < t {
                    out.slice_mut(s![o, j * c..(j + 1) * c])
                        .assign(&x.row(src as usize));
                }
            }
        }
        self.push(
            Op::Im2Col {
                input,
                kernel,
                stride,
                pad,
            },
            out,
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        self.push(Op::Transpose(a), out)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let total = row.sum();
            row.mapv_inplace(|x| x / total);
        }
        self.push(Op::SoftmaxRows(a), out)
    }

    /// Multiplies by a fixed mask (dropout with pre-scaled keep mask).
    pub fn mask_mul(&mut self, a: Var, mask: Mat) -> Var {
        let out = self.value(a) * &mask;
        self.push(Op::MaskMul(a, mask), out)
    }

    /// `a / s` for a 1×1 node `s`.
    pub fn div_by_scalar(&mut self, a: Var, s: Var) -> Var {
        let k = self.scalar(s);
        let out = self.value(a) / k;
        self.push(Op::DivByScalar(a, s), out)
    }

    /// `a · s` for a 1×1 node `s`.
    pub fn mul_by_scalar(&mut self, a: Var, s: Var) -> Var {
        let k = self.scalar(s);
        let out = self.value(a) * k;
        self.push(Op::MulByScalar(a, s), out)
    }

    /// Fused LSTM cell. `gates` is the 1×4H pre-activation in (input,
    /// forget, cell, output) order; returns `[h ‖ c]` as 1×2H.
    pub fn lstm_cell(&mut self, gates: Var, c_prev: Var) -> Var {
        let a = self.value(gates);
        let cp = self.value(c_prev);
        let h_dim = cp.ncols();
        let mut out = Array2::zeros((1, 2 * h_dim));
        for k in 0..h_dim {
            let i = sigmoid(a[[0, k]]);
            let f = sigmoid(a[[0, h_dim + k]]);
            let g = a[[0, 2 * h_dim + k]].tanh();
            let o = sigmoid(a[[0, 3 * h_dim + k]]);
            let c = f * cp[[0, k]] + i * g;
            out[[0, k]] = o * c.tanh();
            out[[0, h_dim + k]] = c;
        }
        self.push(Op::LstmCell(gates, c_prev), out)
    }

    /// Fused GRU cell. `x_proj` and `h_proj` are the 1×3H input and
    /// recurrent projections (biases included) in (reset, update, new)
    /// order; returns the next hidden state.
    pub fn gru_cell(&mut self, x_proj: Var, h_proj: Var, h_prev: Var) -> Var {
        let x = self.value(x_proj);
        let r = self.value(h_proj);
        let hp = self.value(h_prev);
        let h_dim = hp.ncols();
        let mut out = Array2::zeros((1, h_dim));
        for k in 0..h_dim {
            let rg = sigmoid(x[[0, k]] + r[[0, k]]);
            let z = sigmoid(x[[0, h_dim + k]] + r[[0, h_dim + k]]);
            let n = (x[[0, 2 * h_dim + k]] + rg * r[[0, 2 * h_dim + k]]).tanh();
            out[[0, k]] = n + z * (hp[[0, k]] - n);
        }
        self.push(Op::GruCell(x_proj, h_proj, h_prev), out)
    }

    /// Back-propagates from a 1×1 `loss` node.
    pub fn backward(&self, loss: Var) -> Backward {
        let seed = Array2::from_elem(self.shape(loss), 1.0);
        self.backward_with(loss, seed)
    }

    /// Back-propagates an arbitrary upstream gradient for `out`.
    pub fn backward_with(&self, out: Var, seed: Mat) -> Backward {
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut param_slots: Vec<Option<Mat>> = vec![None; self.params.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(g) = grads[i].take() {
                    param_slots[id.index()] = Some(g);
                }
            }
        }
        Backward {
            nodes: grads,
            params: Grads::from_slots(param_slots),
        }
    }

    fn propagate(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let y = || self.value(Var(i));
        match &self.nodes[i].op {
            Op::Const | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let da = matmul(g.view(), self.value(*b).t());
                let db = matmul(self.value(*a).t(), g.view());
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, -g);
            }
            Op::AddRow(a, r) => {
                acc(grads, *a, g.clone());
                acc(grads, *r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Mul(a, b) => {
                acc(grads, *a, g * self.value(*b));
                acc(grads, *b, g * self.value(*a));
            }
            Op::Scale(a, k) => acc(grads, *a, g * *k),
            Op::AddScalar(a) => acc(grads, *a, g.clone()),
            Op::Tanh(a) => {
                let mut d = g.clone();
                d.zip_mut_with(y(), |d, &y| *d *= 1.0 - y * y);
                acc(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let mut d = g.clone();
                d.zip_mut_with(y(), |d, &y| *d *= y * (1.0 - y));
                acc(grads, *a, d);
            }
            Op::Relu(a) => {
                let mut d = g.clone();
                d.zip_mut_with(self.value(*a), |d, &x| {
                    if x <= 0.0 {
                        *d = 0.0
                    }
                });
                acc(grads, *a, d);
            }
            Op::LeakyRelu(a, slope) => {
                let mut d = g.clone();
                d.zip_mut_with(self.value(*a), |d, &x| {
                    if x <= 0.0 {
                        *d *= slope
                    }
                });
                acc(grads, *a, d);
            }
            Op::Exp(a) => acc(grads, *a, g * y()),
            Op::Ln(a) => acc(grads, *a, g / self.value(*a)),
            Op::Abs(a) => {
                let mut d = g.clone();
                d.zip_mut_with(self.value(*a), |d, &x| *d *= sign(x));
                acc(grads, *a, d);
            }
            Op::Square(a) => acc(grads, *a, g * self.value(*a) * 2.0),
            Op::MaxScalar(a, floor) => {
                let mut d = g.clone();
                d.zip_mut_with(self.value(*a), |d, &x| {
                    if x <= *floor {
                        *d = 0.0
                    }
                });
                acc(grads, *a, d);
            }
            Op::Sum(a) => {
                let k = g[[0, 0]];
                acc(grads, *a, Array2::from_elem(self.shape(*a), k));
            }
            Op::Mean(a) => {
                let shape = self.shape(*a);
                let k = g[[0, 0]] / (shape.0 * shape.1) as f64;
                acc(grads, *a, Array2::from_elem(shape, k));
            }
            Op::MeanRows(a) => {
                let (n, m) = self.shape(*a);
                let d = (g / n as f64).broadcast((n, m)).unwrap().to_owned();
                acc(grads, *a, d);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = self.shape(*p).1;
                    acc(grads, *p, g.slice(s![.., start..start + w]).to_owned());
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let h = self.shape(*p).0;
                    acc(grads, *p, g.slice(s![start..start + h, ..]).to_owned());
                    start += h;
                }
            }
            Op::SliceCols(a, start, end) => {
                let shape = self.shape(*a);
                slot(grads, *a, shape)
                    .slice_mut(s![.., *start..*end])
                    .zip_mut_with(g, |d, &x| *d += x);
            }
            Op::SliceRows(a, start, end) => {
                let shape = self.shape(*a);
                slot(grads, *a, shape)
                    .slice_mut(s![*start..*end, ..])
                    .zip_mut_with(g, |d, &x| *d += x);
            }
            Op::GatherRows(a, index) => {
                let shape = self.shape(*a);
                let d = slot(grads, *a, shape);
                for (i, &j) in index.iter().enumerate() {
                    let mut row = d.row_mut(j);
                    row += &g.row(i);
                }
            }
            Op::BroadcastRows(a) => {
                acc(grads, *a, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Im2Col {
                input,
                kernel,
                stride,
                pad,
            } => {
                let (t, c) = self.shape(*input);
                let mut d = Array2::zeros((t, c));
                for o in 0..g.nrows() {
                    for j in 0..*kernel {
                        let src = (o * stride + j) as isize - *pad as isize;
                        if src >= 0 && (src as usize) < t {
                            let mut row = d.row_mut(src as usize);
                            row += &g.slice(s![o, j * c..(j + 1) * c]);
                        }
                    }
                }
                acc(grads, *input, d);
            }
            Op::Transpose(a) => acc(grads, *a, g.t().to_owned()),
            Op::SoftmaxRows(a) => {
                let y = y();
                let mut d = g * y;
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                    let dot = drow.sum();
                    drow.zip_mut_with(&yrow, |dv, &yv| *dv -= yv * dot);
                }
                acc(grads, *a, d);
            }
            Op::MaskMul(a, mask) => acc(grads, *a, g * mask),
            Op::DivByScalar(a, sv) => {
                let k = self.scalar(*sv);
                acc(grads, *a, g / k);
                let ds = -(g * self.value(*a)).sum() / (k * k);
                acc(grads, *sv, Array2::from_elem((1, 1), ds));
            }
            Op::MulByScalar(a, sv) => {
                let k = self.scalar(*sv);
                acc(grads, *a, g * k);
                let ds = (g * self.value(*a)).sum();
                acc(grads, *sv, Array2::from_elem((1, 1), ds));
            }
            Op::LstmCell(gates, c_prev) => {
                let a = self.value(*gates);
                let cp = self.value(*c_prev);
                let h_dim = cp.ncols();
                let mut da = Array2::zeros((1, 4 * h_dim));
                let mut dcp = Array2::zeros((1, h_dim));
                for k in 0..h_dim {
                    let i = sigmoid(a[[0, k]]);
                    let f = sigmoid(a[[0, h_dim + k]]);
                    let gg = a[[0, 2 * h_dim + k]].tanh();
                    let o = sigmoid(a[[0, 3 * h_dim + k]]);
                    let c = f * cp[[0, k]] + i * gg;
                    let tc = c.tanh();
                    let dh = g[[0, k]];
                    let dc = g[[0, h_dim + k]] + dh * o * (1.0 - tc * tc);
                    da[[0, k]] = dc * gg * i * (1.0 - i);
                    da[[0, h_dim + k]] = dc * cp[[0, k]] * f * (1.0 - f);
                    da[[0, 2 * h_dim + k]] = dc * i * (1.0 - gg * gg);
                    da[[0, 3 * h_dim + k]] = dh * tc * o * (1.0 - o);
                    dcp[[0, k]] = dc * f;
                }
                acc(grads, *gates, da);
                acc(grads, *c_prev, dcp);
            }
            Op::GruCell(x_proj, h_proj, h_prev) => {
                let x = self.value(*x_proj);
                let r = self.value(*h_proj);
                let hp = self.value(*h_prev);
                let h_dim = hp.ncols();
                let mut dx = Array2::zeros((1, 3 * h_dim));
                let mut dr = Array2::zeros((1, 3 * h_dim));
                let mut dhp = Array2::zeros((1, h_dim));
                for k in 0..h_dim {
                    let rg = sigmoid(x[[0, k]] + r[[0, k]]);
                    let z = sigmoid(x[[0, h_dim + k]] + r[[0, h_dim + k]]);
                    let hn = r[[0, 2 * h_dim + k]];
                    let n = (x[[0, 2 * h_dim + k]] + rg * hn).tanh();
                    let dh = g[[0, k]];
                    let dn = dh * (1.0 - z);
                    let dz = dh * (hp[[0, k]] - n);
                    dhp[[0, k]] = dh * z;
                    let dan = dn * (1.0 - n * n);
                    let dar = dan * hn * rg * (1.0 - rg);
                    let daz = dz * z * (1.0 - z);
                    dx[[0, k]] = dar;
                    dx[[0, h_dim + k]] = daz;
                    dx[[0, 2 * h_dim + k]] = dan;
                    dr[[0, k]] = dar;
                    dr[[0, h_dim + k]] = daz;
                    dr[[0, 2 * h_dim + k]] = dan * rg;
                }
                acc(grads, *x_proj, dx);
                acc(grads, *h_proj, dr);
                acc(grads, *h_prev, dhp);
            }
        }
    }
}

fn acc(grads: &mut [Option<Mat>], v: Var, d: Mat) {
    match &mut grads[v.0] {
        Some(g) => *g += &d,
        slot @ None => *slot = Some(d),
    }
}

/// Matrix product with a fast path for the few-row products that dominate
/// recurrent steps, where the general GEMM kernel's packing overhead wins.
pub fn matmul(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Mat {
    let (m, k) = a.dim();
    let (k2, n) = b.dim();
    assert_eq!(k, k2, "matmul inner dimension mismatch");
    if m <= 4 {
        if let Some(bs) = b.as_slice() {
            // row-major b: out_row += a[i, p] * b_row(p)
            let mut out = Array2::zeros((m, n));
            for i in 0..m {
                let o = out.row_mut(i).into_slice().expect("contiguous");
                for p in 0..k {
                    let x = a[[i, p]];
                    if x != 0.0 {
                        for (dst, &w) in o.iter_mut().zip(&bs[p * n..(p + 1) * n]) {
                            *dst += x * w;
                        }
                    }
                }
            }
            return out;
        }
        let bt = b.t();
        if let Some(bts) = bt.as_slice() {
            // b is the transpose of a row-major matrix: dot products of rows
            let mut out = Array2::zeros((m, n));
            for i in 0..m {
                let ar = a.row(i).to_vec();
                for j in 0..n {
                    out[[i, j]] = ar.iter().zip(&bts[j * k..(j + 1) * k]).map(|(x, y)| x * y).sum();
                }
            }
            return out;
        }
    }
    if k <= 4 && b.nrows() == k && m * n > 0 {
        // outer-product shaped: out = Σ_p a_col(p) b_row(p)
        let mut out = Array2::zeros((m, n));
        for p in 0..k {
            let brow = b.row(p).to_vec();
            for i in 0..m {
                let x = a[[i, p]];
                if x != 0.0 {
                    let o = out.row_mut(i).into_slice().expect("contiguous");
                    for (dst, &w) in o.iter_mut().zip(&brow) {
                        *dst += x * w;
                    }
                }
            }
        }
        return out;
    }
    a.dot(&b)
}

fn slot(grads: &mut [Option<Mat>], v: Var, shape: (usize, usize)) -> &mut Mat {
    grads[v.0].get_or_insert_with(|| Array2::zeros(shape))
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Output length of a 1-D convolution.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    let padded = len + 2 * pad;
    assert!(padded >= kernel, "sequence shorter than kernel");
    (padded - kernel) / stride + 1
}

/// Result of a backward pass.
pub struct Backward {
    nodes: Vec<Option<Mat>>,
    params: Grads,
}

impl Backward {
    /// Gradient w.r.t. any node; `None` if the node does not reach the loss.
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param_grads(&self) -> &Grads {
        &self.params
    }

    pub fn into_param_grads(self) -> Grads {
        self.params
    }
}
