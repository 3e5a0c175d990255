//! Parameterised building blocks. Each layer owns only [`ParamId`]s; values
//! live in the [`ParamStore`] it was registered with.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::Mat;

fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Mat {
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

/// Glorot-uniform initialisation for a `fan_in × fan_out` matrix.
pub fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Mat {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    uniform(rows, cols, bound, rng)
}

/// Spectral normalisation state for one weight matrix: persisted
/// power-iteration vectors `u` (1×rows) and `v` (1×cols).
#[derive(Clone, Debug)]
pub struct SpectralNorm {
    pub weight: ParamId,
    pub u: ParamId,
    pub v: ParamId,
}

impl SpectralNorm {
    pub fn new(store: &mut ParamStore, name: &str, weight: ParamId, rng: &mut impl Rng) -> Self {
        let (rows, cols) = store.get(weight).dim();
        let u = normalize(uniform(1, rows, 1.0, rng));
        let v = normalize(uniform(1, cols, 1.0, rng));
        let u = store.add_buffer(format!("{name}.sn_u"), u);
        let v = store.add_buffer(format!("{name}.sn_v"), v);
        let sn = Self { weight, u, v };
        sn.power_iterate(store, 1);
        sn
    }

    /// Runs `n` power iterations on the current weight, updating `u` and `v`.
    pub fn power_iterate(&self, store: &mut ParamStore, n: usize) {
        let w = store.get(self.weight).clone();
        let mut u = store.get(self.u).clone();
        let mut v = store.get(self.v).clone();
        for _ in 0..n {
            v = normalize(u.dot(&w));
            u = normalize(v.dot(&w.t()));
        }
        store.get_mut(self.u).assign(&u);
        store.get_mut(self.v).assign(&v);
    }

    /// Current estimate `uᵀ W v` of the top singular value.
    pub fn sigma(&self, store: &ParamStore) -> f64 {
        let w = store.get(self.weight);
        let u = store.get(self.u);
        let v = store.get(self.v);
        u.dot(w).dot(&v.t())[[0, 0]]
    }

    /// `W / (uᵀ W v)` with `u`, `v` held constant.
    pub fn normalized(&self, g: &mut Graph) -> Var {
        let w = g.param(self.weight);
        let outer = g.params().get(self.u).t().dot(g.params().get(self.v));
        let outer = g.constant(outer);
        let prod = g.mul(w, outer);
        let sigma = g.sum(prod);
        g.div_by_scalar(w, sigma)
    }
}

fn normalize(m: Mat) -> Mat {
    let n = m.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    m / n
}

/// Largest singular value of `w` by plain power iteration.
pub fn top_singular_value(w: &Mat, iterations: usize) -> f64 {
    let mut v = Array2::from_elem((1, w.ncols()), 1.0);
    v = normalize(v);
    let mut sigma = 0.0;
    for _ in 0..iterations {
        let u = normalize(v.dot(&w.t()));
        let wv = u.dot(w);
        sigma = wv.iter().map(|x| x * x).sum::<f64>().sqrt();
        v = normalize(wv);
    }
    sigma
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub sn: Option<SpectralNorm>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), glorot(in_dim, out_dim, rng));
        let b = store.add(format!("{name}.b"), Array2::zeros((1, out_dim)));
        Self {
            w,
            b: Some(b),
            sn: None,
            in_dim,
            out_dim,
        }
    }

    pub fn spectral_normed(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut lin = Self::new(store, name, in_dim, out_dim, rng);
        lin.sn = Some(SpectralNorm::new(store, name, lin.w, rng));
        lin
    }

    fn weight(&self, g: &mut Graph) -> Var {
        match &self.sn {
            Some(sn) => sn.normalized(g),
            None => g.param(self.w),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = self.weight(g);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

/// 1-D convolution over `T × C_in` sequences. The weight is stored as a
/// `(kernel·C_in) × C_out` matrix applied to [`Graph::im2col`] patches.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub lin: Linear,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    /// Stride-1 convolution with same-length padding (`kernel` must be odd).
    pub fn same(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(kernel % 2 == 1, "same padding needs an odd kernel");
        Self::new(store, name, in_ch, out_ch, kernel, 1, (kernel - 1) / 2, rng)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            lin: Linear::new(store, name, kernel * in_ch, out_ch, rng),
            kernel,
            stride,
            pad,
        }
    }

    pub fn with_spectral_norm(mut self, store: &mut ParamStore, name: &str, rng: &mut impl Rng) -> Self {
        self.lin.sn = Some(SpectralNorm::new(store, name, self.lin.w, rng));
        self
    }

    pub fn out_len(&self, len: usize) -> usize {
        crate::graph::conv_out_len(len, self.kernel, self.stride, self.pad)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let cols = g.im2col(x, self.kernel, self.stride, self.pad);
        self.lin.forward(g, cols)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub dim: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, vocab: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let bound = (3.0 / dim as f64).sqrt();
        let table = store.add(format!("{name}.table"), uniform(vocab, dim, bound, rng));
        Self { table, dim }
    }

    pub fn forward(&self, g: &mut Graph, ids: &[usize]) -> Var {
        let t = g.param(self.table);
        g.gather_rows(t, ids.to_vec())
    }
}

/// Single-layer LSTM with gate order (input, forget, cell, output).
#[derive(Clone, Debug)]
pub struct Lstm {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_ih = store.add(format!("{name}.w_ih"), uniform(input, 4 * hidden, bound, rng));
        let w_hh = store.add(format!("{name}.w_hh"), uniform(hidden, 4 * hidden, bound, rng));
        let mut bias = Array2::zeros((1, 4 * hidden));
        bias.slice_mut(ndarray::s![0, hidden..2 * hidden]).fill(1.0);
        let b = store.add(format!("{name}.b"), bias);
        Self { w_ih, w_hh, b, hidden }
    }

    /// Returns every hidden state, `T × hidden`. Step `t` depends only on
    /// input rows `0..=t`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h_dim = self.hidden;
        let steps = g.shape(x).0;
        let w_ih = g.param(self.w_ih);
        let w_hh = g.param(self.w_hh);
        let b = g.param(self.b);
        let proj = g.matmul(x, w_ih);
        let proj = g.add_row(proj, b);
        let mut h = g.constant(Array2::zeros((1, h_dim)));
        let mut c = g.constant(Array2::zeros((1, h_dim)));
        let mut outs = Vec::with_capacity(steps);
        for t in 0..steps {
            let xt = g.slice_rows(proj, t, t + 1);
            let rec = g.matmul(h, w_hh);
            let gates = g.add(xt, rec);
            let hc = g.lstm_cell(gates, c);
            h = g.slice_cols(hc, 0, h_dim);
            c = g.slice_cols(hc, h_dim, 2 * h_dim);
            outs.push(h);
        }
        g.concat_rows(&outs)
    }

    /// Runs the sequence back to front; output rows stay in input order.
    pub fn forward_reversed(&self, g: &mut Graph, x: Var) -> Var {
        let steps = g.shape(x).0;
        let rev: Vec<usize> = (0..steps).rev().collect();
        let xr = g.gather_rows(x, rev.clone());
        let out = self.forward(g, xr);
        g.gather_rows(out, rev)
    }
}

/// Bidirectional LSTM; output is `[forward ‖ backward]`, `T × 2·hidden`.
#[derive(Clone, Debug)]
pub struct BiLstm {
    pub fwd: Lstm,
    pub bwd: Lstm,
}

impl BiLstm {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            fwd: Lstm::new(store, &format!("{name}.fwd"), input, hidden, rng),
            bwd: Lstm::new(store, &format!("{name}.bwd"), input, hidden, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let a = self.fwd.forward(g, x);
        let b = self.bwd.forward_reversed(g, x);
        g.concat_cols(&[a, b])
    }
}

/// Single-layer GRU with gate order (reset, update, new).
#[derive(Clone, Debug)]
pub struct Gru {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub hidden: usize,
}

impl Gru {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Self {
            w_ih: store.add(format!("{name}.w_ih"), uniform(input, 3 * hidden, bound, rng)),
            w_hh: store.add(format!("{name}.w_hh"), uniform(hidden, 3 * hidden, bound, rng)),
            b_ih: store.add(format!("{name}.b_ih"), Array2::zeros((1, 3 * hidden))),
            b_hh: store.add(format!("{name}.b_hh"), Array2::zeros((1, 3 * hidden))),
            hidden,
        }
    }

    /// Returns every hidden state, `T × hidden`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h_dim = self.hidden;
        let steps = g.shape(x).0;
        let w_ih = g.param(self.w_ih);
        let w_hh = g.param(self.w_hh);
        let b_ih = g.param(self.b_ih);
        let b_hh = g.param(self.b_hh);
        let proj = g.matmul(x, w_ih);
        let proj = g.add_row(proj, b_ih);
        let mut h = g.constant(Array2::zeros((1, h_dim)));
        let mut outs = Vec::with_capacity(steps);
        for t in 0..steps {
            let xt = g.slice_rows(proj, t, t + 1);
            let rec = g.matmul(h, w_hh);
            let rec = g.add_row(rec, b_hh);
            h = g.gru_cell(xt, rec, h);
            outs.push(h);
        }
        g.concat_rows(&outs)
    }
}

/// Self-attention over frames with a learned residual gain initialised to 0.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub gamma: ParamId,
}

impl SelfAttention {
    /// All three projections are spectrally normalised.
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        let inner = (channels / 8).max(1);
        Self {
            query: Linear::spectral_normed(store, &format!("{name}.query"), channels, inner, rng),
            key: Linear::spectral_normed(store, &format!("{name}.key"), channels, inner, rng),
            value: Linear::spectral_normed(store, &format!("{name}.value"), channels, channels, rng),
            gamma: store.add(format!("{name}.gamma"), Array2::zeros((1, 1))),
        }
    }

    pub fn spectral_norms(&self) -> Vec<&SpectralNorm> {
        [&self.query, &self.key, &self.value]
            .into_iter()
            .filter_map(|l| l.sn.as_ref())
            .collect()
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let q = self.query.forward(g, x);
        let k = self.key.forward(g, x);
        let v = self.value.forward(g, x);
        let kt = g.transpose(k);
        let scores = g.matmul(q, kt);
        let attn = g.softmax_rows(scores);
        let o = g.matmul(attn, v);
        let gamma = g.param(self.gamma);
        let o = g.mul_by_scalar(o, gamma);
        g.add(x, o)
    }
}
