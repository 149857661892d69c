//! Minimal reverse-mode automatic differentiation over 2-D `f64` tensors.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters enter
//! through [`Tape::param`] and their gradients come back from
//! [`Tape::backward`] keyed by parameter index. Row vectors (`1 x n`) stand
//! in for biases and scalars are `1 x 1`.

use ndarray::{s, Array1, Array2, Axis, Zip};

use crate::error::{Error, Result};

pub type Tensor = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    /// `a (r x c) + b (1 x c)` broadcast over rows
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Silu(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Array1<f64>,
    },
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    Dropout(Var, Tensor),
    Lstm(Box<LstmCache>),
    MeanSquare(Var),
    Sum(Vec<Var>),
}

#[derive(Debug)]
struct LstmCache {
    x: Var,
    w_ih: Var,
    w_hh: Var,
    bias: Var,
    // per-step activations, each T x H
    i: Tensor,
    f: Tensor,
    g: Tensor,
    o: Tensor,
    c: Tensor,
    tanh_c: Tensor,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Gradient of the loss with respect to each parameter index touched by
/// the tape; untouched parameters are `None`.
#[derive(Debug, Default)]
pub struct ParamGrads {
    pub grads: Vec<Option<Tensor>>,
}

impl ParamGrads {
    /// Elementwise sum; `None` acts as zero.
    pub fn add_assign(&mut self, other: &ParamGrads) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (dst, src) in self.grads.iter_mut().zip(&other.grads) {
            match (dst.as_mut(), src) {
                (Some(d), Some(s)) => *d += s,
                (None, Some(s)) => *dst = Some(s.clone()),
                _ => {}
            }
        }
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const LN_EPS: f64 = 1e-5;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, index: usize, value: &Tensor) -> Var {
        self.push(value.clone(), Op::Param(index))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Row-wise layer normalization with learned `1 x c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let c = xv.ncols() as f64;
        let mean = xv.sum_axis(Axis(1)) / c;
        let centered = xv - &mean.view().insert_axis(Axis(1));
        let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / c;
        let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
        let xhat = &centered * &inv_std.view().insert_axis(Axis(1));
        let out = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols(a, start, end))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Multiplies by a fixed mask (already scaled by `1 / keep`).
    pub fn dropout(&mut self, a: Var, mask: Tensor) -> Var {
        let v = self.value(a) * &mask;
        self.push(v, Op::Dropout(a, mask))
    }

    /// Mean of squared entries, as a `1 x 1` node.
    pub fn mean_square(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        self.push(Tensor::from_elem((1, 1), v), Op::MeanSquare(a))
    }

    /// Elementwise sum of equally shaped nodes.
    pub fn sum(&mut self, parts: &[Var]) -> Var {
        let mut v = self.value(parts[0]).clone();
        for &p in &parts[1..] {
            v += self.value(p);
        }
        self.push(v, Op::Sum(parts.to_vec()))
    }

    /// Single-layer LSTM over the rows of `x` (`T x D`) with zero initial
    /// state. Gate blocks in the `4H` columns are ordered input, forget,
    /// cell, output. Returns the `T x H` hidden sequence.
    pub fn lstm(&mut self, x: Var, w_ih: Var, w_hh: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let whh = self.value(w_hh);
        let h_dim = whh.nrows();
        let t_len = xv.nrows();
        let pre = xv.dot(self.value(w_ih)) + self.value(bias);
        let mut i = Tensor::zeros((t_len, h_dim));
        let mut f = Tensor::zeros((t_len, h_dim));
        let mut g = Tensor::zeros((t_len, h_dim));
        let mut o = Tensor::zeros((t_len, h_dim));
        let mut c = Tensor::zeros((t_len, h_dim));
        let mut tanh_c = Tensor::zeros((t_len, h_dim));
        let mut h = Tensor::zeros((t_len, h_dim));
        let mut h_prev = Array1::<f64>::zeros(h_dim);
        let mut c_prev = Array1::<f64>::zeros(h_dim);
        for t in 0..t_len {
            let z = &pre.row(t) + &h_prev.dot(whh);
            for j in 0..h_dim {
                let ig = sigmoid(z[j]);
                let fg = sigmoid(z[h_dim + j]);
                let gg = z[2 * h_dim + j].tanh();
                let og = sigmoid(z[3 * h_dim + j]);
                let cc = fg * c_prev[j] + ig * gg;
                let tc = cc.tanh();
                i[[t, j]] = ig;
                f[[t, j]] = fg;
                g[[t, j]] = gg;
                o[[t, j]] = og;
                c[[t, j]] = cc;
                tanh_c[[t, j]] = tc;
                h[[t, j]] = og * tc;
            }
            h_prev.assign(&h.row(t));
            c_prev.assign(&c.row(t));
        }
        self.push(
            h,
            Op::Lstm(Box::new(LstmCache {
                x,
                w_ih,
                w_hh,
                bias,
                i,
                f,
                g,
                o,
                c,
                tanh_c,
            })),
        )
    }

    /// Backpropagates from the scalar `loss`, seeding `d loss = seed`.
    pub fn backward(&self, loss: Var, seed: f64, n_params: usize) -> Result<ParamGrads> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::State("backward called without a recorded forward pass".into()));
        }
        if self.value(loss).dim() != (1, 1) {
            return Err(Error::Shape(format!(
                "loss must be 1x1, got {:?}",
                self.value(loss).dim()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_elem((1, 1), seed));
        let mut out = ParamGrads {
            grads: (0..n_params).map(|_| None).collect(),
        };

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(p) => match &mut out.grads[*p] {
                    Some(existing) => *existing += &gy,
                    slot => *slot = Some(gy),
                },
                Op::MatMul(a, b) => {
                    let ga = gy.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&gy);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = gy.dot(self.value(*b));
                    let gb = gy.t().dot(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, gy.clone());
                    acc(&mut grads, *a, gy);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&gy);
                    acc(&mut grads, *a, gy);
                }
                Op::AddRow(a, row) => {
                    acc(&mut grads, *row, gy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *a, gy);
                }
                Op::Mul(a, b) => {
                    let ga = &gy * self.value(*b);
                    let gb = &gy * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, gy * *c),
                Op::Sigmoid(a) => {
                    let g = Zip::from(&gy).and(&node.value).map_collect(|&g, &y| g * y * (1.0 - y));
                    acc(&mut grads, *a, g);
                }
                Op::Tanh(a) => {
                    let g = Zip::from(&gy).and(&node.value).map_collect(|&g, &y| g * (1.0 - y * y));
                    acc(&mut grads, *a, g);
                }
                Op::Silu(a) => {
                    let g = Zip::from(&gy).and(self.value(*a)).map_collect(|&g, &x| {
                        let s = sigmoid(x);
                        g * (s + x * s * (1.0 - s))
                    });
                    acc(&mut grads, *a, g);
                }
                Op::Gelu(a) => {
                    let g = Zip::from(&gy)
                        .and(self.value(*a))
                        .map_collect(|&g, &x| g * gelu_grad(x));
                    acc(&mut grads, *a, g);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let dot = (&gy * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let g = y * &(&gy - &dot);
                    acc(&mut grads, *a, g);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let c = xhat.ncols() as f64;
                    acc(&mut grads, *beta, gy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *gamma, (&gy * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    let dxhat = &gy * self.value(*gamma);
                    let sum_d = dxhat.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let sum_dx = (&dxhat * xhat).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let inner = &dxhat * c - &sum_d - &(xhat * &sum_dx);
                    let g = &inner * &(inv_std / c).insert_axis(Axis(1));
                    acc(&mut grads, *x, g);
                }
                Op::SliceCols(a, start, end) => {
                    let mut g = Tensor::zeros(self.value(*a).dim());
                    g.slice_mut(s![.., *start..*end]).assign(&gy);
                    acc(&mut grads, *a, g);
                }
                Op::ConcatCols(parts) => {
                    let mut col = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        acc(&mut grads, p, gy.slice(s![.., col..col + w]).to_owned());
                        col += w;
                    }
                }
                Op::Dropout(a, mask) => acc(&mut grads, *a, gy * mask),
                Op::MeanSquare(a) => {
                    let x = self.value(*a);
                    let k = 2.0 * gy[[0, 0]] / x.len() as f64;
                    acc(&mut grads, *a, x * k);
                }
                Op::Sum(parts) => {
                    for &p in parts {
                        acc(&mut grads, p, gy.clone());
                    }
                }
                Op::Lstm(cache) => {
                    let (dx, dw_ih, dw_hh, db) = self.lstm_backward(cache, &gy);
                    acc(&mut grads, cache.x, dx);
                    acc(&mut grads, cache.w_ih, dw_ih);
                    acc(&mut grads, cache.w_hh, dw_hh);
                    acc(&mut grads, cache.bias, db);
                }
            }
        }
        Ok(out)
    }

    fn lstm_backward(&self, cache: &LstmCache, dh_seq: &Tensor) -> (Tensor, Tensor, Tensor, Tensor) {
        let whh = self.value(cache.w_hh);
        let h_dim = whh.nrows();
        let t_len = dh_seq.nrows();
        let h_seq = {
            // recompute h from cached gates
            &cache.o * &cache.tanh_c
        };
        let mut dz = Tensor::zeros((t_len, 4 * h_dim));
        let mut dh_next = Array1::<f64>::zeros(h_dim);
        let mut dc_next = Array1::<f64>::zeros(h_dim);
        for t in (0..t_len).rev() {
            for j in 0..h_dim {
                let dh = dh_seq[[t, j]] + dh_next[j];
                let (i, f, g, o) = (cache.i[[t, j]], cache.f[[t, j]], cache.g[[t, j]], cache.o[[t, j]]);
                let tc = cache.tanh_c[[t, j]];
                let c_prev = if t > 0 { cache.c[[t - 1, j]] } else { 0.0 };
                let d_o = dh * tc;
                let dc = dh * o * (1.0 - tc * tc) + dc_next[j];
                let di = dc * g;
                let dg = dc * i;
                let df = dc * c_prev;
                dc_next[j] = dc * f;
                dz[[t, j]] = di * i * (1.0 - i);
                dz[[t, h_dim + j]] = df * f * (1.0 - f);
                dz[[t, 2 * h_dim + j]] = dg * (1.0 - g * g);
                dz[[t, 3 * h_dim + j]] = d_o * o * (1.0 - o);
            }
            dh_next = whh.dot(&dz.row(t));
        }
        let mut h_prev = Tensor::zeros((t_len, h_dim));
        if t_len > 1 {
            h_prev.slice_mut(s![1.., ..]).assign(&h_seq.slice(s![..t_len - 1, ..]));
        }
        let dw_hh = h_prev.t().dot(&dz);
        let dw_ih = self.value(cache.x).t().dot(&dz);
        let db = dz.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dx = dz.dot(&self.value(cache.w_ih).t());
        (dx, dw_ih, dw_hh, db)
    }
}
