//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every forward op together with whatever the backward
//! pass needs. Nodes are appended in execution order, so the tape is acyclic
//! by construction and the backward sweep is a single reverse walk over it.
//! Parameters are borrowed leaves; their gradients come back through
//! [`Grads::accumulate_params`].

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf { slot: Option<usize> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MatMul(Var, Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    LogSoftmax(Var),
    Gather { input: Var, index: Vec<usize> },
    Embed { table: Var, index: Vec<usize> },
    SliceRows { input: Var, start: usize },
    Sum(Var),
    Mean(Var),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    CausalAttention { qkv: Var, heads: usize, probs: Vec<f64> },
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
}

#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Shape {
                op,
                left: other.to_vec(),
                right: vec![0, 0],
            }),
        }
    }

    /// Trainable leaf borrowing `value`; `slot` identifies it in [`Grads`].
    pub fn param(&mut self, slot: usize, value: &'p Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite("param"));
        }
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf { slot: Some(slot) },
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant leaf. Receives a gradient (readable through [`Grads::wrt`])
    /// but is never reported as a parameter.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite("constant"));
        }
        Ok(self.push(value, Op::Leaf { slot: None }))
    }

    pub fn scalar(&mut self, value: f64) -> Result<Var> {
        self.constant(Tensor::scalar(value))
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| f(x)).collect())
            .expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        if !k.is_finite() {
            return Err(Error::NonFinite("scale"));
        }
        let out = self.map(a, |x| x * k);
        Ok(self.push(out, Op::Scale(a, k)))
    }

    /// `[rows, n] + [n]`, the bias broadcast.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, c) = self.matrix("add_row", a)?;
        if self.shape(bias) != [c] {
            return Err(Error::Shape {
                op: "add_row",
                left: self.shape(a).to_vec(),
                right: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data();
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddRow(a, bias)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix("matmul", a)?;
        let (k2, n) = self.matrix("matmul", b)?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b)))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, f64::exp);
        if !out.is_finite() {
            return Err(Error::NonFinite("exp"));
        }
        Ok(self.push(out, Op::Exp(a)))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(Error::NonFinite("log of non-positive input"));
        }
        let out = self.map(a, f64::ln);
        Ok(self.push(out, Op::Log(a)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, sigmoid);
        Ok(self.push(out, Op::Sigmoid(a)))
    }

    /// `ln σ(x)`, exact for large `|x|`.
    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, log_sigmoid);
        Ok(self.push(out, Op::LogSigmoid(a)))
    }

    /// Row-wise log-softmax, max-subtracted.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).rows_cols();
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_mut(c) {
            let lse = log_sum_exp(row);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        debug_assert_eq!(out.len(), r * c);
        Ok(self.push(out, Op::LogSoftmax(a)))
    }

    /// Picks `input[i, index[i]]` for every row `i`.
    pub fn gather(&mut self, input: Var, index: &[usize]) -> Result<Var> {
        let (r, c) = self.matrix("gather", input)?;
        if index.len() != r || index.iter().any(|&i| i >= c) {
            return Err(Error::Shape {
                op: "gather",
                left: vec![r, c],
                right: vec![index.len()],
            });
        }
        let v = self.value(input).data();
        let out: Vec<f64> = index.iter().enumerate().map(|(i, &j)| v[i * c + j]).collect();
        Ok(self.push(
            Tensor::vector(out),
            Op::Gather {
                input,
                index: index.to_vec(),
            },
        ))
    }

    /// Row lookup `table[index[i], :]`.
    pub fn embed(&mut self, table: Var, index: &[usize]) -> Result<Var> {
        let (r, c) = self.matrix("embed", table)?;
        if index.is_empty() || index.iter().any(|&i| i >= r) {
            return Err(Error::Shape {
                op: "embed",
                left: vec![r, c],
                right: vec![index.len()],
            });
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index {
            out.extend_from_slice(&t[i * c..(i + 1) * c]);
        }
        Ok(self.push(
            Tensor::new(vec![index.len(), c], out)?,
            Op::Embed {
                table,
                index: index.to_vec(),
            },
        ))
    }

    pub fn slice_rows(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.matrix("slice_rows", input)?;
        if len == 0 || start + len > r {
            return Err(Error::Shape {
                op: "slice_rows",
                left: vec![r, c],
                right: vec![start, len],
            });
        }
        let data = self.value(input).data()[start * c..(start + len) * c].to_vec();
        Ok(self.push(Tensor::new(vec![len, c], data)?, Op::SliceRows { input, start }))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(a)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mean(a)))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, |x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        Ok(self.push(out, Op::Gelu(a)))
    }

    /// Per-row layer normalization with affine gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.matrix("layer_norm", x)?;
        for p in [gain, bias] {
            if self.shape(p) != [c] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    left: vec![r, c],
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        Ok(self.push(
            Tensor::new(vec![r, c], out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Multi-head causal self-attention over a fused `[T, 3d]` query/key/value
    /// projection. Row `i` attends to rows `0..=i`.
    pub fn causal_attention(&mut self, qkv: Var, heads: usize) -> Result<Var> {
        let (t, c3) = self.matrix("causal_attention", qkv)?;
        if heads == 0 || c3 % 3 != 0 || (c3 / 3) % heads != 0 {
            return Err(Error::Shape {
                op: "causal_attention",
                left: vec![t, c3],
                right: vec![heads],
            });
        }
        let d = c3 / 3;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let x = self.value(qkv).data();
        let mut probs = vec![0.0; heads * t * t];
        let mut out = vec![0.0; t * d];
        let mut scores = vec![0.0; t];
        for h in 0..heads {
            let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
            for i in 0..t {
                let q = &x[i * c3 + qo..i * c3 + qo + dh];
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    let k = &x[j * c3 + ko..j * c3 + ko + dh];
                    let s = dot(q, k) * scale;
                    scores[j] = s;
                    max = max.max(s);
                }
                let mut z = 0.0;
                for s in scores[..=i].iter_mut() {
                    *s = (*s - max).exp();
                    z += *s;
                }
                let p_row = &mut probs[(h * t + i) * t..(h * t + i) * t + t];
                let o = &mut out[i * d + h * dh..i * d + h * dh + dh];
                for j in 0..=i {
                    let p = scores[j] / z;
                    p_row[j] = p;
                    let v = &x[j * c3 + vo..j * c3 + vo + dh];
                    for (ov, &vv) in o.iter_mut().zip(v) {
                        *ov += p * vv;
                    }
                }
            }
        }
        Ok(self.push(
            Tensor::new(vec![t, d], out)?,
            Op::CausalAttention { qkv, heads, probs },
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Grads { grads, slots: self.slots() })
    }

    fn slots(&self) -> Vec<(usize, usize)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Leaf { slot: Some(s) } => Some((s, i)),
                _ => None,
            })
            .collect()
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                acc(grads, *a, self.len_of(*a), |buf| axpy(buf, 1.0, g));
                acc(grads, *b, self.len_of(*b), |buf| axpy(buf, 1.0, g));
            }
            Op::Sub(a, b) => {
                acc(grads, *a, self.len_of(*a), |buf| axpy(buf, 1.0, g));
                acc(grads, *b, self.len_of(*b), |buf| axpy(buf, -1.0, g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(grads, *a, av.len(), |buf| {
                    for ((o, &gi), &y) in buf.iter_mut().zip(g).zip(bv) {
                        *o += gi * y;
                    }
                });
                acc(grads, *b, bv.len(), |buf| {
                    for ((o, &gi), &x) in buf.iter_mut().zip(g).zip(av) {
                        *o += gi * x;
                    }
                });
            }
            Op::Scale(a, k) => acc(grads, *a, g.len(), |buf| axpy(buf, *k, g)),
            Op::AddRow(a, bias) => {
                acc(grads, *a, g.len(), |buf| axpy(buf, 1.0, g));
                let c = self.len_of(*bias);
                acc(grads, *bias, c, |buf| {
                    for row in g.chunks(c) {
                        axpy(buf, 1.0, row);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.rows_cols();
                let (_, n) = self.nodes[b.0].value.rows_cols();
                let (av, bv) = (val(*a), val(*b));
                acc(grads, *a, m * k, |buf| {
                    // dA = dC · Bᵀ
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            buf[i * k + p] += dot(gr, &bv[p * n..(p + 1) * n]);
                        }
                    }
                });
                acc(grads, *b, k * n, |buf| {
                    // dB = Aᵀ · dC
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let a_ip = av[i * k + p];
                            if a_ip != 0.0 {
                                axpy(&mut buf[p * n..(p + 1) * n], a_ip, gr);
                            }
                        }
                    }
                });
            }
            Op::Exp(a) => {
                let out = node.value.data();
                acc(grads, *a, g.len(), |buf| {
                    for ((o, &gi), &y) in buf.iter_mut().zip(g).zip(out) {
                        *o += gi * y;
                    }
                });
            }
            Op::Log(a) => {
                let x = val(*a);
                acc(grads, *a, g.len(), |buf| {
                    for ((o, &gi), &xi) in buf.iter_mut().zip(g).zip(x) {
                        *o += gi / xi;
                    }
                });
            }
            Op::Sigmoid(a) => {
                let out = node.value.data();
                acc(grads, *a, g.len(), |buf| {
                    for ((o, &gi), &s) in buf.iter_mut().zip(g).zip(out) {
                        *o += gi * s * (1.0 - s);
                    }
                });
            }
            Op::LogSigmoid(a) => {
                let x = val(*a);
                acc(grads, *a, g.len(), |buf| {
                    for ((o, &gi), &xi) in buf.iter_mut().zip(g).zip(x) {
                        *o += gi * sigmoid(-xi);
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let out = node.value.data();
                let (_, c) = node.value.rows_cols();
                acc(grads, *a, g.len(), |buf| {
                    for ((brow, grow), orow) in buf.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)) {
                        let gs: f64 = grow.iter().sum();
                        for ((b, &gi), &lp) in brow.iter_mut().zip(grow).zip(orow) {
                            *b += gi - lp.exp() * gs;
                        }
                    }
                });
            }
            Op::Gather { input, index } => {
                let c = self.nodes[input.0].value.rows_cols().1;
                acc(grads, *input, self.len_of(*input), |buf| {
                    for (i, (&j, &gi)) in index.iter().zip(g).enumerate() {
                        buf[i * c + j] += gi;
                    }
                });
            }
            Op::Embed { table, index } => {
                let c = self.nodes[table.0].value.rows_cols().1;
                acc(grads, *table, self.len_of(*table), |buf| {
                    for (&row, grow) in index.iter().zip(g.chunks(c)) {
                        axpy(&mut buf[row * c..(row + 1) * c], 1.0, grow);
                    }
                });
            }
            Op::SliceRows { input, start } => {
                let c = self.nodes[input.0].value.rows_cols().1;
                let off = start * c;
                acc(grads, *input, self.len_of(*input), |buf| {
                    axpy(&mut buf[off..off + g.len()], 1.0, g);
                });
            }
            Op::Sum(a) => {
                let n = self.len_of(*a);
                acc(grads, *a, n, |buf| buf.iter_mut().for_each(|o| *o += g[0]));
            }
            Op::Mean(a) => {
                let n = self.len_of(*a);
                let s = g[0] / n as f64;
                acc(grads, *a, n, |buf| buf.iter_mut().for_each(|o| *o += s));
            }
            Op::Gelu(a) => {
                let x = val(*a);
                acc(grads, *a, g.len(), |buf| {
                    for ((o, &gi), &xi) in buf.iter_mut().zip(g).zip(x) {
                        let u = GELU_C * (xi + 0.044715 * xi * xi * xi);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * xi * xi);
                        *o += gi * (0.5 * (1.0 + t) + 0.5 * xi * (1.0 - t * t) * du);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = self.len_of(*gain);
                let gv = val(*gain);
                acc(grads, *gain, c, |buf| {
                    for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for ((b, &gi), &h) in buf.iter_mut().zip(grow).zip(hrow) {
                            *b += gi * h;
                        }
                    }
                });
                acc(grads, *bias, c, |buf| {
                    for grow in g.chunks(c) {
                        axpy(buf, 1.0, grow);
                    }
                });
                acc(grads, *x, g.len(), |buf| {
                    let mut dh = vec![0.0; c];
                    for (i, ((brow, grow), hrow)) in buf
                        .chunks_mut(c)
                        .zip(g.chunks(c))
                        .zip(xhat.chunks(c))
                        .enumerate()
                    {
                        for j in 0..c {
                            dh[j] = grow[j] * gv[j];
                        }
                        let m1 = dh.iter().sum::<f64>() / c as f64;
                        let m2 = dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            brow[j] += rstd[i] * (dh[j] - m1 - hrow[j] * m2);
                        }
                    }
                });
            }
            Op::CausalAttention { qkv, heads, probs } => {
                let (t, c3) = self.nodes[qkv.0].value.rows_cols();
                let d = c3 / 3;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let x = val(*qkv);
                acc(grads, *qkv, t * c3, |buf| {
                    let mut dp = vec![0.0; t];
                    for h in 0..*heads {
                        let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
                        for i in 0..t {
                            let p_row = &probs[(h * t + i) * t..(h * t + i) * t + t];
                            let go = &g[i * d + h * dh..i * d + h * dh + dh];
                            let mut weighted = 0.0;
                            for j in 0..=i {
                                let v = &x[j * c3 + vo..j * c3 + vo + dh];
                                dp[j] = dot(go, v);
                                weighted += p_row[j] * dp[j];
                                axpy(&mut buf[j * c3 + vo..j * c3 + vo + dh], p_row[j], go);
                            }
                            for j in 0..=i {
                                let ds = p_row[j] * (dp[j] - weighted) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let (qs, ks) = (i * c3 + qo, j * c3 + ko);
                                for e in 0..dh {
                                    buf[qs + e] += ds * x[ks + e];
                                    buf[ks + e] += ds * x[qs + e];
                                }
                            }
                        }
                    }
                });
            }
        }
    }

    fn len_of(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
    slots: Vec<(usize, usize)>,
}

impl Grads {
    /// Gradient with respect to any node; `None` when the node is not on the
    /// path to the loss (its gradient is exactly zero).
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Adds every parameter-leaf gradient into `out[slot]`.
    pub fn accumulate_params(&self, out: &mut [Vec<f64>]) {
        for &(slot, node) in &self.slots {
            if let Some(g) = &self.grads[node] {
                axpy(&mut out[slot], 1.0, g);
            }
        }
    }
}

/// `C[m,n] = A[m,k] · B[k,n]`, accumulated into a zeroed `out`.
pub fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip != 0.0 {
                axpy(orow, a_ip, &b[p * n..(p + 1) * n]);
            }
        }
    }
}

#[inline]
pub(crate) fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

/// Max-subtracted `ln Σ exp(x)`.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
