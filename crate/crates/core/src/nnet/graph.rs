//! Tape-based reverse-mode differentiation over the handful of operations the
//! matcher and translator need.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::tensor::{gemm, Tensor};
use crate::rng::{Rng, RngExt};
use crate::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Lower clamp on the predicted probability of the labelled class.
pub const BCE_PROB_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

/// Batch layout for [`Graph::attention`]: `batch` sequences of `lq` queries
/// attending over `lk` keys, split into `heads` heads.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnLayout {
    pub batch: usize,
    pub lq: usize,
    pub lk: usize,
    pub heads: usize,
    /// `batch * lk` flags; masked keys receive no attention.
    pub key_valid: Vec<bool>,
    /// Query `i` may only see keys `j <= i`.
    pub causal: bool,
}

impl AttnLayout {
    fn allowed(&self, b: usize, i: usize, j: usize) -> bool {
        self.key_valid[b * self.lk + j] && (!self.causal || j <= i)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    AddBias { x: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Relu { x: Var },
    Sigmoid { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    GatherRows { table: Var, idx: Vec<usize> },
    Attention { q: Var, k: Var, v: Var, layout: AttnLayout, probs: Vec<f64> },
    MeanPool { x: Var, len: usize, valid: Vec<bool>, counts: Vec<usize> },
    RowSum { x: Var },
    Sum { x: Var },
    SoftmaxXent { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64>, count: usize },
    Bce { logits: Var, labels: Vec<f64>, sig: Vec<f64>, live: Vec<bool> },
    GateAdd { h: Var, v: Var, gate: Var, open: Vec<bool> },
    Dropout { x: Var, mask: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A recorded forward computation.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    training: bool,
}

fn shape_err(op: &str, detail: String) -> Error {
    Error::Shape(format!("{op}: {detail}"))
}

impl Graph {
    /// `training` enables dropout.
    pub fn new(training: bool) -> Self {
        Self { nodes: Vec::new(), training }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.into()));
        }
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::MatMul { a, b } | Op::Add { a, b } | Op::Mul { a, b } => self.needs(*a) || self.needs(*b),
            Op::AddBias { x, b } => self.needs(*x) || self.needs(*b),
            Op::Scale { x, .. }
            | Op::Relu { x }
            | Op::Sigmoid { x }
            | Op::MeanPool { x, .. }
            | Op::RowSum { x }
            | Op::Sum { x }
            | Op::Dropout { x, .. } => self.needs(*x),
            Op::LayerNorm { x, gamma, beta, .. } => self.needs(*x) || self.needs(*gamma) || self.needs(*beta),
            Op::GatherRows { table, .. } => self.needs(*table),
            Op::Attention { q, k, v, .. } => self.needs(*q) || self.needs(*k) || self.needs(*v),
            Op::SoftmaxXent { logits, .. } | Op::Bce { logits, .. } => self.needs(*logits),
            Op::GateAdd { h, v, gate, .. } => self.needs(*h) || self.needs(*v) || self.needs(*gate),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A differentiable input.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// `[m x k] * [k x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        if tb.rows() != k || tb.shape().len() != 2 {
            return Err(shape_err("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape())));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, 0.0);
        let t = Tensor::matrix(m, n, out)?;
        self.push(t, Op::MatMul { a, b }, "matmul")
    }

    /// Adds a length-`n` bias to every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        if tb.len() != tx.cols() {
            return Err(shape_err("add_bias", format!("{:?} + {:?}", tx.shape(), tb.shape())));
        }
        let mut out = tx.clone();
        let n = tb.len();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += tb.data()[i % n];
        }
        self.push(out, Op::AddBias { x, b }, "add_bias")
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", format!("{:?} + {:?}", ta.shape(), tb.shape())));
        }
        let mut out = ta.clone();
        out.add_assign(tb.data());
        self.push(out, Op::Add { a, b }, "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", format!("{:?} * {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        self.push(out, Op::Mul { a, b }, "mul")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let tx = self.value(x);
        let out = Tensor::new(tx.shape(), tx.data().iter().map(|v| v * c).collect())?;
        self.push(out, Op::Scale { x, c }, "scale")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let out = Tensor::new(tx.shape(), tx.data().iter().map(|v| v.max(0.0)).collect())?;
        self.push(out, Op::Relu { x }, "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let out = Tensor::new(tx.shape(), tx.data().iter().map(|&v| sigmoid(v)).collect())?;
        self.push(out, Op::Sigmoid { x }, "sigmoid")
    }

    /// Per-row normalization with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let (rows, cols) = (tx.rows(), tx.cols());
        if tg.len() != cols || tb.len() != cols {
            return Err(shape_err("layer_norm", format!("{:?} with gamma {:?}", tx.shape(), tg.shape())));
        }
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * tg.data()[c] + tb.data()[c];
            }
        }
        let out = Tensor::new(tx.shape(), out)?;
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, "layer_norm")
    }

    /// Row `i` of the output is row `idx[i]` of `table` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (rows, cols) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(shape_err("gather_rows", format!("row {i} of {rows}")));
            }
            out.extend_from_slice(t.row(i));
        }
        let out = Tensor::matrix(idx.len(), cols, out)?;
        self.push(out, Op::GatherRows { table, idx: idx.to_vec() }, "gather_rows")
    }

    /// Scaled dot-product attention, heads split along columns.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttnLayout) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        let AttnLayout { batch, lq, lk, heads, .. } = layout;
        if heads == 0 || d % heads != 0 {
            return Err(shape_err("attention", format!("width {d} not divisible by {heads} heads")));
        }
        if tq.rows() != batch * lq || tk.rows() != batch * lk || tv.rows() != batch * lk || tk.cols() != d || tv.cols() != d {
            return Err(shape_err(
                "attention",
                format!("q {:?} k {:?} v {:?} for batch {batch} x ({lq}, {lk})", tq.shape(), tk.shape(), tv.shape()),
            ));
        }
        if layout.key_valid.len() != batch * lk || (layout.causal && lq != lk) {
            return Err(shape_err("attention", "key mask or causal layout mismatch".into()));
        }
        let dh = d / heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut probs = vec![0.0; batch * heads * lq * lk];
        let mut out = vec![0.0; batch * lq * d];
        let mut scores = vec![0.0; lk];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..lq {
                    let qi = &tq.row(b * lq + i)[off..off + dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..lk {
                        if layout.allowed(b, i, j) {
                            let kj = &tk.row(b * lk + j)[off..off + dh];
                            let s = scale * qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>();
                            scores[j] = s;
                            max = max.max(s);
                        }
                    }
                    if max == f64::NEG_INFINITY {
                        continue;
                    }
                    let p = &mut probs[((b * heads + h) * lq + i) * lk..][..lk];
                    let mut z = 0.0;
                    for j in 0..lk {
                        if layout.allowed(b, i, j) {
                            p[j] = libm::exp(scores[j] - max);
                            z += p[j];
                        }
                    }
                    let o = &mut out[(b * lq + i) * d + off..][..dh];
                    for j in 0..lk {
                        if p[j] != 0.0 {
                            p[j] /= z;
                            let vj = &tv.row(b * lk + j)[off..off + dh];
                            for t in 0..dh {
                                o[t] += p[j] * vj[t];
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::matrix(batch * lq, d, out)?;
        self.push(out, Op::Attention { q, k, v, layout, probs }, "attention")
    }

    /// Attention weights recorded by an [`attention`](Self::attention) node,
    /// laid out `[batch][head][query][key]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mean over the valid rows of each length-`len` group: `[groups*len x d]`
    /// to `[groups x d]`. Groups without valid rows pool to zero.
    pub fn mean_pool(&mut self, x: Var, len: usize, valid: &[bool]) -> Result<Var> {
        let tx = self.value(x);
        let (rows, d) = (tx.rows(), tx.cols());
        if len == 0 || rows % len != 0 || valid.len() != rows {
            return Err(shape_err("mean_pool", format!("{rows} rows in groups of {len}")));
        }
        let groups = rows / len;
        let mut out = vec![0.0; groups * d];
        let mut counts = vec![0usize; groups];
        for r in 0..rows {
            if valid[r] {
                let g = r / len;
                counts[g] += 1;
                for (o, v) in out[g * d..(g + 1) * d].iter_mut().zip(tx.row(r)) {
                    *o += v;
                }
            }
        }
        for g in 0..groups {
            if counts[g] > 0 {
                for o in &mut out[g * d..(g + 1) * d] {
                    *o /= counts[g] as f64;
                }
            }
        }
        let out = Tensor::matrix(groups, d, out)?;
        self.push(out, Op::MeanPool { x, len, valid: valid.to_vec(), counts }, "mean_pool")
    }

    /// `[m x n]` to `[m x 1]`.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let data = (0..tx.rows()).map(|r| tx.row(r).iter().sum()).collect();
        let out = Tensor::matrix(tx.rows(), 1, data)?;
        self.push(out, Op::RowSum { x }, "row_sum")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, "sum")
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`, skipping rows whose target equals `ignore_index`.
    pub fn softmax_xent(&mut self, logits: Var, targets: &[u32], ignore_index: Option<u32>) -> Result<Var> {
        let tl = self.value(logits);
        let (rows, v) = (tl.rows(), tl.cols());
        if targets.len() != rows {
            return Err(shape_err("softmax_xent", format!("{} targets for {rows} rows", targets.len())));
        }
        let mut tg = Vec::with_capacity(rows);
        for &t in targets {
            if Some(t) == ignore_index {
                tg.push(None);
            } else if (t as usize) < v {
                tg.push(Some(t as usize));
            } else {
                return Err(Error::UnknownId { id: t, size: v });
            }
        }
        let count = tg.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::AllIgnored);
        }
        let mut probs = vec![0.0; rows * v];
        let mut loss = 0.0;
        for r in 0..rows {
            let Some(t) = tg[r] else { continue };
            let row = tl.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let p = &mut probs[r * v..(r + 1) * v];
            let mut z = 0.0;
            for (pi, x) in p.iter_mut().zip(row) {
                *pi = libm::exp(x - max);
                z += *pi;
            }
            for pi in p.iter_mut() {
                *pi /= z;
            }
            loss += libm::log(z) + max - row[t];
        }
        let out = Tensor::scalar(loss / count as f64);
        self.push(out, Op::SoftmaxXent { logits, targets: tg, probs, count }, "softmax_xent")
    }

    /// Mean binary cross-entropy of `[n x 1]` logits against 0/1 labels. The
    /// labelled-class probability is floored at [`BCE_PROB_FLOOR`], which caps
    /// each term at `-ln(1e-7)`; capped terms carry no gradient.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let tl = self.value(logits);
        if tl.len() != labels.len() {
            return Err(shape_err("bce", format!("{} labels for {} logits", labels.len(), tl.len())));
        }
        if labels.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let cap = -libm::log(BCE_PROB_FLOOR);
        let mut sig = Vec::with_capacity(labels.len());
        let mut live = Vec::with_capacity(labels.len());
        let mut loss = 0.0;
        for (&z, &y) in tl.data().iter().zip(labels) {
            // -[y ln s(z) + (1-y) ln(1-s(z))] = softplus(z) - y z
            let l = z.max(0.0) - y * z + libm::log1p(libm::exp(-libm::fabs(z)));
            sig.push(sigmoid(z));
            live.push(l < cap);
            loss += l.min(cap);
        }
        let out = Tensor::scalar(loss / labels.len() as f64);
        self.push(out, Op::Bce { logits, labels: labels.to_vec(), sig, live }, "bce")
    }

    /// `out_r = h_r + gate_r * v_r` for open rows; closed rows copy `h_r`.
    /// `gate` is `[n x 1]`.
    pub fn gate_add(&mut self, h: Var, v: Var, gate: Var, open: &[bool]) -> Result<Var> {
        let (th, tv, tg) = (self.value(h), self.value(v), self.value(gate));
        let (rows, d) = (th.rows(), th.cols());
        if tv.shape() != th.shape() || tg.len() != rows || open.len() != rows {
            return Err(shape_err("gate_add", format!("h {:?} v {:?} gate {:?}", th.shape(), tv.shape(), tg.shape())));
        }
        let mut out = th.clone();
        for r in 0..rows {
            if open[r] {
                let g = tg.data()[r];
                for (o, x) in out.data_mut()[r * d..(r + 1) * d].iter_mut().zip(tv.row(r)) {
                    *o += g * x;
                }
            }
        }
        self.push(out, Op::GateAdd { h, v, gate, open: open.to_vec() }, "gate_add")
    }

    /// Inverted dropout; identity outside training or at rate 0.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut Rng) -> Result<Var> {
        if !self.training || rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n).map(|_| if rng.unit_f64() < rate { 0.0 } else { keep }).collect();
        self.dropout_with_mask(x, mask)
    }

    /// Dropout with an explicit (already scaled) keep mask.
    pub fn dropout_with_mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let tx = self.value(x);
        if mask.len() != tx.len() {
            return Err(shape_err("dropout", format!("mask of {} for {:?}", mask.len(), tx.shape())));
        }
        let out = Tensor::new(tx.shape(), tx.data().iter().zip(&mask).map(|(a, m)| a * m).collect())?;
        self.push(out, Op::Dropout { x, mask }, "dropout")
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward", format!("loss of shape {:?}", self.value(loss).shape())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape(), vec![1.0])?);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients(grads))
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Tensor>], v: Var) -> Option<&'a mut Tensor> {
        if !self.needs(v) {
            return None;
        }
        let shape = self.value(v).shape();
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(shape)))
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if let Some(ga) = self.acc(grads, *a) {
                    gemm(m, n, k, gd, false, tb.data(), true, ga.data_mut(), 1.0);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm(k, m, n, ta.data(), true, gd, false, gb.data_mut(), 1.0);
                }
            }
            Op::AddBias { x, b } => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.add_assign(gd);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    let n = gb.len();
                    let gbd = gb.data_mut();
                    for (i, v) in gd.iter().enumerate() {
                        gbd[i % n] += v;
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if let Some(gv) = self.acc(grads, v) {
                        gv.add_assign(gd);
                    }
                }
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, g), y) in ga.data_mut().iter_mut().zip(gd).zip(tb) {
                        *o += g * y;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((o, g), x) in gb.data_mut().iter_mut().zip(gd).zip(ta) {
                        *o += g * x;
                    }
                }
            }
            Op::Scale { x, c } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (o, g) in gx.data_mut().iter_mut().zip(gd) {
                        *o += c * g;
                    }
                }
            }
            Op::Relu { x } => {
                let tx = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((o, g), v) in gx.data_mut().iter_mut().zip(gd).zip(tx) {
                        if *v > 0.0 {
                            *o += g;
                        }
                    }
                }
            }
            Op::Sigmoid { x } => {
                let y = node.value.data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((o, g), s) in gx.data_mut().iter_mut().zip(gd).zip(y) {
                        *o += g * s * (1.0 - s);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let cols = node.value.cols();
                let rows = node.value.rows();
                let tg = self.value(*gamma).data();
                if let Some(gb) = self.acc(grads, *beta) {
                    for (i, v) in gd.iter().enumerate() {
                        gb.data_mut()[i % cols] += v;
                    }
                }
                if let Some(gg) = self.acc(grads, *gamma) {
                    for (i, v) in gd.iter().enumerate() {
                        gg.data_mut()[i % cols] += v * xhat[i];
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..rows {
                        let gr = &gd[r * cols..(r + 1) * cols];
                        let hr = &xhat[r * cols..(r + 1) * cols];
                        let (mut m1, mut m2) = (0.0, 0.0);
                        for c in 0..cols {
                            dxhat[c] = gr[c] * tg[c];
                            m1 += dxhat[c];
                            m2 += dxhat[c] * hr[c];
                        }
                        m1 /= cols as f64;
                        m2 /= cols as f64;
                        let o = &mut gx.data_mut()[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            o[c] += rstd[r] * (dxhat[c] - m1 - hr[c] * m2);
                        }
                    }
                }
            }
            Op::GatherRows { table, idx } => {
                if let Some(gt) = self.acc(grads, *table) {
                    let cols = gt.cols();
                    for (r, &i) in idx.iter().enumerate() {
                        for c in 0..cols {
                            gt.data_mut()[i * cols + c] += gd[r * cols + c];
                        }
                    }
                }
            }
            Op::Attention { q, k, v, layout, probs } => self.backward_attention(*q, *k, *v, layout, probs, gd, grads),
            Op::MeanPool { x, len, valid, counts } => {
                if let Some(gx) = self.acc(grads, *x) {
                    let d = gx.cols();
                    for (r, &ok) in valid.iter().enumerate() {
                        if ok {
                            let grp = r / len;
                            let inv = 1.0 / counts[grp] as f64;
                            for c in 0..d {
                                gx.data_mut()[r * d + c] += gd[grp * d + c] * inv;
                            }
                        }
                    }
                }
            }
            Op::RowSum { x } => {
                if let Some(gx) = self.acc(grads, *x) {
                    let n = gx.cols();
                    for (i, o) in gx.data_mut().iter_mut().enumerate() {
                        *o += gd[i / n];
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for o in gx.data_mut() {
                        *o += gd[0];
                    }
                }
            }
            Op::SoftmaxXent { logits, targets, probs, count } => {
                if let Some(gl) = self.acc(grads, *logits) {
                    let v = gl.cols();
                    let scale = gd[0] / *count as f64;
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = t else { continue };
                        let o = &mut gl.data_mut()[r * v..(r + 1) * v];
                        for c in 0..v {
                            o[c] += scale * (probs[r * v + c] - if c == *t { 1.0 } else { 0.0 });
                        }
                    }
                }
            }
            Op::Bce { logits, labels, sig, live } => {
                if let Some(gl) = self.acc(grads, *logits) {
                    let scale = gd[0] / labels.len() as f64;
                    for (i, o) in gl.data_mut().iter_mut().enumerate() {
                        if live[i] {
                            *o += scale * (sig[i] - labels[i]);
                        }
                    }
                }
            }
            Op::GateAdd { h, v, gate, open } => {
                let d = node.value.cols();
                if let Some(gh) = self.acc(grads, *h) {
                    gh.add_assign(gd);
                }
                let tg = self.value(*gate).data();
                if let Some(gv) = self.acc(grads, *v) {
                    for (r, &o) in open.iter().enumerate() {
                        if o {
                            for c in 0..d {
                                gv.data_mut()[r * d + c] += tg[r] * gd[r * d + c];
                            }
                        }
                    }
                }
                let tv = self.value(*v);
                if let Some(gg) = self.acc(grads, *gate) {
                    for (r, &o) in open.iter().enumerate() {
                        if o {
                            gg.data_mut()[r] += tv.row(r).iter().zip(&gd[r * d..(r + 1) * d]).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for ((o, g), m) in gx.data_mut().iter_mut().zip(gd).zip(mask) {
                        *o += g * m;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        layout: &AttnLayout,
        probs: &[f64],
        gd: &[f64],
        grads: &mut [Option<Tensor>],
    ) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        let AttnLayout { batch, lq, lk, heads, .. } = *layout;
        let dh = d / heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut dq = vec![0.0; tq.len()];
        let mut dk = vec![0.0; tk.len()];
        let mut dv = vec![0.0; tv.len()];
        let mut dp = vec![0.0; lk];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..lq {
                    let p = &probs[((b * heads + h) * lq + i) * lk..][..lk];
                    let go = &gd[(b * lq + i) * d + off..][..dh];
                    let mut dot = 0.0;
                    for j in 0..lk {
                        if p[j] == 0.0 {
                            dp[j] = 0.0;
                            continue;
                        }
                        let vj = &tv.row(b * lk + j)[off..off + dh];
                        dp[j] = go.iter().zip(vj).map(|(x, y)| x * y).sum::<f64>();
                        dot += p[j] * dp[j];
                        let dvj = &mut dv[(b * lk + j) * d + off..][..dh];
                        for t in 0..dh {
                            dvj[t] += p[j] * go[t];
                        }
                    }
                    let qi = &tq.row(b * lq + i)[off..off + dh];
                    for j in 0..lk {
                        if p[j] == 0.0 {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - dot) * scale;
                        let kj = &tk.row(b * lk + j)[off..off + dh];
                        let dqi = &mut dq[(b * lq + i) * d + off..][..dh];
                        for t in 0..dh {
                            dqi[t] += ds * kj[t];
                        }
                        let dkj = &mut dk[(b * lk + j) * d + off..][..dh];
                        for t in 0..dh {
                            dkj[t] += ds * qi[t];
                        }
                    }
                }
            }
        }
        for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(gv) = self.acc(grads, var) {
                gv.add_assign(&buf);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients(Vec<Option<Tensor>>);

impl Gradients {
    /// Gradient of `v`; `None` when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zero-filled when `v` is off the loss path.
    pub fn get_or_zero(&self, g: &Graph, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(g.value(v).shape()))
    }

    /// Gradients for a set of named inputs.
    pub fn named(&self, g: &Graph, vars: &BTreeMap<String, Var>) -> BTreeMap<String, Tensor> {
        vars.iter().filter(|(_, v)| g.needs(**v)).map(|(n, v)| (n.clone(), self.get_or_zero(g, *v))).collect()
    }
}
