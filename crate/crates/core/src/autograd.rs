//! Reverse-mode differentiation over a recorded tape of matrix operations.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse, accumulates gradients into
//! the [`ParamStore`] entries that were read through [`Graph::param`], and
//! drops the tape. Every value on the tape is a matrix; vectors are `1 x n`.
//!
//! Shape mismatches between operands are programming errors and panic.
//! Conditions a caller can trigger with valid shapes (fully masked softmax
//! rows, zero-norm rows, non-finite losses) come back as [`Error`]s.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{row_moments, softmax_rows, ParamStore, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Input,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Softmax { x: Var, mask: Vec<bool>, log: bool },
    NormalizeRows { x: Var, norms: Vec<f64> },
    GatherRows { x: Var, index: Vec<usize> },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Sum(Var),
    SumCols(Var),
    Attention(Box<AttentionCache>),
}

#[derive(Debug)]
struct AttentionCache {
    q: Var,
    k: Var,
    v: Var,
    seq_len: usize,
    heads: usize,
    probs: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded forward computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

/// Gradients of a scalar with respect to every node that needed one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `var`, or `None` when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<Tensor> {
        let (r, c) = self.shapes[var.0];
        self.grads[var.0].as_ref().map(|g| Tensor::matrix(r, c, g.clone()))
    }
}

fn as_matrix(t: &Tensor) -> Tensor {
    Tensor::matrix(t.rows(), t.cols(), t.values().to_vec())
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let t = (C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let dst = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let src = &b[p * n..(p + 1) * n];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += aip * s;
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> (usize, usize) {
        let t = &self.nodes[var.0].value;
        (t.rows(), t.cols())
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(as_matrix(&t), Op::Constant, false)
    }

    /// A free leaf whose gradient is reported by [`Graph::gradients`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(as_matrix(&t), Op::Input, true)
    }

    /// Reads a parameter onto the tape. Repeated reads return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store.require(name)?;
        let v = self.push(as_matrix(t), Op::Param, true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let ((m, k), (k2, n)) = (self.shape(a), self.shape(b));
        assert_eq!(k, k2, "matmul {m}x{k} by {k2}x{n}");
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).values(), self.value(b).values(), m, k, n, &mut out);
        let rg = self.needs(&[a, b]);
        self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose();
        let rg = self.needs(&[a]);
        self.push(t, Op::Transpose(a), rg)
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "elementwise operands differ in shape");
        let (r, c) = self.shape(a);
        let out = self.value(a).values().iter().zip(self.value(b).values()).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.needs(&[a, b]);
        self.push(Tensor::matrix(r, c, out), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `x + row`, broadcasting a `1 x c` row over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let ((r, c), rs) = (self.shape(x), self.shape(row));
        assert_eq!(rs, (1, c), "add_row broadcast shape");
        let b = self.value(row).values();
        let out = self.value(x).values().chunks(c).flat_map(|xr| xr.iter().zip(b).map(|(p, q)| p + q)).collect();
        let rg = self.needs(&[x, row]);
        self.push(Tensor::matrix(r, c, out), Op::AddRow(x, row), rg)
    }

    /// `x * col`, scaling row `i` of `x` by `col[i]`.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Var {
        let ((r, c), cs) = (self.shape(x), self.shape(col));
        assert_eq!(cs, (r, 1), "mul_col broadcast shape");
        let w = self.value(col).values();
        let out = self.value(x).values().chunks(c).zip(w).flat_map(|(xr, &s)| xr.iter().map(move |p| p * s)).collect();
        let rg = self.needs(&[x, col]);
        self.push(Tensor::matrix(r, c, out), Op::MulCol(x, col), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let (r, c) = self.shape(x);
        let out = self.value(x).values().iter().map(|v| v * s).collect();
        let rg = self.needs(&[x]);
        self.push(Tensor::matrix(r, c, out), Op::Scale(x, s), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let out = self.value(x).values().iter().map(|&v| gelu(v)).collect();
        let rg = self.needs(&[x]);
        self.push(Tensor::matrix(r, c, out), Op::Gelu(x), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(gain), (1, c), "layer_norm gain width");
        assert_eq!(self.shape(bias), (1, c), "layer_norm bias width");
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        let (g, b) = (self.value(gain).values(), self.value(bias).values());
        for (i, row) in self.value(x).values().chunks(c).enumerate() {
            let (mean, is) = row_moments(row, eps);
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let rg = self.needs(&[x, gain, bias]);
        self.push(Tensor::matrix(r, c, out), Op::LayerNorm { x, gain, bias, xhat, inv_std }, rg)
    }

    /// Row-wise softmax (or log-softmax) over the entries where `mask` holds.
    /// `mask` covers the full matrix. Masked entries are exactly zero in the
    /// output, also for the log variant.
    pub fn softmax_rows(&mut self, x: Var, mask: Vec<bool>, log: bool) -> Result<Var> {
        let (r, c) = self.shape(x);
        if mask.len() != r * c {
            return Err(Error::Contract(format!("softmax mask has {} entries for {r}x{c}", mask.len())));
        }
        if !self.value(x).is_finite() {
            return Err(Error::Numeric("non-finite softmax logits".into()));
        }
        let mut out = vec![0.0; r * c];
        softmax_rows(self.value(x).values(), &mask, c, &mut out, log)?;
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::matrix(r, c, out), Op::Softmax { x, mask, log }, rg))
    }

    /// Softmax along `axis` with a validity vector running along that axis.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool], axis: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        match axis {
            1 => {
                if mask.len() != c {
                    return Err(Error::Contract("mask length differs from row width".into()));
                }
                let full = (0..r).flat_map(|_| mask.iter().copied()).collect();
                self.softmax_rows(x, full, false)
            }
            0 => {
                if mask.len() != r {
                    return Err(Error::Contract("mask length differs from column height".into()));
                }
                let t = self.transpose(x);
                let full = (0..c).flat_map(|_| mask.iter().copied()).collect();
                let s = self.softmax_rows(t, full, false)?;
                Ok(self.transpose(s))
            }
            _ => Err(Error::Contract(format!("axis {axis} out of range for a matrix"))),
        }
    }

    /// Scales each row to unit Euclidean norm. Rows with norm below `1e-12`
    /// are rejected.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        let mut norms = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for (i, row) in self.value(x).values().chunks(c).enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !n.is_finite() || n < 1e-12 {
                return Err(Error::Numeric(format!("row {i} has norm {n}, cannot normalize")));
            }
            norms.push(n);
            out.extend(row.iter().map(|v| v / n));
        }
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::matrix(r, c, out), Op::NormalizeRows { x, norms }, rg))
    }

    /// Output row `i` is row `index[i]` of `x`.
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Var {
        let (r, c) = self.shape(x);
        let src = self.value(x).values();
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in &index {
            assert!(i < r, "gather index {i} out of {r} rows");
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let rg = self.needs(&[x]);
        self.push(Tensor::matrix(index.len(), c, out), Op::GatherRows { x, index }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let r = self.shape(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                assert_eq!(self.shape(p).0, r, "concat_cols row count");
                self.shape(p).1
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).values()[i * w..(i + 1) * w]);
            }
        }
        let rg = self.needs(parts);
        self.push(Tensor::matrix(r, total, out), Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.shape(x);
        assert!(start + len <= c, "slice_cols out of range");
        let src = self.value(x).values();
        let out = (0..r).flat_map(|i| src[i * c + start..i * c + start + len].iter().copied()).collect();
        let rg = self.needs(&[x]);
        self.push(Tensor::matrix(r, len, out), Op::SliceCols { x, start }, rg)
    }

    /// Sum of all entries as a `1 x 1` scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).values().iter().sum();
        let rg = self.needs(&[x]);
        self.push(Tensor::matrix(1, 1, vec![s]), Op::Sum(x), rg)
    }

    /// Row sums as an `r x 1` column.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let out = self.value(x).values().chunks(c).map(|row| row.iter().sum()).collect();
        let rg = self.needs(&[x]);
        self.push(Tensor::matrix(r, 1, out), Op::SumCols(x), rg)
    }

    /// Multi-head scaled dot-product self-attention over stacked sequences.
    ///
    /// `q`, `k` and `v` hold `num_seq * seq_len` rows; rows of one sequence
    /// only attend within that sequence. `key_mask` marks valid rows; invalid
    /// keys receive exactly zero weight. A query whose sequence has no valid
    /// key produces a zero row.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, key_mask: &[bool], seq_len: usize, heads: usize) -> Var {
        let (n, d) = self.shape(q);
        assert_eq!(self.shape(k), (n, d), "attention key shape");
        assert_eq!(self.shape(v), (n, d), "attention value shape");
        assert_eq!(key_mask.len(), n, "attention mask length");
        assert!(seq_len > 0 && n % seq_len == 0, "rows not a multiple of sequence length");
        assert!(heads > 0 && d % heads == 0, "width not divisible by heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let num_seq = n / seq_len;
        let (qv, kv, vv) = (self.value(q).values(), self.value(k).values(), self.value(v).values());
        let mut probs = vec![0.0; num_seq * heads * seq_len * seq_len];
        let mut out = vec![0.0; n * d];
        let mut scores = vec![0.0; seq_len];
        for s in 0..num_seq {
            let base = s * seq_len;
            let valid = &key_mask[base..base + seq_len];
            if !valid.iter().any(|&m| m) {
                continue;
            }
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq_len {
                    let qi = &qv[(base + i) * d + off..(base + i) * d + off + dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..seq_len {
                        if valid[j] {
                            let kj = &kv[(base + j) * d + off..(base + j) * d + off + dh];
                            let sc = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                            scores[j] = sc;
                            max = max.max(sc);
                        }
                    }
                    let p = &mut probs[((s * heads + h) * seq_len + i) * seq_len..][..seq_len];
                    let mut total = 0.0;
                    for j in 0..seq_len {
                        if valid[j] {
                            p[j] = (scores[j] - max).exp();
                            total += p[j];
                        }
                    }
                    let dst = &mut out[(base + i) * d + off..(base + i) * d + off + dh];
                    for j in 0..seq_len {
                        if valid[j] {
                            p[j] /= total;
                            let vj = &vv[(base + j) * d + off..(base + j) * d + off + dh];
                            for (o, x) in dst.iter_mut().zip(vj) {
                                *o += p[j] * x;
                            }
                        }
                    }
                }
            }
        }
        let rg = self.needs(&[q, k, v]);
        let cache = AttentionCache { q, k, v, seq_len, heads, probs };
        self.push(Tensor::matrix(n, d, out), Op::Attention(Box::new(cache)), rg)
    }

    /// Reverse pass from a `1 x 1` loss. Returns gradients for every node.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got {:?}", lv.shape())));
        }
        if !lv.is_finite() {
            return Err(Error::Numeric(format!("loss is {}", lv.values()[0])));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.propagate(idx, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        let shapes = self.nodes.iter().map(|n| (n.value.rows(), n.value.cols())).collect();
        Ok(Gradients { grads, shapes })
    }

    /// Accumulates d(loss)/d(param) into the store and frees the tape.
    /// Gradients add onto whatever the store already holds; call
    /// [`ParamStore::zero_grad`] first for a fresh gradient.
    pub fn backward(self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (name, var) in &self.params {
            let t = store.get_mut(name).expect("parameter read from this store");
            match &grads.grads[var.0] {
                Some(g) => t.accumulate_grad(g),
                None => t.accumulate_grad(&vec![0.0; t.len()]),
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let (r, c) = (node.value.rows(), node.value.cols());
        match &node.op {
            Op::Constant | Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = c;
                if self.nodes[a.0].requires_grad {
                    let bv = self.value(*b).values();
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            da[i * k + p] = dy[i * n..(i + 1) * n].iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    self.acc(grads, *a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let av = self.value(*a).values();
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let drow = &dy[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = av[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for (d, g) in db[p * n..(p + 1) * n].iter_mut().zip(drow) {
                                *d += aip * g;
                            }
                        }
                    }
                    self.acc(grads, *b, &db);
                }
            }
            Op::Transpose(a) => {
                let t = Tensor::matrix(r, c, dy.to_vec()).transpose();
                self.acc(grads, *a, t.values());
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, dy);
                self.acc(grads, *b, dy);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, dy);
                let neg: Vec<f64> = dy.iter().map(|g| -g).collect();
                self.acc(grads, *b, &neg);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).values(), self.value(*b).values());
                if self.nodes[a.0].requires_grad {
                    let da: Vec<f64> = dy.iter().zip(bv).map(|(g, y)| g * y).collect();
                    self.acc(grads, *a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let db: Vec<f64> = dy.iter().zip(av).map(|(g, x)| g * x).collect();
                    self.acc(grads, *b, &db);
                }
            }
            Op::AddRow(x, row) => {
                self.acc(grads, *x, dy);
                if self.nodes[row.0].requires_grad {
                    let mut db = vec![0.0; c];
                    for chunk in dy.chunks(c) {
                        db.iter_mut().zip(chunk).for_each(|(d, g)| *d += g);
                    }
                    self.acc(grads, *row, &db);
                }
            }
            Op::MulCol(x, col) => {
                let (xv, w) = (self.value(*x).values(), self.value(*col).values());
                if self.nodes[x.0].requires_grad {
                    let dx: Vec<f64> = dy.chunks(c).zip(w).flat_map(|(g, &s)| g.iter().map(move |v| v * s)).collect();
                    self.acc(grads, *x, &dx);
                }
                if self.nodes[col.0].requires_grad {
                    let dw: Vec<f64> = dy
                        .chunks(c)
                        .zip(xv.chunks(c))
                        .map(|(g, xr)| g.iter().zip(xr).map(|(a, b)| a * b).sum())
                        .collect();
                    self.acc(grads, *col, &dw);
                }
            }
            Op::Scale(x, s) => {
                let dx: Vec<f64> = dy.iter().map(|g| g * s).collect();
                self.acc(grads, *x, &dx);
            }
            Op::Gelu(x) => {
                let dx: Vec<f64> = dy.iter().zip(self.value(*x).values()).map(|(g, &v)| g * gelu_grad(v)).collect();
                self.acc(grads, *x, &dx);
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let g = self.value(*gain).values();
                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![0.0; r * c];
                    let n = c as f64;
                    for i in 0..r {
                        let dyr = &dy[i * c..(i + 1) * c];
                        let xh = &xhat[i * c..(i + 1) * c];
                        let dxhat: Vec<f64> = dyr.iter().zip(g).map(|(a, b)| a * b).collect();
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dx[i * c + j] = inv_std[i] / n * (n * dxhat[j] - sum_d - xh[j] * sum_dx);
                        }
                    }
                    self.acc(grads, *x, &dx);
                }
                if self.nodes[gain.0].requires_grad {
                    let mut dg = vec![0.0; c];
                    for (dyr, xh) in dy.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += dyr[j] * xh[j];
                        }
                    }
                    self.acc(grads, *gain, &dg);
                }
                if self.nodes[bias.0].requires_grad {
                    let mut db = vec![0.0; c];
                    for dyr in dy.chunks(c) {
                        db.iter_mut().zip(dyr).for_each(|(d, g)| *d += g);
                    }
                    self.acc(grads, *bias, &db);
                }
            }
            Op::Softmax { x, mask, log } => {
                let out = node.value.values();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let row = i * c..(i + 1) * c;
                    let (o, g, m) = (&out[row.clone()], &dy[row.clone()], &mask[row.clone()]);
                    if *log {
                        let total: f64 = g.iter().zip(m).filter(|(_, &ok)| ok).map(|(v, _)| v).sum();
                        for j in 0..c {
                            if m[j] {
                                dx[i * c + j] = g[j] - o[j].exp() * total;
                            }
                        }
                    } else {
                        let dot: f64 = g.iter().zip(o).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            if m[j] {
                                dx[i * c + j] = o[j] * (g[j] - dot);
                            }
                        }
                    }
                }
                self.acc(grads, *x, &dx);
            }
            Op::NormalizeRows { x, norms } => {
                let out = node.value.values();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let y = &out[i * c..(i + 1) * c];
                    let g = &dy[i * c..(i + 1) * c];
                    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[i * c + j] = (g[j] - y[j] * dot) / norms[i];
                    }
                }
                self.acc(grads, *x, &dx);
            }
            Op::GatherRows { x, index } => {
                let (xr, xc) = self.shape(*x);
                let mut dx = vec![0.0; xr * xc];
                for (i, &src) in index.iter().enumerate() {
                    for j in 0..xc {
                        dx[src * xc + j] += dy[i * xc + j];
                    }
                }
                self.acc(grads, *x, &dx);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if self.nodes[p.0].requires_grad {
                        let dp: Vec<f64> =
                            (0..r).flat_map(|i| dy[i * c + start..i * c + start + w].iter().copied()).collect();
                        self.acc(grads, p, &dp);
                    }
                    start += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (xr, xc) = self.shape(*x);
                let mut dx = vec![0.0; xr * xc];
                for i in 0..xr {
                    dx[i * xc + start..i * xc + start + c].copy_from_slice(&dy[i * c..(i + 1) * c]);
                }
                self.acc(grads, *x, &dx);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.acc(grads, *x, &vec![dy[0]; n]);
            }
            Op::SumCols(x) => {
                let xc = self.shape(*x).1;
                let dx: Vec<f64> = dy.iter().flat_map(|&g| std::iter::repeat_n(g, xc)).collect();
                self.acc(grads, *x, &dx);
            }
            Op::Attention(cache) => self.attention_backward(cache, c, dy, grads),
        }
    }

    fn attention_backward(&self, a: &AttentionCache, d: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (qv, kv, vv) = (self.value(a.q).values(), self.value(a.k).values(), self.value(a.v).values());
        let n = qv.len() / d;
        let (l, heads) = (a.seq_len, a.heads);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        let mut dp = vec![0.0; l];
        for s in 0..n / l {
            let base = s * l;
            for h in 0..heads {
                let off = h * dh;
                for i in 0..l {
                    let p = &a.probs[((s * heads + h) * l + i) * l..][..l];
                    let gi = &dy[(base + i) * d + off..(base + i) * d + off + dh];
                    let mut dot = 0.0;
                    for j in 0..l {
                        if p[j] == 0.0 {
                            dp[j] = 0.0;
                            continue;
                        }
                        let vj = &vv[(base + j) * d + off..(base + j) * d + off + dh];
                        dp[j] = gi.iter().zip(vj).map(|(x, y)| x * y).sum();
                        dot += p[j] * dp[j];
                        for (t, g) in dv[(base + j) * d + off..(base + j) * d + off + dh].iter_mut().zip(gi) {
                            *t += p[j] * g;
                        }
                    }
                    for j in 0..l {
                        if p[j] == 0.0 {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - dot) * scale;
                        for t in 0..dh {
                            dq[(base + i) * d + off + t] += ds * kv[(base + j) * d + off + t];
                            dk[(base + j) * d + off + t] += ds * qv[(base + i) * d + off + t];
                        }
                    }
                }
            }
        }
        self.acc(grads, a.q, &dq);
        self.acc(grads, a.k, &dk);
        self.acc(grads, a.v, &dv);
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], target: Var, delta: &[f64]) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        match &mut grads[target.0] {
            Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
            slot => *slot = Some(delta.to_vec()),
        }
    }
}
