//! Reverse-mode gradient tape.
//!
//! Operations append nodes to a [`Tape`] and return [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar node walks the tape in reverse and returns
//! the gradient of that scalar with respect to every node that depends on a
//! leaf. Constants never receive gradients, which is also how values are
//! detached.

use std::borrow::Cow;

use crate::error::{Result, TensorError};
use crate::kernels;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Unary elementwise functions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Gelu,
    Tanh,
    Exp,
    Log,
}

/// Binary elementwise functions; the right operand may broadcast over trailing dims.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

/// Packing of a batch of sequences for fused multi-head attention.
///
/// Q, K and V are `[batch * seq_len, heads * head_dim]` with head `h` occupying
/// columns `h*head_dim .. (h+1)*head_dim`. Keys at positions `>= lengths[b]`
/// are masked out.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionLayout {
    pub batch: usize,
    pub seq_len: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub lengths: Vec<usize>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    MatMulNT { a: usize, b: usize, m: usize, k: usize, n: usize },
    Binary { f: Binary, a: usize, b: usize },
    Scale { a: usize, c: f64 },
    Unary { f: Unary, a: usize },
    Softmax { a: usize, inv_t: f64 },
    LogSoftmax { a: usize, inv_t: f64 },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Attention { q: usize, k: usize, v: usize, layout: AttentionLayout, probs: Vec<f64> },
    GatherRows { a: usize, idx: Vec<usize> },
    ScatterRows { a: usize, idx: Vec<usize> },
    SelectCols { a: usize, cols: Vec<usize> },
    SegmentMean { a: usize, segments: Vec<(usize, usize)> },
    L2Normalize { a: usize, norms: Vec<f64> },
    ConcatRows { parts: Vec<usize> },
    Sum { a: usize },
    Mean { a: usize },
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Vec<f64> },
    Reshape { a: usize },
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `var`, or `None` if the root does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Like [`get`](Self::get) but returns zeros of the right shape when unreachable.
    pub fn get_or_zeros(&self, tape: &Tape, var: Var) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(var).shape()))
    }
}

/// Values may be borrowed (`leaf_ref`, `constant_ref`) for the tape's lifetime,
/// so parameters need not be copied onto every tape.
#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    match t.data().iter().position(|v| !v.is_finite()) {
        Some(index) => Err(TensorError::Numeric {
            op,
            index,
            value: t.data()[index],
        }),
        None => Ok(()),
    }
}

/// Whether `b` broadcasts against `a` (equal shapes, trailing-suffix shapes or a scalar).
fn broadcastable(a: &Tensor, b: &Tensor) -> bool {
    if b.numel() == 1 {
        return true;
    }
    let (sa, sb) = (a.shape(), b.shape());
    sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb
}

impl<'a> Tape<'a> {
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
        self.push_cow(Cow::Owned(value), op, requires_grad)
    }

    fn push_cow(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Differentiable input borrowed for the lifetime of the tape.
    pub fn leaf_ref(&mut self, value: &'a Tensor) -> Var {
        self.push_cow(Cow::Borrowed(value), Op::Leaf, true)
    }

    /// Constant borrowed for the lifetime of the tape.
    pub fn constant_ref(&mut self, value: &'a Tensor) -> Var {
        self.push_cow(Cow::Borrowed(value), Op::Constant, false)
    }

    /// Constant copy of `v`'s current value (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.push_cow(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v.0)
    }

    fn matrix_dims(t: &Tensor) -> Option<(usize, usize)> {
        match t.shape() {
            [r, c] => Some((*r, *c)),
            [c] => Some((1, *c)),
            _ => None,
        }
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((m, k), (k2, n)) = match (Self::matrix_dims(ta), Self::matrix_dims(tb)) {
            (Some(x), Some(y)) => (x, y),
            _ => return Err(shape_err("matmul", ta, tb)),
        };
        if k != k2 || tb.shape().len() != 2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(value, Op::MatMul { a: a.0, b: b.0, m, k, n }, rg))
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((m, k), (n, k2)) = match (Self::matrix_dims(ta), Self::matrix_dims(tb)) {
            (Some(x), Some(y)) => (x, y),
            _ => return Err(shape_err("matmul_nt", ta, tb)),
        };
        if k != k2 {
            return Err(shape_err("matmul_nt", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(value, Op::MatMulNT { a: a.0, b: b.0, m, k, n }, rg))
    }

    pub fn binary(&mut self, f: Binary, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !broadcastable(ta, tb) {
            return Err(shape_err(
                match f {
                    Binary::Add => "add",
                    Binary::Sub => "sub",
                    Binary::Mul => "mul",
                },
                ta,
                tb,
            ));
        }
        let nb = tb.numel();
        let bd = tb.data();
        let data: Vec<f64> = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = bd[i % nb];
                match f {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                }
            })
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(value, Op::Binary { f, a: a.0, b: b.0 }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let value = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x * c).collect())
            .expect("same shape");
        let rg = self.rg(a.0);
        self.push(value, Op::Scale { a: a.0, c }, rg)
    }

    pub fn unary(&mut self, f: Unary, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (name, data): (&'static str, Vec<f64>) = match f {
            Unary::Gelu => ("gelu", ta.data().iter().map(|&x| kernels::gelu(x)).collect()),
            Unary::Tanh => ("tanh", ta.data().iter().map(|x| x.tanh()).collect()),
            Unary::Exp => ("exp", ta.data().iter().map(|x| x.exp()).collect()),
            Unary::Log => {
                if let Some(index) = ta.data().iter().position(|&x| x.is_nan() || x <= 0.0) {
                    return Err(TensorError::Numeric {
                        op: "log",
                        index,
                        value: ta.data()[index],
                    });
                }
                ("log", ta.data().iter().map(|x| x.ln()).collect())
            }
        };
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        check_finite(name, &value)?;
        let rg = self.rg(a.0);
        Ok(self.push(value, Op::Unary { f, a: a.0 }, rg))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Gelu, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Tanh, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    fn check_temperature(temperature: f64) -> Result<f64> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(TensorError::Usage(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        Ok(1.0 / temperature)
    }

    /// Softmax over the last dimension of `a / temperature`.
    pub fn softmax(&mut self, a: Var, temperature: f64) -> Result<Var> {
        let inv_t = Self::check_temperature(temperature)?;
        let ta = self.value(a);
        check_finite("softmax", ta)?;
        let c = ta.cols();
        let mut out = vec![0.0; ta.numel()];
        for (row, o) in ta.data().chunks(c).zip(out.chunks_mut(c)) {
            kernels::softmax_row(row, inv_t, o);
        }
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        let rg = self.rg(a.0);
        Ok(self.push(value, Op::Softmax { a: a.0, inv_t }, rg))
    }

    /// Log-softmax over the last dimension of `a / temperature`.
    pub fn log_softmax(&mut self, a: Var, temperature: f64) -> Result<Var> {
        let inv_t = Self::check_temperature(temperature)?;
        let ta = self.value(a);
        check_finite("log_softmax", ta)?;
        let c = ta.cols();
        let mut out = vec![0.0; ta.numel()];
        for (row, o) in ta.data().chunks(c).zip(out.chunks_mut(c)) {
            kernels::log_softmax_row(row, inv_t, o);
        }
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        let rg = self.rg(a.0);
        Ok(self.push(value, Op::LogSoftmax { a: a.0, inv_t }, rg))
    }

    /// Row-wise layer normalisation with learned gain and bias over the last dim.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let c = tx.cols();
        if tg.numel() != c || tb.numel() != c {
            return Err(shape_err("layer_norm", tx, tg));
        }
        let rows = tx.rows();
        let mut out = vec![0.0; tx.numel()];
        let mut xhat = vec![0.0; tx.numel()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x.0) || self.rg(gain.0) || self.rg(bias.0);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Fused scaled dot-product multi-head attention with key padding mask.
    ///
    /// Scores are scaled by `1/sqrt(layout.head_dim)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttentionLayout) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let AttentionLayout {
            batch,
            seq_len,
            heads,
            head_dim,
            ref lengths,
        } = layout;
        let width = heads * head_dim;
        let expected = [batch * seq_len, width];
        for t in [tq, tk, tv] {
            if t.shape() != expected {
                return Err(TensorError::Shape {
                    op: "attention",
                    lhs: t.shape().to_vec(),
                    rhs: expected.to_vec(),
                });
            }
        }
        if lengths.len() != batch || lengths.iter().any(|&l| l == 0 || l > seq_len) {
            return Err(TensorError::Usage(format!(
                "attention lengths {lengths:?} invalid for batch {batch} x seq {seq_len}"
            )));
        }
        let scale = 1.0 / (head_dim as f64).sqrt();
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut probs = vec![0.0; batch * heads * seq_len * seq_len];
        let mut out = vec![0.0; batch * seq_len * width];
        let mut scores = vec![0.0; seq_len];
        for b in 0..batch {
            let len = lengths[b];
            for h in 0..heads {
                let col = h * head_dim;
                for i in 0..seq_len {
                    let qi = &qd[(b * seq_len + i) * width + col..][..head_dim];
                    for (j, s) in scores[..len].iter_mut().enumerate() {
                        let kj = &kd[(b * seq_len + j) * width + col..][..head_dim];
                        *s = kernels::dot(qi, kj);
                    }
                    let p = &mut probs[((b * heads + h) * seq_len + i) * seq_len..][..len];
                    kernels::softmax_row(&scores[..len], scale, p);
                    let o = &mut out[(b * seq_len + i) * width + col..][..head_dim];
                    for (j, &pj) in p.iter().enumerate() {
                        let vj = &vd[(b * seq_len + j) * width + col..][..head_dim];
                        for (ov, &vv) in o.iter_mut().zip(vj) {
                            *ov += pj * vv;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(expected.to_vec(), out)?;
        let rg = self.rg(q.0) || self.rg(k.0) || self.rg(v.0);
        Ok(self.push(
            value,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                layout,
                probs,
            },
            rg,
        ))
    }

    /// Rows `idx` of the matrix view of `a` (also used as an embedding lookup).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let value = self.value(a).select_rows(idx)?;
        let rg = self.rg(a.0);
        Ok(self.push(
            value,
            Op::GatherRows {
                a: a.0,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Places row `i` of `a` at row `idx[i]` of a zero `[rows × cols]` matrix.
    pub fn scatter_rows(&mut self, a: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let ta = self.value(a);
        let c = ta.cols();
        if idx.len() != ta.rows() || idx.iter().any(|&i| i >= rows) {
            return Err(TensorError::Usage(format!(
                "scatter_rows: {} indices for {} rows into {rows}",
                idx.len(),
                ta.rows()
            )));
        }
        let mut out = vec![0.0; rows * c];
        for (src, &dst) in idx.iter().enumerate() {
            for j in 0..c {
                out[dst * c + j] += ta.data()[src * c + j];
            }
        }
        let value = Tensor::new(vec![rows, c], out)?;
        let rg = self.rg(a.0);
        Ok(self.push(
            value,
            Op::ScatterRows {
                a: a.0,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Columns `cols` (last-dim indices) of `a`.
    pub fn select_cols(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let value = self.value(a).select_cols(cols)?;
        let rg = self.rg(a.0);
        Ok(self.push(
            value,
            Op::SelectCols {
                a: a.0,
                cols: cols.to_vec(),
            },
            rg,
        ))
    }

    /// First `n` columns of `a`.
    pub fn narrow_cols(&mut self, a: Var, n: usize) -> Result<Var> {
        let cols: Vec<usize> = (0..n).collect();
        self.select_cols(a, &cols)
    }

    /// First `n` rows of `a`.
    pub fn narrow_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let rows: Vec<usize> = (0..n).collect();
        self.gather_rows(a, &rows)
    }

    /// Output row `s` is the mean of rows `start .. start+len` of `a` for `segments[s] = (start, len)`.
    pub fn segment_mean(&mut self, a: Var, segments: &[(usize, usize)]) -> Result<Var> {
        let ta = self.value(a);
        let c = ta.cols();
        let rows = ta.rows();
        let mut out = vec![0.0; segments.len() * c];
        for (s, &(start, len)) in segments.iter().enumerate() {
            if len == 0 || start + len > rows {
                return Err(TensorError::Usage(format!(
                    "segment ({start}, {len}) invalid for {rows} rows"
                )));
            }
            let o = &mut out[s * c..(s + 1) * c];
            for r in start..start + len {
                for (ov, &x) in o.iter_mut().zip(ta.row(r)) {
                    *ov += x;
                }
            }
            for ov in o.iter_mut() {
                *ov /= len as f64;
            }
        }
        let value = Tensor::new(vec![segments.len(), c], out)?;
        let rg = self.rg(a.0);
        Ok(self.push(
            value,
            Op::SegmentMean {
                a: a.0,
                segments: segments.to_vec(),
            },
            rg,
        ))
    }

    /// Each row divided by its Euclidean norm; a zero row is a numeric error.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let c = ta.cols();
        let mut norms = Vec::with_capacity(ta.rows());
        let mut out = Vec::with_capacity(ta.numel());
        for r in 0..ta.rows() {
            let row = ta.row(r);
            let norm = kernels::dot(row, row).sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(TensorError::Numeric {
                    op: "l2_normalize",
                    index: r * c,
                    value: norm,
                });
            }
            norms.push(norm);
            out.extend(row.iter().map(|x| x / norm));
        }
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        let rg = self.rg(a.0);
        Ok(self.push(value, Op::L2Normalize { a: a.0, norms }, rg))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Usage("concat_rows of nothing".into()))?;
        let c = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            if t.cols() != c {
                return Err(shape_err("concat_rows", self.value(*first), t));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(vec![rows, c], data)?;
        let rg = parts.iter().any(|p| self.rg(p.0));
        Ok(self.push(
            value,
            Op::ConcatRows {
                parts: parts.iter().map(|p| p.0).collect(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a.0);
        self.push(Tensor::scalar(s), Op::Sum { a: a.0 }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(a.0);
        self.push(Tensor::scalar(s), Op::Mean { a: a.0 }, rg)
    }

    /// Mean over rows of `-log softmax(logits)[row, target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        check_finite("cross_entropy", tl)?;
        let c = tl.cols();
        if targets.len() != tl.rows() {
            return Err(TensorError::Usage(format!(
                "cross_entropy: {} targets for {} rows",
                targets.len(),
                tl.rows()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(TensorError::Usage(format!(
                "cross_entropy: target {bad} out of range for {c} classes"
            )));
        }
        let mut probs = vec![0.0; tl.numel()];
        let mut loss = 0.0;
        let mut logp = vec![0.0; c];
        for (r, &t) in targets.iter().enumerate() {
            kernels::log_softmax_row(tl.row(r), 1.0, &mut logp);
            loss -= logp[t];
            for j in 0..c {
                probs[r * c + j] = logp[j].exp();
            }
        }
        loss /= targets.len() as f64;
        let rg = self.rg(logits.0);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.rg(a.0);
        Ok(self.push(value, Op::Reshape { a: a.0 }, rg))
    }

    /// Reverse pass from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return Err(TensorError::Usage(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let n = root.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);

        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.filter(|_| self.nodes[i].requires_grad)
                    .map(|data| Tensor::new(self.nodes[i].value.shape().to_vec(), data))
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], id: usize) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[id].requires_grad {
            return None;
        }
        let numel = self.nodes[id].value.numel();
        Some(grads[id].get_or_insert_with(|| vec![0.0; numel]))
    }

    fn val(&self, id: usize) -> &[f64] {
        self.nodes[id].value.data()
    }

    fn propagate(&self, node: &Node<'_>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf | Op::Constant => {}
            &Op::MatMul { a, b, m, k, n } => {
                if let Some(ga) = self.acc(grads, a) {
                    kernels::matmul_nt_acc(g, self.val(b), ga, m, n, k);
                }
                if let Some(gb) = self.acc(grads, b) {
                    kernels::matmul_tn_acc(self.val(a), g, gb, m, k, n);
                }
            }
            &Op::MatMulNT { a, b, m, k, n } => {
                if let Some(ga) = self.acc(grads, a) {
                    kernels::matmul_acc(g, self.val(b), ga, m, n, k);
                }
                if let Some(gb) = self.acc(grads, b) {
                    kernels::matmul_tn_acc(g, self.val(a), gb, m, n, k);
                }
            }
            &Op::Binary { f, a, b } => {
                let nb = self.nodes[b].value.numel();
                if let Some(ga) = self.acc(grads, a) {
                    match f {
                        Binary::Add | Binary::Sub => {
                            for (x, gv) in ga.iter_mut().zip(g) {
                                *x += gv;
                            }
                        }
                        Binary::Mul => {
                            let bd = self.val(b);
                            for (i, (x, gv)) in ga.iter_mut().zip(g).enumerate() {
                                *x += gv * bd[i % nb];
                            }
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    match f {
                        Binary::Add => {
                            for (i, gv) in g.iter().enumerate() {
                                gb[i % nb] += gv;
                            }
                        }
                        Binary::Sub => {
                            for (i, gv) in g.iter().enumerate() {
                                gb[i % nb] -= gv;
                            }
                        }
                        Binary::Mul => {
                            let ad = self.val(a);
                            for (i, gv) in g.iter().enumerate() {
                                gb[i % nb] += gv * ad[i];
                            }
                        }
                    }
                }
            }
            &Op::Scale { a, c } => {
                if let Some(ga) = self.acc(grads, a) {
                    for (x, gv) in ga.iter_mut().zip(g) {
                        *x += c * gv;
                    }
                }
            }
            &Op::Unary { f, a } => {
                let y = node.value.data();
                let x = self.val(a);
                if let Some(ga) = self.acc(grads, a) {
                    for i in 0..g.len() {
                        let d = match f {
                            Unary::Gelu => kernels::gelu_grad(x[i]),
                            Unary::Tanh => 1.0 - y[i] * y[i],
                            Unary::Exp => y[i],
                            Unary::Log => 1.0 / x[i],
                        };
                        ga[i] += g[i] * d;
                    }
                }
            }
            &Op::Softmax { a, inv_t } => {
                let y = node.value.data();
                let c = node.value.cols();
                if let Some(ga) = self.acc(grads, a) {
                    for r in 0..y.len() / c {
                        let (yr, gr) = (&y[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                        let dotp = kernels::dot(yr, gr);
                        for j in 0..c {
                            ga[r * c + j] += inv_t * yr[j] * (gr[j] - dotp);
                        }
                    }
                }
            }
            &Op::LogSoftmax { a, inv_t } => {
                let y = node.value.data();
                let c = node.value.cols();
                if let Some(ga) = self.acc(grads, a) {
                    for r in 0..y.len() / c {
                        let gr = &g[r * c..(r + 1) * c];
                        let gsum: f64 = gr.iter().sum();
                        for j in 0..c {
                            ga[r * c + j] += inv_t * (gr[j] - y[r * c + j].exp() * gsum);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = node.value.cols();
                let rows = rstd.len();
                let gd = self.val(*gain);
                if let Some(gg) = self.acc(grads, *gain) {
                    for r in 0..rows {
                        for j in 0..c {
                            gg[j] += g[r * c + j] * xhat[r * c + j];
                        }
                    }
                }
                if let Some(gbias) = self.acc(grads, *bias) {
                    for r in 0..rows {
                        for j in 0..c {
                            gbias[j] += g[r * c + j];
                        }
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let mut dxhat = vec![0.0; c];
                    for r in 0..rows {
                        let xh = &xhat[r * c..(r + 1) * c];
                        for j in 0..c {
                            dxhat[j] = g[r * c + j] * gd[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / c as f64;
                        let mean_dx = kernels::dot(&dxhat, xh) / c as f64;
                        for j in 0..c {
                            gx[r * c + j] += rstd[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            } => self.attention_backward(g, *q, *k, *v, layout, probs, grads),
            Op::GatherRows { a, idx } => {
                let c = node.value.cols();
                if let Some(ga) = self.acc(grads, *a) {
                    for (src, &dst) in idx.iter().enumerate() {
                        for j in 0..c {
                            ga[dst * c + j] += g[src * c + j];
                        }
                    }
                }
            }
            Op::ScatterRows { a, idx } => {
                let c = node.value.cols();
                if let Some(ga) = self.acc(grads, *a) {
                    for (src, &dst) in idx.iter().enumerate() {
                        for j in 0..c {
                            ga[src * c + j] += g[dst * c + j];
                        }
                    }
                }
            }
            Op::SelectCols { a, cols } => {
                let src_c = self.nodes[*a].value.cols();
                let c = cols.len();
                if let Some(ga) = self.acc(grads, *a) {
                    for r in 0..g.len() / c {
                        for (j, &col) in cols.iter().enumerate() {
                            ga[r * src_c + col] += g[r * c + j];
                        }
                    }
                }
            }
            Op::SegmentMean { a, segments } => {
                let c = node.value.cols();
                if let Some(ga) = self.acc(grads, *a) {
                    for (s, &(start, len)) in segments.iter().enumerate() {
                        let inv = 1.0 / len as f64;
                        for r in start..start + len {
                            for j in 0..c {
                                ga[r * c + j] += g[s * c + j] * inv;
                            }
                        }
                    }
                }
            }
            Op::L2Normalize { a, norms } => {
                let y = node.value.data();
                let c = node.value.cols();
                if let Some(ga) = self.acc(grads, *a) {
                    for (r, &norm) in norms.iter().enumerate() {
                        let (yr, gr) = (&y[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                        let proj = kernels::dot(yr, gr);
                        for j in 0..c {
                            ga[r * c + j] += (gr[j] - yr[j] * proj) / norm;
                        }
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p].value.numel();
                    if let Some(gp) = self.acc(grads, p) {
                        for (x, gv) in gp.iter_mut().zip(&g[offset..offset + len]) {
                            *x += gv;
                        }
                    }
                    offset += len;
                }
            }
            &Op::Sum { a } => {
                if let Some(ga) = self.acc(grads, a) {
                    for x in ga.iter_mut() {
                        *x += g[0];
                    }
                }
            }
            &Op::Mean { a } => {
                if let Some(ga) = self.acc(grads, a) {
                    let scale = g[0] / ga.len() as f64;
                    for x in ga.iter_mut() {
                        *x += scale;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = self.nodes[*logits].value.cols();
                let scale = g[0] / targets.len() as f64;
                if let Some(gl) = self.acc(grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
            &Op::Reshape { a } => {
                if let Some(ga) = self.acc(grads, a) {
                    for (x, gv) in ga.iter_mut().zip(g) {
                        *x += gv;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[f64],
        q: usize,
        k: usize,
        v: usize,
        layout: &AttentionLayout,
        probs: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let AttentionLayout {
            batch,
            seq_len,
            heads,
            head_dim,
            ref lengths,
        } = *layout;
        let width = heads * head_dim;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let (qd, kd, vd) = (self.val(q), self.val(k), self.val(v));
        let numel = batch * seq_len * width;
        let mut dq = vec![0.0; numel];
        let mut dk = vec![0.0; numel];
        let mut dv = vec![0.0; numel];
        let mut dp = vec![0.0; seq_len];
        for b in 0..batch {
            let len = lengths[b];
            for h in 0..heads {
                let col = h * head_dim;
                for i in 0..seq_len {
                    let p = &probs[((b * heads + h) * seq_len + i) * seq_len..][..len];
                    let row_i = (b * seq_len + i) * width + col;
                    let go = &g[row_i..row_i + head_dim];
                    for j in 0..len {
                        let row_j = (b * seq_len + j) * width + col;
                        dp[j] = kernels::dot(go, &vd[row_j..row_j + head_dim]);
                        for (x, &gv) in dv[row_j..row_j + head_dim].iter_mut().zip(go) {
                            *x += p[j] * gv;
                        }
                    }
                    let c = kernels::dot(p, &dp[..len]);
                    for j in 0..len {
                        let ds = p[j] * (dp[j] - c) * scale;
                        let row_j = (b * seq_len + j) * width + col;
                        for t in 0..head_dim {
                            dq[row_i + t] += ds * kd[row_j + t];
                            dk[row_j + t] += ds * qd[row_i + t];
                        }
                    }
                }
            }
        }
        for (id, d) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(gx) = self.acc(grads, id) {
                for (x, dv) in gx.iter_mut().zip(&d) {
                    *x += dv;
                }
            }
        }
    }
}
