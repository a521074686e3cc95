use std::collections::HashMap;

use super::kernels::{dot, matmul_into, matmul_nt_into, matmul_tn_into};
use super::{Real, Result, Tensor, TensorError};
use crate::params::{ParamGrads, ParamId, ParamStore};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBias(Var, Var),
    Scale(Var, Var),
    MulCol(Var, Var),
    Affine { x: Var, mul: T },
    RowDot(Var, Var),
    Reshape(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SplitHeads { x: Var, groups: usize, tokens: usize, heads: usize },
    MergeHeads { x: Var, groups: usize, tokens: usize, heads: usize },
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    RmsNorm { x: Var, gain: Var, eps: T },
    LayerNorm { x: Var, gain: Var, bias: Var, eps: T },
    MeanTokens { x: Var, tokens: usize },
    AddTiled(Var, Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Define-by-run tape. Nodes are appended in evaluation order, so every
/// parent index is smaller than its consumer's and a reverse sweep visits
/// each node after all of its consumers.
///
/// A graph is built for one forward pass and dropped after its gradients
/// are harvested. It is `Send` but meant to be driven from one thread.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    param_vars: HashMap<ParamId, Var>,
    backward_done: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn invalid(op: &'static str, reason: impl Into<String>) -> TensorError {
    TensorError::InvalidArgument {
        op,
        reason: reason.into(),
    }
}

#[inline]
fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

const GELU_K: f64 = 0.044_715;

#[inline]
fn gelu_scalar<T: Real>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let u = c * (x + T::lit(GELU_K) * x * x * x);
    T::lit(0.5) * x * (T::one() + u.tanh())
}

#[inline]
fn gelu_grad_scalar<T: Real>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let u = c * (x + T::lit(GELU_K) * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::lit(3.0 * GELU_K) * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * du
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            param_vars: HashMap::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf holding a copy of a stored parameter. Repeated requests for the
    /// same parameter return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.variable(store.get(id).value.clone());
        self.param_vars.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Accumulated gradient for `v` after [`Graph::backward`]. `None` when the
    /// node does not participate in differentiation.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Drop all accumulated gradients so that `backward` may run again.
    pub fn reset_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
        self.backward_done = false;
    }

    /// Gradients of every parameter leaf, laid out like `store`.
    pub fn param_grads(&self, store: &ParamStore<T>) -> ParamGrads<T> {
        let mut out = ParamGrads::zeros_like(store);
        for (&id, &v) in &self.param_vars {
            if let Some(g) = self.grad(v) {
                out.get_mut(id).copy_from_slice(g);
            }
        }
        out
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Batched product over a leading group axis: `[G,m,k]·[G,k,n]`, or
    /// `[G,m,k]·[G,n,k]ᵀ` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(mismatch("bmm", &sa, &sb));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let kb = if trans_b { sb[2] } else { sb[1] };
        if kb != k {
            return Err(mismatch("bmm", &sa, &sb));
        }
        let mut out = vec![T::zero(); g * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for gi in 0..g {
                let a_s = &ad[gi * m * k..(gi + 1) * m * k];
                let b_s = &bd[gi * k * n..(gi + 1) * k * n];
                let o_s = &mut out[gi * m * n..(gi + 1) * m * n];
                if trans_b {
                    matmul_nt_into(a_s, b_s, o_s, m, k, n);
                } else {
                    matmul_into(a_s, b_s, o_s, m, k, n);
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new([g, m, n], out)?,
            Op::BatchMatMul { a, b, trans_b },
            rg,
        ))
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("hadamard", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Adds a `[D]` vector to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let d = tx.last_dim();
        if tb.numel() != d {
            return Err(mismatch("add_bias", tx.shape(), tb.shape()));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(d) {
            for (o, &b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(t, Op::AddBias(x, bias), rg))
    }

    /// Multiplies every element of `x` by the single element of `s`.
    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        if ts.numel() != 1 {
            return Err(mismatch("scale", tx.shape(), ts.shape()));
        }
        let sv = ts.data()[0];
        let t = tx.map(|v| v * sv);
        let rg = self.rg(&[x, s]);
        Ok(self.push(t, Op::Scale(x, s), rg))
    }

    /// Multiplies row `i` of `x` by `col[i]`; `col` has one entry per row.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let (tx, tc) = (self.value(x), self.value(col));
        let d = tx.last_dim();
        if tc.numel() != tx.rows() {
            return Err(mismatch("mul_col", tx.shape(), tc.shape()));
        }
        let mut data = tx.data().to_vec();
        for (row, &c) in data.chunks_mut(d).zip(tc.data()) {
            for o in row {
                *o *= c;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, col]);
        Ok(self.push(t, Op::MulCol(x, col), rg))
    }

    /// `mul·x + add` with constant coefficients.
    pub fn affine(&mut self, x: Var, mul: T, add: T) -> Result<Var> {
        let t = self.value(x).map(|v| mul * v + add);
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Affine { x, mul }, rg))
    }

    /// Per-row inner product: `[N,D]·[N,D] → [N,1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("row_dot", ta.shape(), tb.shape()));
        }
        let d = ta.last_dim();
        let data: Vec<T> = ta
            .data()
            .chunks(d)
            .zip(tb.data().chunks(d))
            .map(|(x, y)| dot(x, y))
            .collect();
        let n = data.len();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new([n, 1], data)?, Op::RowDot(a, b), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Columns `start..start+len` of a row view of `x`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.last_dim();
        if start + len > d {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                extent: d,
            });
        }
        let rows = tx.rows();
        let mut data = Vec::with_capacity(rows * len);
        for row in tx.data().chunks(d) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new([rows, len], data)?, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(invalid("concat_cols", "no inputs"));
        };
        let rows = self.value(first).rows();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(mismatch(
                    "concat_cols",
                    self.shape(first),
                    self.shape(p),
                ));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).last_dim()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new([rows, total], data)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// `[G·T, H·Dh] → [G·H, T, Dh]`.
    pub fn split_heads(&mut self, x: Var, groups: usize, tokens: usize, heads: usize) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.last_dim();
        if heads == 0 || !c.is_multiple_of(heads) || tx.rows() != groups * tokens {
            return Err(invalid(
                "split_heads",
                format!("shape {:?} incompatible with {groups}x{tokens} tokens, {heads} heads", tx.shape()),
            ));
        }
        let dh = c / heads;
        let src = tx.data();
        let mut data = vec![T::zero(); src.len()];
        for g in 0..groups {
            for t in 0..tokens {
                let row = &src[(g * tokens + t) * c..(g * tokens + t + 1) * c];
                for h in 0..heads {
                    let dst = ((g * heads + h) * tokens + t) * dh;
                    data[dst..dst + dh].copy_from_slice(&row[h * dh..(h + 1) * dh]);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new([groups * heads, tokens, dh], data)?,
            Op::SplitHeads { x, groups, tokens, heads },
            rg,
        ))
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: Var, groups: usize, tokens: usize, heads: usize) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.shape();
        if s.len() != 3 || s[0] != groups * heads || s[1] != tokens {
            return Err(invalid(
                "merge_heads",
                format!("shape {s:?} incompatible with {groups}x{tokens} tokens, {heads} heads"),
            ));
        }
        let dh = s[2];
        let c = heads * dh;
        let src = tx.data();
        let mut data = vec![T::zero(); src.len()];
        for g in 0..groups {
            for h in 0..heads {
                for t in 0..tokens {
                    let from = ((g * heads + h) * tokens + t) * dh;
                    let to = (g * tokens + t) * c + h * dh;
                    data[to..to + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new([groups * tokens, c], data)?,
            Op::MergeHeads { x, groups, tokens, heads },
            rg,
        ))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(gelu_scalar);
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Gelu(x), rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(sigmoid_scalar);
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Sigmoid(x), rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.last_dim();
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(d) {
            softmax_row(row);
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Softmax(x), rg))
    }

    /// Root-mean-square normalization over the last (channel) axis, one
    /// independent normalization per row: `y = gain·x / sqrt(mean(x²) + eps)`.
    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: T) -> Result<Var> {
        let (tx, tg) = (self.value(x), self.value(gain));
        let d = tx.last_dim();
        if tg.numel() != d {
            return Err(mismatch("rmsnorm", tx.shape(), tg.shape()));
        }
        if eps < T::zero() {
            return Err(invalid("rmsnorm", "eps must be non-negative"));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(d) {
            let r = inv_rms(row, eps);
            for (o, &g) in row.iter_mut().zip(tg.data()) {
                *o = g * *o * r;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, gain]);
        Ok(self.push(t, Op::RmsNorm { x, gain, eps }, rg))
    }

    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.last_dim();
        if tg.numel() != d || tb.numel() != d {
            return Err(mismatch("layernorm", tx.shape(), tg.shape()));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(d) {
            let (mean, rstd) = mean_rstd(row, eps);
            for ((o, &g), &b) in row.iter_mut().zip(tg.data()).zip(tb.data()) {
                *o = g * (*o - mean) * rstd + b;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, eps }, rg))
    }

    /// Averages consecutive blocks of `tokens` rows: `[G·T, D] → [G, D]`.
    pub fn mean_tokens(&mut self, x: Var, tokens: usize) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.last_dim();
        if tokens == 0 || !tx.rows().is_multiple_of(tokens) {
            return Err(invalid(
                "mean_tokens",
                format!("{} rows not divisible into groups of {tokens}", tx.rows()),
            ));
        }
        let groups = tx.rows() / tokens;
        let inv = T::one() / T::lit(tokens as f64);
        let mut data = vec![T::zero(); groups * d];
        for (r, row) in tx.data().chunks(d).enumerate() {
            let out = &mut data[(r / tokens) * d..(r / tokens + 1) * d];
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v * inv;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new([groups, d], data)?, Op::MeanTokens { x, tokens }, rg))
    }

    /// Adds a `[T, D]` table to each consecutive block of `T` rows of `x`.
    pub fn add_tiled(&mut self, x: Var, table: Var) -> Result<Var> {
        let (tx, tt) = (self.value(x), self.value(table));
        let (d, period) = (tt.last_dim(), tt.numel());
        if tx.last_dim() != d || period == 0 || tx.numel() % period != 0 {
            return Err(mismatch("add_tiled", tx.shape(), tt.shape()));
        }
        let mut data = tx.data().to_vec();
        for block in data.chunks_mut(period) {
            for (o, &v) in block.iter_mut().zip(tt.data()) {
                *o += v;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, table]);
        Ok(self.push(t, Op::AddTiled(x, table), rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.numel() == 0 {
            return Err(invalid("mean", "empty tensor"));
        }
        let s: T = tx.data().iter().copied().sum::<T>() / T::lit(tx.numel() as f64);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), rg))
    }

    /// Mean softmax cross-entropy of `[N, K]` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let k = tl.last_dim();
        let n = tl.rows();
        if labels.len() != n {
            return Err(invalid(
                "cross_entropy",
                format!("{} labels for {n} rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::IndexOutOfRange {
                op: "cross_entropy",
                index: bad,
                extent: k,
            });
        }
        let mut probs = tl.data().to_vec();
        let mut loss = T::zero();
        for (row, &label) in probs.chunks_mut(k).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss += lse - row[label];
            softmax_row(row);
        }
        loss = loss / T::lit(n as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`, filling gradients on every
    /// differentiable ancestor.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let shape = self.shape(loss).to_vec();
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        self.backward_done = true;
        if !self.requires_grad(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || self.grads[i].is_none() {
                continue;
            }
            let (lo, hi) = self.grads.split_at_mut(i);
            let gout = hi[0].as_deref().expect("checked above");
            let mut acc = Acc {
                nodes: &self.nodes,
                grads: lo,
            };
            backprop_node(&self.nodes[i], gout, &mut acc);
        }
        Ok(())
    }
}

struct Acc<'a, T> {
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Vec<T>>],
}

impl<T: Real> Acc<'_, T> {
    /// Gradient buffer for `v`, or `None` when `v` is not differentiable.
    fn buf(&mut self, v: Var) -> Option<&mut Vec<T>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn add_scaled(&mut self, v: Var, g: &[T], s: T) {
        if let Some(b) = self.buf(v) {
            for (o, &x) in b.iter_mut().zip(g) {
                *o += s * x;
            }
        }
    }
}

fn softmax_row<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v = *v / z;
    }
}

#[inline]
fn inv_rms<T: Real>(row: &[T], eps: T) -> T {
    let ms = dot(row, row) / T::lit(row.len() as f64);
    let denom = (ms + eps).sqrt();
    if denom > T::zero() {
        T::one() / denom
    } else {
        // eps = 0 and an all-zero row: zero is a fixed point.
        T::zero()
    }
}

#[inline]
fn mean_rstd<T: Real>(row: &[T], eps: T) -> (T, T) {
    let n = T::lit(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, T::one() / (var + eps).sqrt())
}

fn backprop_node<T: Real>(node: &Node<T>, gout: &[T], acc: &mut Acc<'_, T>) {
    let nodes = acc.nodes;
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            let (sa, sb) = (acc.val(a).shape().to_vec(), acc.val(b).shape().to_vec());
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            if nodes[a.0].requires_grad {
                let bd = nodes[b.0].value.data();
                let ga = acc.buf(a).expect("requires grad");
                matmul_nt_into(gout, bd, ga, m, n, k);
            }
            if nodes[b.0].requires_grad {
                let ad = nodes[a.0].value.data();
                let gb = acc.buf(b).expect("requires grad");
                matmul_tn_into(ad, gout, gb, m, k, n);
            }
        }
        &Op::BatchMatMul { a, b, trans_b } => {
            let sa = acc.val(a).shape().to_vec();
            let (g, m, k) = (sa[0], sa[1], sa[2]);
            let n = node.value.shape()[2];
            if nodes[a.0].requires_grad {
                let bd = nodes[b.0].value.data();
                let ga = acc.buf(a).expect("requires grad");
                for gi in 0..g {
                    let go = &gout[gi * m * n..(gi + 1) * m * n];
                    let b_s = &bd[gi * k * n..(gi + 1) * k * n];
                    let ga_s = &mut ga[gi * m * k..(gi + 1) * m * k];
                    if trans_b {
                        // C = A·Bᵀ with B [n×k]: dA = dC·B
                        matmul_into(go, b_s, ga_s, m, n, k);
                    } else {
                        matmul_nt_into(go, b_s, ga_s, m, n, k);
                    }
                }
            }
            if nodes[b.0].requires_grad {
                let ad = nodes[a.0].value.data();
                let gb = acc.buf(b).expect("requires grad");
                for gi in 0..g {
                    let go = &gout[gi * m * n..(gi + 1) * m * n];
                    let a_s = &ad[gi * m * k..(gi + 1) * m * k];
                    let gb_s = &mut gb[gi * k * n..(gi + 1) * k * n];
                    if trans_b {
                        // dB [n×k] = dCᵀ·A
                        matmul_tn_into(go, a_s, gb_s, m, n, k);
                    } else {
                        matmul_tn_into(a_s, go, gb_s, m, k, n);
                    }
                }
            }
        }
        &Op::Add(a, b) => {
            acc.add_scaled(a, gout, T::one());
            acc.add_scaled(b, gout, T::one());
        }
        &Op::Sub(a, b) => {
            acc.add_scaled(a, gout, T::one());
            acc.add_scaled(b, gout, -T::one());
        }
        &Op::Mul(a, b) => {
            if nodes[a.0].requires_grad {
                let bd = nodes[b.0].value.data();
                let ga = acc.buf(a).expect("requires grad");
                for ((o, &g), &y) in ga.iter_mut().zip(gout).zip(bd) {
                    *o += g * y;
                }
            }
            if nodes[b.0].requires_grad {
                let ad = nodes[a.0].value.data();
                let gb = acc.buf(b).expect("requires grad");
                for ((o, &g), &x) in gb.iter_mut().zip(gout).zip(ad) {
                    *o += g * x;
                }
            }
        }
        &Op::Div(a, b) => {
            let out = node.value.data();
            if nodes[a.0].requires_grad {
                let bd = nodes[b.0].value.data();
                let ga = acc.buf(a).expect("requires grad");
                for ((o, &g), &y) in ga.iter_mut().zip(gout).zip(bd) {
                    *o += g / y;
                }
            }
            if nodes[b.0].requires_grad {
                let bd = nodes[b.0].value.data();
                let gb = acc.buf(b).expect("requires grad");
                // d(a/b)/db = -(a/b)/b
                for (((o, &g), &q), &y) in gb.iter_mut().zip(gout).zip(out).zip(bd) {
                    *o -= g * q / y;
                }
            }
        }
        &Op::AddBias(x, bias) => {
            acc.add_scaled(x, gout, T::one());
            let d = acc.val(bias).numel();
            if let Some(gb) = acc.buf(bias) {
                for row in gout.chunks(d) {
                    for (o, &g) in gb.iter_mut().zip(row) {
                        *o += g;
                    }
                }
            }
        }
        &Op::Scale(x, s) => {
            let sv = acc.val(s).data()[0];
            acc.add_scaled(x, gout, sv);
            if nodes[s.0].requires_grad {
                let xd = nodes[x.0].value.data();
                let total = dot(gout, xd);
                acc.buf(s).expect("requires grad")[0] += total;
            }
        }
        &Op::MulCol(x, col) => {
            let d = acc.val(x).last_dim();
            if nodes[x.0].requires_grad {
                let cd = nodes[col.0].value.data();
                let gx = acc.buf(x).expect("requires grad");
                for ((orow, grow), &c) in gx.chunks_mut(d).zip(gout.chunks(d)).zip(cd) {
                    for (o, &g) in orow.iter_mut().zip(grow) {
                        *o += g * c;
                    }
                }
            }
            if nodes[col.0].requires_grad {
                let xd = nodes[x.0].value.data();
                let gc = acc.buf(col).expect("requires grad");
                for ((o, grow), xrow) in gc.iter_mut().zip(gout.chunks(d)).zip(xd.chunks(d)) {
                    *o += dot(grow, xrow);
                }
            }
        }
        &Op::Affine { x, mul } => acc.add_scaled(x, gout, mul),
        &Op::RowDot(a, b) => {
            let d = acc.val(a).last_dim();
            if nodes[a.0].requires_grad {
                let bd = nodes[b.0].value.data();
                let ga = acc.buf(a).expect("requires grad");
                for ((orow, &g), brow) in ga.chunks_mut(d).zip(gout).zip(bd.chunks(d)) {
                    for (o, &y) in orow.iter_mut().zip(brow) {
                        *o += g * y;
                    }
                }
            }
            if nodes[b.0].requires_grad {
                let ad = nodes[a.0].value.data();
                let gb = acc.buf(b).expect("requires grad");
                for ((orow, &g), arow) in gb.chunks_mut(d).zip(gout).zip(ad.chunks(d)) {
                    for (o, &x) in orow.iter_mut().zip(arow) {
                        *o += g * x;
                    }
                }
            }
        }
        &Op::Reshape(x) => acc.add_scaled(x, gout, T::one()),
        &Op::SliceCols { x, start } => {
            let d = acc.val(x).last_dim();
            let len = node.value.last_dim();
            if let Some(gx) = acc.buf(x) {
                for (orow, grow) in gx.chunks_mut(d).zip(gout.chunks(len)) {
                    for (o, &g) in orow[start..start + len].iter_mut().zip(grow) {
                        *o += g;
                    }
                }
            }
        }
        Op::ConcatCols(parts) => {
            let total = node.value.last_dim();
            let mut offset = 0;
            for &p in parts {
                let w = acc.val(p).last_dim();
                if let Some(gp) = acc.buf(p) {
                    for (orow, grow) in gp.chunks_mut(w).zip(gout.chunks(total)) {
                        for (o, &g) in orow.iter_mut().zip(&grow[offset..offset + w]) {
                            *o += g;
                        }
                    }
                }
                offset += w;
            }
        }
        &Op::SplitHeads {
            x,
            groups,
            tokens,
            heads,
        } => {
            let c = acc.val(x).last_dim();
            let dh = c / heads;
            if let Some(gx) = acc.buf(x) {
                for g in 0..groups {
                    for t in 0..tokens {
                        for h in 0..heads {
                            let src = ((g * heads + h) * tokens + t) * dh;
                            let dst = (g * tokens + t) * c + h * dh;
                            for (o, &v) in gx[dst..dst + dh].iter_mut().zip(&gout[src..src + dh]) {
                                *o += v;
                            }
                        }
                    }
                }
            }
        }
        &Op::MergeHeads {
            x,
            groups,
            tokens,
            heads,
        } => {
            let dh = acc.val(x).shape()[2];
            let c = heads * dh;
            if let Some(gx) = acc.buf(x) {
                for g in 0..groups {
                    for h in 0..heads {
                        for t in 0..tokens {
                            let dst = ((g * heads + h) * tokens + t) * dh;
                            let src = (g * tokens + t) * c + h * dh;
                            for (o, &v) in gx[dst..dst + dh].iter_mut().zip(&gout[src..src + dh]) {
                                *o += v;
                            }
                        }
                    }
                }
            }
        }
        &Op::Gelu(x) => {
            let xd = nodes[x.0].value.data();
            if let Some(gx) = acc.buf(x) {
                for ((o, &g), &v) in gx.iter_mut().zip(gout).zip(xd) {
                    *o += g * gelu_grad_scalar(v);
                }
            }
        }
        &Op::Sigmoid(x) => {
            let yd = node.value.data();
            if let Some(gx) = acc.buf(x) {
                for ((o, &g), &y) in gx.iter_mut().zip(gout).zip(yd) {
                    *o += g * y * (T::one() - y);
                }
            }
        }
        &Op::Softmax(x) => {
            let d = node.value.last_dim();
            let yd = node.value.data();
            if let Some(gx) = acc.buf(x) {
                for ((orow, grow), yrow) in gx.chunks_mut(d).zip(gout.chunks(d)).zip(yd.chunks(d)) {
                    let s = dot(grow, yrow);
                    for ((o, &g), &y) in orow.iter_mut().zip(grow).zip(yrow) {
                        *o += y * (g - s);
                    }
                }
            }
        }
        &Op::RmsNorm { x, gain, eps } => {
            let xd = nodes[x.0].value.data();
            let gd = nodes[gain.0].value.data();
            let d = gd.len();
            let dn = T::lit(d as f64);
            if nodes[x.0].requires_grad {
                let gx = acc.buf(x).expect("requires grad");
                for ((orow, grow), xrow) in gx.chunks_mut(d).zip(gout.chunks(d)).zip(xd.chunks(d)) {
                    let r = inv_rms(xrow, eps);
                    // a_c = dy_c·g_c; dx = r·a − r³·x·⟨a,x⟩/D
                    let mut ax = T::zero();
                    for ((&g, &gn), &xv) in grow.iter().zip(gd).zip(xrow) {
                        ax += g * gn * xv;
                    }
                    let coef = r * r * r * ax / dn;
                    for (((o, &g), &gn), &xv) in orow.iter_mut().zip(grow).zip(gd).zip(xrow) {
                        *o += r * g * gn - coef * xv;
                    }
                }
            }
            if nodes[gain.0].requires_grad {
                let gg = acc.buf(gain).expect("requires grad");
                for (grow, xrow) in gout.chunks(d).zip(xd.chunks(d)) {
                    let r = inv_rms(xrow, eps);
                    for ((o, &g), &xv) in gg.iter_mut().zip(grow).zip(xrow) {
                        *o += g * xv * r;
                    }
                }
            }
        }
        &Op::LayerNorm { x, gain, bias, eps } => {
            let xd = nodes[x.0].value.data();
            let gd = nodes[gain.0].value.data();
            let d = gd.len();
            let dn = T::lit(d as f64);
            if nodes[x.0].requires_grad {
                let gx = acc.buf(x).expect("requires grad");
                let mut xhat = vec![T::zero(); d];
                let mut dxhat = vec![T::zero(); d];
                for ((orow, grow), xrow) in gx.chunks_mut(d).zip(gout.chunks(d)).zip(xd.chunks(d)) {
                    let (mean, rstd) = mean_rstd(xrow, eps);
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for c in 0..d {
                        xhat[c] = (xrow[c] - mean) * rstd;
                        dxhat[c] = grow[c] * gd[c];
                        m1 += dxhat[c];
                        m2 += dxhat[c] * xhat[c];
                    }
                    m1 = m1 / dn;
                    m2 = m2 / dn;
                    for c in 0..d {
                        orow[c] += rstd * (dxhat[c] - m1 - xhat[c] * m2);
                    }
                }
            }
            if nodes[gain.0].requires_grad {
                let gg = acc.buf(gain).expect("requires grad");
                for (grow, xrow) in gout.chunks(d).zip(xd.chunks(d)) {
                    let (mean, rstd) = mean_rstd(xrow, eps);
                    for ((o, &g), &xv) in gg.iter_mut().zip(grow).zip(xrow) {
                        *o += g * (xv - mean) * rstd;
                    }
                }
            }
            if let Some(gb) = acc.buf(bias) {
                for grow in gout.chunks(d) {
                    for (o, &g) in gb.iter_mut().zip(grow) {
                        *o += g;
                    }
                }
            }
        }
        &Op::MeanTokens { x, tokens } => {
            let d = node.value.last_dim();
            let inv = T::one() / T::lit(tokens as f64);
            if let Some(gx) = acc.buf(x) {
                for (r, orow) in gx.chunks_mut(d).enumerate() {
                    let grow = &gout[(r / tokens) * d..(r / tokens + 1) * d];
                    for (o, &g) in orow.iter_mut().zip(grow) {
                        *o += g * inv;
                    }
                }
            }
        }
        &Op::AddTiled(x, table) => {
            acc.add_scaled(x, gout, T::one());
            let period = acc.val(table).numel();
            if let Some(gt) = acc.buf(table) {
                for block in gout.chunks(period) {
                    for (o, &g) in gt.iter_mut().zip(block) {
                        *o += g;
                    }
                }
            }
        }
        &Op::Sum(x) => {
            let g = gout[0];
            if let Some(gx) = acc.buf(x) {
                for o in gx.iter_mut() {
                    *o += g;
                }
            }
        }
        &Op::Mean(x) => {
            let n = T::lit(acc.val(x).numel() as f64);
            let g = gout[0] / n;
            if let Some(gx) = acc.buf(x) {
                for o in gx.iter_mut() {
                    *o += g;
                }
            }
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let k = acc.val(*logits).last_dim();
            let scale = gout[0] / T::lit(labels.len() as f64);
            if let Some(gl) = acc.buf(*logits) {
                for ((orow, prow), &label) in gl.chunks_mut(k).zip(probs.chunks(k)).zip(labels) {
                    for (j, (o, &p)) in orow.iter_mut().zip(prow).enumerate() {
                        let target = if j == label { T::one() } else { T::zero() };
                        *o += scale * (p - target);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut g = Graph::<f64>::new();
        let i2 = g.input(Tensor::eye(2, 2));
        let m = g.input(Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let out = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = g.input(Tensor::new([1, 2], vec![1.0, 2.0]).unwrap());
        let b = g.input(Tensor::new([2, 1], vec![3.0, 4.0]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::zeros([2, 3]));
        let b = g.input(Tensor::zeros([2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
    }

    #[test]
    fn hadamard_cases() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap());
        let z = g.input(Tensor::zeros([3]));
        let p = g.mul(a, z).unwrap();
        assert_eq!(g.value(p).data(), &[0.0, 0.0, 0.0]);

        let a = g.input(Tensor::new([2], vec![1.0, 2.0]).unwrap());
        let b = g.input(Tensor::new([2], vec![3.0, 4.0]).unwrap());
        let p = g.mul(a, b).unwrap();
        assert_eq!(g.value(p).data(), &[3.0, 8.0]);

        let c = g.input(Tensor::zeros([3]));
        assert!(g.mul(a, c).is_err());
    }

    #[test]
    fn rmsnorm_cases() {
        let mut g = Graph::<f64>::new();
        let ones = g.input(Tensor::full([4], 1.0));
        let x = g.input(Tensor::full([4], 2.0));
        let y = g.rmsnorm(x, ones, 0.0).unwrap();
        assert!(close(g.value(y).data(), &[1.0; 4], 1e-15));

        let x = g.input(Tensor::zeros([4]));
        let y = g.rmsnorm(x, ones, 1e-6).unwrap();
        assert_eq!(g.value(y).data(), &[0.0; 4]);

        let ones2 = g.input(Tensor::full([2], 1.0));
        let x = g.input(Tensor::new([2], vec![3.0, 4.0]).unwrap());
        let y = g.rmsnorm(x, ones2, 0.0).unwrap();
        let r = 12.5f64.sqrt();
        assert!(close(g.value(y).data(), &[3.0 / r, 4.0 / r], 1e-15));
        assert!((g.value(y).data()[0] - 0.8485).abs() < 1e-4);
        assert!((g.value(y).data()[1] - 1.1314).abs() < 1e-4);

        // gain length must match the channel extent
        assert!(g.rmsnorm(x, ones, 0.0).is_err());
    }

    #[test]
    fn rmsnorm_is_per_row() {
        let mut g = Graph::<f64>::new();
        let ones = g.input(Tensor::full([2], 1.0));
        let x = g.input(Tensor::new([2, 2], vec![3.0, 4.0, 0.0, 2.0]).unwrap());
        let y = g.rmsnorm(x, ones, 0.0).unwrap();
        let r = 12.5f64.sqrt();
        assert!(close(
            g.value(y).data(),
            &[3.0 / r, 4.0 / r, 0.0, 2f64.sqrt()],
            1e-15
        ));
    }

    #[test]
    fn sigmoid_values() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::new([3], vec![0.0, 50.0, 1.0]).unwrap());
        let y = g.sigmoid(x).unwrap();
        let d = g.value(y).data();
        assert_eq!(d[0], 0.5);
        assert!((d[1] - 1.0).abs() <= f32::EPSILON);
        assert!((d[2] - 0.731_06).abs() < 1e-5);
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::new([2], vec![-800.0, 800.0]).unwrap());
        let y = g.sigmoid(x).unwrap();
        assert!(g.value(y).all_finite());
    }

    #[test]
    fn softmax_and_cross_entropy() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros([2]));
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);

        let logits = g.input(Tensor::new([1, 2], vec![10.0, 0.0]).unwrap());
        let l = g.cross_entropy(logits, &[0]).unwrap();
        let expect = -(10f64.exp() / (10f64.exp() + 1.0)).ln();
        assert!((g.value(l).data()[0] - expect).abs() < 1e-15);
        assert!((g.value(l).data()[0] - 4.54e-5).abs() < 1e-7);

        let err = g.cross_entropy(logits, &[2]).unwrap_err();
        assert!(matches!(err, TensorError::IndexOutOfRange { index: 2, .. }));
    }

    #[test]
    fn backward_contract() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::new([2], vec![1.0, 2.0]).unwrap());
        let y = g.mul(x, x).unwrap();
        assert!(matches!(g.backward(y), Err(TensorError::NonScalarLoss(_))));
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
        assert_eq!(g.backward(s), Err(TensorError::BackwardTwice));
        g.reset_grads();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.input(Tensor::full([3], 2.0));
        let x = g.variable(Tensor::full([3], 1.0));
        let y = g.mul(c, x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn heads_round_trip() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_fn([2 * 3, 4], |i| i as f64));
        let s = g.split_heads(x, 2, 3, 2).unwrap();
        assert_eq!(g.shape(s), &[4, 3, 2]);
        // group 0, head 1, token 2 → row 2, cols 2..4
        assert_eq!(&g.value(s).data()[(3 + 2) * 2..(3 + 2) * 2 + 2], &[10.0, 11.0]);
        let m = g.merge_heads(s, 2, 3, 2).unwrap();
        assert_eq!(g.value(m), g.value(x));
    }
}
