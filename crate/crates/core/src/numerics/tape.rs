//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every differentiable operation in execution order, so
//! the node list is already topologically sorted. [`Tape::backward`] walks it
//! in reverse and pushes gradients into every leaf that requires them.

use super::kernels::gemm;
use super::tensor::as_matrix;
use super::{NumericsError, ParamId, ParamStore, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf { param: Option<ParamId> },
    MatMul { a: Var, b: Var },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, row: Var },
    Scale { x: Var, factor: f64 },
    MulConst { x: Var, factor: Vec<f64> },
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    LogSigmoid(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, rstd: Vec<f64> },
    Sum(Var),
    SumLastDim(Var),
    Concat(Vec<Var>),
    Transpose(Var),
    SliceLastDim { x: Var, start: usize },
    GatherRows { table: Var, ids: Vec<usize> },
    MaskedFill { x: Var, mask: Vec<bool> },
    Reshape(Var),
    PairwiseBias { query: Var, key: Var, distance: Var, bias: Var, batch: usize, len: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Clears all gradients accumulated on this tape's leaves.
    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn unary_rg(&self, x: Var) -> bool {
        self.nodes[x.0].requires_grad
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records an input; `requires_grad` is taken from the tensor.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad();
        let mut value = tensor;
        value.set_requires_grad(false);
        self.push(value, Op::Leaf { param: None }, rg)
    }

    /// Records a non-differentiable input.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let mut value = tensor;
        value.set_requires_grad(false);
        self.push(value, Op::Leaf { param: None }, false)
    }

    /// Records a copy of a stored parameter; gradients flow back to the store
    /// through [`Tape::backward_into`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let src = store.get(id);
        let rg = src.requires_grad();
        let value = Tensor::new(src.shape().to_vec(), src.data().to_vec()).expect("valid parameter");
        self.push(value, Op::Leaf { param: Some(id) }, rg)
    }

    fn finite(&self, op: &'static str, t: &Tensor) -> Result<(), NumericsError> {
        if t.all_finite() {
            Ok(())
        } else {
            Err(NumericsError::NonFinite { op })
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul { a, b }, rg))
    }

    /// Batched product over the leading dimension: `[B,p,q]·[B,q,r]`, or
    /// `[B,p,q]·[B,r,q]ᵀ` when `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, NumericsError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (&[ba, p, q], &[bb, b1, b2]) = (sa, sb) else {
            return Err(mismatch("batch_matmul", sa, sb));
        };
        let (qb, r) = if trans_b { (b2, b1) } else { (b1, b2) };
        if ba != bb || q != qb {
            return Err(mismatch("batch_matmul", sa, sb));
        }
        let mut out = vec![0.0; ba * p * r];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..ba {
            gemm(
                p,
                q,
                r,
                &av[i * p * q..(i + 1) * p * q],
                false,
                &bv[i * q * r..(i + 1) * q * r],
                trans_b,
                &mut out[i * p * r..(i + 1) * p * r],
                false,
            );
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![ba, p, r], out)?, Op::BatchMatMul { a, b, trans_b }, rg))
    }

    fn zip_same(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        Tensor::new(t.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds a vector to every last-dimension slice of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, NumericsError> {
        let (tx, tr) = (self.value(x), self.value(row));
        let w = tx.last_dim();
        if tr.numel() != w {
            return Err(mismatch("add_row", tx.shape(), tr.shape()));
        }
        let r = tr.data();
        let mut out = tx.clone();
        for chunk in out.data_mut().chunks_mut(w) {
            add_into(chunk, r);
        }
        let rg = self.rg(&[x, row]);
        Ok(self.push(out, Op::AddRow { x, row }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var, NumericsError> {
        let out = self.map(x, |v| v * factor);
        let rg = self.unary_rg(x);
        Ok(self.push(out, Op::Scale { x, factor }, rg))
    }

    /// Elementwise product with a constant array (loss masks, dropout masks).
    pub fn mul_const(&mut self, x: Var, factor: Vec<f64>) -> Result<Var, NumericsError> {
        let t = self.value(x);
        if factor.len() != t.numel() {
            return Err(mismatch("mul_const", t.shape(), &[factor.len()]));
        }
        let data = t.data().iter().zip(&factor).map(|(a, b)| a * b).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.unary_rg(x);
        Ok(self.push(out, Op::MulConst { x, factor }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NumericsError> {
        let out = self.map(x, |v| v.max(0.0));
        let rg = self.unary_rg(x);
        Ok(self.push(out, Op::Relu(x), rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, NumericsError> {
        let out = self.map(x, sigmoid);
        let rg = self.unary_rg(x);
        Ok(self.push(out, Op::Sigmoid(x), rg))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, NumericsError> {
        let out = self.map(x, f64::exp);
        self.finite("exp", &out)?;
        let rg = self.unary_rg(x);
        Ok(self.push(out, Op::Exp(x), rg))
    }

    pub fn log(&mut self, x: Var) -> Result<Var, NumericsError> {
        if self.value(x).data().iter().any(|&v| v <= 0.0 || v.is_nan()) {
            return Err(NumericsError::Domain { op: "log" });
        }
        let out = self.map(x, f64::ln);
        self.finite("log", &out)?;
        let rg = self.unary_rg(x);
        Ok(self.push(out, Op::Log(x), rg))
    }

    /// Numerically stable `ln σ(x)`.
    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var, NumericsError> {
        let out = self.map(x, log_sigmoid);
        let rg = self.unary_rg(x);
        Ok(self.push(out, Op::LogSigmoid(x), rg))
    }

    /// Softmax over the last dimension with max-subtraction.
    ///
    /// Entries equal to `-inf` are masked: they receive exactly zero weight,
    /// and a slice with no finite entry maps to all zeros. NaN and `+inf`
    /// are rejected.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var, NumericsError> {
        let t = self.value(x);
        if t.data().iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(NumericsError::NonFinite { op: "softmax_lastdim" });
        }
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(t.last_dim()) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                row.iter_mut().for_each(|v| *v = 0.0);
                continue;
            }
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let rg = self.unary_rg(x);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    /// Per-slice normalization to zero mean and unit variance
    /// (`(x-μ)/sqrt(var+eps)`), followed by `gain ⊙ · + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, NumericsError> {
        let t = self.value(x);
        let w = t.last_dim();
        for p in [gain, bias] {
            if self.value(p).numel() != w {
                return Err(mismatch("layer_norm", t.shape(), self.shape(p)));
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut out = t.clone();
        let mut rstd = Vec::with_capacity(t.rows());
        for row in out.data_mut().chunks_mut(w) {
            let mean = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
            let rs = 1.0 / (var + eps).sqrt();
            for (k, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * rs * g[k] + b[k];
            }
            rstd.push(rs);
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, rstd }, rg))
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var, NumericsError> {
        let s = self.value(x).data().iter().sum();
        let rg = self.unary_rg(x);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), rg))
    }

    /// Sums each last-dimension slice; `[..., w] -> [...]` (rank-1 input gives `[1]`).
    pub fn sum_lastdim(&mut self, x: Var) -> Result<Var, NumericsError> {
        let t = self.value(x);
        let data: Vec<f64> = t.data().chunks(t.last_dim()).map(|c| c.iter().sum()).collect();
        let shape = if t.shape().len() > 1 {
            t.shape()[..t.shape().len() - 1].to_vec()
        } else {
            vec![1]
        };
        let out = Tensor::new(shape, data)?;
        let rg = self.unary_rg(x);
        Ok(self.push(out, Op::SumLastDim(x), rg))
    }

    /// Concatenates along the last dimension; leading extents must agree.
    pub fn concat_lastdim(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = *parts.first().ok_or(NumericsError::Empty { op: "concat_lastdim" })?;
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(mismatch("concat_lastdim", self.shape(first), s));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows = self.value(first).rows();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(parts.to_vec()), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, NumericsError> {
        let t = self.value(x);
        let (p, q) = as_matrix(t.shape(), "transpose")?;
        let v = t.data();
        let mut data = vec![0.0; p * q];
        for i in 0..p {
            for j in 0..q {
                data[j * p + i] = v[i * q + j];
            }
        }
        let rg = self.unary_rg(x);
        Ok(self.push(Tensor::new(vec![q, p], data)?, Op::Transpose(x), rg))
    }

    /// Columns `start..end` of every last-dimension slice.
    pub fn slice_lastdim(&mut self, x: Var, start: usize, end: usize) -> Result<Var, NumericsError> {
        let t = self.value(x);
        let w = t.last_dim();
        if start >= end || end > w {
            return Err(mismatch("slice_lastdim", t.shape(), &[start, end]));
        }
        let data: Vec<f64> = t.data().chunks(w).flat_map(|c| c[start..end].iter().copied()).collect();
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = end - start;
        let rg = self.unary_rg(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::SliceLastDim { x, start }, rg))
    }

    /// Row lookup: `table[V, d]`, `ids` → `[len(ids), d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericsError> {
        let t = self.value(table);
        let (vocab, d) = as_matrix(t.shape(), "gather_rows")?;
        if ids.is_empty() {
            return Err(NumericsError::Empty { op: "gather_rows" });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(NumericsError::IndexOutOfRange { index: bad, bound: vocab });
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let rg = self.unary_rg(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], data)?,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Replaces entries where `mask` is true by `value`; those entries pass no gradient.
    pub fn masked_fill(&mut self, x: Var, mask: Vec<bool>, value: f64) -> Result<Var, NumericsError> {
        let t = self.value(x);
        if mask.len() != t.numel() {
            return Err(mismatch("masked_fill", t.shape(), &[mask.len()]));
        }
        let mut out = t.clone();
        for (v, &m) in out.data_mut().iter_mut().zip(&mask) {
            if m {
                *v = value;
            }
        }
        let rg = self.unary_rg(x);
        Ok(self.push(out, Op::MaskedFill { x, mask }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let out = self.value(x).clone().reshaped(shape)?;
        let rg = self.unary_rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Additive attention bias built from per-position projections.
    ///
    /// For `batch` sequences of length `len`, `query` and `key` hold one scalar
    /// per position (`[batch*len, 1]`), `distance` one scalar per table row
    /// (`[2*len, 1]`) and `bias` a single scalar. The result `[batch, len, len]`
    /// holds `query[i] + key[j] + distance[len + i - j] + bias` for `j <= i`
    /// and zero above the diagonal.
    pub fn pairwise_bias(
        &mut self,
        query: Var,
        key: Var,
        distance: Var,
        bias: Var,
        batch: usize,
        len: usize,
    ) -> Result<Var, NumericsError> {
        let (q, k, dist, b) = (self.value(query), self.value(key), self.value(distance), self.value(bias));
        if q.numel() != batch * len || k.numel() != batch * len {
            return Err(mismatch("pairwise_bias", q.shape(), k.shape()));
        }
        if dist.numel() != 2 * len || b.numel() != 1 {
            return Err(mismatch("pairwise_bias", dist.shape(), b.shape()));
        }
        let (qv, kv, dv, bv) = (q.data(), k.data(), dist.data(), b.data()[0]);
        let mut out = vec![0.0; batch * len * len];
        for s in 0..batch {
            for i in 0..len {
                let base = (s * len + i) * len;
                for j in 0..=i {
                    out[base + j] = qv[s * len + i] + kv[s * len + j] + dv[len + i - j] + bv;
                }
            }
        }
        let rg = self.rg(&[query, key, distance, bias]);
        Ok(self.push(
            Tensor::new(vec![batch, len, len], out)?,
            Op::PairwiseBias {
                query,
                key,
                distance,
                bias,
                batch,
                len,
            },
            rg,
        ))
    }

    /// Backpropagates from a scalar `loss`, accumulating into the gradients
    /// of this tape's leaves (see [`Tape::grad`]).
    pub fn backward(&mut self, loss: Var) -> Result<(), NumericsError> {
        let grads = self.propagate(loss)?;
        for (i, g) in grads.into_iter().enumerate() {
            if let (Some(g), Op::Leaf { .. }) = (g, &self.nodes[i].op) {
                match &mut self.leaf_grads[i] {
                    Some(acc) => add_into(acc, &g),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Backpropagates from a scalar `loss`, accumulating parameter gradients
    /// into `store`. Non-parameter leaves accumulate on the tape as in
    /// [`Tape::backward`].
    pub fn backward_into(&mut self, loss: Var, store: &mut ParamStore) -> Result<(), NumericsError> {
        let grads = self.propagate(loss)?;
        for (i, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            match self.nodes[i].op {
                Op::Leaf { param: Some(id) } => store.get_mut(id).accumulate_grad(&g),
                Op::Leaf { param: None } => match &mut self.leaf_grads[i] {
                    Some(acc) => add_into(acc, &g),
                    slot => *slot = Some(g),
                },
                _ => {}
            }
        }
        Ok(())
    }

    fn propagate(&self, loss: Var) -> Result<Vec<Option<Vec<f64>>>, NumericsError> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(NumericsError::NotScalar {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if !self.nodes[loss.0].requires_grad {
            return Ok(grads);
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf { .. }) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(grads)
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf { .. } => {}
            Op::MatMul { a, b } => {
                let (p, q) = as_matrix(self.shape(*a), "matmul").unwrap();
                let r = self.shape(*b)[1];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    gemm(p, r, q, g, false, bv, true, ga, true);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gemm(q, p, r, av, true, g, false, gb, true);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let &[batch, p, q] = self.shape(*a) else { unreachable!() };
                let r = node.value.shape()[2];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let (sa, sb, sc) = (p * q, q * r, p * r);
                if let Some(ga) = self.slot(grads, *a) {
                    for s in 0..batch {
                        let gs = &g[s * sc..(s + 1) * sc];
                        let bs = &bv[s * sb..(s + 1) * sb];
                        gemm(p, r, q, gs, false, bs, !trans_b, &mut ga[s * sa..(s + 1) * sa], true);
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for s in 0..batch {
                        let gs = &g[s * sc..(s + 1) * sc];
                        let as_ = &av[s * sa..(s + 1) * sa];
                        let dst = &mut gb[s * sb..(s + 1) * sb];
                        if *trans_b {
                            gemm(r, p, q, gs, true, as_, false, dst, true);
                        } else {
                            gemm(q, p, r, as_, true, gs, false, dst, true);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.slot(grads, *v) {
                        add_into(gv, g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g.iter().zip(bv)).for_each(|(d, (g, y))| *d += g * y);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gb.iter_mut().zip(g.iter().zip(av)).for_each(|(d, (g, x))| *d += g * x);
                }
            }
            Op::AddRow { x, row } => {
                if let Some(gx) = self.slot(grads, *x) {
                    add_into(gx, g);
                }
                if let Some(gr) = self.slot(grads, *row) {
                    let w = gr.len();
                    for chunk in g.chunks(w) {
                        add_into(gr, chunk);
                    }
                }
            }
            Op::Scale { x, factor } => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, g)| *d += g * factor);
                }
            }
            Op::MulConst { x, factor } => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g.iter().zip(factor)).for_each(|(d, (g, f))| *d += g * f);
                }
            }
            Op::Relu(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut()
                        .zip(g.iter().zip(out))
                        .for_each(|(d, (g, y))| *d += if *y > 0.0 { *g } else { 0.0 });
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g.iter().zip(out)).for_each(|(d, (g, y))| *d += g * y * (1.0 - y));
                }
            }
            Op::Exp(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g.iter().zip(out)).for_each(|(d, (g, y))| *d += g * y);
                }
            }
            Op::Log(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g.iter().zip(xv)).for_each(|(d, (g, x))| *d += g / x);
                }
            }
            Op::LogSigmoid(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g.iter().zip(xv)).for_each(|(d, (g, x))| *d += g * sigmoid(-x));
                }
            }
            Op::Softmax(x) => {
                let w = node.value.last_dim();
                if let Some(gx) = self.slot(grads, *x) {
                    for ((dx, gy), y) in gx.chunks_mut(w).zip(g.chunks(w)).zip(out.chunks(w)) {
                        let dot: f64 = gy.iter().zip(y).map(|(a, b)| a * b).sum();
                        for k in 0..w {
                            dx[k] += y[k] * (gy[k] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, rstd } => {
                let w = node.value.last_dim();
                let xv = self.value(*x).data();
                let gv = self.value(*gain).data();
                let mut xhat = vec![0.0; xv.len()];
                for (r, (xr, hr)) in xv.chunks(w).zip(xhat.chunks_mut(w)).enumerate() {
                    let mean = xr.iter().sum::<f64>() / w as f64;
                    for k in 0..w {
                        hr[k] = (xr[k] - mean) * rstd[r];
                    }
                }
                if let Some(gg) = self.slot(grads, *gain) {
                    for (gr, hr) in g.chunks(w).zip(xhat.chunks(w)) {
                        for k in 0..w {
                            gg[k] += gr[k] * hr[k];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    for gr in g.chunks(w) {
                        add_into(gb, gr);
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let mut dxhat = vec![0.0; w];
                    for (r, ((dx, gr), hr)) in gx.chunks_mut(w).zip(g.chunks(w)).zip(xhat.chunks(w)).enumerate() {
                        for k in 0..w {
                            dxhat[k] = gr[k] * gv[k];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / w as f64;
                        let m2 = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / w as f64;
                        for k in 0..w {
                            dx[k] += rstd[r] * (dxhat[k] - m1 - hr[k] * m2);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::SumLastDim(x) => {
                let w = self.value(*x).last_dim();
                if let Some(gx) = self.slot(grads, *x) {
                    for (chunk, gr) in gx.chunks_mut(w).zip(g) {
                        chunk.iter_mut().for_each(|d| *d += gr);
                    }
                }
            }
            Op::Concat(parts) => {
                let total = node.value.last_dim();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).last_dim();
                    if let Some(gp) = self.slot(grads, *p) {
                        for (dst, src) in gp.chunks_mut(w).zip(g.chunks(total)) {
                            add_into(dst, &src[offset..offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::Transpose(x) => {
                let (p, q) = as_matrix(self.shape(*x), "transpose").unwrap();
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..p {
                        for j in 0..q {
                            gx[i * q + j] += g[j * p + i];
                        }
                    }
                }
            }
            Op::SliceLastDim { x, start } => {
                let w = self.value(*x).last_dim();
                let sw = node.value.last_dim();
                if let Some(gx) = self.slot(grads, *x) {
                    for (dst, src) in gx.chunks_mut(w).zip(g.chunks(sw)) {
                        add_into(&mut dst[*start..*start + sw], src);
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                let d = node.value.last_dim();
                if let Some(gt) = self.slot(grads, *table) {
                    for (&id, src) in ids.iter().zip(g.chunks(d)) {
                        add_into(&mut gt[id * d..(id + 1) * d], src);
                    }
                }
            }
            Op::MaskedFill { x, mask } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, g), m) in gx.iter_mut().zip(g).zip(mask) {
                        if !m {
                            *d += g;
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    add_into(gx, g);
                }
            }
            Op::PairwiseBias {
                query,
                key,
                distance,
                bias,
                batch,
                len,
            } => {
                let (batch, len) = (*batch, *len);
                let mut gq = vec![0.0; batch * len];
                let mut gk = vec![0.0; batch * len];
                let mut gd = vec![0.0; 2 * len];
                let mut gbias = 0.0;
                for s in 0..batch {
                    for i in 0..len {
                        let base = (s * len + i) * len;
                        for j in 0..=i {
                            let v = g[base + j];
                            gq[s * len + i] += v;
                            gk[s * len + j] += v;
                            gd[len + i - j] += v;
                            gbias += v;
                        }
                    }
                }
                if let Some(dst) = self.slot(grads, *query) {
                    add_into(dst, &gq);
                }
                if let Some(dst) = self.slot(grads, *key) {
                    add_into(dst, &gk);
                }
                if let Some(dst) = self.slot(grads, *distance) {
                    add_into(dst, &gd);
                }
                if let Some(dst) = self.slot(grads, *bias) {
                    dst[0] += gbias;
                }
            }
        }
    }
}
