//! Reverse-mode tape.
//!
//! Forward ops append nodes (kind, input ids, value) to an append-only list;
//! `backward` replays the list in reverse accumulating vector-Jacobian
//! products. Activations are saved eagerly; node ids referenced as inputs
//! always precede the referencing node.

use super::kernels;
use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{err_fmt, Error, Result};

pub type NodeId = usize;

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param { param_idx: usize },
    MatMul { a: NodeId, b: NodeId },
    Transpose { a: NodeId },
    Reshape { a: NodeId },
    Add { a: NodeId, b: NodeId },
    AddBias { a: NodeId, bias: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f64 },
    Gelu { a: NodeId },
    Softmax { a: NodeId },
    LayerNorm { a: NodeId, gamma: NodeId, beta: NodeId },
    GatherRows { a: NodeId, indices: Vec<usize> },
    ConcatRows { inputs: Vec<NodeId> },
    ConcatCols { inputs: Vec<NodeId> },
    SliceRows { a: NodeId, start: usize, len: usize },
    SliceCols { a: NodeId, start: usize, len: usize },
    Sum { a: NodeId },
    Mean { a: NodeId },
    SquaredError { a: NodeId, b: NodeId },
    /// Fused multi-head self-attention over per-sample row spans of a packed
    /// [Q|K|V] matrix: softmax(Q_hK_hᵀ/√hd)·V_h per (span, head). Equivalent
    /// to the slice/matmul/scale/softmax composition, kept as one node so a
    /// batch step does not pay per-sample tape overhead.
    Attention { qkv: NodeId, heads: usize, spans: Vec<(usize, usize)> },
}

struct Node<T> {
    op: Op,
    value: Tensor<T>,
    needs_grad: bool,
    /// Per-row (mean, rstd) pairs for layer norm.
    saved: Vec<T>,
}

/// Gradients keyed by the parameter index given to [`Tape::param`].
pub struct GradientMap<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> GradientMap<T> {
    pub fn get(&self, param_idx: usize) -> Option<&Tensor<T>> {
        self.grads.get(param_idx).and_then(|g| g.as_ref())
    }

    /// Gradient for a parameter, materializing zeros for parameters that
    /// never reached the loss.
    pub fn get_or_zeros(&self, param_idx: usize, shape: &[usize]) -> Tensor<T> {
        match self.get(param_idx) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    n_params: usize,
    assert_finite: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), n_params: 0, assert_finite: false }
    }

    /// Check every forward result for NaN/Inf (NumericsError on hit).
    pub fn with_assert_finite(mut self, on: bool) -> Self {
        self.assert_finite = on;
        self
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor<T>, needs_grad: bool) -> Result<NodeId> {
        if self.assert_finite {
            value.assert_finite("forward op output")?;
        }
        self.nodes.push(Node { op, value, needs_grad, saved: Vec::new() });
        Ok(self.nodes.len() - 1)
    }

    /// Constant input; no gradient flows into it.
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node { op: Op::Leaf, value, needs_grad: false, saved: Vec::new() });
        self.nodes.len() - 1
    }

    /// Trainable input; `param_idx` keys the entry in the returned
    /// [`GradientMap`].
    pub fn param(&mut self, param_idx: usize, value: &Tensor<T>) -> NodeId {
        self.n_params = self.n_params.max(param_idx + 1);
        self.nodes.push(Node {
            op: Op::Param { param_idx },
            value: value.clone(),
            needs_grad: true,
            saved: Vec::new(),
        });
        self.nodes.len() - 1
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.value(a).dims2()?;
        let (kb, n) = self.value(b).dims2()?;
        if ka != kb {
            return Err(err_fmt!(Shape, "matmul {m}x{ka} @ {kb}x{n}"));
        }
        let mut out = Tensor::zeros(vec![m, n]);
        kernels::matmul(self.value(a).data(), self.value(b).data(), out.data_mut(), m, ka, n);
        let ng = self.needs(&[a, b]);
        self.push(Op::MatMul { a, b }, out, ng)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.value(a).dims2()?;
        let mut out = Tensor::zeros(vec![c, r]);
        kernels::transpose(self.value(a).data(), out.data_mut(), r, c);
        let ng = self.needs(&[a]);
        self.push(Op::Transpose { a }, out, ng)
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let out = self.value(a).clone().reshaped(shape)?;
        let ng = self.needs(&[a]);
        self.push(Op::Reshape { a }, out, ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(err_fmt!(
                Shape,
                "add {:?} + {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data().iter())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let ng = self.needs(&[a, b]);
        self.push(Op::Add { a, b }, out, ng)
    }

    /// rows×n matrix plus a length-n bias vector (per-last-axis broadcast).
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (_, n) = self.value(a).dims2()?;
        if self.value(bias).shape() != [n] {
            return Err(err_fmt!(
                Shape,
                "bias {:?} does not match last axis {n}",
                self.value(bias).shape()
            ));
        }
        let bdat = self.value(bias).data().to_vec();
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(src.len());
        for row in src.chunks_exact(n) {
            for (&x, &b) in row.iter().zip(bdat.iter()) {
                data.push(x + b);
            }
        }
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let ng = self.needs(&[a, bias]);
        self.push(Op::AddBias { a, bias }, out, ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(err_fmt!(
                Shape,
                "mul {:?} * {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data().iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let ng = self.needs(&[a, b]);
        self.push(Op::Mul { a, b }, out, ng)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let cc = T::from_f64(c);
        let out = self.value(a).map(|x| x * cc);
        let ng = self.needs(&[a]);
        self.push(Op::Scale { a, c }, out, ng)
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).map(kernels::gelu);
        let ng = self.needs(&[a]);
        self.push(Op::Gelu { a }, out, ng)
    }

    /// Row-wise softmax of a 2-D tensor.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.value(a).dims2()?;
        let mut out = Tensor::zeros(vec![r, c]);
        kernels::softmax_rows(self.value(a).data(), out.data_mut(), c);
        let ng = self.needs(&[a]);
        self.push(Op::Softmax { a }, out, ng)
    }

    /// Layer norm over the last axis of a 2-D tensor with learned gamma/beta.
    pub fn layer_norm(&mut self, a: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (rows, n) = self.value(a).dims2()?;
        if self.value(gamma).shape() != [n] || self.value(beta).shape() != [n] {
            return Err(err_fmt!(Shape, "layer_norm gamma/beta must be [{n}]"));
        }
        let eps = T::from_f64(LAYER_NORM_EPS);
        let inv_n = T::from_f64(1.0 / n as f64);
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut data = vec![T::ZERO; rows * n];
        let mut saved = Vec::with_capacity(rows * 2);
        for (row, orow) in self.value(a).data().chunks_exact(n).zip(data.chunks_exact_mut(n)) {
            let mut mean = T::ZERO;
            for &x in row {
                mean += x;
            }
            mean = mean * inv_n;
            let mut var = T::ZERO;
            for &x in row {
                let d = x - mean;
                var += d * d;
            }
            var = var * inv_n;
            let rstd = T::ONE / (var + eps).sqrt();
            for ((o, &x), (&gj, &bj)) in orow.iter_mut().zip(row.iter()).zip(g.iter().zip(b.iter()))
            {
                *o = (x - mean) * rstd * gj + bj;
            }
            saved.push(mean);
            saved.push(rstd);
        }
        let out = Tensor::new(vec![rows, n], data)?;
        let ng = self.needs(&[a, gamma, beta]);
        let id = self.push(Op::LayerNorm { a, gamma, beta }, out, ng)?;
        self.nodes[id].saved = saved;
        Ok(id)
    }

    /// Select rows of a 2-D tensor; gradient scatter-adds back.
    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        let out = self.value(a).gather_rows(indices)?;
        let ng = self.needs(&[a]);
        self.push(Op::GatherRows { a, indices: indices.to_vec() }, out, ng)
    }

    pub fn concat_rows(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::Contract("concat_rows of nothing".into()));
        }
        let (_, cols) = self.value(inputs[0]).dims2()?;
        let mut rows = 0;
        for &i in inputs {
            let (r, c) = self.value(i).dims2()?;
            if c != cols {
                return Err(err_fmt!(Shape, "concat_rows col mismatch {c} vs {cols}"));
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &i in inputs {
            data.extend_from_slice(self.value(i).data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        let ng = self.needs(inputs);
        self.push(Op::ConcatRows { inputs: inputs.to_vec() }, out, ng)
    }

    pub fn concat_cols(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::Contract("concat_cols of nothing".into()));
        }
        let (rows, _) = self.value(inputs[0]).dims2()?;
        let mut cols = 0;
        for &i in inputs {
            let (r, c) = self.value(i).dims2()?;
            if r != rows {
                return Err(err_fmt!(Shape, "concat_cols row mismatch {r} vs {rows}"));
            }
            cols += c;
        }
        let mut data = vec![T::ZERO; rows * cols];
        let mut off = 0;
        for &i in inputs {
            let (_, c) = self.value(i).dims2()?;
            for (src, dst) in
                self.value(i).data().chunks_exact(c).zip(data.chunks_exact_mut(cols))
            {
                dst[off..off + c].copy_from_slice(src);
            }
            off += c;
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        let ng = self.needs(inputs);
        self.push(Op::ConcatCols { inputs: inputs.to_vec() }, out, ng)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (rows, cols) = self.value(a).dims2()?;
        if start + len > rows {
            return Err(err_fmt!(Shape, "slice_rows {start}+{len} > {rows}"));
        }
        let data = self.value(a).data()[start * cols..(start + len) * cols].to_vec();
        let out = Tensor::new(vec![len, cols], data)?;
        let ng = self.needs(&[a]);
        self.push(Op::SliceRows { a, start, len }, out, ng)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (rows, cols) = self.value(a).dims2()?;
        if start + len > cols {
            return Err(err_fmt!(Shape, "slice_cols {start}+{len} > {cols}"));
        }
        let mut data = Vec::with_capacity(rows * len);
        for row in self.value(a).data().chunks_exact(cols) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let out = Tensor::new(vec![rows, len], data)?;
        let ng = self.needs(&[a]);
        self.push(Op::SliceCols { a, start, len }, out, ng)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s: T = self.value(a).data().iter().copied().sum();
        let ng = self.needs(&[a]);
        self.push(Op::Sum { a }, Tensor::scalar(s), ng)
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        if self.value(a).is_empty() {
            return Err(Error::Contract("mean of empty tensor".into()));
        }
        let s: T = self.value(a).data().iter().copied().sum();
        let m = s * T::from_f64(1.0 / self.value(a).len() as f64);
        let ng = self.needs(&[a]);
        self.push(Op::Mean { a }, Tensor::scalar(m), ng)
    }

    /// Fused multi-head self-attention. `qkv` is (Σrows)×3·dim with the
    /// packed per-sample sequences described by `spans` = (row offset, rows);
    /// returns (Σrows)×dim with the usual head-concatenated layout.
    pub fn attention(
        &mut self,
        qkv: NodeId,
        heads: usize,
        spans: &[(usize, usize)],
    ) -> Result<NodeId> {
        let (total_rows, three_dim) = self.value(qkv).dims2()?;
        if three_dim % 3 != 0 {
            return Err(err_fmt!(Shape, "qkv columns {three_dim} not divisible by 3"));
        }
        let dim = three_dim / 3;
        if heads == 0 || dim % heads != 0 {
            return Err(err_fmt!(Shape, "heads {heads} must divide dim {dim}"));
        }
        for &(off, rows) in spans {
            if off + rows > total_rows || rows == 0 {
                return Err(err_fmt!(Shape, "span ({off}, {rows}) outside {total_rows} rows"));
            }
        }
        let hd = dim / heads;
        let scale = T::from_f64(1.0 / (hd as f64).sqrt());
        let x = self.value(qkv).data();
        let mut out = vec![T::ZERO; total_rows * dim];
        let mut saved = Vec::new();
        let mut q = Vec::new();
        let mut k = Vec::new();
        let mut v = Vec::new();
        let mut scores = Vec::new();
        for &(off, rows) in spans {
            for h in 0..heads {
                gather_head(x, &mut q, off, rows, three_dim, h * hd, hd);
                gather_head(x, &mut k, off, rows, three_dim, dim + h * hd, hd);
                gather_head(x, &mut v, off, rows, three_dim, 2 * dim + h * hd, hd);
                scores.resize(rows * rows, T::ZERO);
                for (qrow, srow) in q.chunks_exact(hd).zip(scores.chunks_exact_mut(rows)) {
                    for (krow, s) in k.chunks_exact(hd).zip(srow.iter_mut()) {
                        let mut acc = T::ZERO;
                        for (&a, &b) in qrow.iter().zip(krow.iter()) {
                            acc += a * b;
                        }
                        *s = acc * scale;
                    }
                }
                let probs_start = saved.len();
                saved.resize(probs_start + rows * rows, T::ZERO);
                kernels::softmax_rows(&scores, &mut saved[probs_start..], rows);
                let probs = &saved[probs_start..];
                for (r, prow) in probs.chunks_exact(rows).enumerate() {
                    let orow =
                        &mut out[(off + r) * dim + h * hd..(off + r) * dim + h * hd + hd];
                    for (&p, vrow) in prow.iter().zip(v.chunks_exact(hd)) {
                        for (o, &vv) in orow.iter_mut().zip(vrow.iter()) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        let ng = self.needs(&[qkv]);
        let id = self.push(
            Op::Attention { qkv, heads, spans: spans.to_vec() },
            Tensor::new(vec![total_rows, dim], out)?,
            ng,
        )?;
        self.nodes[id].saved = saved;
        Ok(id)
    }

    /// Element-wise (a − b)².
    pub fn squared_error(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(err_fmt!(
                Shape,
                "squared_error {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data().iter())
            .map(|(&x, &y)| (x - y) * (x - y))
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let ng = self.needs(&[a, b]);
        self.push(Op::SquaredError { a, b }, out, ng)
    }

    /// Reverse sweep from a scalar loss node. Returns gradients for every
    /// registered parameter; parameters not on any path to the loss are
    /// absent from the map (callers materialize zeros via `get_or_zeros`).
    pub fn backward(&mut self, loss: NodeId) -> Result<GradientMap<T>> {
        if self.nodes[loss].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(vec![T::ONE]);

        let mut param_grads: Vec<Option<Tensor<T>>> =
            (0..self.n_params).map(|_| None).collect();

        for id in (0..=loss).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let d_out = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Param { param_idx } => {
                    let t = Tensor::new(self.nodes[id].value.shape().to_vec(), d_out)?;
                    param_grads[*param_idx] = Some(t);
                }
                op => {
                    let op = op.clone();
                    self.backward_op(&op, id, &d_out, &mut grads)?;
                }
            }
        }
        Ok(GradientMap { grads: param_grads })
    }

    fn accum(&self, grads: &mut [Option<Vec<T>>], id: NodeId, delta: &[T]) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut grads[id] {
            Some(g) => {
                for (gi, &d) in g.iter_mut().zip(delta.iter()) {
                    *gi += d;
                }
            }
            None => grads[id] = Some(delta.to_vec()),
        }
    }

    /// Like [`Self::accum`] but takes ownership to avoid a copy on first use.
    fn accum_owned(&self, grads: &mut [Option<Vec<T>>], id: NodeId, delta: Vec<T>) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut grads[id] {
            Some(g) => {
                for (gi, d) in g.iter_mut().zip(delta.into_iter()) {
                    *gi += d;
                }
            }
            None => grads[id] = Some(delta),
        }
    }

    fn backward_op(
        &mut self,
        op: &Op,
        id: NodeId,
        d_out: &[T],
        grads: &mut [Option<Vec<T>>],
    ) -> Result<()> {
        match op {
            Op::Leaf | Op::Param { .. } => {}
            Op::MatMul { a, b } => {
                let (m, k) = self.value(*a).dims2()?;
                let (_, n) = self.value(*b).dims2()?;
                if self.nodes[*a].needs_grad {
                    let mut d_a = match grads[*a].take() {
                        Some(g) => g,
                        None => vec![T::ZERO; m * k],
                    };
                    kernels::matmul_a_bt_acc(d_out, self.value(*b).data(), &mut d_a, m, n, k);
                    grads[*a] = Some(d_a);
                }
                if self.nodes[*b].needs_grad {
                    let mut d_b = match grads[*b].take() {
                        Some(g) => g,
                        None => vec![T::ZERO; k * n],
                    };
                    kernels::matmul_at_b_acc(self.value(*a).data(), d_out, &mut d_b, k, m, n);
                    grads[*b] = Some(d_b);
                }
            }
            Op::Transpose { a } => {
                let (r, c) = self.value(*a).dims2()?;
                let mut d_a = vec![T::ZERO; r * c];
                // d_out has shape c×r; transpose it back.
                kernels::transpose(d_out, &mut d_a, c, r);
                self.accum_owned(grads, *a, d_a);
            }
            Op::Reshape { a } => {
                self.accum(grads, *a, d_out);
            }
            Op::Add { a, b } => {
                self.accum(grads, *a, d_out);
                self.accum(grads, *b, d_out);
            }
            Op::AddBias { a, bias } => {
                self.accum(grads, *a, d_out);
                if self.nodes[*bias].needs_grad {
                    let n = self.value(*bias).len();
                    let mut d_b = vec![T::ZERO; n];
                    for row in d_out.chunks_exact(n) {
                        for (g, &d) in d_b.iter_mut().zip(row.iter()) {
                            *g += d;
                        }
                    }
                    self.accum_owned(grads, *bias, d_b);
                }
            }
            Op::Mul { a, b } => {
                if self.nodes[*a].needs_grad {
                    let d_a: Vec<T> = d_out
                        .iter()
                        .zip(self.value(*b).data().iter())
                        .map(|(&d, &y)| d * y)
                        .collect();
                    self.accum_owned(grads, *a, d_a);
                }
                if self.nodes[*b].needs_grad {
                    let d_b: Vec<T> = d_out
                        .iter()
                        .zip(self.value(*a).data().iter())
                        .map(|(&d, &x)| d * x)
                        .collect();
                    self.accum_owned(grads, *b, d_b);
                }
            }
            Op::Scale { a, c } => {
                let cc = T::from_f64(*c);
                let d_a: Vec<T> = d_out.iter().map(|&d| d * cc).collect();
                self.accum_owned(grads, *a, d_a);
            }
            Op::Gelu { a } => {
                let d_a: Vec<T> = d_out
                    .iter()
                    .zip(self.value(*a).data().iter())
                    .map(|(&d, &x)| d * kernels::gelu_grad(x))
                    .collect();
                self.accum_owned(grads, *a, d_a);
            }
            Op::Softmax { a } => {
                let (_, cols) = self.value(*a).dims2()?;
                let y = self.nodes[id].value.data();
                let mut d_a = vec![T::ZERO; y.len()];
                for ((yrow, drow), orow) in y
                    .chunks_exact(cols)
                    .zip(d_out.chunks_exact(cols))
                    .zip(d_a.chunks_exact_mut(cols))
                {
                    let mut dot = T::ZERO;
                    for (&yv, &dv) in yrow.iter().zip(drow.iter()) {
                        dot += yv * dv;
                    }
                    for ((o, &yv), &dv) in orow.iter_mut().zip(yrow.iter()).zip(drow.iter()) {
                        *o = yv * (dv - dot);
                    }
                }
                self.accum_owned(grads, *a, d_a);
            }
            Op::LayerNorm { a, gamma, beta } => {
                let (rows, n) = self.value(*a).dims2()?;
                let inv_n = T::from_f64(1.0 / n as f64);
                let g = self.value(*gamma).data().to_vec();
                let saved = std::mem::take(&mut self.nodes[id].saved);
                let x = self.value(*a).data();

                if self.nodes[*gamma].needs_grad || self.nodes[*beta].needs_grad {
                    let mut d_g = vec![T::ZERO; n];
                    let mut d_b = vec![T::ZERO; n];
                    for (r, (xrow, drow)) in
                        x.chunks_exact(n).zip(d_out.chunks_exact(n)).enumerate()
                    {
                        let mean = saved[2 * r];
                        let rstd = saved[2 * r + 1];
                        for j in 0..n {
                            let xhat = (xrow[j] - mean) * rstd;
                            d_g[j] += drow[j] * xhat;
                            d_b[j] += drow[j];
                        }
                    }
                    self.accum_owned(grads, *gamma, d_g);
                    self.accum_owned(grads, *beta, d_b);
                }
                if self.nodes[*a].needs_grad {
                    let mut d_a = vec![T::ZERO; rows * n];
                    for (r, ((xrow, drow), orow)) in x
                        .chunks_exact(n)
                        .zip(d_out.chunks_exact(n))
                        .zip(d_a.chunks_exact_mut(n))
                        .enumerate()
                    {
                        let mean = saved[2 * r];
                        let rstd = saved[2 * r + 1];
                        // dxhat = d_out * gamma; dx = rstd*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
                        let mut m1 = T::ZERO;
                        let mut m2 = T::ZERO;
                        for j in 0..n {
                            let xhat = (xrow[j] - mean) * rstd;
                            let dxh = drow[j] * g[j];
                            m1 += dxh;
                            m2 += dxh * xhat;
                        }
                        m1 = m1 * inv_n;
                        m2 = m2 * inv_n;
                        for j in 0..n {
                            let xhat = (xrow[j] - mean) * rstd;
                            let dxh = drow[j] * g[j];
                            orow[j] = rstd * (dxh - m1 - xhat * m2);
                        }
                    }
                    self.accum_owned(grads, *a, d_a);
                }
                self.nodes[id].saved = saved;
            }
            Op::GatherRows { a, indices } => {
                if self.nodes[*a].needs_grad {
                    let (rows, cols) = self.value(*a).dims2()?;
                    let mut d_a = match grads[*a].take() {
                        Some(g) => g,
                        None => vec![T::ZERO; rows * cols],
                    };
                    for (&idx, drow) in indices.iter().zip(d_out.chunks_exact(cols)) {
                        for (g, &d) in d_a[idx * cols..(idx + 1) * cols].iter_mut().zip(drow) {
                            *g += d;
                        }
                    }
                    grads[*a] = Some(d_a);
                }
            }
            Op::ConcatRows { inputs } => {
                let mut off = 0;
                for &inp in inputs {
                    let n = self.value(inp).len();
                    self.accum(grads, inp, &d_out[off..off + n]);
                    off += n;
                }
            }
            Op::ConcatCols { inputs } => {
                let (rows, cols) = self.nodes[id].value.dims2()?;
                let mut off = 0;
                for &inp in inputs {
                    let (_, c) = self.value(inp).dims2()?;
                    if self.nodes[inp].needs_grad {
                        let mut d_i = vec![T::ZERO; rows * c];
                        for (drow, irow) in
                            d_out.chunks_exact(cols).zip(d_i.chunks_exact_mut(c))
                        {
                            irow.copy_from_slice(&drow[off..off + c]);
                        }
                        self.accum_owned(grads, inp, d_i);
                    }
                    off += c;
                }
            }
            Op::SliceRows { a, start, len } => {
                if self.nodes[*a].needs_grad {
                    let (rows, cols) = self.value(*a).dims2()?;
                    let mut d_a = match grads[*a].take() {
                        Some(g) => g,
                        None => vec![T::ZERO; rows * cols],
                    };
                    for (g, &d) in d_a[start * cols..(start + len) * cols]
                        .iter_mut()
                        .zip(d_out.iter())
                    {
                        *g += d;
                    }
                    grads[*a] = Some(d_a);
                }
            }
            Op::SliceCols { a, start, len } => {
                if self.nodes[*a].needs_grad {
                    let (rows, cols) = self.value(*a).dims2()?;
                    let mut d_a = match grads[*a].take() {
                        Some(g) => g,
                        None => vec![T::ZERO; rows * cols],
                    };
                    for (drow, arow) in d_out.chunks_exact(*len).zip(d_a.chunks_exact_mut(cols)) {
                        for (g, &d) in arow[*start..*start + *len].iter_mut().zip(drow) {
                            *g += d;
                        }
                    }
                    grads[*a] = Some(d_a);
                }
            }
            Op::Sum { a } => {
                let d = d_out[0];
                let d_a = vec![d; self.value(*a).len()];
                self.accum_owned(grads, *a, d_a);
            }
            Op::Mean { a } => {
                let n = self.value(*a).len();
                let d = d_out[0] * T::from_f64(1.0 / n as f64);
                let d_a = vec![d; n];
                self.accum_owned(grads, *a, d_a);
            }
            Op::Attention { qkv, heads, spans } => {
                if self.nodes[*qkv].needs_grad {
                    let (total_rows, three_dim) = self.value(*qkv).dims2()?;
                    let dim = three_dim / 3;
                    let hd = dim / heads;
                    let scale = T::from_f64(1.0 / (hd as f64).sqrt());
                    let saved = std::mem::take(&mut self.nodes[id].saved);
                    let x = self.value(*qkv).data();
                    let mut d_qkv = match grads[*qkv].take() {
                        Some(g) => g,
                        None => vec![T::ZERO; total_rows * three_dim],
                    };
                    let (mut q, mut k, mut v, mut dout_h) =
                        (Vec::new(), Vec::new(), Vec::new(), Vec::new());
                    let mut probs_start = 0;
                    for &(off, rows) in spans {
                        for h in 0..*heads {
                            gather_head(x, &mut q, off, rows, three_dim, h * hd, hd);
                            gather_head(x, &mut k, off, rows, three_dim, dim + h * hd, hd);
                            gather_head(x, &mut v, off, rows, three_dim, 2 * dim + h * hd, hd);
                            gather_head(d_out, &mut dout_h, off, rows, dim, h * hd, hd);
                            let probs = &saved[probs_start..probs_start + rows * rows];
                            probs_start += rows * rows;

                            // dV = Pᵀ dO
                            let mut d_v = vec![T::ZERO; rows * hd];
                            for (prow, dorow) in
                                probs.chunks_exact(rows).zip(dout_h.chunks_exact(hd))
                            {
                                for (&p, dvrow) in prow.iter().zip(d_v.chunks_exact_mut(hd)) {
                                    for (dv, &d) in dvrow.iter_mut().zip(dorow.iter()) {
                                        *dv += p * d;
                                    }
                                }
                            }
                            // dP = dO Vᵀ, then softmax VJP rows, scaled
                            let mut d_s = vec![T::ZERO; rows * rows];
                            for ((dorow, prow), dsrow) in dout_h
                                .chunks_exact(hd)
                                .zip(probs.chunks_exact(rows))
                                .zip(d_s.chunks_exact_mut(rows))
                            {
                                for (ds, vrow) in dsrow.iter_mut().zip(v.chunks_exact(hd)) {
                                    let mut acc = T::ZERO;
                                    for (&d, &vv) in dorow.iter().zip(vrow.iter()) {
                                        acc += d * vv;
                                    }
                                    *ds = acc;
                                }
                                let mut dot = T::ZERO;
                                for (&dp, &p) in dsrow.iter().zip(prow.iter()) {
                                    dot += dp * p;
                                }
                                for (ds, &p) in dsrow.iter_mut().zip(prow.iter()) {
                                    *ds = p * (*ds - dot) * scale;
                                }
                            }
                            // dQ = dS K ; dK = dSᵀ Q, scattered back
                            for (r, dsrow) in d_s.chunks_exact(rows).enumerate() {
                                let dq = &mut d_qkv[(off + r) * three_dim + h * hd
                                    ..(off + r) * three_dim + h * hd + hd];
                                for (&ds, krow) in dsrow.iter().zip(k.chunks_exact(hd)) {
                                    for (g, &kk) in dq.iter_mut().zip(krow.iter()) {
                                        *g += ds * kk;
                                    }
                                }
                            }
                            for j in 0..rows {
                                let dk = &mut d_qkv[(off + j) * three_dim + dim + h * hd
                                    ..(off + j) * three_dim + dim + h * hd + hd];
                                for (r, qrow) in q.chunks_exact(hd).enumerate() {
                                    let ds = d_s[r * rows + j];
                                    for (g, &qq) in dk.iter_mut().zip(qrow.iter()) {
                                        *g += ds * qq;
                                    }
                                }
                            }
                            for (j, dvrow) in d_v.chunks_exact(hd).enumerate() {
                                let dst = &mut d_qkv[(off + j) * three_dim + 2 * dim + h * hd
                                    ..(off + j) * three_dim + 2 * dim + h * hd + hd];
                                for (g, &dv) in dst.iter_mut().zip(dvrow.iter()) {
                                    *g += dv;
                                }
                            }
                        }
                    }
                    self.nodes[id].saved = saved;
                    grads[*qkv] = Some(d_qkv);
                }
            }
            Op::SquaredError { a, b } => {
                let two = T::from_f64(2.0);
                if self.nodes[*a].needs_grad {
                    let d_a: Vec<T> = d_out
                        .iter()
                        .zip(self.value(*a).data().iter().zip(self.value(*b).data().iter()))
                        .map(|(&d, (&x, &y))| d * two * (x - y))
                        .collect();
                    self.accum_owned(grads, *a, d_a);
                }
                if self.nodes[*b].needs_grad {
                    let d_b: Vec<T> = d_out
                        .iter()
                        .zip(self.value(*a).data().iter().zip(self.value(*b).data().iter()))
                        .map(|(&d, (&x, &y))| -(d * two * (x - y)))
                        .collect();
                    self.accum_owned(grads, *b, d_b);
                }
            }
        }
        Ok(())
    }
}

/// Copy a column block of a strided row range into contiguous scratch.
fn gather_head<T: Scalar>(
    x: &[T],
    dst: &mut Vec<T>,
    off: usize,
    rows: usize,
    stride: usize,
    col: usize,
    hd: usize,
) {
    dst.clear();
    for r in 0..rows {
        let start = (off + r) * stride + col;
        dst.extend_from_slice(&x[start..start + hd]);
    }
}
