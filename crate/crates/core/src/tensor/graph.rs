//! Reverse-mode automatic differentiation over a flat tape.
//!
//! Every op appends one node holding its output value. Nodes are stored in
//! creation order, so inputs always precede their consumers and `backward`
//! only has to walk the tape once in reverse.

use std::collections::HashMap;

use rand::Rng;

use super::kernels::{gemm, permute_index};
use super::{numel, ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Handle of a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<R> {
    Leaf,
    MatMul { a: Var, b: Var },
    Bmm { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: R },
    Shift { a: Var },
    Relu { a: Var },
    Softmax { a: Var },
    LogSoftmax { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<R>, rstd: Vec<R> },
    Conv1d { x: Var, w: Var, b: Var, stride: usize },
    Embedding { table: Var, ids: Vec<usize> },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Gather { a: Var, index: Vec<usize> },
    Reshape { a: Var },
    MaskedFill { a: Var, mask: Vec<bool> },
    Dropout { a: Var, scale: Vec<R> },
    Sum { a: Var },
    WeightedSum { a: Var, w: Vec<R> },
    ScalarFn { a: Var, grad: Vec<R> },
}

struct Node<R> {
    value: Tensor<R>,
    op: Op<R>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// A tape of recorded tensor operations.
pub struct Graph<R: Real = f32> {
    nodes: Vec<Node<R>>,
    params: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

/// Gradients of a scalar loss with respect to every differentiable leaf.
#[derive(Debug, Clone)]
pub struct Gradients<R> {
    leaves: HashMap<Var, Tensor<R>>,
    params: HashMap<ParamId, Tensor<R>>,
}

impl<R: Real> Gradients<R> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<R>> {
        self.leaves.get(&v)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<R>> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<R>)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    /// Global L2 norm over parameter gradients, summed in parameter order.
    pub fn param_norm(&self) -> f64 {
        let mut ids: Vec<ParamId> = self.params.keys().copied().collect();
        ids.sort();
        ids.iter()
            .flat_map(|id| self.params[id].data().iter())
            .map(|x| x.as_f64() * x.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales parameter gradients so their global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_param_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.param_norm();
        if norm > max_norm && norm > 0.0 {
            let s = R::of(max_norm / norm);
            for t in self.params.values_mut() {
                for x in t.data_mut() {
                    *x *= s;
                }
            }
        }
        norm
    }
}

impl<R: Real> Default for Graph<R> {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A graph that never records gradients. Used for decoding.
    pub fn inference() -> Self {
        Graph {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<R>, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<R>) -> Var {
        self.leaf(value, false)
    }

    /// Brings a stored parameter onto the tape. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<R>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.leaf(p.value.clone(), p.requires_grad);
        self.nodes[v.0].param = Some(id);
        self.params.insert(id, v);
        v
    }

    /// Registers every parameter so that unused ones still receive (zero) gradients.
    pub fn register_params(&mut self, store: &ParamStore<R>) {
        for id in store.ids() {
            self.param(store, id);
        }
    }

    fn push(&mut self, name: &'static str, value: Tensor<R>, op: Op<R>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Numeric { op: name });
        }
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- forward ops -------------------------------------------------------

    /// `a[..., m, k] · b[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let k = sb[0];
        let n = sb[1];
        let m = numel(&sa) / k;
        let mut out = vec![R::zero(); m * n];
        gemm(self.value(a).data(), self.value(b).data(), &mut out, m, k, n, false, false);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        self.push("matmul", Tensor { shape, data: out }, Op::MatMul { a, b }, &[a, b])
    }

    /// Batched product `a[B, m, k] · b[B, k, n]` (or `b[B, n, k]ᵀ` when `trans_b`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape("bmm", format!("{sa:?} x {sb:?}")));
        }
        let (bs, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(Error::shape("bmm", format!("{sa:?} x {sb:?} (trans_b={trans_b})")));
        }
        let mut out = vec![R::zero(); bs * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            gemm(
                &da[i * m * k..(i + 1) * m * k],
                &db[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
                false,
                trans_b,
            );
        }
        let value = Tensor { shape: vec![bs, m, n], data: out };
        self.push("bmm", value, Op::Bmm { a, b, trans_b }, &[a, b])
    }

    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(op, format!("cannot broadcast {sb:?} onto {sa:?}")));
        }
        Ok(())
    }

    /// Elementwise sum; `b` may be a trailing-suffix broadcast of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = if self.value(b).numel() > self.value(a).numel() { (b, a) } else { (a, b) };
        self.broadcast_check("add", a, b)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let nb = bv.len();
        let data = av.data().iter().enumerate().map(|(i, &x)| x + bv[i % nb]).collect();
        let value = Tensor { shape: av.shape().to_vec(), data };
        self.push("add", value, Op::Add { a, b }, &[a, b])
    }

    /// Elementwise product; `b` may be a trailing-suffix broadcast of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = if self.value(b).numel() > self.value(a).numel() { (b, a) } else { (a, b) };
        self.broadcast_check("mul", a, b)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let nb = bv.len();
        let data = av.data().iter().enumerate().map(|(i, &x)| x * bv[i % nb]).collect();
        let value = Tensor { shape: av.shape().to_vec(), data };
        self.push("mul", value, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: R) -> Result<Var> {
        let av = self.value(a);
        let value = Tensor {
            shape: av.shape().to_vec(),
            data: av.data().iter().map(|&x| x * c).collect(),
        };
        self.push("scale", value, Op::Scale { a, c }, &[a])
    }

    /// Adds a constant to every element.
    pub fn shift(&mut self, a: Var, c: R) -> Result<Var> {
        let av = self.value(a);
        let value = Tensor {
            shape: av.shape().to_vec(),
            data: av.data().iter().map(|&x| x + c).collect(),
        };
        self.push("shift", value, Op::Shift { a }, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let value = Tensor {
            shape: av.shape().to_vec(),
            data: av.data().iter().map(|&x| x.max(R::zero())).collect(),
        };
        self.push("relu", value, Op::Relu { a }, &[a])
    }

    fn last_dim(&self, op: &'static str, a: Var) -> Result<usize> {
        self.shape(a)
            .last()
            .copied()
            .ok_or_else(|| Error::shape(op, "scalar input"))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let d = self.last_dim("softmax", a)?;
        let av = self.value(a);
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(d) {
            let max = row.iter().copied().fold(R::neg_infinity(), R::max);
            let mut sum = R::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        let value = Tensor { shape: av.shape().to_vec(), data };
        self.push("softmax", value, Op::Softmax { a }, &[a])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let d = self.last_dim("log_softmax", a)?;
        let av = self.value(a);
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(d) {
            let max = row.iter().copied().fold(R::neg_infinity(), R::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<R>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let value = Tensor { shape: av.shape().to_vec(), data };
        self.push("log_softmax", value, Op::LogSoftmax { a }, &[a])
    }

    /// Layer normalization over the last axis followed by `gamma · x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.last_dim("layer_norm", x)?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("affine params must be [{d}], got {:?} / {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let xv = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xv.numel() / d;
        let mut xhat = vec![R::zero(); xv.numel()];
        let mut rstd = vec![R::zero(); rows];
        let mut out = vec![R::zero(); xv.numel()];
        let dn = R::of(d as f64);
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<R>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() / dn;
            let rs = R::one() / (var + R::of(eps)).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor { shape: xv.shape().to_vec(), data: out };
        self.push("layer_norm", value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta])
    }

    /// 1-d convolution without padding over `x[B, L, C_in]` with `w[C_out, C_in, K]`
    /// and `b[C_out]`, producing `[B, floor((L - K) / stride) + 1, C_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        if stride == 0 {
            return Err(Error::shape("conv1d", "stride must be >= 1"));
        }
        if sx.len() != 3 || sw.len() != 3 || sx[2] != sw[1] || sb != [sw[0]] {
            return Err(Error::shape("conv1d", format!("x {sx:?}, w {sw:?}, b {sb:?}")));
        }
        let (bs, len, cin) = (sx[0], sx[1], sx[2]);
        let (cout, kernel) = (sw[0], sw[2]);
        if len < kernel {
            return Err(Error::shape("conv1d", format!("input length {len} < kernel {kernel}")));
        }
        let lo = conv_out_len(len, kernel, stride);
        let cols = im2col(self.value(x).data(), bs, len, cin, kernel, stride, lo);
        let mut out = vec![R::zero(); bs * lo * cout];
        let bias = self.value(b).data();
        for row in out.chunks_mut(cout) {
            row.copy_from_slice(bias);
        }
        gemm(&cols, self.value(w).data(), &mut out, bs * lo, cin * kernel, cout, false, true);
        let value = Tensor { shape: vec![bs, lo, cout], data: out };
        self.push("conv1d", value, Op::Conv1d { x, w, b, stride }, &[x, w, b])
    }

    /// Row lookup `table[ids]` with output shape `ids_shape + [D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 || numel(ids_shape) != ids.len() {
            return Err(Error::shape("embedding", format!("table {st:?}, ids {ids_shape:?}")));
        }
        let (v, d) = (st[0], st[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::shape("embedding", format!("id {bad} out of range for vocabulary {v}")));
        }
        let tv = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        let value = Tensor { shape, data };
        self.push("embedding", value, Op::Embedding { table, ids: ids.to_vec() }, &[table])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*inputs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} for rank {}", first.len())));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len() || s.iter().enumerate().any(|(i, &e)| i != axis && e != first[i]) {
                return Err(Error::shape("concat", format!("{s:?} vs {first:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let ext = self.shape(v)[axis];
                let src = self.value(v).data();
                data.extend_from_slice(&src[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor { shape, data };
        self.push("concat", value, Op::Concat { inputs: inputs.to_vec(), axis }, inputs)
    }

    /// `a[..., start..start+len, ...]` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::shape("slice", format!("{start}..{} on axis {axis} of {s:?}", start + len)));
        }
        let (outer, ext, inner) = split_axis(&s, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * ext * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let value = Tensor { shape, data };
        self.push("slice", value, Op::Slice { a, axis, start }, &[a])
    }

    /// General axis permutation.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("{perm:?} for {s:?}")));
        }
        let index = permute_index(&s, perm);
        let src = self.value(a).data();
        let data = index.iter().map(|&i| src[i]).collect();
        let shape = perm.iter().map(|&p| s[p]).collect();
        let value = Tensor { shape, data };
        self.push("permute", value, Op::Gather { a, index }, &[a])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::shape("transpose", "rank < 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self
            .value(a)
            .clone()
            .reshape(shape)
            .map_err(|_| Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape(a))))?;
        self.push("reshape", value, Op::Reshape { a }, &[a])
    }

    /// Replaces elements where `mask` is true with `fill`.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], fill: R) -> Result<Var> {
        let av = self.value(a);
        if mask.len() != av.numel() {
            return Err(Error::shape("masked_fill", format!("mask of {} for {:?}", mask.len(), av.shape())));
        }
        let data = av.data().iter().zip(mask).map(|(&x, &m)| if m { fill } else { x }).collect();
        let value = Tensor { shape: av.shape().to_vec(), data };
        self.push("masked_fill", value, Op::MaskedFill { a, mask: mask.to_vec() }, &[a])
    }

    /// Inverted dropout. A rate of zero returns `a` unchanged.
    pub fn dropout(&mut self, a: Var, rate: f64, rng: &mut impl Rng) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(a);
        }
        if rate >= 1.0 {
            return Err(Error::Contract(format!("dropout rate {rate} must be < 1")));
        }
        let keep = R::of(1.0 / (1.0 - rate));
        let av = self.value(a);
        let scale: Vec<R> = (0..av.numel())
            .map(|_| if rng.gen::<f64>() < rate { R::zero() } else { keep })
            .collect();
        let data = av.data().iter().zip(&scale).map(|(&x, &s)| x * s).collect();
        let value = Tensor { shape: av.shape().to_vec(), data };
        self.push("dropout", value, Op::Dropout { a, scale }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum::<R>();
        self.push("sum", Tensor::scalar(s), Op::Sum { a }, &[a])
    }

    /// `Σ w_i · a_i` with constant weights.
    pub fn weighted_sum(&mut self, a: Var, w: Vec<R>) -> Result<Var> {
        let av = self.value(a);
        if w.len() != av.numel() {
            return Err(Error::shape("weighted_sum", format!("{} weights for {:?}", w.len(), av.shape())));
        }
        let s = av.data().iter().zip(&w).map(|(&x, &y)| x * y).sum::<R>();
        self.push("weighted_sum", Tensor::scalar(s), Op::WeightedSum { a, w }, &[a])
    }

    /// Records a scalar function of `a` whose value and gradient were computed
    /// outside the tape (e.g. by a dynamic program).
    pub fn scalar_fn(&mut self, name: &'static str, a: Var, value: R, grad: Vec<R>) -> Result<Var> {
        if grad.len() != self.value(a).numel() {
            return Err(Error::shape(name, "gradient size does not match input"));
        }
        self.push(name, Tensor::scalar(value), Op::ScalarFn { a, grad }, &[a])
    }

    // ---- backward ----------------------------------------------------------

    /// Accumulates gradients of the scalar `loss` into every differentiable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<R>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<R>>> = vec![None; n];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![R::one()]);
        }
        let mut out = Gradients {
            leaves: HashMap::new(),
            params: HashMap::new(),
        };
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let g = grads[i].take().unwrap_or_else(|| vec![R::zero(); node.value.numel()]);
                let t = Tensor { shape: node.value.shape().to_vec(), data: g };
                if let Some(pid) = node.param {
                    out.params.insert(pid, t.clone());
                }
                out.leaves.insert(Var(i), t);
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(out)
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<R>>], v: Var) -> Option<&'g mut Vec<R>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![R::zero(); n]))
    }

    fn backprop_node(&self, node: &Node<R>, g: &[R], grads: &mut [Option<Vec<R>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let sb = self.shape(*b);
                let (k, n) = (sb[0], sb[1]);
                let m = self.value(*a).numel() / k;
                let bv = self.value(*b).data();
                if let Some(ga) = self.acc(grads, *a) {
                    gemm(g, bv, ga, m, n, k, false, true);
                }
                let av = self.value(*a).data();
                if let Some(gb) = self.acc(grads, *b) {
                    gemm(av, g, gb, k, m, n, true, false);
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (bs, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..bs {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bv[i * k * n..(i + 1) * k * n];
                        gemm(gi, bi, &mut ga[i * m * k..(i + 1) * m * k], m, n, k, false, !trans_b);
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..bs {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        let gbi = &mut gb[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            gemm(gi, ai, gbi, n, m, k, true, false);
                        } else {
                            gemm(ai, gi, gbi, k, m, n, true, false);
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (x, &d) in ga.iter_mut().zip(g) {
                        *x += d;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    let nb = gb.len();
                    for (i, &d) in g.iter().enumerate() {
                        gb[i % nb] += d;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let nb = bv.len();
                if let Some(ga) = self.acc(grads, *a) {
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += g[i] * bv[i % nb];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (i, &d) in g.iter().enumerate() {
                        gb[i % nb] += d * av[i];
                    }
                }
            }
            Op::Scale { a, c } => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (x, &d) in ga.iter_mut().zip(g) {
                        *x += d * *c;
                    }
                }
            }
            Op::Shift { a } | Op::Reshape { a } => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (x, &d) in ga.iter_mut().zip(g) {
                        *x += d;
                    }
                }
            }
            Op::Relu { a } => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, &d), &o) in ga.iter_mut().zip(g).zip(y) {
                        if o > R::zero() {
                            *x += d;
                        }
                    }
                }
            }
            Op::Softmax { a } => {
                let d = *node.value.shape().last().unwrap();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((gr, yr), xr) in g.chunks(d).zip(y.chunks(d)).zip(ga.chunks_mut(d)) {
                        let dot: R = gr.iter().zip(yr).map(|(&u, &v)| u * v).sum();
                        for j in 0..d {
                            xr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax { a } => {
                let d = *node.value.shape().last().unwrap();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((gr, yr), xr) in g.chunks(d).zip(y.chunks(d)).zip(ga.chunks_mut(d)) {
                        let total: R = gr.iter().copied().sum();
                        for j in 0..d {
                            xr[j] += gr[j] - yr[j].exp() * total;
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = *node.value.shape().last().unwrap();
                let gv = self.value(*gamma).data();
                if let Some(gg) = self.acc(grads, *gamma) {
                    for (i, &dy) in g.iter().enumerate() {
                        gg[i % d] += dy * xhat[i];
                    }
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    for (i, &dy) in g.iter().enumerate() {
                        gb[i % d] += dy;
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let dn = R::of(d as f64);
                    for (r, &rs) in rstd.iter().enumerate() {
                        let base = r * d;
                        let mut m1 = R::zero();
                        let mut m2 = R::zero();
                        for j in 0..d {
                            let dh = g[base + j] * gv[j];
                            m1 += dh;
                            m2 += dh * xhat[base + j];
                        }
                        m1 /= dn;
                        m2 /= dn;
                        for j in 0..d {
                            let dh = g[base + j] * gv[j];
                            gx[base + j] += rs * (dh - m1 - xhat[base + j] * m2);
                        }
                    }
                }
            }
            Op::Conv1d { x, w, b, stride } => {
                let sx = self.shape(*x);
                let (bs, len, cin) = (sx[0], sx[1], sx[2]);
                let sw = self.shape(*w);
                let (cout, kernel) = (sw[0], sw[2]);
                let lo = node.value.shape()[1];
                let rows = bs * lo;
                let kk = cin * kernel;
                if let Some(gb) = self.acc(grads, *b) {
                    for row in g.chunks(cout) {
                        for (x, &d) in gb.iter_mut().zip(row) {
                            *x += d;
                        }
                    }
                }
                if self.nodes[w.0].requires_grad {
                    let cols = im2col(self.value(*x).data(), bs, len, cin, kernel, *stride, lo);
                    let gw = self.acc(grads, *w).unwrap();
                    gemm(g, &cols, gw, cout, rows, kk, true, false);
                }
                if self.nodes[x.0].requires_grad {
                    let mut dcols = vec![R::zero(); rows * kk];
                    gemm(g, self.value(*w).data(), &mut dcols, rows, cout, kk, false, false);
                    let gx = self.acc(grads, *x).unwrap();
                    col2im(&dcols, gx, bs, len, cin, kernel, *stride, lo);
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                if let Some(gt) = self.acc(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let ext = self.shape(v)[*axis];
                    if let Some(gv) = self.acc(grads, v) {
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            for (x, &d) in gv[o * ext * inner..(o + 1) * ext * inner]
                                .iter_mut()
                                .zip(&g[src..src + ext * inner])
                            {
                                *x += d;
                            }
                        }
                    }
                    offset += ext;
                }
            }
            Op::Slice { a, axis, start } => {
                let s = self.shape(*a).to_vec();
                let (outer, ext, inner) = split_axis(&s, *axis);
                let len = node.value.shape()[*axis];
                if let Some(ga) = self.acc(grads, *a) {
                    for o in 0..outer {
                        let base = o * ext * inner + start * inner;
                        for (x, &d) in ga[base..base + len * inner]
                            .iter_mut()
                            .zip(&g[o * len * inner..(o + 1) * len * inner])
                        {
                            *x += d;
                        }
                    }
                }
            }
            Op::Gather { a, index } => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (&i, &d) in index.iter().zip(g) {
                        ga[i] += d;
                    }
                }
            }
            Op::MaskedFill { a, mask } => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, &d), &m) in ga.iter_mut().zip(g).zip(mask) {
                        if !m {
                            *x += d;
                        }
                    }
                }
            }
            Op::Dropout { a, scale } => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, &d), &s) in ga.iter_mut().zip(g).zip(scale) {
                        *x += d * s;
                    }
                }
            }
            Op::Sum { a } => {
                if let Some(ga) = self.acc(grads, *a) {
                    for x in ga.iter_mut() {
                        *x += g[0];
                    }
                }
            }
            Op::WeightedSum { a, w: wts } | Op::ScalarFn { a, grad: wts } => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (x, &wt) in ga.iter_mut().zip(wts) {
                        *x += g[0] * wt;
                    }
                }
            }
        }
    }
}

/// Output length of an unpadded 1-d convolution; zero when `len < kernel`.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize) -> usize {
    if len < kernel {
        0
    } else {
        (len - kernel) / stride + 1
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<R: Real>(x: &[R], bs: usize, len: usize, cin: usize, kernel: usize, stride: usize, lo: usize) -> Vec<R> {
    let kk = cin * kernel;
    let mut cols = vec![R::zero(); bs * lo * kk];
    for b in 0..bs {
        for j in 0..lo {
            let row = &mut cols[(b * lo + j) * kk..(b * lo + j + 1) * kk];
            for k in 0..kernel {
                let t = j * stride + k;
                let src = &x[(b * len + t) * cin..(b * len + t + 1) * cin];
                for c in 0..cin {
                    row[c * kernel + k] = src[c];
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<R: Real>(cols: &[R], gx: &mut [R], bs: usize, len: usize, cin: usize, kernel: usize, stride: usize, lo: usize) {
    let kk = cin * kernel;
    for b in 0..bs {
        for j in 0..lo {
            let row = &cols[(b * lo + j) * kk..(b * lo + j + 1) * kk];
            for k in 0..kernel {
                let t = j * stride + k;
                let dst = &mut gx[(b * len + t) * cin..(b * len + t + 1) * cin];
                for c in 0..cin {
                    dst[c] += row[c * kernel + k];
                }
            }
        }
    }
}
