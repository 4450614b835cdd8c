//! The tape.
//!
//! Every op appends a node holding its value. Nodes are tracked (carry their
//! op and inputs) when gradients are enabled and at least one input is tracked.
//! `grad` builds adjoints using the same ops, so with `create_graph` the
//! adjoints are themselves tracked nodes and can be differentiated again.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::kernels::{self, Nchw};
use super::Tensor;
use crate::error::{Error, Result};

static NEXT_GRAPH: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of a particular [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

/// A tensor viewed as `[outer, mid, inner]`; reductions keep `mid`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout3 {
    pub outer: usize,
    pub mid: usize,
    pub inner: usize,
}

impl Layout3 {
    pub fn len(&self) -> usize {
        self.outer * self.mid * self.inner
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Fixed sparse linear map `y[i] = Σ_(j, w) w · x[j]`, stored as CSR rows.
#[derive(Debug)]
pub struct SparseMap {
    pub in_len: usize,
    pub out_shape: Vec<usize>,
    pub in_shape: Vec<usize>,
    /// Row `i` owns `entries[offsets[i]..offsets[i + 1]]`.
    offsets: Vec<usize>,
    entries: Vec<(usize, f64)>,
}

impl SparseMap {
    fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.entries[self.offsets[i]..self.offsets[i + 1]]
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.offsets.len() - 1)
            .map(|i| self.row(i).iter().map(|&(j, w)| w * x[j]).sum())
            .collect()
    }

    fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.in_len];
        for (i, &yv) in y.iter().enumerate() {
            for &(j, w) in self.row(i) {
                x[j] += w * yv;
            }
        }
        x
    }

    /// Adaptive average pooling of an NCHW tensor to `out_h × out_w`.
    pub fn adaptive_avg_pool(xd: Nchw, out_h: usize, out_w: usize) -> Self {
        let hb = kernels::adaptive_bins(xd.h, out_h);
        let wb = kernels::adaptive_bins(xd.w, out_w);
        let mut offsets = Vec::with_capacity(xd.n * xd.c * out_h * out_w + 1);
        let mut entries = Vec::new();
        offsets.push(0);
        for nc in 0..xd.n * xd.c {
            for &(h0, h1) in &hb {
                for &(w0, w1) in &wb {
                    let wt = 1.0 / ((h1 - h0) * (w1 - w0)) as f64;
                    for r in h0..h1 {
                        for c in w0..w1 {
                            entries.push((nc * xd.plane() + r * xd.w + c, wt));
                        }
                    }
                    offsets.push(entries.len());
                }
            }
        }
        SparseMap { in_len: xd.len(), in_shape: xd.shape(), out_shape: vec![xd.n, xd.c, out_h, out_w], offsets, entries }
    }

    /// Selection map: output `i` copies input `indices[i]`.
    pub fn gather(in_shape: Vec<usize>, out_shape: Vec<usize>, indices: &[usize]) -> Self {
        SparseMap {
            in_len: in_shape.iter().product(),
            in_shape,
            out_shape,
            offsets: (0..=indices.len()).collect(),
            entries: indices.iter().map(|&j| (j, 1.0)).collect(),
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Powf(usize, f64),
    Exp(usize),
    Ln(usize),
    Relu(usize),
    Matmul(usize, usize),
    Transpose(usize),
    Conv2d { x: usize, w: usize },
    ConvInputGrad { g: usize, w: usize },
    ConvWeightGrad { x: usize, g: usize },
    Sparse(usize, Arc<SparseMap>),
    SparseT(usize, Arc<SparseMap>),
    Reduce(usize, Layout3),
    Broadcast(usize, Layout3),
    Reshape(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Recording of a computation for reverse-mode differentiation.
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { id: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), grad_enabled: true }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::NotInGraph);
        }
        Ok(v.index)
    }

    fn var(&self, index: usize) -> Var {
        Var { graph: self.id, index }
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.nodes[self.idx(v)?].value)
    }

    /// True when gradients can flow back from `v` to some tracked leaf.
    pub fn is_tracked(&self, v: Var) -> Result<bool> {
        Ok(self.nodes[self.idx(v)?].tracked)
    }

    /// Leaf whose tracking follows `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let tracked = t.requires_grad() && self.grad_enabled;
        self.nodes.push(Node { value: t, op: Op::Leaf, tracked });
        self.var(self.nodes.len() - 1)
    }

    /// Leaf that is differentiated with respect to.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize], what: &str) -> Result<Var> {
        value.check_finite(what)?;
        let tracked = self.grad_enabled && inputs.iter().any(|&i| self.nodes[i].tracked);
        let op = if tracked { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, tracked });
        Ok(self.var(self.nodes.len() - 1))
    }

    fn binary_same_shape(&self, a: usize, b: usize, what: &str) -> Result<()> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa != sb {
            return Err(Error::shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: fn(usize, usize) -> Op) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        self.binary_same_shape(ia, ib, what)?;
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new_unchecked(va.shape().to_vec(), data)?;
        self.push(t, op(ia, ib), &[ia, ib], what)
    }

    fn unary(&mut self, a: Var, what: &str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let ia = self.idx(a)?;
        let va = &self.nodes[ia].value;
        let t = Tensor::new_unchecked(va.shape().to_vec(), va.data().iter().map(|&x| f(x)).collect())?;
        self.push(t, op, &[ia], what)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        self.unary(a, "scale", |x| c * x, Op::Scale(ia, c))
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        self.unary(a, "powf", |x| x.powf(p), Op::Powf(ia, p))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        self.unary(a, "exp", f64::exp, Op::Exp(ia))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        self.unary(a, "ln", f64::ln, Op::Ln(ia))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        self.unary(a, "relu", |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(ia))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = self.nodes[ia].value.reshape(shape)?.with_requires_grad(false);
        self.push(t, Op::Reshape(ia), &[ia], "reshape")
    }

    /// `[m×k] · [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let (m, k, k2, n) = match (va.shape(), vb.shape()) {
            ([m, k], [k2, n]) => (*m, *k, *k2, *n),
            (sa, sb) => return Err(Error::shape(format!("matmul: {sa:?} · {sb:?}"))),
        };
        if k != k2 {
            return Err(Error::shape(format!("matmul inner dims {k} vs {k2}")));
        }
        let t = Tensor::new_unchecked(vec![m, n], kernels::matmul(va.data(), vb.data(), m, k, n))?;
        self.push(t, Op::Matmul(ia, ib), &[ia, ib], "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let va = &self.nodes[ia].value;
        let [r, c] = *va.shape() else {
            return Err(Error::shape(format!("transpose of {:?}", va.shape())));
        };
        let t = Tensor::new_unchecked(vec![c, r], kernels::transpose(va.data(), r, c))?;
        self.push(t, Op::Transpose(ia), &[ia], "transpose")
    }

    fn conv_dims(&self, x: usize, w: usize) -> Result<(Nchw, usize, usize)> {
        let xs = self.nodes[x].value.shape();
        let ws = self.nodes[w].value.shape();
        let xd = Nchw::from_shape(xs).ok_or_else(|| Error::shape(format!("conv input {xs:?} is not NCHW")))?;
        match *ws {
            [o, c, k, k2] if c == xd.c && k == k2 && k % 2 == 1 => Ok((xd, o, k)),
            _ => Err(Error::shape(format!("conv kernel {ws:?} for input {xs:?}"))),
        }
    }

    /// Same-padding, stride-1 convolution of `x [N,C,H,W]` with `w [O,C,k,k]`.
    pub fn conv2d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (ix, iw) = (self.idx(x)?, self.idx(w)?);
        let (xd, o, k) = self.conv_dims(ix, iw)?;
        let y = kernels::conv2d(self.nodes[ix].value.data(), xd, self.nodes[iw].value.data(), o, k);
        let t = Tensor::new_unchecked(vec![xd.n, o, xd.h, xd.w], y)?;
        self.push(t, Op::Conv2d { x: ix, w: iw }, &[ix, iw], "conv2d")
    }

    fn conv_input_grad(&mut self, g: usize, w: usize) -> Result<Var> {
        let gs = self.nodes[g].value.shape();
        let ws = self.nodes[w].value.shape();
        let gd = Nchw::from_shape(gs).ok_or_else(|| Error::shape(format!("conv grad {gs:?}")))?;
        let (in_c, k) = (ws[1], ws[2]);
        let data = kernels::conv2d_input_grad(self.nodes[g].value.data(), gd, self.nodes[w].value.data(), in_c, k);
        let t = Tensor::new_unchecked(vec![gd.n, in_c, gd.h, gd.w], data)?;
        self.push(t, Op::ConvInputGrad { g, w }, &[g, w], "conv2d input grad")
    }

    fn conv_weight_grad(&mut self, x: usize, g: usize, k: usize) -> Result<Var> {
        let xs = self.nodes[x].value.shape();
        let xd = Nchw::from_shape(xs).ok_or_else(|| Error::shape(format!("conv grad {xs:?}")))?;
        let out_c = self.nodes[g].value.shape()[1];
        let data = kernels::conv2d_weight_grad(self.nodes[x].value.data(), xd, self.nodes[g].value.data(), out_c, k);
        let t = Tensor::new_unchecked(vec![out_c, xd.c, k, k], data)?;
        self.push(t, Op::ConvWeightGrad { x, g }, &[x, g], "conv2d weight grad")
    }

    pub fn sparse(&mut self, a: Var, map: Arc<SparseMap>) -> Result<Var> {
        let ia = self.idx(a)?;
        if self.nodes[ia].value.shape() != map.in_shape.as_slice() {
            return Err(Error::shape(format!(
                "sparse map expects {:?}, got {:?}",
                map.in_shape,
                self.nodes[ia].value.shape()
            )));
        }
        let t = Tensor::new_unchecked(map.out_shape.clone(), map.apply(self.nodes[ia].value.data()))?;
        self.push(t, Op::Sparse(ia, map), &[ia], "sparse")
    }

    fn sparse_t(&mut self, a: usize, map: Arc<SparseMap>) -> Result<Var> {
        let t = Tensor::new_unchecked(map.in_shape.clone(), map.apply_transpose(self.nodes[a].value.data()))?;
        self.push(t, Op::SparseT(a, map), &[a], "sparse transpose")
    }

    /// 2×2 stride-2 max pool over an NCHW tensor.
    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let v = &self.nodes[ix].value;
        let xd = Nchw::from_shape(v.shape()).ok_or_else(|| Error::shape("maxpool input is not NCHW"))?;
        let (od, idx) = kernels::maxpool2x2_argmax(v.data(), xd);
        let map = SparseMap::gather(xd.shape(), od.shape(), &idx);
        self.sparse(x, Arc::new(map))
    }

    pub fn adaptive_avg_pool(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let v = &self.nodes[ix].value;
        let xd = Nchw::from_shape(v.shape()).ok_or_else(|| Error::shape("adaptive pool input is not NCHW"))?;
        if xd.h == out_h && xd.w == out_w {
            return Ok(x);
        }
        self.sparse(x, Arc::new(SparseMap::adaptive_avg_pool(xd, out_h, out_w)))
    }

    /// Sums `[outer, mid, inner]` down to `[mid]` (shape `[]` when `mid == 1`
    /// and `scalar` is set).
    pub fn reduce(&mut self, a: Var, layout: Layout3) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = &self.nodes[ia].value;
        if v.len() != layout.len() {
            return Err(Error::shape(format!("reduce {layout:?} over {:?}", v.shape())));
        }
        let mut out = vec![0.0; layout.mid];
        let d = v.data();
        for o in 0..layout.outer {
            for (m, acc) in out.iter_mut().enumerate() {
                let base = (o * layout.mid + m) * layout.inner;
                *acc += d[base..base + layout.inner].iter().sum::<f64>();
            }
        }
        let shape = if layout.mid == 1 { Vec::new() } else { vec![layout.mid] };
        let t = Tensor::new_unchecked(shape, out)?;
        self.push(t, Op::Reduce(ia, layout), &[ia], "reduce")
    }

    /// Broadcasts a `[mid]` vector (or scalar) across `[outer, mid, inner]`,
    /// reshaped to `shape`.
    pub fn broadcast(&mut self, a: Var, layout: Layout3, shape: &[usize]) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = &self.nodes[ia].value;
        if v.len() != layout.mid || shape.iter().product::<usize>() != layout.len() {
            return Err(Error::shape(format!("broadcast {:?} via {layout:?} to {shape:?}", v.shape())));
        }
        let mut out = Vec::with_capacity(layout.len());
        for _ in 0..layout.outer {
            for &m in v.data() {
                out.extend(std::iter::repeat_n(m, layout.inner));
            }
        }
        let t = Tensor::new_unchecked(shape.to_vec(), out)?;
        self.push(t, Op::Broadcast(ia, layout), &[ia], "broadcast")
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a)?.len();
        self.reduce(a, Layout3 { outer: 1, mid: 1, inner: n })
    }

    /// Gradients of scalar `loss` with respect to each of `wrt`.
    ///
    /// With `create_graph` the returned adjoints are tracked nodes; otherwise
    /// they are constants. Variables that `loss` does not depend on get zeros.
    pub fn grad(&mut self, loss: Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Var>> {
        let il = self.idx(loss)?;
        for &w in wrt {
            self.idx(w)?;
        }
        if self.nodes[il].value.len() != 1 {
            return Err(Error::shape(format!("grad of non-scalar {:?}", self.nodes[il].value.shape())));
        }
        let saved = self.grad_enabled;
        self.grad_enabled = create_graph;
        let out = self.backprop(il, wrt);
        self.grad_enabled = saved;
        out
    }

    fn backprop(&mut self, il: usize, wrt: &[Var]) -> Result<Vec<Var>> {
        let mut adj: Vec<Option<usize>> = vec![None; il + 1];
        let seed = Tensor::full(self.nodes[il].value.shape(), 1.0);
        adj[il] = Some(self.constant(seed).index);
        for i in (0..=il).rev() {
            let Some(g) = adj[i] else { continue };
            if !self.nodes[i].tracked {
                continue;
            }
            let op = self.nodes[i].op.clone();
            for (input, contrib) in self.vjp(i, &op, g)? {
                adj[input] = Some(match adj[input] {
                    None => contrib.index,
                    Some(prev) => self.add(self.var(prev), contrib)?.index,
                });
            }
        }
        wrt.iter()
            .map(|w| match adj.get(w.index).copied().flatten() {
                Some(a) => Ok(self.var(a)),
                None => {
                    let z = Tensor::zeros(self.nodes[w.index].value.shape());
                    Ok(self.constant(z))
                }
            })
            .collect()
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].tracked
    }

    /// Input adjoints of node `out` given its adjoint `g`, built from graph ops.
    fn vjp(&mut self, out: usize, op: &Op, g: usize) -> Result<Vec<(usize, Var)>> {
        let gv = self.var(g);
        let mut res = Vec::with_capacity(2);
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.needs(a) {
                    res.push((a, gv));
                }
                if self.needs(b) {
                    res.push((b, gv));
                }
            }
            Op::Sub(a, b) => {
                if self.needs(a) {
                    res.push((a, gv));
                }
                if self.needs(b) {
                    res.push((b, self.scale(gv, -1.0)?));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(a) {
                    res.push((a, self.mul(gv, self.var(b))?));
                }
                if self.needs(b) {
                    res.push((b, self.mul(gv, self.var(a))?));
                }
            }
            Op::Scale(a, c) => res.push((a, self.scale(gv, c)?)),
            Op::Powf(a, p) => {
                let d = self.powf(self.var(a), p - 1.0)?;
                let d = self.scale(d, p)?;
                res.push((a, self.mul(gv, d)?));
            }
            Op::Exp(a) => res.push((a, self.mul(gv, self.var(out))?)),
            Op::Ln(a) => {
                let r = self.powf(self.var(a), -1.0)?;
                res.push((a, self.mul(gv, r)?));
            }
            Op::Relu(a) => {
                let mask = self.nodes[a].value.map(|x| if x > 0.0 { 1.0 } else { 0.0 })?;
                let m = self.constant(mask);
                res.push((a, self.mul(gv, m)?));
            }
            Op::Matmul(a, b) => {
                if self.needs(a) {
                    let bt = self.transpose(self.var(b))?;
                    res.push((a, self.matmul(gv, bt)?));
                }
                if self.needs(b) {
                    let at = self.transpose(self.var(a))?;
                    res.push((b, self.matmul(at, gv)?));
                }
            }
            Op::Transpose(a) => res.push((a, self.transpose(gv)?)),
            Op::Conv2d { x, w } => {
                let k = self.nodes[w].value.shape()[2];
                if self.needs(x) {
                    res.push((x, self.conv_input_grad(g, w)?));
                }
                if self.needs(w) {
                    res.push((w, self.conv_weight_grad(x, g, k)?));
                }
            }
            Op::ConvInputGrad { g: gin, w } => {
                // <dz, input_grad(gin, w)> = T(dz, w, gin)
                if self.needs(gin) {
                    res.push((gin, self.conv2d(gv, self.var(w))?));
                }
                if self.needs(w) {
                    let k = self.nodes[w].value.shape()[2];
                    res.push((w, self.conv_weight_grad(g, gin, k)?));
                }
            }
            Op::ConvWeightGrad { x, g: gin } => {
                // <dz, weight_grad(x, gin)> = T(x, dz, gin)
                if self.needs(x) {
                    res.push((x, self.conv_input_grad(gin, g)?));
                }
                if self.needs(gin) {
                    res.push((gin, self.conv2d(self.var(x), gv)?));
                }
            }
            Op::Sparse(a, ref map) => res.push((a, self.sparse_t(g, map.clone())?)),
            Op::SparseT(a, ref map) => res.push((a, self.sparse(gv, map.clone())?)),
            Op::Reduce(a, layout) => {
                let shape = self.nodes[a].value.shape().to_vec();
                res.push((a, self.broadcast(gv, layout, &shape)?));
            }
            Op::Broadcast(a, layout) => res.push((a, self.reduce(gv, layout)?)),
            Op::Reshape(a) => {
                let shape = self.nodes[a].value.shape().to_vec();
                res.push((a, self.reshape(gv, &shape)?));
            }
        }
        // reduce() yields [] for mid == 1; restore the input's own shape
        for (input, v) in res.iter_mut() {
            let want = self.nodes[*input].value.shape().to_vec();
            if self.nodes[v.index].value.shape() != want.as_slice() {
                *v = self.reshape(*v, &want)?;
            }
        }
        Ok(res)
    }
}

/// Mean softmax cross-entropy of `logits [B×C]` against one-hot `labels [B×C]`.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &Tensor) -> Result<Var> {
    let shape = g.value(logits)?.shape().to_vec();
    let [b, c] = shape[..] else {
        return Err(Error::shape(format!("logits must be [B×C], got {shape:?}")));
    };
    if b == 0 {
        return Err(Error::invalid("cross_entropy over an empty batch"));
    }
    if labels.shape() != shape.as_slice() {
        return Err(Error::shape(format!("labels {:?} vs logits {shape:?}", labels.shape())));
    }
    for (row, chunk) in labels.data().chunks(c).enumerate() {
        let ones = chunk.iter().filter(|&&v| v == 1.0).count();
        let zeros = chunk.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != c {
            return Err(Error::NotOneHot { row });
        }
    }
    // row max is a constant shift; it cancels analytically
    let lv = g.value(logits)?;
    let mut shift = Vec::with_capacity(b * c);
    for row in lv.data().chunks(c) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        shift.extend(std::iter::repeat_n(m, c));
    }
    let shift = g.constant(Tensor::new(shape.clone(), shift)?);
    let z = g.sub(logits, shift)?;
    let e = g.exp(z)?;
    let rows = Layout3 { outer: 1, mid: b, inner: c };
    let s = g.reduce(e, rows)?;
    let lse = g.ln(s)?;
    let lse = g.broadcast(lse, rows, &shape)?;
    let logp = g.sub(z, lse)?;
    let y = g.constant(labels.clone());
    let picked = g.mul(logp, y)?;
    let total = g.sum_all(picked)?;
    g.scale(total, -1.0 / b as f64)
}
