use std::sync::Arc;

use crate::kernels::attention::{self, ColumnOverride, Dims};
use crate::kernels::conv::{self, ConvGeom};
use crate::kernels::norm::{self, GroupStats};
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, stats: GroupStats<T> },
    Silu { x: Var },
    Add { a: Var, b: Var },
    AddChannel { x: Var, v: Var },
    AddBroadcast { a: Var, b: Var },
    Linear { x: Var, w: Var, b: Var },
    ToTokens { x: Var },
    FromTokens { x: Var, h: usize, w: usize },
    Upsample2x { x: Var },
    ConcatChannels { a: Var, b: Var },
    Gather { table: Var, ids: Vec<usize> },
    AttnProbs { q: Var, k: Var, heads: usize, scale: T, over: Option<ColumnOverride<T>>, own: Option<Tensor<T>> },
    AttnMix { p: Var, v: Var, heads: usize },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Append-only tape of tensor operations.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shared_value(&self, v: Var) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, needs_grad: bool) -> Var {
        self.leaf_shared(Arc::new(value), needs_grad)
    }

    pub fn leaf_shared(&mut self, value: Arc<Tensor<T>>, needs_grad: bool) -> Var {
        self.push(value, Op::Leaf, needs_grad)
    }

    fn push(&mut self, value: Arc<Tensor<T>>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, pad)
            .ok_or_else(|| Error::ShapeMismatch(format!("conv2d x {:?} w {:?}", self.shape(x), self.shape(w))))?;
        if self.shape(b) != [geom.co] {
            return Err(Error::ShapeMismatch(format!("conv2d bias {:?}", self.shape(b))));
        }
        let out = conv::forward(self.value(x), self.value(w), self.value(b), &geom);
        let ng = self.any_grad(&[x, w, b]);
        Ok(self.push(Arc::new(out), Op::Conv2d { x, w, b, geom }, ng))
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() < 3 || !shape[1].is_multiple_of(groups) || self.shape(gamma) != [shape[1]] {
            return Err(Error::ShapeMismatch(format!("group_norm {shape:?} groups {groups}")));
        }
        let (y, stats) = norm::forward(self.value(x), self.value(gamma), self.value(beta), groups, T::lit(1e-5));
        let ng = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(Arc::new(y), Op::GroupNorm { x, gamma, beta, groups, stats }, ng))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v / (T::one() + (-v).exp()));
        let ng = self.any_grad(&[x]);
        self.push(Arc::new(y), Op::Silu { x }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(Arc::new(y), Op::Add { a, b }, ng))
    }

    /// `x[n, c, ...] + v[n, c]`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let xs = self.shape(x);
        let vs = self.shape(v);
        if vs.len() != 2 || xs[0] != vs[0] || xs[1] != vs[1] {
            return Err(Error::ShapeMismatch(format!("add_channel {xs:?} + {vs:?}")));
        }
        let plane: usize = xs[2..].iter().product();
        let mut y = self.value(x).clone();
        let vv = self.value(v).data().to_vec();
        for (i, chunk) in y.data_mut().chunks_mut(plane).enumerate() {
            for e in chunk {
                *e += vv[i];
            }
        }
        let ng = self.any_grad(&[x, v]);
        Ok(self.push(Arc::new(y), Op::AddChannel { x, v }, ng))
    }

    /// `a[n, ...] + b[...]`, broadcasting `b` over the leading axis.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a)[1..] != *self.shape(b) {
            return Err(Error::ShapeMismatch(format!("add_broadcast {:?} + {:?}", self.shape(a), self.shape(b))));
        }
        let bv = self.value(b).data().to_vec();
        let mut y = self.value(a).clone();
        for chunk in y.data_mut().chunks_mut(bv.len()) {
            for (e, &add) in chunk.iter_mut().zip(&bv) {
                *e += add;
            }
        }
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(Arc::new(y), Op::AddBroadcast { a, b }, ng))
    }

    /// Affine map over the last axis with `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let din = *xs.last().unwrap_or(&0);
        if ws.len() != 2 || ws[1] != din || self.shape(b) != [ws[0]] {
            return Err(Error::ShapeMismatch(format!("linear x {xs:?} w {ws:?}")));
        }
        let rows = self.value(x).len() / din;
        let dout = ws[0];
        let mut shape = xs.clone();
        *shape.last_mut().unwrap() = dout;
        let mut y = Tensor::zeros(&shape);
        let bias = self.value(b).data().to_vec();
        for row in y.data_mut().chunks_mut(dout) {
            row.copy_from_slice(&bias);
        }
        gemm(
            T::one(),
            MatRef::new(self.value(x).data(), rows, din),
            MatRef::new(self.value(w).data(), dout, din).t(),
            T::one(),
            y.data_mut(),
            dout,
        );
        let ng = self.any_grad(&[x, w, b]);
        Ok(self.push(Arc::new(y), Op::Linear { x, w, b }, ng))
    }

    /// `[n, c, h, w]` to `[n, h*w, c]`.
    pub fn to_tokens(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::ShapeMismatch(format!("to_tokens {s:?}")));
        }
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        let y = transpose_last2(self.value(x), n, c, plane);
        let ng = self.any_grad(&[x]);
        Ok(self.push(Arc::new(y.reshape(&[n, plane, c])?), Op::ToTokens { x }, ng))
    }

    /// `[n, h*w, c]` to `[n, c, h, w]`.
    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] != h * w {
            return Err(Error::ShapeMismatch(format!("from_tokens {s:?} to {h}x{w}")));
        }
        let (n, c) = (s[0], s[2]);
        let y = transpose_last2(self.value(x), n, h * w, c);
        let ng = self.any_grad(&[x]);
        Ok(self.push(Arc::new(y.reshape(&[n, c, h, w])?), Op::FromTokens { x, h, w }, ng))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::ShapeMismatch(format!("upsample2x {s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        let mut y = Tensor::zeros(&[s[0], s[1], 2 * h, 2 * w]);
        let xv = self.value(x).data();
        for (p, out) in y.data_mut().chunks_mut(4 * h * w).enumerate() {
            let src = &xv[p * h * w..(p + 1) * h * w];
            for oy in 0..2 * h {
                for ox in 0..2 * w {
                    out[oy * 2 * w + ox] = src[(oy / 2) * w + ox / 2];
                }
            }
        }
        let ng = self.any_grad(&[x]);
        Ok(self.push(Arc::new(y), Op::Upsample2x { x }, ng))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::ShapeMismatch(format!("concat {sa:?} {sb:?}")));
        }
        let mut y = Tensor::zeros(&[sa[0], sa[1] + sb[1], sa[2], sa[3]]);
        let (la, lb) = (self.value(a).len() / sa[0], self.value(b).len() / sb[0]);
        for n in 0..sa[0] {
            let dst = &mut y.data_mut()[n * (la + lb)..(n + 1) * (la + lb)];
            dst[..la].copy_from_slice(self.value(a).slab(n));
            dst[la..].copy_from_slice(self.value(b).slab(n));
        }
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(Arc::new(y), Op::ConcatChannels { a, b }, ng))
    }

    /// Rows of `table: [vocab, dim]` for `ids` laid out as `[n, len]`.
    pub fn gather(&mut self, table: Var, ids: &[usize], n: usize) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || n == 0 || !ids.len().is_multiple_of(n) || ids.iter().any(|&i| i >= ts[0]) {
            return Err(Error::ShapeMismatch(format!("gather from {ts:?}")));
        }
        let d = ts[1];
        let mut y = Tensor::zeros(&[n, ids.len() / n, d]);
        for (row, &id) in y.data_mut().chunks_mut(d).zip(ids) {
            row.copy_from_slice(&self.value(table).data()[id * d..(id + 1) * d]);
        }
        let ng = self.any_grad(&[table]);
        Ok(self.push(Arc::new(y), Op::Gather { table, ids: ids.to_vec() }, ng))
    }

    /// Attention probabilities `[n, heads, queries, tokens]` from
    /// `q: [n, queries, d]` and `k: [n, tokens, d]`.
    pub fn attn_probs(&mut self, q: Var, k: Var, heads: usize, over: Option<ColumnOverride<T>>) -> Result<Var> {
        let qs = self.shape(q).to_vec();
        let ks = self.shape(k).to_vec();
        if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != ks[2] || !qs[2].is_multiple_of(heads) {
            return Err(Error::ShapeMismatch(format!("attn q {qs:?} k {ks:?}")));
        }
        let dims = Dims { n: qs[0], s: qs[1], l: ks[1], d: qs[2], heads };
        if let Some(o) = &over {
            let ss = o.source.shape();
            let ok = ss.len() == 4
                && ss[0] == dims.n
                && ss[1] == heads
                && ss[2] == dims.s
                && o.pairs.iter().all(|&(t, f)| t < dims.l && f < ss[3]);
            if !ok {
                return Err(Error::ShapeMismatch(format!("attention override source {ss:?}")));
            }
        }
        let scale = T::one() / T::from_usize(dims.dh()).unwrap().sqrt();
        let (used, own) = attention::probs_forward(self.value(q), self.value(k), &dims, scale, over.as_ref());
        let ng = self.any_grad(&[q, k]);
        let own = if ng { own } else { None };
        let over = if ng { over } else { None };
        Ok(self.push(Arc::new(used), Op::AttnProbs { q, k, heads, scale, over, own }, ng))
    }

    /// `P · v` per head, `v: [n, tokens, d]`.
    pub fn attn_mix(&mut self, p: Var, v: Var, heads: usize) -> Result<Var> {
        let ps = self.shape(p).to_vec();
        let vs = self.shape(v).to_vec();
        if ps.len() != 4 || vs.len() != 3 || ps[0] != vs[0] || ps[1] != heads || ps[3] != vs[1] {
            return Err(Error::ShapeMismatch(format!("attn_mix p {ps:?} v {vs:?}")));
        }
        let dims = Dims { n: ps[0], s: ps[2], l: ps[3], d: vs[2], heads };
        let y = attention::mix_forward(self.value(p), self.value(v), &dims);
        let ng = self.any_grad(&[p, v]);
        Ok(self.push(Arc::new(y), Op::AttnMix { p, v, heads }, ng))
    }

    /// Reverse sweep from externally supplied output gradients.
    pub fn backward(&self, seeds: Vec<(Var, Tensor<T>)>) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (v, g) in seeds {
            self.value(v).check_same_shape(&g)?;
            last = last.max(v.0);
            accumulate(&mut grads, v, g);
        }
        for idx in (0..=last.min(self.nodes.len().saturating_sub(1))).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            self.backward_node(node, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<T>, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let ng = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = conv::backward(self.value(*x), self.value(*w), gy, geom, ng(*x), ng(*w) || ng(*b));
                put(grads, *x, dx);
                if ng(*w) {
                    put(grads, *w, dw);
                }
                if ng(*b) {
                    put(grads, *b, db);
                }
            }
            Op::GroupNorm { x, gamma, beta, groups, stats } => {
                let (dx, dg, db) = norm::backward(self.value(*x), self.value(*gamma), stats, *groups, gy);
                put_if(grads, *x, ng(*x), dx);
                put_if(grads, *gamma, ng(*gamma), dg);
                put_if(grads, *beta, ng(*beta), db);
            }
            Op::Silu { x } => {
                let dx = self
                    .value(*x)
                    .zip_map(gy, |v, g| {
                        let s = T::one() / (T::one() + (-v).exp());
                        g * s * (T::one() + v * (T::one() - s))
                    })
                    .expect("silu shapes");
                accumulate(grads, *x, dx);
            }
            Op::Add { a, b } => {
                put_if(grads, *a, ng(*a), gy.clone());
                put_if(grads, *b, ng(*b), gy.clone());
            }
            Op::AddChannel { x, v } => {
                put_if(grads, *x, ng(*x), gy.clone());
                if ng(*v) {
                    let vs = self.shape(*v);
                    let plane = gy.len() / (vs[0] * vs[1]);
                    let dv: Vec<T> = gy.data().chunks(plane).map(|c| c.iter().copied().sum()).collect();
                    accumulate(grads, *v, Tensor::from_vec(vs, dv).expect("add_channel grad"));
                }
            }
            Op::AddBroadcast { a, b } => {
                put_if(grads, *a, ng(*a), gy.clone());
                if ng(*b) {
                    let mut db = Tensor::zeros(self.shape(*b));
                    let m = db.len();
                    for chunk in gy.data().chunks(m) {
                        for (d, &g) in db.data_mut().iter_mut().zip(chunk) {
                            *d += g;
                        }
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (dout, din) = (ws[0], ws[1]);
                let rows = gy.len() / dout;
                if ng(*x) {
                    let mut dx = Tensor::zeros(self.shape(*x));
                    gemm(
                        T::one(),
                        MatRef::new(gy.data(), rows, dout),
                        MatRef::new(self.value(*w).data(), dout, din),
                        T::zero(),
                        dx.data_mut(),
                        din,
                    );
                    accumulate(grads, *x, dx);
                }
                if ng(*w) {
                    let mut dw = Tensor::zeros(ws);
                    gemm(
                        T::one(),
                        MatRef::new(gy.data(), rows, dout).t(),
                        MatRef::new(self.value(*x).data(), rows, din),
                        T::zero(),
                        dw.data_mut(),
                        din,
                    );
                    accumulate(grads, *w, dw);
                }
                if ng(*b) {
                    let mut db = Tensor::zeros(&[dout]);
                    for row in gy.data().chunks(dout) {
                        for (d, &g) in db.data_mut().iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::ToTokens { x } => {
                let s = self.shape(*x);
                let dx = transpose_last2(gy, s[0], s[2] * s[3], s[1]).reshape(s).expect("to_tokens grad");
                accumulate(grads, *x, dx);
            }
            Op::FromTokens { x, h, w } => {
                let s = self.shape(*x);
                let dx = transpose_last2(gy, s[0], s[2], h * w).reshape(s).expect("from_tokens grad");
                accumulate(grads, *x, dx);
            }
            Op::Upsample2x { x } => {
                let s = self.shape(*x);
                let (h, w) = (s[2], s[3]);
                let mut dx = Tensor::zeros(s);
                for (p, dst) in dx.data_mut().chunks_mut(h * w).enumerate() {
                    let src = &gy.data()[p * 4 * h * w..(p + 1) * 4 * h * w];
                    for oy in 0..2 * h {
                        for ox in 0..2 * w {
                            dst[(oy / 2) * w + ox / 2] += src[oy * 2 * w + ox];
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::ConcatChannels { a, b } => {
                let n = gy.dim(0);
                let la = self.value(*a).len() / n;
                let lb = self.value(*b).len() / n;
                if ng(*a) {
                    let mut da = Vec::with_capacity(la * n);
                    for c in gy.data().chunks(la + lb) {
                        da.extend_from_slice(&c[..la]);
                    }
                    accumulate(grads, *a, Tensor::from_vec(self.shape(*a), da).expect("concat grad"));
                }
                if ng(*b) {
                    let mut db = Vec::with_capacity(lb * n);
                    for c in gy.data().chunks(la + lb) {
                        db.extend_from_slice(&c[la..]);
                    }
                    accumulate(grads, *b, Tensor::from_vec(self.shape(*b), db).expect("concat grad"));
                }
            }
            Op::Gather { table, ids } => {
                let ts = self.shape(*table);
                let d = ts[1];
                let mut dt = Tensor::zeros(ts);
                for (row, &id) in gy.data().chunks(d).zip(ids) {
                    for (t, &g) in dt.data_mut()[id * d..(id + 1) * d].iter_mut().zip(row) {
                        *t += g;
                    }
                }
                accumulate(grads, *table, dt);
            }
            Op::AttnProbs { q, k, heads, scale, over, own } => {
                let qs = self.shape(*q);
                let ks = self.shape(*k);
                let dims = Dims { n: qs[0], s: qs[1], l: ks[1], d: qs[2], heads: *heads };
                let own = own.as_ref().unwrap_or(&node.value);
                let (dq, dk) =
                    attention::probs_backward(self.value(*q), self.value(*k), own, &dims, *scale, over.as_ref(), gy);
                put_if(grads, *q, ng(*q), dq);
                put_if(grads, *k, ng(*k), dk);
            }
            Op::AttnMix { p, v, heads } => {
                let ps = self.shape(*p);
                let vs = self.shape(*v);
                let dims = Dims { n: ps[0], s: ps[2], l: ps[3], d: vs[2], heads: *heads };
                let (dp, dv) = attention::mix_backward(self.value(*p), self.value(*v), &dims, gy);
                put_if(grads, *p, ng(*p), dp);
                put_if(grads, *v, ng(*v), dv);
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn put<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Option<Tensor<T>>) {
    if let Some(g) = g {
        accumulate(grads, v, g);
    }
}

fn put_if<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, needed: bool, g: Tensor<T>) {
    if needed {
        accumulate(grads, v, g);
    }
}

/// Swaps the last two axes of a `[n, rows, cols]` buffer.
fn transpose_last2<T: Scalar>(x: &Tensor<T>, n: usize, rows: usize, cols: usize) -> Tensor<T> {
    let mut y = Tensor::zeros(&[n, cols, rows]);
    for b in 0..n {
        let src = &x.data()[b * rows * cols..(b + 1) * rows * cols];
        let dst = &mut y.data_mut()[b * rows * cols..(b + 1) * rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                dst[c * rows + r] = src[r * cols + c];
            }
        }
    }
    y
}
