//! Eagerly recorded reverse-mode autodiff.
//!
//! A [`Graph`] lives for one forward/backward pass. Every operation on a
//! [`Var`] computes its value immediately and appends a node; [`Graph::backward`]
//! walks the nodes in reverse creation order, which is a valid topological
//! order because a node can only reference nodes created before it.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;

use super::array::{check_permutation, inverse_permutation, permute_into, DenseArray};
use super::kernels::{self, ConvGeom, MatLayout};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    LeakyRelu(f64),
    Gelu,
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gelu" => Ok(Activation::Gelu),
            "leaky_relu" => Ok(Activation::LeakyRelu(0.2)),
            other => other
                .strip_prefix("leaky_relu(")
                .and_then(|r| r.strip_suffix(')'))
                .and_then(|a| a.parse::<f64>().ok())
                .map(Activation::LeakyRelu)
                .ok_or_else(|| Error::invalid(format!("unknown activation '{other}'"))),
        }
    }
}

enum Op {
    Leaf,
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Add(usize, usize),
    /// `a + b` with `b` broadcast over the leading axes of `a`.
    AddSuffix(usize, usize),
    Scale(usize, f64),
    Sum(usize),
    MatMul(usize, usize),
    Linear { x: usize, w: usize, b: Option<usize>, rows: usize, inp: usize, out: usize },
    Conv3d { x: usize, k: usize, b: Option<usize>, geom: ConvGeom },
    LeakyRelu(usize, f64),
    Gelu(usize),
    LayerNorm { x: usize, gain: usize, bias: usize, normed: Vec<f64>, rstd: Vec<f64>, axis: usize },
    Softmax(usize, usize),
    Dropout(usize, Vec<f64>),
    Attention { q: usize, k: usize, v: usize, heads: usize, probs: Vec<f64> },
    Expand(usize),
    Narrow { x: usize, axis: usize, start: usize },
    Resample { table: usize, rows: Vec<(usize, usize, f64)>, cols: Vec<(usize, usize, f64)> },
    Mse { pred: usize, target: Rc<DenseArray>, weight: Option<Rc<DenseArray>>, denom: f64 },
}

struct Node {
    value: Rc<DenseArray>,
    op: Op,
    requires_grad: bool,
    name: Option<String>,
}

/// Operation record for one forward pass.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    leaf_grads: RefCell<BTreeMap<usize, DenseArray>>,
    logits: Cell<u64>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), leaf_grads: RefCell::new(BTreeMap::new()), logits: Cell::new(0) }
    }

    fn push(&self, value: DenseArray, op: Op, requires_grad: bool) -> Var<'_> {
        self.push_rc(Rc::new(value), op, requires_grad, None)
    }

    fn push_rc(&self, value: Rc<DenseArray>, op: Op, requires_grad: bool, name: Option<String>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad, name });
        Var { graph: self, id: nodes.len() - 1 }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: DenseArray) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&self, value: DenseArray, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A named leaf whose value is shared with a parameter store.
    pub fn param(&self, name: &str, value: Rc<DenseArray>, requires_grad: bool) -> Var<'_> {
        self.push_rc(value, Op::Leaf, requires_grad, Some(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Attention logits (query-key pairs per sequence) computed so far.
    pub fn logit_count(&self) -> u64 {
        self.logits.get()
    }

    pub fn reset_logit_count(&self) {
        self.logits.set(0);
    }

    /// Records attention logits computed without calling [`attention`].
    pub(crate) fn add_logits(&self, n: u64) {
        self.logits.set(self.logits.get() + n);
    }

    /// Accumulated gradient of a leaf, if any reached it.
    pub fn grad(&self, v: Var<'_>) -> Option<DenseArray> {
        self.leaf_grads.borrow().get(&v.id).cloned()
    }

    /// Like [`Graph::grad`], but a leaf that no path reached reports zeros.
    pub fn grad_or_zeros(&self, v: Var<'_>) -> DenseArray {
        self.grad(v).unwrap_or_else(|| DenseArray::zeros(&v.shape()))
    }

    /// Accumulated gradients of all named leaves, keyed by name.
    pub fn named_grads(&self) -> BTreeMap<String, DenseArray> {
        let nodes = self.nodes.borrow();
        let grads = self.leaf_grads.borrow();
        let mut out = BTreeMap::new();
        for (&id, g) in grads.iter() {
            if let Some(name) = &nodes[id].name {
                match out.get_mut(name) {
                    None => {
                        out.insert(name.clone(), g.clone());
                    }
                    Some(acc) => DenseArray::add_assign(acc, g),
                }
            }
        }
        out
    }

    /// Back-propagates from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(gout) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let mut leaf = self.leaf_grads.borrow_mut();
                match leaf.get_mut(&id) {
                    Some(acc) => {
                        for (a, g) in acc.data_mut().iter_mut().zip(&gout) {
                            *a += g;
                        }
                    }
                    None => {
                        leaf.insert(id, DenseArray::new(node.value.shape().to_vec(), gout)?);
                    }
                }
                continue;
            }
            backward_op(&nodes, node, &gout, &mut grads);
        }
        Ok(())
    }
}

fn needs(nodes: &[Node], id: usize) -> bool {
    nodes[id].requires_grad
}

/// Gradient buffer for node `id`, zero-initialized on first touch.
fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], id: usize) -> &'a mut [f64] {
    grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()])
}

fn backward_op(nodes: &[Node], node: &Node, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match &node.op {
        Op::Leaf => {}
        Op::Reshape(x) => {
            for (a, g) in slot(nodes, grads, *x).iter_mut().zip(gout) {
                *a += g;
            }
        }
        Op::Permute(x, order) => {
            let inv = inverse_permutation(order);
            let dst = slot(nodes, grads, *x);
            permute_into(gout, node.value.shape(), &inv, dst, true);
        }
        Op::Add(a, b) => {
            for &i in [a, b].iter() {
                if needs(nodes, *i) {
                    for (d, g) in slot(nodes, grads, *i).iter_mut().zip(gout) {
                        *d += g;
                    }
                }
            }
        }
        Op::AddSuffix(a, b) => {
            if needs(nodes, *a) {
                for (d, g) in slot(nodes, grads, *a).iter_mut().zip(gout) {
                    *d += g;
                }
            }
            if needs(nodes, *b) {
                let d = slot(nodes, grads, *b);
                let n = d.len();
                for chunk in gout.chunks(n) {
                    for (x, g) in d.iter_mut().zip(chunk) {
                        *x += g;
                    }
                }
            }
        }
        Op::Scale(x, s) => {
            for (d, g) in slot(nodes, grads, *x).iter_mut().zip(gout) {
                *d += s * g;
            }
        }
        Op::Sum(x) => {
            let g = gout[0];
            for d in slot(nodes, grads, *x).iter_mut() {
                *d += g;
            }
        }
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[*a].value.shape()[0], nodes[*a].value.shape()[1]);
            let n = nodes[*b].value.shape()[1];
            if needs(nodes, *a) {
                let bv = nodes[*b].value.clone();
                let d = slot(nodes, grads, *a);
                kernels::gemm(gout, MatLayout::row_major(m, n), bv.data(), MatLayout::transposed(k, n), d, 1.0);
            }
            if needs(nodes, *b) {
                let av = nodes[*a].value.clone();
                let d = slot(nodes, grads, *b);
                kernels::gemm(av.data(), MatLayout::transposed(m, k), gout, MatLayout::row_major(m, n), d, 1.0);
            }
        }
        Op::Linear { x, w, b, rows, inp, out } => {
            let (rows, inp, out) = (*rows, *inp, *out);
            if needs(nodes, *x) {
                let wv = nodes[*w].value.clone();
                let d = slot(nodes, grads, *x);
                kernels::gemm(gout, MatLayout::row_major(rows, out), wv.data(), MatLayout::row_major(out, inp), d, 1.0);
            }
            if needs(nodes, *w) {
                let xv = nodes[*x].value.clone();
                let d = slot(nodes, grads, *w);
                kernels::gemm(gout, MatLayout::transposed(rows, out), xv.data(), MatLayout::row_major(rows, inp), d, 1.0);
            }
            if let Some(b) = b {
                if needs(nodes, *b) {
                    let d = slot(nodes, grads, *b);
                    for row in gout.chunks(out) {
                        for (x, g) in d.iter_mut().zip(row) {
                            *x += g;
                        }
                    }
                }
            }
        }
        Op::Conv3d { x, k, b, geom } => {
            let xv = nodes[*x].value.clone();
            let kv = nodes[*k].value.clone();
            let mut dx = needs(nodes, *x).then(|| slot(nodes, grads, *x).to_vec());
            let mut dk = needs(nodes, *k).then(|| slot(nodes, grads, *k).to_vec());
            let mut db = b.filter(|&b| needs(nodes, b)).map(|b| slot(nodes, grads, b).to_vec());
            kernels::conv3d_backward(
                xv.data(),
                kv.data(),
                gout,
                *geom,
                dx.as_deref_mut(),
                dk.as_deref_mut(),
                db.as_deref_mut(),
            );
            if let Some(dx) = dx {
                grads[*x] = Some(dx);
            }
            if let Some(dk) = dk {
                grads[*k] = Some(dk);
            }
            if let (Some(db), Some(b)) = (db, b) {
                grads[*b] = Some(db);
            }
        }
        Op::LeakyRelu(x, alpha) => {
            let xv = nodes[*x].value.clone();
            for ((d, g), &xi) in slot(nodes, grads, *x).iter_mut().zip(gout).zip(xv.data()) {
                *d += if xi > 0.0 { *g } else { alpha * g };
            }
        }
        Op::Gelu(x) => {
            let xv = nodes[*x].value.clone();
            for ((d, g), &xi) in slot(nodes, grads, *x).iter_mut().zip(gout).zip(xv.data()) {
                *d += g * gelu_grad(xi);
            }
        }
        Op::LayerNorm { x, gain, bias, normed, rstd, axis } => {
            let shape = nodes[*x].value.shape();
            let n = shape[*axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let outer: usize = shape[..*axis].iter().product();
            let gv = nodes[*gain].value.clone();
            if needs(nodes, *gain) {
                let d = slot(nodes, grads, *gain);
                for (idx, (&g, &xh)) in gout.iter().zip(normed).enumerate() {
                    d[(idx / inner) % n] += g * xh;
                }
            }
            if needs(nodes, *bias) {
                let d = slot(nodes, grads, *bias);
                for (idx, &g) in gout.iter().enumerate() {
                    d[(idx / inner) % n] += g;
                }
            }
            if needs(nodes, *x) {
                let d = slot(nodes, grads, *x);
                let nf = n as f64;
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |i: usize| (o * n + i) * inner + j;
                        let mut sum_g = 0.0;
                        let mut sum_gx = 0.0;
                        for i in 0..n {
                            let gh = gout[at(i)] * gv.data()[i];
                            sum_g += gh;
                            sum_gx += gh * normed[at(i)];
                        }
                        let r = rstd[o * inner + j];
                        for i in 0..n {
                            let gh = gout[at(i)] * gv.data()[i];
                            d[at(i)] += r * (gh - sum_g / nf - normed[at(i)] * sum_gx / nf);
                        }
                    }
                }
            }
        }
        Op::Softmax(x, axis) => {
            let y = node.value.clone();
            let shape = y.shape();
            let n = shape[*axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let outer: usize = shape[..*axis].iter().product();
            let d = slot(nodes, grads, *x);
            for o in 0..outer {
                for j in 0..inner {
                    let at = |i: usize| (o * n + i) * inner + j;
                    let dot: f64 = (0..n).map(|i| gout[at(i)] * y.data()[at(i)]).sum();
                    for i in 0..n {
                        d[at(i)] += y.data()[at(i)] * (gout[at(i)] - dot);
                    }
                }
            }
        }
        Op::Dropout(x, mask) => {
            for ((d, g), m) in slot(nodes, grads, *x).iter_mut().zip(gout).zip(mask) {
                *d += g * m;
            }
        }
        Op::Attention { q, k, v, heads, probs } => attention_backward(nodes, grads, gout, *q, *k, *v, *heads, probs),
        Op::Expand(x) => {
            let d = slot(nodes, grads, *x);
            let n = d.len();
            for chunk in gout.chunks(n) {
                for (a, g) in d.iter_mut().zip(chunk) {
                    *a += g;
                }
            }
        }
        Op::Narrow { x, axis, start } => {
            let src = nodes[*x].value.shape();
            let len = node.value.shape()[*axis];
            let inner: usize = src[axis + 1..].iter().product();
            let outer: usize = src[..*axis].iter().product();
            let n = src[*axis];
            let d = slot(nodes, grads, *x);
            for o in 0..outer {
                let dst = &mut d[(o * n + start) * inner..(o * n + start + len) * inner];
                let g = &gout[o * len * inner..(o + 1) * len * inner];
                for (a, b) in dst.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
        Op::Resample { table, rows, cols } => {
            let ts = nodes[*table].value.shape();
            let (c_src, e) = (ts[1], ts[2]);
            let c_dst = cols.len();
            let d = slot(nodes, grads, *table);
            for (ti, &(r0, r1, rf)) in rows.iter().enumerate() {
                for (pi, &(c0, c1, cf)) in cols.iter().enumerate() {
                    let g = &gout[(ti * c_dst + pi) * e..(ti * c_dst + pi + 1) * e];
                    for &(r, wr) in &[(r0, 1.0 - rf), (r1, rf)] {
                        for &(c, wc) in &[(c0, 1.0 - cf), (c1, cf)] {
                            let w = wr * wc;
                            if w == 0.0 {
                                continue;
                            }
                            let dst = &mut d[(r * c_src + c) * e..(r * c_src + c + 1) * e];
                            for (a, b) in dst.iter_mut().zip(g) {
                                *a += w * b;
                            }
                        }
                    }
                }
            }
        }
        Op::Mse { pred, target, weight, denom } => {
            let pv = nodes[*pred].value.clone();
            let s = 2.0 * gout[0] / denom;
            let d = slot(nodes, grads, *pred);
            match weight {
                None => {
                    for ((a, p), t) in d.iter_mut().zip(pv.data()).zip(target.data()) {
                        *a += s * (p - t);
                    }
                }
                Some(w) => {
                    for (((a, p), t), w) in d.iter_mut().zip(pv.data()).zip(target.data()).zip(w.data()) {
                        *a += s * w * (p - t);
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    gout: &[f64],
    q: usize,
    k: usize,
    v: usize,
    heads: usize,
    probs: &[f64],
) {
    let qv = nodes[q].value.clone();
    let kv = nodes[k].value.clone();
    let vv = nodes[v].value.clone();
    let (s, lq, e) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
    let lk = kv.shape()[1];
    let dh = e / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = needs(nodes, q).then(|| vec![0.0; qv.len()]);
    let mut dk = needs(nodes, k).then(|| vec![0.0; kv.len()]);
    let mut dv = needs(nodes, v).then(|| vec![0.0; vv.len()]);
    let mut dp = vec![0.0; lk];
    for si in 0..s {
        for h in 0..heads {
            let off = h * dh;
            for i in 0..lq {
                let p = &probs[((si * heads + h) * lq + i) * lk..((si * heads + h) * lq + i + 1) * lk];
                let go = &gout[(si * lq + i) * e + off..(si * lq + i) * e + off + dh];
                for j in 0..lk {
                    let vrow = &vv.data()[(si * lk + j) * e + off..(si * lk + j) * e + off + dh];
                    dp[j] = go.iter().zip(vrow).map(|(a, b)| a * b).sum();
                    if let Some(dv) = dv.as_mut() {
                        let dst = &mut dv[(si * lk + j) * e + off..(si * lk + j) * e + off + dh];
                        for (a, b) in dst.iter_mut().zip(go) {
                            *a += p[j] * b;
                        }
                    }
                }
                let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                for j in 0..lk {
                    let ds = p[j] * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    if let Some(dq) = dq.as_mut() {
                        let krow = &kv.data()[(si * lk + j) * e + off..(si * lk + j) * e + off + dh];
                        let dst = &mut dq[(si * lq + i) * e + off..(si * lq + i) * e + off + dh];
                        for (a, b) in dst.iter_mut().zip(krow) {
                            *a += ds * b;
                        }
                    }
                    if let Some(dk) = dk.as_mut() {
                        let qrow = &qv.data()[(si * lq + i) * e + off..(si * lq + i) * e + off + dh];
                        let dst = &mut dk[(si * lk + j) * e + off..(si * lk + j) * e + off + dh];
                        for (a, b) in dst.iter_mut().zip(qrow) {
                            *a += ds * b;
                        }
                    }
                }
            }
        }
    }
    for (id, g) in [(q, dq), (k, dk), (v, dv)] {
        if let Some(g) = g {
            for (a, b) in slot(nodes, grads, id).iter_mut().zip(&g) {
                *a += b;
            }
        }
    }
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2)) + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<DenseArray> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    fn rg(&self, others: &[Var<'_>]) -> bool {
        let nodes = self.graph.nodes.borrow();
        nodes[self.id].requires_grad || others.iter().any(|o| nodes[o.id].requires_grad)
    }

    fn same_graph(&self, other: &Var<'_>) {
        assert!(std::ptr::eq(self.graph, other.graph), "vars from different graphs");
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let v = self.value().reshape(shape)?;
        Ok(self.graph.push(v, Op::Reshape(self.id), self.rg(&[])))
    }

    pub fn permute(self, order: &[usize]) -> Result<Var<'g>> {
        check_permutation(order, self.shape().len())?;
        let v = self.value().permute(order)?;
        Ok(self.graph.push(v, Op::Permute(self.id, order.to_vec()), self.rg(&[])))
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&other);
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::shape(format!("add {:?} + {:?}", a.shape(), b.shape())));
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let v = DenseArray::new(a.shape().to_vec(), data)?;
        Ok(self.graph.push(v, Op::Add(self.id, other.id), self.rg(&[other])))
    }

    /// `self + other`, broadcasting `other` over the leading axes of `self`.
    pub fn add_broadcast(self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&other);
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(format!("cannot broadcast {sb:?} onto {sa:?}")));
        }
        let n = b.len().max(1);
        let mut data = a.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (x, y) in chunk.iter_mut().zip(b.data()) {
                *x += y;
            }
        }
        let v = DenseArray::new(sa.to_vec(), data)?;
        Ok(self.graph.push(v, Op::AddSuffix(self.id, other.id), self.rg(&[other])))
    }

    pub fn scale(self, s: f64) -> Var<'g> {
        let v = self.value().scale(s);
        self.graph.push(v, Op::Scale(self.id, s), self.rg(&[]))
    }

    pub fn sum(self) -> Var<'g> {
        let v = DenseArray::scalar(self.value().sum());
        self.graph.push(v, Op::Sum(self.id), self.rg(&[]))
    }

    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&other);
        let (a, b) = (self.value(), other.value());
        if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::shape(format!("matmul {:?} x {:?}", a.shape(), b.shape())));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(a.data(), MatLayout::row_major(m, k), b.data(), MatLayout::row_major(k, n), &mut out, 0.0);
        let v = DenseArray::new(vec![m, n], out)?;
        Ok(self.graph.push(v, Op::MatMul(self.id, other.id), self.rg(&[other])))
    }

    /// `x Wᵀ + b` applied over the last axis; `w` is `[out, in]`.
    pub fn linear(self, w: Var<'g>, b: Option<Var<'g>>) -> Result<Var<'g>> {
        self.same_graph(&w);
        let (x, wv) = (self.value(), w.value());
        if wv.ndim() != 2 || x.ndim() == 0 || *x.shape().last().unwrap() != wv.shape()[1] {
            return Err(Error::shape(format!("linear input {:?} with weight {:?}", x.shape(), wv.shape())));
        }
        let (out, inp) = (wv.shape()[0], wv.shape()[1]);
        let rows = x.len() / inp.max(1);
        let mut y = vec![0.0; rows * out];
        if let Some(b) = b {
            let bv = b.value();
            if bv.shape() != [out] {
                return Err(Error::shape(format!("linear bias {:?}, expected [{out}]", bv.shape())));
            }
            for row in y.chunks_mut(out) {
                row.copy_from_slice(bv.data());
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        kernels::gemm(x.data(), MatLayout::row_major(rows, inp), wv.data(), MatLayout::transposed(out, inp), &mut y, beta);
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = out;
        let v = DenseArray::new(shape, y)?;
        let rg = self.rg(&[w]) || b.is_some_and(|b| b.requires_grad());
        Ok(self.graph.push(v, Op::Linear { x: self.id, w: w.id, b: b.map(|b| b.id), rows, inp, out }, rg))
    }

    /// Stride-1 cross-correlation of `[B, Cin, D, H, W]` with `[Cout, Cin, kd, kh, kw]`.
    pub fn conv3d(self, kernel: Var<'g>, bias: Option<Var<'g>>, padding: usize) -> Result<Var<'g>> {
        let (x, k) = (self.value(), kernel.value());
        if x.ndim() != 5 || k.ndim() != 5 {
            return Err(Error::shape(format!("conv3d input {:?} kernel {:?}", x.shape(), k.shape())));
        }
        let (xs, ks) = (x.shape(), k.shape());
        if xs[1] != ks[1] {
            return Err(Error::shape(format!("conv3d channel mismatch: input {} kernel {}", xs[1], ks[1])));
        }
        let geom = ConvGeom {
            batch: xs[0],
            cin: xs[1],
            cout: ks[0],
            d: xs[2],
            h: xs[3],
            w: xs[4],
            kd: ks[2],
            kh: ks[3],
            kw: ks[4],
            pad: padding,
        };
        if geom.kd > geom.d + 2 * padding || geom.kh > geom.h + 2 * padding || geom.kw > geom.w + 2 * padding {
            return Err(Error::shape(format!("kernel {ks:?} larger than padded input {xs:?}")));
        }
        let bv = bias.map(|b| b.value());
        if let Some(bv) = &bv {
            if bv.shape() != [geom.cout] {
                return Err(Error::shape(format!("conv3d bias {:?}", bv.shape())));
            }
        }
        let out = kernels::conv3d_forward(x.data(), k.data(), bv.as_ref().map(|b| b.data()), geom);
        let (od, oh, ow) = geom.out_dims();
        let v = DenseArray::new(vec![geom.batch, geom.cout, od, oh, ow], out)?;
        let rg = self.rg(&[kernel]) || bias.is_some_and(|b| b.requires_grad());
        Ok(self.graph.push(v, Op::Conv3d { x: self.id, k: kernel.id, b: bias.map(|b| b.id), geom }, rg))
    }

    pub fn activation(self, kind: Activation) -> Result<Var<'g>> {
        match kind {
            Activation::LeakyRelu(alpha) => self.leaky_relu(alpha),
            Activation::Gelu => Ok(self.gelu()),
        }
    }

    pub fn leaky_relu(self, alpha: f64) -> Result<Var<'g>> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::invalid(format!("leaky_relu slope {alpha} outside (0,1)")));
        }
        let v = self.value().map(|x| if x > 0.0 { x } else { alpha * x });
        Ok(self.graph.push(v, Op::LeakyRelu(self.id, alpha), self.rg(&[])))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(self) -> Var<'g> {
        let v = self.value().map(gelu);
        self.graph.push(v, Op::Gelu(self.id), self.rg(&[]))
    }

    /// Normalizes along `axis`, then applies per-position `gain` and `bias`.
    /// `eps` sits inside the square root.
    pub fn layer_norm(self, axis: usize, gain: Var<'g>, bias: Var<'g>, eps: f64) -> Result<Var<'g>> {
        let x = self.value();
        let shape = x.shape();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::shape(format!("layer_norm axis {axis} on {shape:?}")));
        }
        let n = shape[axis];
        if gain.shape() != [n] || bias.shape() != [n] {
            return Err(Error::shape(format!("layer_norm affine shapes must be [{n}]")));
        }
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let (gv, bv) = (gain.value(), bias.value());
        let mut normed = vec![0.0; x.len()];
        let mut rstd = vec![0.0; outer * inner];
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * n + i) * inner + j;
                let mean = (0..n).map(|i| x.data()[at(i)]).sum::<f64>() / n as f64;
                let var = (0..n).map(|i| (x.data()[at(i)] - mean).powi(2)).sum::<f64>() / n as f64;
                let r = 1.0 / (var + eps).sqrt();
                rstd[o * inner + j] = r;
                for i in 0..n {
                    let xh = (x.data()[at(i)] - mean) * r;
                    normed[at(i)] = xh;
                    out[at(i)] = xh * gv.data()[i] + bv.data()[i];
                }
            }
        }
        let v = DenseArray::new(shape.to_vec(), out)?;
        let rg = self.rg(&[gain, bias]);
        Ok(self.graph.push(v, Op::LayerNorm { x: self.id, gain: gain.id, bias: bias.id, normed, rstd, axis }, rg))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'g>> {
        let x = self.value();
        let shape = x.shape();
        if axis >= shape.len() {
            return Err(Error::shape(format!("softmax axis {axis} on {shape:?}")));
        }
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * n + i) * inner + j;
                let m = (0..n).map(|i| x.data()[at(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for i in 0..n {
                    let e = (x.data()[at(i)] - m).exp();
                    out[at(i)] = e;
                    z += e;
                }
                for i in 0..n {
                    out[at(i)] /= z;
                }
            }
        }
        let v = DenseArray::new(shape.to_vec(), out)?;
        Ok(self.graph.push(v, Op::Softmax(self.id, axis), self.rg(&[])))
    }

    /// Inverted dropout: in training, zeroes each entry with probability `p`
    /// and scales survivors by `1/(1-p)`. Identity when `p == 0` or not training.
    pub fn dropout<R: Rng + ?Sized>(self, p: f64, rng: &mut R, training: bool) -> Result<Var<'g>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout probability {p} outside [0,1)")));
        }
        if p == 0.0 || !training {
            return Ok(self);
        }
        let x = self.value();
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..x.len()).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
        let data = x.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let v = DenseArray::new(x.shape().to_vec(), data)?;
        Ok(self.graph.push(v, Op::Dropout(self.id, mask), self.rg(&[])))
    }

    /// Repeats `self` `count` times along a new leading axis.
    pub fn expand(self, count: usize) -> Result<Var<'g>> {
        let x = self.value();
        let mut shape = vec![count];
        shape.extend_from_slice(x.shape());
        let mut data = Vec::with_capacity(count * x.len());
        for _ in 0..count {
            data.extend_from_slice(x.data());
        }
        let v = DenseArray::new(shape, data)?;
        Ok(self.graph.push(v, Op::Expand(self.id), self.rg(&[])))
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'g>> {
        let v = self.value().narrow(axis, start, len)?;
        Ok(self.graph.push(v, Op::Narrow { x: self.id, axis, start }, self.rg(&[])))
    }

    /// Mean squared error against a constant target.
    pub fn mse_loss(self, target: &DenseArray) -> Result<Var<'g>> {
        self.mse_impl(Rc::new(target.clone()), None)
    }

    /// Weighted squared error `Σ w (p-t)² / Σ w`.
    pub fn masked_mse_loss(self, target: &DenseArray, weight: &DenseArray) -> Result<Var<'g>> {
        if weight.shape() != target.shape() {
            return Err(Error::shape(format!("mask {:?} vs target {:?}", weight.shape(), target.shape())));
        }
        self.mse_impl(Rc::new(target.clone()), Some(Rc::new(weight.clone())))
    }

    fn mse_impl(self, target: Rc<DenseArray>, weight: Option<Rc<DenseArray>>) -> Result<Var<'g>> {
        let p = self.value();
        if p.shape() != target.shape() {
            return Err(Error::shape(format!("mse pred {:?} vs target {:?}", p.shape(), target.shape())));
        }
        let (num, denom) = match &weight {
            None => (
                p.data().iter().zip(target.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>(),
                p.len() as f64,
            ),
            Some(w) => (
                p.data()
                    .iter()
                    .zip(target.data())
                    .zip(w.data())
                    .map(|((a, b), w)| w * (a - b).powi(2))
                    .sum::<f64>(),
                w.sum(),
            ),
        };
        if denom <= 0.0 {
            return Err(Error::Empty("mse over zero entries".into()));
        }
        let v = DenseArray::scalar(num / denom);
        Ok(self.graph.push(v, Op::Mse { pred: self.id, target, weight, denom }, self.rg(&[])))
    }
}

/// Multi-head scaled dot-product attention over `[S, L, E]` sequences.
///
/// Heads split the last axis into `heads` contiguous blocks of `E/heads`;
/// logits are scaled by `1/sqrt(E/heads)`. Adds `S·Lq·Lk` to the graph's
/// logit counter.
pub fn attention<'g>(q: Var<'g>, k: Var<'g>, v: Var<'g>, heads: usize) -> Result<Var<'g>> {
    let (qv, kv, vv) = (q.value(), k.value(), v.value());
    let (qs, ks, vs) = (qv.shape(), kv.shape(), vv.shape());
    if qs.len() != 3 || ks.len() != 3 || vs.len() != 3 || ks != vs || qs[0] != ks[0] || qs[2] != ks[2] {
        return Err(Error::shape(format!("attention q {qs:?} k {ks:?} v {vs:?}")));
    }
    let (s, lq, e) = (qs[0], qs[1], qs[2]);
    let lk = ks[1];
    if heads == 0 || e % heads != 0 {
        return Err(Error::shape(format!("{heads} heads do not divide width {e}")));
    }
    let dh = e / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = vec![0.0; s * heads * lq * lk];
    let mut out = vec![0.0; s * lq * e];
    for si in 0..s {
        for h in 0..heads {
            let off = h * dh;
            for i in 0..lq {
                let qrow = &qv.data()[(si * lq + i) * e + off..(si * lq + i) * e + off + dh];
                let p = &mut probs[((si * heads + h) * lq + i) * lk..((si * heads + h) * lq + i + 1) * lk];
                let mut m = f64::NEG_INFINITY;
                for (j, pj) in p.iter_mut().enumerate() {
                    let krow = &kv.data()[(si * lk + j) * e + off..(si * lk + j) * e + off + dh];
                    *pj = scale * qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>();
                    m = m.max(*pj);
                }
                let mut z = 0.0;
                for pj in p.iter_mut() {
                    *pj = (*pj - m).exp();
                    z += *pj;
                }
                let dst = &mut out[(si * lq + i) * e + off..(si * lq + i) * e + off + dh];
                for (j, pj) in p.iter_mut().enumerate() {
                    *pj /= z;
                    let vrow = &vv.data()[(si * lk + j) * e + off..(si * lk + j) * e + off + dh];
                    for (a, b) in dst.iter_mut().zip(vrow) {
                        *a += *pj * b;
                    }
                }
            }
        }
    }
    let g = q.graph;
    g.logits.set(g.logits.get() + (s * lq * lk) as u64);
    let value = DenseArray::new(vec![s, lq, e], out)?;
    let rg = q.rg(&[k, v]);
    Ok(g.push(value, Op::Attention { q: q.id, k: k.id, v: v.id, heads, probs }, rg))
}

/// Separable linear resampling of a `[R, C, E]` table to `[rows, cols, E]`
/// with endpoint-aligned coordinates. Matching sizes return the table unchanged.
pub fn bilinear_resample(table: &DenseArray, rows: usize, cols: usize) -> Result<DenseArray> {
    let (r_src, c_src, e) = resample_dims(table.shape(), rows, cols)?;
    if rows == r_src && cols == c_src {
        return Ok(table.clone());
    }
    let rw = kernels::linear_weights(r_src, rows);
    let cw = kernels::linear_weights(c_src, cols);
    Ok(resample_forward(table, &rw, &cw, c_src, e))
}

fn resample_dims(shape: &[usize], rows: usize, cols: usize) -> Result<(usize, usize, usize)> {
    if shape.len() != 3 || shape[0] == 0 || shape[1] == 0 {
        return Err(Error::shape(format!("resample table must be [R>0, C>0, E], got {shape:?}")));
    }
    if rows == 0 || cols == 0 {
        return Err(Error::invalid(format!("resample target {rows}x{cols} is empty")));
    }
    Ok((shape[0], shape[1], shape[2]))
}

fn resample_forward(
    table: &DenseArray,
    rw: &[(usize, usize, f64)],
    cw: &[(usize, usize, f64)],
    c_src: usize,
    e: usize,
) -> DenseArray {
    let t = table.data();
    let mut out = vec![0.0; rw.len() * cw.len() * e];
    for (ti, &(r0, r1, rf)) in rw.iter().enumerate() {
        for (pi, &(c0, c1, cf)) in cw.iter().enumerate() {
            let dst = &mut out[(ti * cw.len() + pi) * e..(ti * cw.len() + pi + 1) * e];
            for &(r, wr) in &[(r0, 1.0 - rf), (r1, rf)] {
                for &(c, wc) in &[(c0, 1.0 - cf), (c1, cf)] {
                    let w = wr * wc;
                    if w == 0.0 {
                        continue;
                    }
                    let src = &t[(r * c_src + c) * e..(r * c_src + c + 1) * e];
                    for (a, b) in dst.iter_mut().zip(src) {
                        *a += w * b;
                    }
                }
            }
        }
    }
    DenseArray::new(vec![rw.len(), cw.len(), e], out).expect("resample shape")
}

/// Differentiable [`bilinear_resample`].
pub fn resample<'g>(table: Var<'g>, rows: usize, cols: usize) -> Result<Var<'g>> {
    let tv = table.value();
    let (r_src, c_src, e) = resample_dims(tv.shape(), rows, cols)?;
    let rw = kernels::linear_weights(r_src, rows);
    let cw = kernels::linear_weights(c_src, cols);
    let v = if rows == r_src && cols == c_src { (*tv).clone() } else { resample_forward(&tv, &rw, &cw, c_src, e) };
    let g = table.graph;
    Ok(g.push(v, Op::Resample { table: table.id, rows: rw, cols: cw }, table.rg(&[])))
}
