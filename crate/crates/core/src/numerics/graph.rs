//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles.
//! Calling [`Graph::backward`] on a scalar output walks the tape in reverse
//! and returns the accumulated gradients. Parameters are borrowed from a
//! [`ParamSet`] and enter the tape once per graph, on first use.

use std::cell::{Ref, RefCell};
use std::sync::{Arc, OnceLock};

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::params::{ParamId, ParamSet};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Marker in gather indices for a zero row (used for padding).
pub const ZERO_ROW: usize = usize::MAX;

type BackwardFn = Box<dyn Fn(&[f64], &[&Tensor], &Tensor, &mut [Option<Vec<f64>>])>;

enum NodeValue {
    Owned(Tensor),
    Param(ParamId),
}

struct Node {
    op: &'static str,
    value: NodeValue,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamSet,
    nodes: RefCell<Vec<Node>>,
    param_nodes: RefCell<Vec<Option<usize>>>,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph<'g>,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

fn empty_params() -> &'static ParamSet {
    static EMPTY: OnceLock<ParamSet> = OnceLock::new();
    EMPTY.get_or_init(ParamSet::new)
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            params,
            nodes: RefCell::new(Vec::new()),
            param_nodes: RefCell::new(vec![None; params.len()]),
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.borrow().len()
    }

    fn push(
        &self,
        op: &'static str,
        value: Tensor,
        parents: Vec<usize>,
        backward: BackwardFn,
    ) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|&p| nodes[p].requires_grad);
        let id = nodes.len();
        nodes.push(Node {
            op,
            value: NodeValue::Owned(value),
            parents,
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        id
    }

    fn push_leaf(&self, op: &'static str, value: NodeValue, requires_grad: bool) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            op,
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        id
    }

    fn resolve<'a>(&'a self, nodes: &'a [Node], id: usize) -> &'a Tensor {
        match &nodes[id].value {
            NodeValue::Owned(t) => t,
            NodeValue::Param(p) => self.params.value(*p),
        }
    }

    /// Checks every recorded value for NaN/infinity; returns the first
    /// offender's name and flat index.
    pub fn first_non_finite(&self) -> Option<(String, usize)> {
        let nodes = self.nodes.borrow();
        for (id, node) in nodes.iter().enumerate() {
            let t = self.resolve(&nodes, id);
            if let Some(i) = t.data().iter().position(|v| !v.is_finite()) {
                let name = match node.value {
                    NodeValue::Param(p) => self.params.get(p).name.clone(),
                    NodeValue::Owned(_) => format!("node {id} ({})", node.op),
                };
                return Some((name, i));
            }
        }
        None
    }

    /// Reverse sweep from a single-element output.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_numel = self.resolve(&nodes, root.id).numel();
        if root_numel != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar objective, got {root_numel} elements"
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(vec![1.0]);
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(grad_out) = grads[id].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node
                .parents
                .iter()
                .map(|&p| self.resolve(&nodes, p))
                .collect();
            let mut sinks: Vec<Option<Vec<f64>>> = node
                .parents
                .iter()
                .zip(&inputs)
                .map(|(&p, t)| nodes[p].requires_grad.then(|| vec![0.0; t.numel()]))
                .collect();
            backward(&grad_out, &inputs, self.resolve(&nodes, id), &mut sinks);
            for (&p, sink) in node.parents.iter().zip(sinks) {
                let Some(g) = sink else { continue };
                match &mut grads[p] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        let shapes = nodes
            .iter()
            .enumerate()
            .map(|(id, _)| self.resolve(&nodes, id).shape().to_vec())
            .collect();
        Ok(Gradients {
            node_grads: grads,
            shapes,
            param_nodes: self.param_nodes.borrow().clone(),
        })
    }
}

impl<'g> Graph<'g> {
    pub fn constant(&'g self, value: Tensor) -> Var<'g> {
        let id = self.push_leaf("constant", NodeValue::Owned(value), false);
        Var { graph: self, id }
    }

    /// A differentiable input that is not a registered parameter.
    pub fn leaf(&'g self, value: Tensor) -> Var<'g> {
        let id = self.push_leaf("leaf", NodeValue::Owned(value), true);
        Var { graph: self, id }
    }

    pub fn param(&'g self, pid: ParamId) -> Var<'g> {
        if let Some(id) = self.param_nodes.borrow()[pid.0] {
            return Var { graph: self, id };
        }
        let requires_grad = self.params.get(pid).requires_grad;
        let id = self.push_leaf("param", NodeValue::Param(pid), requires_grad);
        self.param_nodes.borrow_mut()[pid.0] = Some(id);
        Var { graph: self, id }
    }
}

impl Default for Graph<'static> {
    fn default() -> Self {
        Graph::new(empty_params())
    }
}

/// Gradients produced by one reverse sweep.
pub struct Gradients {
    node_grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    param_nodes: Vec<Option<usize>>,
}

impl Gradients {
    /// Gradient of a leaf or parameter var; `None` when nothing flowed into it.
    pub fn wrt(&self, var: Var<'_>) -> Option<Tensor> {
        self.node_grads[var.id]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[var.id].clone(), g.clone()).expect("shape"))
    }

    pub fn param(&self, id: ParamId) -> Option<Tensor> {
        let node = self.param_nodes.get(id.0).copied().flatten()?;
        self.node_grads[node]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[node].clone(), g.clone()).expect("shape"))
    }

    pub fn into_param_grads(mut self) -> ParamGrads {
        let grads = self
            .param_nodes
            .iter()
            .map(|slot| {
                slot.and_then(|node| {
                    self.node_grads[node]
                        .take()
                        .map(|g| Tensor::new(self.shapes[node].clone(), g).expect("shape"))
                })
            })
            .collect();
        ParamGrads { grads }
    }
}

/// Per-parameter gradients aligned with a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct ParamGrads {
    grads: Vec<Option<Tensor>>,
}

impl ParamGrads {
    pub fn empty(len: usize) -> Self {
        Self {
            grads: vec![None; len],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Elementwise sum; missing entries count as zero.
    pub fn accumulate(&mut self, other: ParamGrads) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (slot, g) in self.grads.iter_mut().zip(other.grads) {
            let Some(g) = g else { continue };
            match slot {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, b)| *a += b),
                None => *slot = Some(g),
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }
}

/// Borrowed view of a recorded value.
pub enum ValueRef<'g> {
    Node(Ref<'g, Tensor>),
    Param(&'g Tensor),
}

impl std::ops::Deref for ValueRef<'_> {
    type Target = Tensor;

    fn deref(&self) -> &Tensor {
        match self {
            ValueRef::Node(r) => r,
            ValueRef::Param(t) => t,
        }
    }
}

fn sink(sinks: &mut [Option<Vec<f64>>], i: usize) -> Option<&mut Vec<f64>> {
    sinks[i].as_mut()
}

fn shape_mismatch(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::dim(format!("{op}: shapes {a:?} and {b:?} are incompatible"))
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph<'g> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> ValueRef<'g> {
        let graph = self.graph;
        let nodes = graph.nodes.borrow();
        if let NodeValue::Param(pid) = nodes[self.id].value {
            return ValueRef::Param(graph.params.value(pid));
        }
        let id = self.id;
        ValueRef::Node(Ref::map(nodes, |n| match &n[id].value {
            NodeValue::Owned(t) => t,
            NodeValue::Param(_) => unreachable!("checked above"),
        }))
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.value().numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    fn wrap(&self, id: usize) -> Var<'g> {
        Var {
            graph: self.graph,
            id,
        }
    }

    /// Copy of this value with no gradient path.
    pub fn detach(&self) -> Var<'g> {
        self.graph.constant(self.to_tensor())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g>> {
        let value = self.to_tensor().reshape(shape)?;
        let id = self.graph.push(
            "reshape",
            value,
            vec![self.id],
            Box::new(|g, _, _, s| {
                if let Some(dx) = sink(s, 0) {
                    dx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }),
        );
        Ok(self.wrap(id))
    }

    fn zip_same(
        &self,
        other: &Var<'g>,
        op: &'static str,
        f: fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let a = self.value();
        let b = other.value();
        if a.shape() != b.shape() {
            return Err(shape_mismatch(op, a.shape(), b.shape()));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape().to_vec(), data)
    }

    pub fn add(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let value = self.zip_same(other, "add", |a, b| a + b)?;
        let id = self.graph.push(
            "add",
            value,
            vec![self.id, other.id],
            Box::new(|g, _, _, s| {
                for i in 0..2 {
                    if let Some(d) = sink(s, i) {
                        d.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                    }
                }
            }),
        );
        Ok(self.wrap(id))
    }

    pub fn sub(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let value = self.zip_same(other, "sub", |a, b| a - b)?;
        let id = self.graph.push(
            "sub",
            value,
            vec![self.id, other.id],
            Box::new(|g, _, _, s| {
                if let Some(d) = sink(s, 0) {
                    d.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                if let Some(d) = sink(s, 1) {
                    d.iter_mut().zip(g).for_each(|(a, b)| *a -= b);
                }
            }),
        );
        Ok(self.wrap(id))
    }

    pub fn mul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let value = self.zip_same(other, "mul", |a, b| a * b)?;
        let id = self.graph.push(
            "mul",
            value,
            vec![self.id, other.id],
            Box::new(|g, x, _, s| {
                let (a, b) = (x[0].data(), x[1].data());
                if let Some(d) = sink(s, 0) {
                    for i in 0..g.len() {
                        d[i] += g[i] * b[i];
                    }
                }
                if let Some(d) = sink(s, 1) {
                    for i in 0..g.len() {
                        d[i] += g[i] * a[i];
                    }
                }
            }),
        );
        Ok(self.wrap(id))
    }

    /// `self + b` where `b`'s shape is a suffix of `self`'s shape.
    pub fn add_broadcast(&self, b: &Var<'g>) -> Result<Var<'g>> {
        let value = {
            let x = self.value();
            let bv = b.value();
            let (xs, bs) = (x.shape(), bv.shape());
            if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != *bs {
                return Err(shape_mismatch("add_broadcast", xs, bs));
            }
            let n = bv.numel();
            let data = x
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| v + bv.data()[i % n])
                .collect();
            Tensor::new(xs.to_vec(), data)?
        };
        let id = self.graph.push(
            "add_broadcast",
            value,
            vec![self.id, b.id],
            Box::new(|g, x, _, s| {
                if let Some(d) = sink(s, 0) {
                    d.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                let n = x[1].numel();
                if let Some(d) = sink(s, 1) {
                    for (i, gv) in g.iter().enumerate() {
                        d[i % n] += gv;
                    }
                }
            }),
        );
        Ok(self.wrap(id))
    }

    pub fn scale(&self, factor: f64) -> Var<'g> {
        let value = self.value().map(|v| v * factor);
        let id = self.graph.push(
            "scale",
            value,
            vec![self.id],
            Box::new(move |g, _, _, s| {
                if let Some(d) = sink(s, 0) {
                    d.iter_mut().zip(g).for_each(|(a, b)| *a += factor * b);
                }
            }),
        );
        self.wrap(id)
    }

    /// Elementwise product with a fixed tensor of the same shape.
    pub fn mul_const(&self, c: &Tensor) -> Result<Var<'g>> {
        let cv = self.graph.constant(c.clone());
        self.mul(&cv)
    }

    /// Elementwise sum with a fixed tensor of the same shape.
    pub fn add_const(&self, c: &Tensor) -> Result<Var<'g>> {
        let cv = self.graph.constant(c.clone());
        self.add(&cv)
    }

    /// Absolute value; the subgradient at zero is 0.
    pub fn abs(&self) -> Var<'g> {
        let value = self.value().map(f64::abs);
        let id = self.graph.push(
            "abs",
            value,
            vec![self.id],
            Box::new(|g, x, _, s| {
                if let Some(d) = sink(s, 0) {
                    for (i, &v) in x[0].data().iter().enumerate() {
                        let sign = if v > 0.0 {
                            1.0
                        } else if v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        d[i] += sign * g[i];
                    }
                }
            }),
        );
        self.wrap(id)
    }

    pub fn relu(&self) -> Var<'g> {
        let value = self.value().map(|v| v.max(0.0));
        let id = self.graph.push(
            "relu",
            value,
            vec![self.id],
            Box::new(|g, x, _, s| {
                if let Some(d) = sink(s, 0) {
                    for (i, &v) in x[0].data().iter().enumerate() {
                        if v > 0.0 {
                            d[i] += g[i];
                        }
                    }
                }
            }),
        );
        self.wrap(id)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Var<'g> {
        let value = self.value().map(gelu);
        let id = self.graph.push(
            "gelu",
            value,
            vec![self.id],
            Box::new(|g, x, _, s| {
                if let Some(d) = sink(s, 0) {
                    for (i, &v) in x[0].data().iter().enumerate() {
                        d[i] += g[i] * gelu_grad(v);
                    }
                }
            }),
        );
        self.wrap(id)
    }

    pub fn sum_all(&self) -> Var<'g> {
        let value = Tensor::scalar(self.value().sum());
        let id = self.graph.push(
            "sum_all",
            value,
            vec![self.id],
            Box::new(|g, _, _, s| {
                if let Some(d) = sink(s, 0) {
                    d.iter_mut().for_each(|a| *a += g[0]);
                }
            }),
        );
        self.wrap(id)
    }

    /// Mean over every leading dimension: `[..., C] -> [C]`.
    pub fn mean_rows(&self) -> Result<Var<'g>> {
        let value = {
            let x = self.value();
            let c = x.last_dim();
            if c == 0 || x.numel() == 0 {
                return Err(Error::dim("mean_rows over an empty tensor"));
            }
            let rows = x.numel() / c;
            let mut out = vec![0.0; c];
            for r in 0..rows {
                for (o, v) in out.iter_mut().zip(&x.data()[r * c..(r + 1) * c]) {
                    *o += v;
                }
            }
            out.iter_mut().for_each(|o| *o /= rows as f64);
            Tensor::new(vec![c], out)?
        };
        let id = self.graph.push(
            "mean_rows",
            value,
            vec![self.id],
            Box::new(|g, x, _, s| {
                let c = g.len();
                let rows = x[0].numel() / c;
                let inv = 1.0 / rows as f64;
                if let Some(d) = sink(s, 0) {
                    for r in 0..rows {
                        for j in 0..c {
                            d[r * c + j] += g[j] * inv;
                        }
                    }
                }
            }),
        );
        Ok(self.wrap(id))
    }

    /// `y = x · W (+ b)` over the last dimension; `w` is `[in, out]`.
    pub fn linear(&self, w: &Var<'g>, b: Option<&Var<'g>>) -> Result<Var<'g>> {
        let value = {
            let x = self.value();
            let wv = w.value();
            let ws = wv.shape();
            if ws.len() != 2 || x.last_dim() != ws[0] || x.shape().is_empty() {
                return Err(shape_mismatch("linear", x.shape(), ws));
            }
            let (inp, out) = (ws[0], ws[1]);
            let rows = x.numel() / inp;
            let mut y = vec![0.0; rows * out];
            if let Some(b) = b {
                let bv = b.value();
                if bv.shape() != [out] {
                    return Err(shape_mismatch("linear bias", &[out], bv.shape()));
                }
                for r in 0..rows {
                    y[r * out..(r + 1) * out].copy_from_slice(bv.data());
                }
            }
            gemm_nn(x.data(), wv.data(), &mut y, rows, inp, out);
            let mut shape = x.shape().to_vec();
            *shape.last_mut().unwrap() = out;
            Tensor::new(shape, y)?
        };
        let mut parents = vec![self.id, w.id];
        if let Some(b) = b {
            parents.push(b.id);
        }
        let id = self.graph.push(
            "linear",
            value,
            parents,
            Box::new(|g, x, _, s| {
                let (inp, out) = (x[1].shape()[0], x[1].shape()[1]);
                let rows = x[0].numel() / inp;
                if let Some(dx) = sink(s, 0) {
                    gemm_nt(g, x[1].data(), dx, rows, out, inp);
                }
                if let Some(dw) = sink(s, 1) {
                    gemm_tn(x[0].data(), g, dw, inp, rows, out);
                }
                if s.len() > 2 {
                    if let Some(db) = sink(s, 2) {
                        for r in 0..rows {
                            for (d, gv) in db.iter_mut().zip(&g[r * out..(r + 1) * out]) {
                                *d += gv;
                            }
                        }
                    }
                }
            }),
        );
        Ok(self.wrap(id))
    }

    /// Batched product `[B,n,k] · [B,k,m]`, or `[B,n,k] · [B,m,k]ᵀ` when `transpose_rhs`.
    pub fn bmm(&self, rhs: &Var<'g>, transpose_rhs: bool) -> Result<Var<'g>> {
        let (value, dims) = {
            let a = self.value();
            let b = rhs.value();
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
                return Err(shape_mismatch("bmm", sa, sb));
            }
            let (batch, n, k) = (sa[0], sa[1], sa[2]);
            let (kb, m) = if transpose_rhs {
                (sb[2], sb[1])
            } else {
                (sb[1], sb[2])
            };
            if kb != k {
                return Err(shape_mismatch("bmm", sa, sb));
            }
            let mut c = vec![0.0; batch * n * m];
            for bi in 0..batch {
                let av = &a.data()[bi * n * k..(bi + 1) * n * k];
                let bv = &b.data()[bi * k * m..(bi + 1) * k * m];
                let cv = &mut c[bi * n * m..(bi + 1) * n * m];
                if transpose_rhs {
                    gemm_nt(av, bv, cv, n, k, m);
                } else {
                    gemm_nn(av, bv, cv, n, k, m);
                }
            }
            (Tensor::new(vec![batch, n, m], c)?, (batch, n, k, m))
        };
        let id = self.graph.push(
            "bmm",
            value,
            vec![self.id, rhs.id],
            Box::new(move |g, x, _, s| {
                let (batch, n, k, m) = dims;
                let (a, b) = (x[0].data(), x[1].data());
                if let Some(da) = sink(s, 0) {
                    for bi in 0..batch {
                        let gv = &g[bi * n * m..(bi + 1) * n * m];
                        let bv = &b[bi * k * m..(bi + 1) * k * m];
                        let dv = &mut da[bi * n * k..(bi + 1) * n * k];
                        if transpose_rhs {
                            // dA = dC · B  with B stored [m,k]
                            gemm_nn(gv, bv, dv, n, m, k);
                        } else {
                            gemm_nt(gv, bv, dv, n, m, k);
                        }
                    }
                }
                if let Some(db) = sink(s, 1) {
                    for bi in 0..batch {
                        let gv = &g[bi * n * m..(bi + 1) * n * m];
                        let av = &a[bi * n * k..(bi + 1) * n * k];
                        let dv = &mut db[bi * k * m..(bi + 1) * k * m];
                        if transpose_rhs {
                            // dB[m,k] = dCᵀ · A
                            gemm_tn(gv, av, dv, m, n, k);
                        } else {
                            gemm_tn(av, gv, dv, k, n, m);
                        }
                    }
                }
            }),
        );
        Ok(self.wrap(id))
    }

    /// Softmax over the last dimension, stabilized by max subtraction.
    pub fn softmax(&self) -> Result<Var<'g>> {
        let value = {
            let x = self.value();
            let n = x.last_dim();
            if n == 0 {
                return Err(Error::dim("softmax over an empty dimension"));
            }
            let mut y = x.data().to_vec();
            for row in y.chunks_mut(n) {
                softmax_in_place(row);
            }
            Tensor::new(x.shape().to_vec(), y)?
        };
        let id = self.graph.push(
            "softmax",
            value,
            vec![self.id],
            Box::new(|g, _, y, s| {
                let n = y.last_dim();
                if let Some(d) = sink(s, 0) {
                    for ((dr, gr), yr) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.data().chunks(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }),
        );
        Ok(self.wrap(id))
    }

    /// Normalizes the last dimension to zero mean and unit (biased) variance,
    /// then applies `gamma`/`beta`.
    pub fn layer_norm(&self, gamma: &Var<'g>, beta: &Var<'g>, eps: f64) -> Result<Var<'g>> {
        let (value, xhat, inv_std) = {
            let x = self.value();
            let c = x.last_dim();
            if c == 0 || x.shape().is_empty() {
                return Err(Error::dim("layer_norm needs a non-empty channel dimension"));
            }
            let (gv, bv) = (gamma.value(), beta.value());
            if gv.shape() != [c] || bv.shape() != [c] {
                return Err(shape_mismatch("layer_norm affine", &[c], gv.shape()));
            }
            let rows = x.numel() / c;
            let mut xhat = vec![0.0; x.numel()];
            let mut inv_std = vec![0.0; rows];
            let mut y = vec![0.0; x.numel()];
            for r in 0..rows {
                let row = &x.data()[r * c..(r + 1) * c];
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[r] = is;
                for j in 0..c {
                    let h = (row[j] - mean) * is;
                    xhat[r * c + j] = h;
                    y[r * c + j] = h * gv.data()[j] + bv.data()[j];
                }
            }
            (Tensor::new(x.shape().to_vec(), y)?, xhat, inv_std)
        };
        let id = self.graph.push(
            "layer_norm",
            value,
            vec![self.id, gamma.id, beta.id],
            Box::new(move |g, x, _, s| {
                let c = x[1].numel();
                let gamma = x[1].data();
                let rows = inv_std.len();
                if let Some(dx) = sink(s, 0) {
                    let mut dh = vec![0.0; c];
                    for r in 0..rows {
                        let gr = &g[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        for j in 0..c {
                            dh[j] = gr[j] * gamma[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / c as f64;
                        let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            dx[r * c + j] += inv_std[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
                if let Some(dg) = sink(s, 1) {
                    for r in 0..rows {
                        for j in 0..c {
                            dg[j] += g[r * c + j] * xhat[r * c + j];
                        }
                    }
                }
                if let Some(db) = sink(s, 2) {
                    for r in 0..rows {
                        for j in 0..c {
                            db[j] += g[r * c + j];
                        }
                    }
                }
            }),
        );
        Ok(self.wrap(id))
    }

    /// Row gather: views `self` as rows of `block` elements and emits row
    /// `index[i]` at output row `i` ([`ZERO_ROW`] emits zeros).
    pub fn gather_rows(
        &self,
        block: usize,
        index: Arc<[usize]>,
        out_shape: &[usize],
    ) -> Result<Var<'g>> {
        let value = {
            let x = self.value();
            let out = gather_rows(&x, block, &index, out_shape)?;
            out
        };
        let id = self.graph.push(
            "gather_rows",
            value,
            vec![self.id],
            Box::new(move |g, _, _, s| {
                if let Some(d) = sink(s, 0) {
                    for (o, &src) in index.iter().enumerate() {
                        if src == ZERO_ROW {
                            continue;
                        }
                        let dst = &mut d[src * block..(src + 1) * block];
                        for (a, b) in dst.iter_mut().zip(&g[o * block..(o + 1) * block]) {
                            *a += b;
                        }
                    }
                }
            }),
        );
        Ok(self.wrap(id))
    }

    /// Concatenates along the last dimension; leading dims must agree.
    pub fn concat_last(parts: &[Var<'g>]) -> Result<Var<'g>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let graph = first.graph;
        let (value, widths) = {
            let vals: Vec<ValueRef<'_>> = parts.iter().map(|p| p.value()).collect();
            let lead = &vals[0].shape()[..vals[0].shape().len() - 1];
            for v in &vals {
                if &v.shape()[..v.shape().len() - 1] != lead {
                    return Err(shape_mismatch("concat_last", vals[0].shape(), v.shape()));
                }
            }
            let widths: Vec<usize> = vals.iter().map(|v| v.last_dim()).collect();
            let total: usize = widths.iter().sum();
            let rows: usize = lead.iter().product();
            let mut out = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for (v, &w) in vals.iter().zip(&widths) {
                    out.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
                }
            }
            let mut shape = lead.to_vec();
            shape.push(total);
            (Tensor::new(shape, out)?, widths)
        };
        let id = graph.push(
            "concat_last",
            value,
            parts.iter().map(|p| p.id).collect(),
            Box::new(move |g, _, _, s| {
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut offset = 0;
                for (i, &w) in widths.iter().enumerate() {
                    if let Some(d) = sink(s, i) {
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            for (a, b) in d[r * w..(r + 1) * w].iter_mut().zip(src) {
                                *a += b;
                            }
                        }
                    }
                    offset += w;
                }
            }),
        );
        Ok(Var { graph, id })
    }

    /// 2×2 average pooling on a `[h, w, c]` grid with even `h`, `w`.
    pub fn avg_pool2(&self) -> Result<Var<'g>> {
        let (value, dims) = {
            let x = self.value();
            let s = x.shape();
            if s.len() != 3 || s[0] % 2 != 0 || s[1] % 2 != 0 {
                return Err(Error::dim(format!("avg_pool2 needs an even [h,w,c] grid, got {s:?}")));
            }
            let (h, w, c) = (s[0], s[1], s[2]);
            let mut out = vec![0.0; (h / 2) * (w / 2) * c];
            for y in 0..h {
                for xx in 0..w {
                    let o = ((y / 2) * (w / 2) + xx / 2) * c;
                    let i = (y * w + xx) * c;
                    for k in 0..c {
                        out[o + k] += 0.25 * x.data()[i + k];
                    }
                }
            }
            (Tensor::new(vec![h / 2, w / 2, c], out)?, (h, w, c))
        };
        let id = self.graph.push(
            "avg_pool2",
            value,
            vec![self.id],
            Box::new(move |g, _, _, s| {
                let (h, w, c) = dims;
                if let Some(d) = sink(s, 0) {
                    for y in 0..h {
                        for xx in 0..w {
                            let o = ((y / 2) * (w / 2) + xx / 2) * c;
                            let i = (y * w + xx) * c;
                            for k in 0..c {
                                d[i + k] += 0.25 * g[o + k];
                            }
                        }
                    }
                }
            }),
        );
        Ok(self.wrap(id))
    }
}

/// Non-differentiable row gather shared with the graph op.
pub fn gather_rows(x: &Tensor, block: usize, index: &[usize], out_shape: &[usize]) -> Result<Tensor> {
    if block == 0 || x.numel() % block != 0 {
        return Err(Error::dim(format!(
            "gather block {block} does not divide {} elements",
            x.numel()
        )));
    }
    let rows_in = x.numel() / block;
    let numel: usize = out_shape.iter().product();
    if numel != index.len() * block {
        return Err(Error::dim(format!(
            "gather of {} rows × {block} does not fill {out_shape:?}",
            index.len()
        )));
    }
    let mut out = vec![0.0; numel];
    for (o, &src) in index.iter().enumerate() {
        if src == ZERO_ROW {
            continue;
        }
        if src >= rows_in {
            return Err(Error::dim(format!("gather row {src} out of {rows_in}")));
        }
        out[o * block..(o + 1) * block].copy_from_slice(&x.data()[src * block..(src + 1) * block]);
    }
    Tensor::new(out_shape.to_vec(), out)
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
