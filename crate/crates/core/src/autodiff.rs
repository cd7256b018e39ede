//! Tape-based reverse-mode differentiation over row-major tensors of rank ≤ 2.
//!
//! A [`Tape`] records one forward pass; [`Var`] is a cheap handle into it.
//! `backward` walks the tape once in reverse creation order, returns the
//! gradients of every leaf created with `requires_grad`, and consumes the tape.
//! Broadcasting is limited to adding a row vector to every row of a batch.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

use crate::linalg::gemm::gemm_slices;
use crate::linalg::Matrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("graph already consumed by backward; run the forward pass again")]
    GraphConsumed,
    #[error("label {label} out of range for {classes} classes")]
    BadLabel { label: usize, classes: usize },
}

fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

/// Dense row-major values with a shape of rank 0, 1 or 2.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, AutodiffError> {
        if shape.len() > 2 || shape.iter().product::<usize>() != data.len() {
            return Err(mismatch("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(v: Vec<f64>) -> Self {
        Tensor {
            shape: vec![v.len()],
            data: v,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, AutodiffError> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// View as (rows, cols); vectors are a single row, scalars 1×1.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => unreachable!("rank checked on construction"),
        }
    }

    pub fn to_matrix(&self) -> Matrix {
        let (r, c) = self.dims2();
        Matrix::from_fn(r, c, |i, j| self.data[i * c + j])
    }
}

impl From<&Matrix> for Tensor {
    fn from(m: &Matrix) -> Self {
        Tensor {
            shape: vec![m.rows(), m.cols()],
            data: m.as_slice().to_vec(),
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}{:?}", self.shape, self.data)
    }
}

struct ChainSaved {
    x: usize,
    layers: Vec<(usize, Option<usize>)>,
    /// (out_i, in_i) per layer.
    dims: Vec<(usize, usize)>,
    partial: Partial,
    /// `h_i` = chain output at zero input after layers `< i`; `h_0 = 0`.
    bias_in: Vec<Vec<f64>>,
    /// Full product `W_L ⋯ W_1`, shape (out, in_0).
    product: Vec<f64>,
}

/// Partial products kept for the batch-free parameter gradients; `None`
/// stands for an identity that is never materialised. Whichever side is
/// cheaper to carry is stored, the other is rebuilt during the sweep.
enum Partial {
    /// `Q_i = W_{i-1} ⋯ W_1`, shape (in_i, in_0); `Q_0 = I`.
    Prefix(Vec<Option<Vec<f64>>>),
    /// `P_i = W_L ⋯ W_{i+1}`, shape (out, out_i); `P_L = I`.
    Suffix(Vec<Option<Vec<f64>>>),
}

/// `a · b` for row-major (m, k) · (k, n), or a copy of `b` when `a` is an identity.
fn mul_or_copy(a: Option<&[f64]>, b: &[f64], (m, k, n): (usize, usize, usize)) -> Vec<f64> {
    match a {
        None => b.to_vec(),
        Some(a) => {
            let mut c = vec![0.0; m * n];
            gemm_slices(1.0, a, (m, k), false, b, (k, n), false, 0.0, &mut c, (m, n));
            c
        }
    }
}

/// `aᵀ · b` for a stored (k, m) and b (k, n); `b` itself when `a` is an identity.
fn tmul_or_move(a: Option<&[f64]>, b: Vec<f64>, (m, k, n): (usize, usize, usize)) -> Vec<f64> {
    match a {
        None => b,
        Some(a) => {
            let mut c = vec![0.0; m * n];
            gemm_slices(1.0, a, (k, m), true, &b, (k, n), false, 0.0, &mut c, (m, n));
            c
        }
    }
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add { a: usize, b: usize, broadcast: bool },
    Relu(usize),
    Sin(usize),
    Cos(usize),
    Scale(usize, f64),
    Interleave(usize, usize),
    Sum(usize),
    Mse(usize, usize),
    SoftmaxXent { logits: usize, labels: Vec<usize>, probs: Vec<f64> },
    Slice { src: usize, offset: usize },
    Chain(Box<ChainSaved>),
    Linear { x: usize, w: usize, b: Option<usize> },
    SinCos(usize),
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Append-only record of one forward pass. Not `Sync`: one thread per tape.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

/// Gradients of the loss with respect to each `requires_grad` leaf.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_id: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.by_id.get(&v.id)
    }

    /// Gradient of `v`, or zeros of `shape` when the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var<'_>, shape: &[usize]) -> Tensor {
        self.by_id.get(&v.id).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, v: Var<'_>) -> Option<Tensor> {
        self.by_id.remove(&v.id)
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Forget everything recorded so far; the tape can record a new pass.
    pub fn reset(&self) {
        *self.inner.borrow_mut() = Inner::default();
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Result<Var<'_>, AutodiffError> {
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(AutodiffError::GraphConsumed);
        }
        inner.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Ok(Var {
            tape: self,
            id: inner.nodes.len() - 1,
        })
    }

    pub fn param(&self, value: Tensor) -> Result<Var<'_>, AutodiffError> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Result<Var<'_>, AutodiffError> {
        self.leaf(value, false)
    }

    fn push(&self, value: Tensor, inputs: &[usize], op: Op) -> Result<Var<'_>, AutodiffError> {
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(AutodiffError::GraphConsumed);
        }
        let requires_grad = inputs.iter().any(|&i| inner.nodes[i].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        inner.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var {
            tape: self,
            id: inner.nodes.len() - 1,
        })
    }

    fn check(&self, inner: &Inner) -> Result<(), AutodiffError> {
        if inner.consumed {
            Err(AutodiffError::GraphConsumed)
        } else {
            Ok(())
        }
    }

    /// `y = (((x W₁ᵀ + b₁) W₂ᵀ + b₂) ⋯ ) W_Lᵀ + b_L` for a stack of linear
    /// layers with no activation in between. Weights are `(out, in)`.
    ///
    /// The layers are multiplied together first, so the batch is touched once
    /// in the forward pass and twice in the backward pass regardless of depth.
    /// Gradients equal those of the unfused composition up to rounding.
    pub fn affine_chain(&self, x: Var<'_>, layers: &[(Var<'_>, Option<Var<'_>>)]) -> Result<Var<'_>, AutodiffError> {
        let inner = self.inner.borrow();
        self.check(&inner)?;
        let xv = &inner.nodes[x.id].value;
        let (n, in0) = xv.dims2();
        if xv.shape.len() != 2 {
            return Err(mismatch("affine_chain input", &xv.shape, &[n, in0]));
        }
        let mut dims = Vec::with_capacity(layers.len());
        let mut bias_in: Vec<Vec<f64>> = Vec::with_capacity(layers.len());
        let mut h = vec![0.0; in0];
        let mut width = in0;
        for (w, b) in layers {
            let wv = &inner.nodes[w.id].value;
            let (o, i) = wv.dims2();
            if wv.shape.len() != 2 || i != width {
                return Err(mismatch("affine_chain weight", &wv.shape, &[width]));
            }
            let mut h_next = vec![0.0; o];
            gemm_slices(1.0, &wv.data, (o, i), false, &h, (i, 1), false, 0.0, &mut h_next, (o, 1));
            if let Some(b) = b {
                let bv = &inner.nodes[b.id].value;
                if bv.data.len() != o {
                    return Err(mismatch("affine_chain bias", &bv.shape, &[o]));
                }
                for (hv, bv) in h_next.iter_mut().zip(&bv.data) {
                    *hv += bv;
                }
            }
            dims.push((o, i));
            bias_in.push(std::mem::replace(&mut h, h_next));
            width = o;
        }
        let out = width;
        let weight = |l: usize| inner.nodes[layers[l].0.id].value.data.as_slice();
        // multiply counts of the forward products plus the sweep that
        // rebuilds the other side (the dW products cost the same either way)
        let last = dims.len().saturating_sub(1);
        let prefix_cost: usize = (1..dims.len())
            .map(|l| {
                let (o, k) = dims[l];
                o * k * in0 + out * in0 * k + if l < last { out * o * k } else { 0 }
            })
            .sum();
        let suffix_cost: usize = (0..last).map(|l| 2 * out * dims[l].0 * dims[l].1).sum();
        let (partial, product) = if suffix_cost < prefix_cost {
            let mut ps = vec![None; dims.len()];
            let mut p: Option<Vec<f64>> = None;
            for l in (0..dims.len()).rev() {
                let (o, k) = dims[l];
                let next = mul_or_copy(p.as_deref(), weight(l), (out, o, k));
                ps[l] = p.replace(next);
            }
            (Partial::Suffix(ps), p)
        } else {
            let mut qs = Vec::with_capacity(dims.len());
            let mut q: Option<Vec<f64>> = None;
            for (l, &(o, k)) in dims.iter().enumerate() {
                let next = match &q {
                    None => weight(l).to_vec(),
                    Some(q) => mul_or_copy(Some(weight(l)), q, (o, k, in0)),
                };
                qs.push(q.replace(next));
            }
            (Partial::Prefix(qs), q)
        };
        let product = product.unwrap_or_else(|| Matrix::identity(in0).into_vec());
        let mut y = Vec::with_capacity(n * out);
        for _ in 0..n {
            y.extend_from_slice(&h);
        }
        gemm_slices(1.0, &xv.data, (n, in0), false, &product, (out, in0), true, 1.0, &mut y, (n, out));
        let mut inputs = vec![x.id];
        for (w, b) in layers {
            inputs.push(w.id);
            inputs.extend(b.map(|b| b.id));
        }
        let saved = ChainSaved {
            x: x.id,
            layers: layers.iter().map(|(w, b)| (w.id, b.map(|b| b.id))).collect(),
            dims,
            partial,
            bias_in,
            product,
        };
        drop(inner);
        self.push(Tensor::matrix(n, out, y)?, &inputs, Op::Chain(Box::new(saved)))
    }

    /// Reverse sweep from the scalar `loss`. Consumes the tape.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients, AutodiffError> {
        let mut inner = self.inner.borrow_mut();
        self.check(&inner)?;
        let root = &inner.nodes[loss.id];
        if !root.value.is_scalar() {
            return Err(AutodiffError::NotScalar(root.value.shape.clone()));
        }
        let nodes = std::mem::take(&mut inner.nodes);
        inner.consumed = true;
        drop(inner);

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        let mut out = Gradients::default();
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(g) = grads[id].take() else { continue };
            if !node.requires_grad {
                continue;
            }
            propagate(&nodes, id, g, &mut grads, &mut out);
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, contribution: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(&contribution) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

fn wants(nodes: &[Node], id: usize) -> bool {
    nodes[id].requires_grad
}

fn propagate(nodes: &[Node], id: usize, g: Vec<f64>, grads: &mut [Option<Vec<f64>>], out: &mut Gradients) {
    let node = &nodes[id];
    let val = |i: usize| &nodes[i].value;
    match &node.op {
        Op::Leaf => {
            out.by_id.insert(
                id,
                Tensor {
                    shape: node.value.shape.clone(),
                    data: g,
                },
            );
        }
        &Op::MatMul(a, b) => {
            let (m, k) = val(a).dims2();
            let n = val(b).dims2().1;
            if wants(nodes, a) {
                let mut da = vec![0.0; m * k];
                gemm_slices(1.0, &g, (m, n), false, &val(b).data, (k, n), true, 0.0, &mut da, (m, k));
                accumulate(grads, nodes, a, da);
            }
            if wants(nodes, b) {
                let mut db = vec![0.0; k * n];
                gemm_slices(1.0, &val(a).data, (m, k), true, &g, (m, n), false, 0.0, &mut db, (k, n));
                accumulate(grads, nodes, b, db);
            }
        }
        &Op::MatMulNt(a, b) => {
            let (m, k) = val(a).dims2();
            let n = val(b).dims2().0;
            if wants(nodes, a) {
                let mut da = vec![0.0; m * k];
                gemm_slices(1.0, &g, (m, n), false, &val(b).data, (n, k), false, 0.0, &mut da, (m, k));
                accumulate(grads, nodes, a, da);
            }
            if wants(nodes, b) {
                let mut db = vec![0.0; n * k];
                gemm_slices(1.0, &g, (m, n), true, &val(a).data, (m, k), false, 0.0, &mut db, (n, k));
                accumulate(grads, nodes, b, db);
            }
        }
        &Op::Add { a, b, broadcast } => {
            if wants(nodes, b) {
                let db = if broadcast {
                    let cols = val(b).len();
                    let mut s = vec![0.0; cols];
                    for row in g.chunks_exact(cols) {
                        for (acc, v) in s.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    s
                } else {
                    g.clone()
                };
                accumulate(grads, nodes, b, db);
            }
            accumulate(grads, nodes, a, g);
        }
        &Op::Relu(a) => {
            let d = g.iter().zip(&val(a).data).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect();
            accumulate(grads, nodes, a, d);
        }
        &Op::Sin(a) => {
            let d = g.iter().zip(&val(a).data).map(|(g, x)| g * x.cos()).collect();
            accumulate(grads, nodes, a, d);
        }
        &Op::Cos(a) => {
            let d = g.iter().zip(&val(a).data).map(|(g, x)| -g * x.sin()).collect();
            accumulate(grads, nodes, a, d);
        }
        &Op::Scale(a, c) => {
            let d = g.iter().map(|g| g * c).collect();
            accumulate(grads, nodes, a, d);
        }
        &Op::Interleave(a, b) => {
            let da = g.iter().step_by(2).copied().collect();
            let db = g.iter().skip(1).step_by(2).copied().collect();
            accumulate(grads, nodes, a, da);
            accumulate(grads, nodes, b, db);
        }
        &Op::Sum(a) => {
            accumulate(grads, nodes, a, vec![g[0]; val(a).len()]);
        }
        &Op::Mse(a, b) => {
            let n = val(a).len() as f64;
            let c = 2.0 * g[0] / n;
            let d: Vec<f64> = val(a).data.iter().zip(&val(b).data).map(|(x, y)| c * (x - y)).collect();
            if wants(nodes, b) {
                accumulate(grads, nodes, b, d.iter().map(|v| -v).collect());
            }
            accumulate(grads, nodes, a, d);
        }
        Op::SoftmaxXent { logits, labels, probs } => {
            let (n, classes) = val(*logits).dims2();
            let c = g[0] / n as f64;
            let mut d: Vec<f64> = probs.iter().map(|p| c * p).collect();
            for (i, &l) in labels.iter().enumerate() {
                d[i * classes + l] -= c;
            }
            accumulate(grads, nodes, *logits, d);
        }
        &Op::Slice { src, offset } => {
            // accumulate in place: a flat parameter vector is sliced many times
            if wants(nodes, src) {
                let slot = grads[src].get_or_insert_with(|| vec![0.0; val(src).len()]);
                for (a, b) in slot[offset..offset + g.len()].iter_mut().zip(&g) {
                    *a += b;
                }
            }
        }
        Op::Chain(s) => chain_backward(nodes, s, &g, grads),
        &Op::Linear { x, w, b } => {
            let (n, k) = val(x).dims2();
            let o = val(w).dims2().0;
            if wants(nodes, x) {
                let mut dx = vec![0.0; n * k];
                gemm_slices(1.0, &g, (n, o), false, &val(w).data, (o, k), false, 0.0, &mut dx, (n, k));
                accumulate(grads, nodes, x, dx);
            }
            if wants(nodes, w) {
                let mut dw = vec![0.0; o * k];
                gemm_slices(1.0, &g, (n, o), true, &val(x).data, (n, k), false, 0.0, &mut dw, (o, k));
                accumulate(grads, nodes, w, dw);
            }
            if let Some(b) = b.filter(|&b| wants(nodes, b)) {
                let mut db = vec![0.0; o];
                for row in g.chunks_exact(o) {
                    for (acc, v) in db.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                accumulate(grads, nodes, b, db);
            }
        }
        &Op::SinCos(a) => {
            // output pairs are (s·sin p, s·cos p): d/dp = g_sin·(s·cos p) − g_cos·(s·sin p)
            let out = &node.value.data;
            let d = g
                .chunks_exact(2)
                .zip(out.chunks_exact(2))
                .map(|(g, o)| g[0] * o[1] - g[1] * o[0])
                .collect();
            accumulate(grads, nodes, a, d);
        }
    }
}

fn chain_backward(nodes: &[Node], s: &ChainSaved, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let x = &nodes[s.x].value;
    let (n, in0) = x.dims2();
    let out = s.dims.last().map_or(in0, |d| d.0);
    if wants(nodes, s.x) {
        let mut dx = vec![0.0; n * in0];
        gemm_slices(1.0, g, (n, out), false, &s.product, (out, in0), false, 0.0, &mut dx, (n, in0));
        accumulate(grads, nodes, s.x, dx);
    }
    let any_param = s
        .layers
        .iter()
        .any(|(w, b)| wants(nodes, *w) || b.is_some_and(|b| wants(nodes, b)));
    if !any_param {
        return;
    }
    // dE = Gᵀ x and dc = column sums of G; everything below is batch-free.
    let mut de = vec![0.0; out * in0];
    gemm_slices(1.0, g, (n, out), true, &x.data, (n, in0), false, 0.0, &mut de, (out, in0));
    let mut dc = vec![0.0; out];
    for row in g.chunks_exact(out) {
        for (acc, v) in dc.iter_mut().zip(row) {
            *acc += v;
        }
    }
    let wants_w = |l: usize| wants(nodes, s.layers[l].0);
    // T_i = dE Q_iᵀ + dc h_iᵀ, shape (out, in_i)
    let t_with_bias = |mut t: Vec<f64>, l: usize| {
        let k = s.dims[l].1;
        gemm_slices(1.0, &dc, (out, 1), false, &s.bias_in[l], (1, k), false, 1.0, &mut t, (out, k));
        t
    };
    // dW_i = P_iᵀ T_i and db_i = P_iᵀ dc
    let emit = |l: usize, p: Option<&[f64]>, t: Option<Vec<f64>>, grads: &mut [Option<Vec<f64>>]| {
        let (o, k) = s.dims[l];
        let (w, b) = s.layers[l];
        if let Some(t) = t {
            accumulate(grads, nodes, w, tmul_or_move(p, t, (o, out, k)));
        }
        if let Some(b) = b.filter(|&b| wants(nodes, b)) {
            accumulate(grads, nodes, b, tmul_or_move(p, dc.clone(), (o, out, 1)));
        }
    };
    let weight = |l: usize| nodes[s.layers[l].0].value.data.as_slice();
    match &s.partial {
        Partial::Prefix(qs) => {
            // P_i built from the top down
            let mut p: Option<Vec<f64>> = None;
            for l in (0..s.layers.len()).rev() {
                let (o, k) = s.dims[l];
                let t = wants_w(l).then(|| {
                    let t = match &qs[l] {
                        None => de.clone(),
                        Some(q) => {
                            let mut t = vec![0.0; out * k];
                            gemm_slices(1.0, &de, (out, in0), false, q, (k, in0), true, 0.0, &mut t, (out, k));
                            t
                        }
                    };
                    t_with_bias(t, l)
                });
                emit(l, p.as_deref(), t, grads);
                if l > 0 {
                    p = Some(mul_or_copy(p.as_deref(), weight(l), (out, o, k)));
                }
            }
        }
        Partial::Suffix(ps) => {
            // R_i = dE Q_iᵀ built from the bottom up
            let mut r = de;
            for l in 0..s.layers.len() {
                let (o, k) = s.dims[l];
                let t = wants_w(l).then(|| t_with_bias(r.clone(), l));
                emit(l, ps[l].as_deref(), t, grads);
                if l + 1 < s.layers.len() {
                    let mut next = vec![0.0; out * o];
                    gemm_slices(1.0, &r, (out, k), false, weight(l), (o, k), true, 0.0, &mut next, (out, o));
                    r = next;
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    /// Borrow the recorded value. Fails once the tape has been consumed.
    pub fn value(&self) -> Result<Ref<'t, Tensor>, AutodiffError> {
        let inner = self.tape.inner.borrow();
        self.tape.check(&inner)?;
        Ok(Ref::map(inner, |i| &i.nodes[self.id].value))
    }

    pub fn item(&self) -> Result<f64, AutodiffError> {
        let v = self.value()?;
        if !v.is_scalar() {
            return Err(AutodiffError::NotScalar(v.shape.clone()));
        }
        Ok(v.data[0])
    }

    pub fn shape(&self) -> Result<Vec<usize>, AutodiffError> {
        Ok(self.value()?.shape.clone())
    }

    pub fn requires_grad(&self) -> bool {
        self.tape
            .inner
            .borrow()
            .nodes
            .get(self.id)
            .is_some_and(|n| n.requires_grad)
    }

    fn unary(&self, op: impl FnOnce(usize) -> Op, f: impl Fn(f64) -> f64) -> Result<Var<'t>, AutodiffError> {
        let inner = self.tape.inner.borrow();
        self.tape.check(&inner)?;
        let a = &inner.nodes[self.id].value;
        let value = Tensor {
            shape: a.shape.clone(),
            data: a.data.iter().map(|&v| f(v)).collect(),
        };
        drop(inner);
        self.tape.push(value, &[self.id], op(self.id))
    }

    fn binary<R>(&self, other: Var<'t>, f: impl FnOnce(&Tensor, &Tensor) -> Result<(Tensor, R), AutodiffError>) -> Result<(Tensor, R), AutodiffError> {
        let inner = self.tape.inner.borrow();
        self.tape.check(&inner)?;
        f(&inner.nodes[self.id].value, &inner.nodes[other.id].value)
    }

    /// `self · other` for 2-D operands.
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        let (value, ()) = self.binary(other, |a, b| {
            let ((m, k), (k2, n)) = (a.dims2(), b.dims2());
            if a.shape.len() != 2 || b.shape.len() != 2 || k != k2 {
                return Err(mismatch("matmul", &a.shape, &b.shape));
            }
            let mut c = vec![0.0; m * n];
            gemm_slices(1.0, &a.data, (m, k), false, &b.data, (k, n), false, 0.0, &mut c, (m, n));
            Ok((Tensor::matrix(m, n, c)?, ()))
        })?;
        self.tape.push(value, &[self.id, other.id], Op::MatMul(self.id, other.id))
    }

    /// `self · otherᵀ`; the natural product for batch × `(out, in)` weights.
    pub fn matmul_nt(&self, other: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        let (value, ()) = self.binary(other, |a, b| {
            let ((m, k), (n, k2)) = (a.dims2(), b.dims2());
            if a.shape.len() != 2 || b.shape.len() != 2 || k != k2 {
                return Err(mismatch("matmul_nt", &a.shape, &b.shape));
            }
            let mut c = vec![0.0; m * n];
            gemm_slices(1.0, &a.data, (m, k), false, &b.data, (n, k), true, 0.0, &mut c, (m, n));
            Ok((Tensor::matrix(m, n, c)?, ()))
        })?;
        self.tape.push(value, &[self.id, other.id], Op::MatMulNt(self.id, other.id))
    }

    /// Fully connected layer `self · wᵀ + b` with `w` stored as `(out, in)`.
    pub fn linear(&self, w: Var<'t>, b: Option<Var<'t>>) -> Result<Var<'t>, AutodiffError> {
        let inner = self.tape.inner.borrow();
        self.tape.check(&inner)?;
        let (xv, wv) = (&inner.nodes[self.id].value, &inner.nodes[w.id].value);
        let ((n, k), (o, k2)) = (xv.dims2(), wv.dims2());
        if xv.shape.len() != 2 || wv.shape.len() != 2 || k != k2 {
            return Err(mismatch("linear", &xv.shape, &wv.shape));
        }
        let mut y = match b {
            Some(b) => {
                let bv = &inner.nodes[b.id].value;
                if bv.len() != o {
                    return Err(mismatch("linear bias", &bv.shape, &[o]));
                }
                let mut y = Vec::with_capacity(n * o);
                for _ in 0..n {
                    y.extend_from_slice(&bv.data);
                }
                y
            }
            None => vec![0.0; n * o],
        };
        gemm_slices(1.0, &xv.data, (n, k), false, &wv.data, (o, k), true, 1.0, &mut y, (n, o));
        drop(inner);
        let mut inputs = vec![self.id, w.id];
        inputs.extend(b.map(|b| b.id));
        self.tape.push(
            Tensor::matrix(n, o, y)?,
            &inputs,
            Op::Linear {
                x: self.id,
                w: w.id,
                b: b.map(|b| b.id),
            },
        )
    }

    /// `scale · (sin p₁, cos p₁, sin p₂, cos p₂, …)` along the last axis;
    /// the same as `concat_interleaved(sin, cos)` followed by `scale`, with
    /// one transcendental pass and none in the backward sweep.
    pub fn sin_cos_interleaved(&self, scale: f64) -> Result<Var<'t>, AutodiffError> {
        let value = {
            let v = self.value()?;
            if v.shape.is_empty() {
                return Err(mismatch("sin_cos_interleaved", &v.shape, &[1]));
            }
            let mut data = Vec::with_capacity(2 * v.len());
            for p in &v.data {
                let (s, c) = sin_cos(*p);
                data.push(scale * s);
                data.push(scale * c);
            }
            let mut shape = v.shape.clone();
            *shape.last_mut().expect("non-empty") *= 2;
            Tensor::new(shape, data)?
        };
        self.tape.push(value, &[self.id], Op::SinCos(self.id))
    }

    /// Elementwise sum; `other` may be a row (`[f]` or `[1, f]`) added to every row of `self`.
    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        let (value, broadcast) = self.binary(other, |a, b| {
            if a.shape == b.shape {
                let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
                return Ok((Tensor::new(a.shape.clone(), data)?, false));
            }
            let (_, cols) = a.dims2();
            let row_like = matches!(b.shape.as_slice(), [f] | [1, f] if *f == cols);
            if a.shape.len() != 2 || !row_like {
                return Err(mismatch("add", &a.shape, &b.shape));
            }
            let mut data = a.data.clone();
            for row in data.chunks_exact_mut(cols) {
                for (x, y) in row.iter_mut().zip(&b.data) {
                    *x += y;
                }
            }
            Ok((Tensor::new(a.shape.clone(), data)?, true))
        })?;
        self.tape.push(
            value,
            &[self.id, other.id],
            Op::Add {
                a: self.id,
                b: other.id,
                broadcast,
            },
        )
    }

    /// `max(x, 0)`; the derivative at exactly 0 is taken as 0.
    pub fn relu(&self) -> Result<Var<'t>, AutodiffError> {
        self.unary(Op::Relu, |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn sin(&self) -> Result<Var<'t>, AutodiffError> {
        self.unary(Op::Sin, f64::sin)
    }

    pub fn cos(&self) -> Result<Var<'t>, AutodiffError> {
        self.unary(Op::Cos, f64::cos)
    }

    pub fn scale(&self, c: f64) -> Result<Var<'t>, AutodiffError> {
        self.unary(|a| Op::Scale(a, c), |v| v * c)
    }

    /// Same-shape operands merged column-wise as `(a₁, b₁, a₂, b₂, …)`.
    pub fn concat_interleaved(&self, other: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        let (value, ()) = self.binary(other, |a, b| {
            if a.shape != b.shape || a.shape.is_empty() {
                return Err(mismatch("concat_interleaved", &a.shape, &b.shape));
            }
            let mut data = Vec::with_capacity(2 * a.len());
            for (x, y) in a.data.iter().zip(&b.data) {
                data.push(*x);
                data.push(*y);
            }
            let mut shape = a.shape.clone();
            *shape.last_mut().expect("non-empty") *= 2;
            Ok((Tensor::new(shape, data)?, ()))
        })?;
        self.tape.push(value, &[self.id, other.id], Op::Interleave(self.id, other.id))
    }

    pub fn sum(&self) -> Result<Var<'t>, AutodiffError> {
        let s = self.value()?.data.iter().sum();
        self.tape.push(Tensor::scalar(s), &[self.id], Op::Sum(self.id))
    }

    /// Mean of squared differences over all entries.
    pub fn mse(&self, target: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        let (value, ()) = self.binary(target, |a, b| {
            if a.shape != b.shape {
                return Err(mismatch("mse", &a.shape, &b.shape));
            }
            let n = a.len().max(1) as f64;
            let s: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum();
            Ok((Tensor::scalar(s / n), ()))
        })?;
        self.tape.push(value, &[self.id, target.id], Op::Mse(self.id, target.id))
    }

    /// Mean negative log-likelihood of `labels` under the row-wise softmax of `self`.
    pub fn softmax_cross_entropy(&self, labels: &[usize]) -> Result<Var<'t>, AutodiffError> {
        let (loss, probs) = {
            let v = self.value()?;
            let (n, classes) = v.dims2();
            if v.shape.len() != 2 || labels.len() != n {
                return Err(mismatch("softmax_cross_entropy", &v.shape, &[labels.len()]));
            }
            let mut probs = softmax_rows(&v.data, classes);
            let mut loss = 0.0;
            for (i, &l) in labels.iter().enumerate() {
                if l >= classes {
                    return Err(AutodiffError::BadLabel { label: l, classes });
                }
                let row = &v.data[i * classes..(i + 1) * classes];
                let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                loss += lse - row[l];
            }
            if n == 0 {
                probs.clear();
            }
            (loss / n.max(1) as f64, probs)
        };
        self.tape.push(
            Tensor::scalar(loss),
            &[self.id],
            Op::SoftmaxXent {
                logits: self.id,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Contiguous block of `self`'s flat data starting at `offset`, reshaped.
    pub fn slice(&self, offset: usize, shape: &[usize]) -> Result<Var<'t>, AutodiffError> {
        let value = {
            let v = self.value()?;
            let len: usize = shape.iter().product();
            if offset + len > v.len() {
                return Err(mismatch("slice", &v.shape, shape));
            }
            Tensor::new(shape.to_vec(), v.data[offset..offset + len].to_vec())?
        };
        self.tape.push(value, &[self.id], Op::Slice { src: self.id, offset })
    }
}

/// `(sin x, cos x)` within an ulp of libm, about three times faster on the
/// phase arrays RFF layers produce: three-part Cody–Waite reduction by π/2,
/// fdlibm minimax kernels on [−π/4, π/4] and a branch-free quadrant fix-up.
/// Falls back to libm for |x| > 1e5, where the short reduction loses bits.
#[inline]
pub fn sin_cos(x: f64) -> (f64, f64) {
    if !(x.abs() <= 1e5) {
        return x.sin_cos();
    }
    const SHIFT: f64 = 6755399441055744.0; // 1.5·2⁵², rounds to the nearest integer
    const P1: f64 = 1.57079632673412561417e+00;
    const P2: f64 = 6.07710050630396597660e-11;
    const P3: f64 = 2.02226624879595063154e-21;
    const S: [f64; 6] = [
        -1.66666666666666324348e-01,
        8.33333333332248946124e-03,
        -1.98412698298579493134e-04,
        2.75573137070700676789e-06,
        -2.50507602534068634195e-08,
        1.58969099521155010221e-10,
    ];
    const C: [f64; 6] = [
        4.16666666666666019037e-02,
        -1.38888888888741095749e-03,
        2.48015872894767294178e-05,
        -2.75573143513906633035e-07,
        2.08757232129817482790e-09,
        -1.13596475577881948265e-11,
    ];
    let kf = x * std::f64::consts::FRAC_2_PI + SHIFT;
    // the low mantissa bits of `kf` hold k mod 4
    let q = kf.to_bits();
    let k = kf - SHIFT;
    let r = ((x - k * P1) - k * P2) - k * P3;
    let z = r * r;
    let s = r + r * z * (S[0] + z * (S[1] + z * (S[2] + z * (S[3] + z * (S[4] + z * S[5])))));
    let hz = 0.5 * z;
    let w = 1.0 - hz;
    let c = w + (((1.0 - w) - hz) + z * z * (C[0] + z * (C[1] + z * (C[2] + z * (C[3] + z * (C[4] + z * C[5]))))));
    let (a, b) = if q & 1 != 0 { (c, s) } else { (s, c) };
    let sign_a = (q & 2) << 62;
    let sign_b = (q.wrapping_add(1) & 2) << 62;
    (f64::from_bits(a.to_bits() ^ sign_a), f64::from_bits(b.to_bits() ^ sign_b))
}

/// Numerically stable softmax of each row of a row-major buffer.
pub fn softmax_rows(data: &[f64], cols: usize) -> Vec<f64> {
    let mut out = data.to_vec();
    if cols == 0 {
        return out;
    }
    for row in out.chunks_exact_mut(cols) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let mut s = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            s += *x;
        }
        for x in row.iter_mut() {
            *x /= s;
        }
    }
    out
}

/// `|a − b| / max(1e−12, |a| + |b|)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-12)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Coordinate where the maximum occurred.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares backward gradients of scalar `f` at `theta` with central
/// differences of step `h`, coordinate by coordinate.
pub fn grad_check_report<F>(f: F, theta: &Tensor, h: f64) -> Result<GradCheckReport, AutodiffError>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>, AutodiffError>,
{
    let tape = Tape::new();
    let p = tape.param(theta.clone())?;
    let loss = f(&tape, p)?;
    let analytic = tape.backward(loss)?.get_or_zeros(p, theta.shape()).into_data();
    let eval = |t: Tensor| -> Result<f64, AutodiffError> {
        let tape = Tape::new();
        let p = tape.constant(t)?;
        f(&tape, p)?.item()
    };
    let mut numeric = Vec::with_capacity(theta.len());
    let mut worst = (0.0, 0);
    for i in 0..theta.len() {
        let mut plus = theta.clone();
        plus.data[i] += h;
        let mut minus = theta.clone();
        minus.data[i] -= h;
        let d = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let e = relative_error(analytic[i], d);
        if e > worst.0 || e.is_nan() {
            worst = (e, i);
        }
        numeric.push(d);
    }
    Ok(GradCheckReport {
        max_relative_error: worst.0,
        worst_index: worst.1,
        analytic,
        numeric,
    })
}

/// Pins the higher-ranked signature of a closure so it can be bound with
/// `let` and passed to [`grad_check`] later.
pub fn objective<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>, AutodiffError>,
{
    f
}

/// Maximum per-coordinate relative error; see [`grad_check_report`].
pub fn grad_check<F>(f: F, theta: &Tensor, h: f64) -> Result<f64, AutodiffError>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>, AutodiffError>,
{
    Ok(grad_check_report(f, theta, h)?.max_relative_error)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Values at least `margin` away from 0, for ReLU inputs.
    fn away_from_kink(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Tensor {
        let mut t = random(rng, shape);
        for v in t.data_mut() {
            if v.abs() < margin {
                *v = margin.copysign(*v) * 2.0;
            }
        }
        t
    }

    #[test]
    fn forward_examples() {
        let tape = Tape::new();
        let w = tape.constant(Tensor::vector(vec![-1.0, 0.0, 2.0])).unwrap();
        assert_eq!(w.relu().unwrap().value().unwrap().data(), &[0.0, 0.0, 2.0]);
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert_eq!(a.mse(a).unwrap().item().unwrap(), 0.0);
        let eye = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        let col = tape.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap()).unwrap();
        assert_eq!(eye.matmul(col).unwrap().value().unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn backward_examples() {
        let tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![1.0, -2.0, 0.5])).unwrap();
        let loss = w.scale(3.0).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[3.0, 3.0, 3.0]);

        let tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![2.0])).unwrap();
        let zero = tape.constant(Tensor::vector(vec![0.0])).unwrap();
        let g = tape.backward(w.mse(zero).unwrap()).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[4.0]);

        let tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![-1.0, 2.0])).unwrap();
        let g = tape.backward(w.relu().unwrap().sum().unwrap()).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[0.0, 1.0]);

        let tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![0.0])).unwrap();
        let g = tape.backward(w.relu().unwrap().sum().unwrap()).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[0.0]);
    }

    #[test]
    fn backward_errors() {
        let tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert!(matches!(tape.backward(w), Err(AutodiffError::NotScalar(s)) if s == vec![2]));
        let loss = w.sum().unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(AutodiffError::GraphConsumed)));
        assert!(matches!(w.relu(), Err(AutodiffError::GraphConsumed)));
        tape.reset();
        assert!(tape.param(Tensor::scalar(1.0)).is_ok());
    }

    #[test]
    fn shape_errors() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(a.matmul(b), Err(AutodiffError::ShapeMismatch { .. })));
        assert!(a.matmul_nt(b).is_ok());
        let c = tape.constant(Tensor::zeros(&[2])).unwrap();
        assert!(a.add(c).is_err());
        assert!(a.mse(c).is_err());
        assert!(a.softmax_cross_entropy(&[0]).is_err());
        assert!(matches!(
            a.softmax_cross_entropy(&[0, 3]),
            Err(AutodiffError::BadLabel { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn constants_do_not_record_ops() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0])).unwrap();
        let b = a.sin().unwrap();
        assert!(!b.requires_grad());
        let w = tape.param(Tensor::vector(vec![1.0])).unwrap();
        assert!(w.add(b).unwrap().requires_grad());
    }

    #[test]
    fn grad_check_examples() {
        let sq = objective(|_, t| {
            let z = t.scale(0.0)?;
            let n = t.value()?.len() as f64;
            t.mse(z)?.scale(n)
        });
        let theta = Tensor::vector(vec![0.3, -1.2, 2.5, 0.01]);
        assert!(grad_check(sq, &theta, 1e-5).unwrap() <= 1e-9);
        let sines = objective(|_, t| t.sin()?.sum());
        let theta = Tensor::vector(vec![0.3, -0.7]);
        let report = grad_check_report(sines, &theta, 1e-5).unwrap();
        assert!(report.max_relative_error <= 1e-8);
        for (a, x) in report.analytic.iter().zip([0.3f64, -0.7]) {
            assert!((a - x.cos()).abs() < 1e-15);
        }
    }

    #[test]
    fn every_op_passes_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let b = random(&mut rng, &[3, 4]);
            let bias = random(&mut rng, &[4]);
            let r = random(&mut rng, &[4, 2]);
            let target = random(&mut rng, &[3, 4]);
            let labels = [1usize, 2, 0];
            let theta = away_from_kink(&mut rng, &[3, 4], 1e-3);
            let f = objective(|tape, t| {
                let b = tape.constant(b.clone())?;
                let bias = tape.constant(bias.clone())?;
                let r = tape.constant(r.clone())?;
                let target = tape.constant(target.clone())?;
                let s = t.sin()?.concat_interleaved(t.cos()?)?.slice(0, &[3, 4])?;
                let h = t.relu()?.add(bias)?.add(s)?.scale(0.7)?;
                let m = h.matmul(r)?.matmul_nt(b.slice(0, &[3, 2])?)?;
                let l1 = m.softmax_cross_entropy(&labels)?;
                let l2 = h.mse(target)?;
                let l3 = t.matmul_nt(b)?.sum()?;
                let l4 = t
                    .linear(b, Some(bias.slice(0, &[3])?))?
                    .sin_cos_interleaved(0.6)?
                    .mse(h.concat_interleaved(h)?.slice(0, &[3, 6])?)?;
                l1.add(l2)?.add(l3.scale(0.1)?)?.add(l4)
            });
            let err = grad_check(f, &theta, 1e-5).unwrap();
            assert!(err <= 1e-6, "{err}");
        }
    }

    #[test]
    fn gradients_wrt_second_operands() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, &[3, 4]);
        let theta = random(&mut rng, &[4, 2]);
        let f = objective(|tape, t| {
            let a = tape.constant(a.clone())?;
            let x = a.matmul(t)?;
            let y = a.matmul_nt(t.slice(0, &[2, 4])?)?;
            let z = tape.constant(Tensor::zeros(&[3, 2]))?;
            z.mse(x)?.add(y.sin()?.sum()?)?.add(a.slice(0, &[2]).and_then(|r| r.add(t.slice(2, &[2])?))?.sum()?)
        });
        assert!(grad_check(f, &theta, 1e-5).unwrap() <= 1e-6);
    }

    #[test]
    fn linearity_of_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let theta = away_from_kink(&mut rng, &[2, 3], 1e-3);
        fn f(t: Var<'_>) -> Result<Var<'_>, AutodiffError> {
            t.relu()?.sin()?.sum()
        }
        fn g(t: Var<'_>) -> Result<Var<'_>, AutodiffError> {
            t.cos()?.mse(t.scale(0.5)?)
        }
        let grad_of = |which: u8| {
            let tape = Tape::new();
            let p = tape.param(theta.clone()).unwrap();
            let loss = match which {
                0 => f(p).unwrap(),
                1 => g(p).unwrap(),
                _ => f(p).unwrap().scale(2.5).unwrap().add(g(p).unwrap().scale(-1.5).unwrap()).unwrap(),
            };
            tape.backward(loss).unwrap().get(p).unwrap().clone()
        };
        let (gf, gg, gc) = (grad_of(0), grad_of(1), grad_of(2));
        for i in 0..theta.len() {
            let want = 2.5 * gf.data()[i] - 1.5 * gg.data()[i];
            assert!((gc.data()[i] - want).abs() <= 1e-10);
        }
    }

    /// A widening chain (3 → 6, prefix products carried) and a narrowing one
    /// (7 → 2, suffix products carried).
    fn chain_layers(rng: &mut ChaCha8Rng, narrowing: bool) -> Vec<(Tensor, Option<Tensor>)> {
        if narrowing {
            vec![
                (random(rng, &[3, 7]), None),
                (random(rng, &[6, 3]), Some(random(rng, &[6]))),
                (random(rng, &[2, 6]), Some(random(rng, &[2]))),
            ]
        } else {
            vec![
                (random(rng, &[5, 3]), Some(random(rng, &[5]))),
                (random(rng, &[2, 5]), None),
                (random(rng, &[6, 2]), Some(random(rng, &[6]))),
            ]
        }
    }

    fn carries_suffix(v: Var<'_>) -> bool {
        matches!(&v.tape.inner.borrow().nodes[v.id].op, Op::Chain(s) if matches!(s.partial, Partial::Suffix(_)))
    }

    #[test]
    fn affine_chain_matches_unfused() {
        for narrowing in [false, true] {
            chain_matches_unfused(narrowing);
        }
    }

    fn chain_matches_unfused(narrowing: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layers = chain_layers(&mut rng, narrowing);
        let (in0, out) = (layers[0].0.shape()[1], layers[2].0.shape()[0]);
        let x = random(&mut rng, &[7, in0]);
        let target = random(&mut rng, &[7, out]);
        let run = |fused: bool| {
            let tape = Tape::new();
            let xv = tape.param(x.clone()).unwrap();
            let ls: Vec<_> = layers
                .iter()
                .map(|(w, b)| (tape.param(w.clone()).unwrap(), b.as_ref().map(|b| tape.param(b.clone()).unwrap())))
                .collect();
            let y = if fused {
                let y = tape.affine_chain(xv, &ls).unwrap();
                assert_eq!(carries_suffix(y), narrowing);
                y
            } else {
                ls.iter().fold(xv, |h, (w, b)| {
                    let h = h.matmul_nt(*w).unwrap();
                    b.map_or(h, |b| h.add(b).unwrap())
                })
            };
            let t = tape.constant(target.clone()).unwrap();
            let y_val = y.value().unwrap().clone();
            let g = tape.backward(y.mse(t).unwrap()).unwrap();
            let mut all = vec![y_val, g.get(xv).unwrap().clone()];
            for (w, b) in &ls {
                all.push(g.get(*w).unwrap().clone());
                all.extend(b.map(|b| g.get(b).unwrap().clone()));
            }
            all
        };
        for (a, b) in run(true).iter().zip(run(false)) {
            assert_eq!(a.shape(), b.shape());
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn affine_chain_grad_check() {
        for narrowing in [false, true] {
            chain_grad_check(narrowing);
        }
    }

    fn chain_grad_check(narrowing: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let layers = chain_layers(&mut rng, narrowing);
        let x = random(&mut rng, &[4, layers[0].0.shape()[1]]);
        let sizes: Vec<(Vec<usize>, Option<usize>)> = layers
            .iter()
            .map(|(w, b)| (w.shape().to_vec(), b.as_ref().map(|b| b.len())))
            .collect();
        let flat: Vec<f64> = layers
            .iter()
            .flat_map(|(w, b)| w.data().iter().chain(b.iter().flat_map(|b| b.data())).copied())
            .collect();
        let f = objective(|tape, t| {
            let x = tape.constant(x.clone())?;
            let mut at = 0;
            let mut ls = Vec::new();
            for (ws, bs) in &sizes {
                let w = t.slice(at, ws)?;
                at += ws.iter().product::<usize>();
                let b = match bs {
                    Some(n) => {
                        let b = t.slice(at, &[*n])?;
                        at += n;
                        Some(b)
                    }
                    None => None,
                };
                ls.push((w, b));
            }
            tape.affine_chain(x, &ls)?.sin()?.sum()
        });
        assert!(grad_check(f, &Tensor::vector(flat), 1e-5).unwrap() <= 1e-6);
    }

    #[test]
    fn deterministic_gradients() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let w = random(&mut rng, &[8, 8]);
            let x = random(&mut rng, &[16, 8]);
            let tape = Tape::new();
            let wv = tape.param(w).unwrap();
            let xv = tape.constant(x).unwrap();
            let loss = xv.matmul_nt(wv).unwrap().relu().unwrap().sum().unwrap();
            tape.backward(loss).unwrap().get(wv).unwrap().clone()
        };
        let (a, b) = (run(), run());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn fused_ops_match_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = random(&mut rng, &[5, 3]);
        let w = random(&mut rng, &[4, 3]);
        let b = random(&mut rng, &[4]);
        let tape = Tape::new();
        let (xv, wv, bv) = (
            tape.param(x).unwrap(),
            tape.param(w).unwrap(),
            tape.param(b).unwrap(),
        );
        let fused = xv.linear(wv, Some(bv)).unwrap().sin_cos_interleaved(0.5).unwrap();
        let p = xv.matmul_nt(wv).unwrap().add(bv).unwrap();
        let plain = p.sin().unwrap().concat_interleaved(p.cos().unwrap()).unwrap().scale(0.5).unwrap();
        let (f, q) = (fused.value().unwrap().clone(), plain.value().unwrap().clone());
        assert_eq!(f.shape(), &[5, 8]);
        for (a, b) in f.data().iter().zip(q.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_cross_entropy_values() {
        let tape = Tape::new();
        let l = tape.param(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap()).unwrap();
        let loss = l.softmax_cross_entropy(&[1]).unwrap();
        assert!((loss.item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(l).unwrap().data(), &[0.5, -0.5]);
        assert_eq!(softmax_rows(&[1000.0, 1000.0], 2), vec![0.5, 0.5]);
    }

    #[test]
    fn fast_sin_cos_tracks_libm() {
        let mut x = -3.0e5;
        let mut worst: f64 = 0.0;
        while x < 3.0e5 {
            let (s, c) = sin_cos(x);
            let (s0, c0) = x.sin_cos();
            worst = worst.max((s - s0).abs()).max((c - c0).abs());
            x += 0.37;
        }
        assert!(worst <= 2.0 * f64::EPSILON, "{worst:e}");
        for x in [0.0, -0.0, 1e-300, std::f64::consts::FRAC_PI_4, -std::f64::consts::PI, 1e9] {
            let (s, c) = sin_cos(x);
            assert!((s - x.sin()).abs() <= f64::EPSILON && (c - x.cos()).abs() <= f64::EPSILON, "{x}");
        }
        assert!(sin_cos(f64::NAN).0.is_nan() && sin_cos(f64::INFINITY).1.is_nan());
    }
}
