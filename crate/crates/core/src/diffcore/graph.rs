//! Dynamic computation record with reverse-mode differentiation.
//!
//! A [`Graph`] is rebuilt for every training step. Each operation appends a
//! node holding its value; [`Graph::backward`] walks the nodes in exact
//! reverse order and accumulates gradients. Parameter leaves remember their
//! [`ParamId`] so the optimizer can collect their gradients afterwards.
//!
//! Shape mismatches are programming errors and panic with both shapes in
//! the message.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    Param,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, S),
    AddScalar(NodeId, NodeId),
    AddN(Vec<NodeId>),
    Sum(NodeId),
    Mean(NodeId),
    Dot(NodeId, NodeId),
    MatVec(NodeId, NodeId),
    WeightedRows(NodeId, NodeId),
    MeanRows(NodeId),
    SubRow(NodeId, NodeId),
    Embedding(NodeId, usize),
    Slice(NodeId, usize),
    Transpose(NodeId),
    Reshape(NodeId),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        spec: Conv2dSpec,
    },
    /// `cells[k]` is the output bin that input bin `k` belongs to.
    PoolBins {
        input: NodeId,
        cells: Vec<usize>,
        counts: Vec<usize>,
    },
    Tanh(NodeId),
    Sigmoid(NodeId),
    LogSigmoid(NodeId),
    Relu(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Pick(NodeId, usize),
    L2Normalize(NodeId, S),
}

#[derive(Debug, Clone)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Per-step computation record.
#[derive(Debug, Clone, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
    params: HashMap<ParamId, NodeId>,
}

fn shape_panic(op: &'static str, a: &[usize], b: &[usize]) -> ! {
    panic!(
        "{}",
        Error::Shape {
            op,
            left: a.to_vec(),
            right: b.to_vec()
        }
    )
}

impl<S: Real> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, id: NodeId) -> S {
        self.value(id).item()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn data(&self, id: NodeId) -> &[S] {
        self.nodes[id.0].value.data()
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Input whose gradient is tracked (used by gradient checks).
    pub fn variable(&mut self, value: Tensor<S>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf for a stored parameter. Repeated requests return the same node.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> NodeId {
        if let Some(&node) = self.params.get(&id) {
            return node;
        }
        let node = self.push(store.value(id).clone(), Op::Param, true);
        self.params.insert(id, node);
        node
    }

    fn binary_same(&self, op: &'static str, a: NodeId, b: NodeId) {
        if self.shape(a) != self.shape(b) {
            shape_panic(op, self.shape(a), self.shape(b));
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same("add", a, b);
        let v: Vec<S> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(shape, v), Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same("sub", a, b);
        let v: Vec<S> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x - y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(shape, v), Op::Sub(a, b), rg)
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same("mul", a, b);
        let v: Vec<S> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(shape, v), Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: NodeId, c: S) -> NodeId {
        let v: Vec<S> = self.data(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(shape, v), Op::Scale(a, c), rg)
    }

    /// Adds a one-element node to every entry of `a`.
    pub fn add_scalar(&mut self, a: NodeId, s: NodeId) -> NodeId {
        if self.value(s).len() != 1 {
            shape_panic("add_scalar", self.shape(a), self.shape(s));
        }
        let c = self.item(s);
        let v: Vec<S> = self.data(a).iter().map(|&x| x + c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, s]);
        self.push(Tensor::new(shape, v), Op::AddScalar(a, s), rg)
    }

    /// Sum of equally shaped nodes.
    pub fn add_n(&mut self, items: &[NodeId]) -> NodeId {
        assert!(!items.is_empty(), "add_n of nothing");
        let shape = self.shape(items[0]).to_vec();
        let mut v = vec![S::zero(); self.value(items[0]).len()];
        for &id in items {
            if self.shape(id) != shape.as_slice() {
                shape_panic("add_n", &shape, self.shape(id));
            }
            for (acc, &x) in v.iter_mut().zip(self.data(id)) {
                *acc += x;
            }
        }
        let rg = self.rg(items);
        self.push(Tensor::new(shape, v), Op::AddN(items.to_vec()), rg)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: S = self.data(a).iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = S::lit(self.value(a).len() as f64);
        let s: S = self.data(a).iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s / n), Op::Mean(a), rg)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same("dot", a, b);
        let s: S = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).sum();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::scalar(s), Op::Dot(a, b), rg)
    }

    /// `w` is `[m, n]`, `x` is `[n]`; result `[m]`.
    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> NodeId {
        let (ws, xs) = (self.shape(w), self.shape(x));
        if ws.len() != 2 || xs.len() != 1 || ws[1] != xs[0] {
            shape_panic("matvec", ws, xs);
        }
        let (m, n) = (ws[0], ws[1]);
        let wd = self.data(w);
        let xd = self.data(x);
        let v: Vec<S> = (0..m)
            .map(|i| {
                wd[i * n..(i + 1) * n]
                    .iter()
                    .zip(xd)
                    .fold(S::zero(), |acc, (&a, &b)| acc + a * b)
            })
            .collect();
        let rg = self.rg(&[w, x]);
        self.push(Tensor::vector(v), Op::MatVec(w, x), rg)
    }

    /// `w` is `[r, n]` applied to an `[n]` vector plus bias `[r]`.
    pub fn affine(&mut self, w: NodeId, x: NodeId, b: NodeId) -> NodeId {
        let y = self.matvec(w, x);
        self.add(y, b)
    }

    /// Convex-style combination of rows: `weights` is `[K]`, `rows` is
    /// `[K, d]`; result `[d] = rowsᵀ · weights`.
    pub fn weighted_rows(&mut self, weights: NodeId, rows: NodeId) -> NodeId {
        let (ws, rs) = (self.shape(weights), self.shape(rows));
        if ws.len() != 1 || rs.len() != 2 || ws[0] != rs[0] {
            shape_panic("weighted_rows", ws, rs);
        }
        let (k, d) = (rs[0], rs[1]);
        let mut v = vec![S::zero(); d];
        let wd = self.data(weights);
        let rd = self.data(rows);
        for i in 0..k {
            let w = wd[i];
            for (acc, &x) in v.iter_mut().zip(&rd[i * d..(i + 1) * d]) {
                *acc += w * x;
            }
        }
        let rg = self.rg(&[weights, rows]);
        self.push(Tensor::vector(v), Op::WeightedRows(weights, rows), rg)
    }

    /// Mean over the rows of a `[K, d]` matrix.
    pub fn mean_rows(&mut self, rows: NodeId) -> NodeId {
        let rs = self.shape(rows);
        if rs.len() != 2 {
            shape_panic("mean_rows", rs, &[0, 0]);
        }
        let (k, d) = (rs[0], rs[1]);
        let mut v = vec![S::zero(); d];
        for row in self.data(rows).chunks(d) {
            for (acc, &x) in v.iter_mut().zip(row) {
                *acc += x;
            }
        }
        let kk = S::lit(k as f64);
        v.iter_mut().for_each(|x| *x = *x / kk);
        let rg = self.rg(&[rows]);
        self.push(Tensor::vector(v), Op::MeanRows(rows), rg)
    }

    /// Subtracts the `[d]` vector `v` from every row of the `[K, d]` matrix.
    pub fn sub_row(&mut self, rows: NodeId, v: NodeId) -> NodeId {
        let (rs, vs) = (self.shape(rows), self.shape(v));
        if rs.len() != 2 || vs.len() != 1 || rs[1] != vs[0] {
            shape_panic("sub_row", rs, vs);
        }
        let d = vs[0];
        let shape = rs.to_vec();
        let vd = self.data(v).to_vec();
        let out: Vec<S> = self
            .data(rows)
            .chunks(d)
            .flat_map(|row| row.iter().zip(&vd).map(|(&x, &y)| x - y))
            .collect();
        let rg = self.rg(&[rows, v]);
        self.push(Tensor::new(shape, out), Op::SubRow(rows, v), rg)
    }

    /// Row `index` of a `[D, e]` table.
    pub fn embedding(&mut self, table: NodeId, index: usize) -> NodeId {
        let ts = self.shape(table);
        if ts.len() != 2 || index >= ts[0] {
            shape_panic("embedding", ts, &[index]);
        }
        let e = ts[1];
        let v = self.data(table)[index * e..(index + 1) * e].to_vec();
        let rg = self.rg(&[table]);
        self.push(Tensor::vector(v), Op::Embedding(table, index), rg)
    }

    /// Contiguous sub-range of a vector.
    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let n = self.value(a).len();
        if start + len > n || len == 0 {
            shape_panic("slice", self.shape(a), &[start, len]);
        }
        let v = self.data(a)[start..start + len].to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::vector(v), Op::Slice(a, start), rg)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a);
        if s.len() != 2 {
            shape_panic("transpose", s, &[0, 0]);
        }
        let (r, c) = (s[0], s[1]);
        let d = self.data(a);
        let mut v = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                v[j * r + i] = d[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::new(vec![c, r], v), Op::Transpose(a), rg)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        if shape.iter().product::<usize>() != self.value(a).len() {
            shape_panic("reshape", self.shape(a), shape);
        }
        let v = self.value(a).clone().reshaped(shape.to_vec());
        let rg = self.rg(&[a]);
        self.push(v, Op::Reshape(a), rg)
    }

    /// 2-D convolution. `input` is `[C, H, W]`, `weight` is `[O, C, kh, kw]`,
    /// `bias` is `[O]`; zero padding on every side.
    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, bias: NodeId, spec: Conv2dSpec) -> NodeId {
        let is = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if is.len() != 3 || ws.len() != 4 || is[0] != ws[1] || self.shape(bias) != [ws[0]] {
            shape_panic("conv2d", &is, &ws);
        }
        let (c_in, h, w) = (is[0], is[1], is[2]);
        let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
        let (ho, wo) = conv_out_dims(h, w, kh, kw, spec);
        let x = self.data(input);
        let k = self.data(weight);
        let b = self.data(bias);
        let mut out = vec![S::zero(); c_out * ho * wo];
        for o in 0..c_out {
            let plane = &mut out[o * ho * wo..(o + 1) * ho * wo];
            plane.iter_mut().for_each(|v| *v = b[o]);
            for c in 0..c_in {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = k[((o * c_in + c) * kh + ky) * kw + kx];
                        for oy in 0..ho {
                            let Some(iy) = (oy * spec.stride + ky).checked_sub(spec.pad) else {
                                continue;
                            };
                            if iy >= h {
                                continue;
                            }
                            let row = &x[(c * h + iy) * w..(c * h + iy + 1) * w];
                            let orow = &mut plane[oy * wo..(oy + 1) * wo];
                            for (ox, ov) in orow.iter_mut().enumerate() {
                                if let Some(ix) = (ox * spec.stride + kx).checked_sub(spec.pad) {
                                    if ix < w {
                                        *ov += wv * row[ix];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[input, weight, bias]);
        self.push(
            Tensor::new(vec![c_out, ho, wo], out),
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            },
            rg,
        )
    }

    /// Averages neighbouring bins of a `[K, d]` feature map laid out on a
    /// `grid.0 × grid.1` grid. Trailing rows/columns that do not fill a whole
    /// window are merged into the last output cell.
    pub fn pool_bins(&mut self, rows: NodeId, grid: (usize, usize), window: (usize, usize)) -> NodeId {
        let rs = self.shape(rows).to_vec();
        if rs.len() != 2 || rs[0] != grid.0 * grid.1 {
            shape_panic("pool_bins", &rs, &[grid.0, grid.1]);
        }
        let (oh, ow) = (grid.0 / window.0, grid.1 / window.1);
        assert!(
            oh > 0 && ow > 0 && window.0 > 0 && window.1 > 0,
            "pool window {window:?} larger than grid {grid:?}"
        );
        let d = rs[1];
        let mut cells = Vec::with_capacity(rs[0]);
        let mut counts = vec![0usize; oh * ow];
        for y in 0..grid.0 {
            for x in 0..grid.1 {
                let cell = (y / window.0).min(oh - 1) * ow + (x / window.1).min(ow - 1);
                cells.push(cell);
                counts[cell] += 1;
            }
        }
        let mut v = vec![S::zero(); oh * ow * d];
        for (k, row) in self.data(rows).chunks(d).enumerate() {
            let cell = cells[k];
            for (acc, &x) in v[cell * d..(cell + 1) * d].iter_mut().zip(row) {
                *acc += x;
            }
        }
        for (cell, &n) in counts.iter().enumerate() {
            let nn = S::lit(n as f64);
            v[cell * d..(cell + 1) * d].iter_mut().for_each(|x| *x = *x / nn);
        }
        let rg = self.rg(&[rows]);
        self.push(
            Tensor::new(vec![oh * ow, d], v),
            Op::PoolBins {
                input: rows,
                cells,
                counts,
            },
            rg,
        )
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(S) -> S, op: Op<S>) -> NodeId {
        let v: Vec<S> = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(shape, v), op, rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// `log σ(x)`, evaluated without overflow for large `|x|`.
    pub fn log_sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, log_sigmoid, Op::LogSigmoid(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.max(S::zero()), Op::Relu(a))
    }

    /// Softmax over all entries (max-subtracted).
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let v = softmax(self.data(a));
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(shape, v), Op::Softmax(a), rg)
    }

    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let v = log_softmax(self.data(a));
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(shape, v), Op::LogSoftmax(a), rg)
    }

    /// One entry of a node, as a scalar.
    pub fn pick(&mut self, a: NodeId, index: usize) -> NodeId {
        let n = self.value(a).len();
        if index >= n {
            shape_panic("pick", self.shape(a), &[index]);
        }
        let v = self.data(a)[index];
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(v), Op::Pick(a, index), rg)
    }

    /// `x / sqrt(|x|² + eps)`.
    pub fn l2_normalize(&mut self, a: NodeId, eps: S) -> NodeId {
        let norm = (self.data(a).iter().map(|&x| x * x).sum::<S>() + eps).sqrt();
        self.unary(a, |x| x / norm, Op::L2Normalize(a, eps))
    }

    /// Negative log-likelihood of `target` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: NodeId, target: usize) -> NodeId {
        let lp = self.log_softmax(logits);
        let p = self.pick(lp, target);
        self.scale(p, -S::one())
    }

    /// Runs the reverse pass from the one-element node `loss`. Gradient
    /// buffers from any previous pass are discarded first.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                self.backprop_node(i, &g);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Gradient of the last backward pass with respect to `id`, if any flowed.
    pub fn grad(&self, id: NodeId) -> Option<&[S]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// `(parameter, gradient)` for every parameter leaf reached by the last
    /// backward pass.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[S])> + '_ {
        self.params
            .iter()
            .filter_map(|(&pid, &node)| self.grad(node).map(|g| (pid, g)))
    }

    fn acc(&mut self, id: NodeId) -> Option<&mut Vec<S>> {
        if !self.nodes[id.0].requires_grad {
            return None;
        }
        let n = self.nodes[id.0].value.len();
        Some(self.grads[id.0].get_or_insert_with(|| vec![S::zero(); n]))
    }

    fn backprop_node(&mut self, i: usize, g: &[S]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                add_into(self.acc(a), g);
                add_into(self.acc(b), g);
            }
            Op::Sub(a, b) => {
                add_into(self.acc(a), g);
                if let Some(gb) = self.acc(b) {
                    gb.iter_mut().zip(g).for_each(|(x, &y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let bv = self.data(b).to_vec();
                if let Some(ga) = self.acc(a) {
                    ga.iter_mut().zip(g.iter().zip(&bv)).for_each(|(x, (&gy, &y))| *x += gy * y);
                }
                let av = self.data(a).to_vec();
                if let Some(gb) = self.acc(b) {
                    gb.iter_mut().zip(g.iter().zip(&av)).for_each(|(x, (&gy, &y))| *x += gy * y);
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.acc(a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y * c);
                }
            }
            Op::AddScalar(a, s) => {
                add_into(self.acc(a), g);
                let total: S = g.iter().copied().sum();
                if let Some(gs) = self.acc(s) {
                    gs[0] += total;
                }
            }
            Op::AddN(items) => {
                for id in items {
                    add_into(self.acc(id), g);
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean(a) => {
                let n = S::lit(self.value(a).len() as f64);
                if let Some(ga) = self.acc(a) {
                    ga.iter_mut().for_each(|x| *x += g[0] / n);
                }
            }
            Op::Dot(a, b) => {
                let bv = self.data(b).to_vec();
                if let Some(ga) = self.acc(a) {
                    ga.iter_mut().zip(&bv).for_each(|(x, &y)| *x += g[0] * y);
                }
                let av = self.data(a).to_vec();
                if let Some(gb) = self.acc(b) {
                    gb.iter_mut().zip(&av).for_each(|(x, &y)| *x += g[0] * y);
                }
            }
            Op::MatVec(w, x) => {
                let n = self.shape(w)[1];
                let xv = self.data(x).to_vec();
                if let Some(gw) = self.acc(w) {
                    for (gi, row) in g.iter().zip(gw.chunks_mut(n)) {
                        if *gi != S::zero() {
                            row.iter_mut().zip(&xv).for_each(|(r, &xj)| *r += *gi * xj);
                        }
                    }
                }
                if self.nodes[x.0].requires_grad {
                    let wv = self.data(w).to_vec();
                    let gx = self.acc(x).expect("requires grad");
                    for (gi, row) in g.iter().zip(wv.chunks(n)) {
                        gx.iter_mut().zip(row).for_each(|(r, &wij)| *r += *gi * wij);
                    }
                }
            }
            Op::WeightedRows(weights, rows) => {
                let d = self.shape(rows)[1];
                let rv = self.data(rows).to_vec();
                if let Some(gw) = self.acc(weights) {
                    for (k, row) in rv.chunks(d).enumerate() {
                        gw[k] += row.iter().zip(g).map(|(&a, &b)| a * b).sum::<S>();
                    }
                }
                let wv = self.data(weights).to_vec();
                if let Some(gr) = self.acc(rows) {
                    for (k, row) in gr.chunks_mut(d).enumerate() {
                        row.iter_mut().zip(g).for_each(|(r, &gy)| *r += wv[k] * gy);
                    }
                }
            }
            Op::MeanRows(rows) => {
                let (k, d) = (self.shape(rows)[0], self.shape(rows)[1]);
                let kk = S::lit(k as f64);
                if let Some(gr) = self.acc(rows) {
                    for row in gr.chunks_mut(d) {
                        row.iter_mut().zip(g).for_each(|(r, &gy)| *r += gy / kk);
                    }
                }
            }
            Op::SubRow(rows, v) => {
                let d = self.shape(v)[0];
                add_into(self.acc(rows), g);
                if let Some(gv) = self.acc(v) {
                    for row in g.chunks(d) {
                        gv.iter_mut().zip(row).for_each(|(x, &y)| *x -= y);
                    }
                }
            }
            Op::Embedding(table, index) => {
                let e = self.shape(table)[1];
                if let Some(gt) = self.acc(table) {
                    gt[index * e..(index + 1) * e]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(x, &y)| *x += y);
                }
            }
            Op::Slice(a, start) => {
                if let Some(ga) = self.acc(a) {
                    ga[start..start + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(x, &y)| *x += y);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(a)[0], self.shape(a)[1]);
                if let Some(ga) = self.acc(a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Reshape(a) => add_into(self.acc(a), g),
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            } => self.conv2d_backward(input, weight, bias, spec, g),
            Op::PoolBins { input, cells, counts } => {
                let d = self.shape(input)[1];
                if let Some(gi) = self.acc(input) {
                    for (k, row) in gi.chunks_mut(d).enumerate() {
                        let cell = cells[k];
                        let n = S::lit(counts[cell] as f64);
                        row.iter_mut()
                            .zip(&g[cell * d..(cell + 1) * d])
                            .for_each(|(x, &y)| *x += y / n);
                    }
                }
            }
            Op::Tanh(a) => {
                let y = self.nodes[i].value.data().to_vec();
                if let Some(ga) = self.acc(a) {
                    for ((x, &gy), &yy) in ga.iter_mut().zip(g).zip(&y) {
                        *x += gy * (S::one() - yy * yy);
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = self.nodes[i].value.data().to_vec();
                if let Some(ga) = self.acc(a) {
                    for ((x, &gy), &yy) in ga.iter_mut().zip(g).zip(&y) {
                        *x += gy * yy * (S::one() - yy);
                    }
                }
            }
            Op::LogSigmoid(a) => {
                let xs = self.data(a).to_vec();
                if let Some(ga) = self.acc(a) {
                    for ((x, &gy), &xv) in ga.iter_mut().zip(g).zip(&xs) {
                        *x += gy * sigmoid(-xv);
                    }
                }
            }
            Op::Relu(a) => {
                let xs = self.data(a).to_vec();
                if let Some(ga) = self.acc(a) {
                    for ((x, &gy), &xv) in ga.iter_mut().zip(g).zip(&xs) {
                        if xv > S::zero() {
                            *x += gy;
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let y = self.nodes[i].value.data().to_vec();
                let gy: S = g.iter().zip(&y).map(|(&a, &b)| a * b).sum();
                if let Some(ga) = self.acc(a) {
                    for ((x, &gv), &yy) in ga.iter_mut().zip(g).zip(&y) {
                        *x += yy * (gv - gy);
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let y = self.nodes[i].value.data().to_vec();
                let total: S = g.iter().copied().sum();
                if let Some(ga) = self.acc(a) {
                    for ((x, &gv), &yy) in ga.iter_mut().zip(g).zip(&y) {
                        *x += gv - yy.exp() * total;
                    }
                }
            }
            Op::Pick(a, index) => {
                if let Some(ga) = self.acc(a) {
                    ga[index] += g[0];
                }
            }
            Op::L2Normalize(a, eps) => {
                let xs = self.data(a).to_vec();
                let norm = (xs.iter().map(|&x| x * x).sum::<S>() + eps).sqrt();
                let y = self.nodes[i].value.data().to_vec();
                let yg: S = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
                if let Some(ga) = self.acc(a) {
                    for ((x, &gv), &yy) in ga.iter_mut().zip(g).zip(&y) {
                        *x += (gv - yy * yg) / norm;
                    }
                }
            }
        }
    }

    fn conv2d_backward(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        spec: Conv2dSpec,
        g: &[S],
    ) {
        let is = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let (c_in, h, w) = (is[0], is[1], is[2]);
        let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
        let (ho, wo) = conv_out_dims(h, w, kh, kw, spec);

        if let Some(gb) = self.acc(bias) {
            for (o, gbo) in gb.iter_mut().enumerate() {
                *gbo += g[o * ho * wo..(o + 1) * ho * wo].iter().copied().sum::<S>();
            }
        }
        if self.nodes[weight.0].requires_grad {
            let x = self.data(input).to_vec();
            let gw = self.acc(weight).expect("requires grad");
            for o in 0..c_out {
                let plane = &g[o * ho * wo..(o + 1) * ho * wo];
                for c in 0..c_in {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let mut s = S::zero();
                            for oy in 0..ho {
                                let Some(iy) = (oy * spec.stride + ky).checked_sub(spec.pad) else {
                                    continue;
                                };
                                if iy >= h {
                                    continue;
                                }
                                let row = &x[(c * h + iy) * w..(c * h + iy + 1) * w];
                                for (ox, &gv) in plane[oy * wo..(oy + 1) * wo].iter().enumerate() {
                                    if let Some(ix) = (ox * spec.stride + kx).checked_sub(spec.pad) {
                                        if ix < w {
                                            s += gv * row[ix];
                                        }
                                    }
                                }
                            }
                            gw[((o * c_in + c) * kh + ky) * kw + kx] += s;
                        }
                    }
                }
            }
        }
        if self.nodes[input.0].requires_grad {
            let k = self.data(weight).to_vec();
            let gx = self.acc(input).expect("requires grad");
            for o in 0..c_out {
                let plane = &g[o * ho * wo..(o + 1) * ho * wo];
                for c in 0..c_in {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wv = k[((o * c_in + c) * kh + ky) * kw + kx];
                            for oy in 0..ho {
                                let Some(iy) = (oy * spec.stride + ky).checked_sub(spec.pad) else {
                                    continue;
                                };
                                if iy >= h {
                                    continue;
                                }
                                let row = &mut gx[(c * h + iy) * w..(c * h + iy + 1) * w];
                                for (ox, &gv) in plane[oy * wo..(oy + 1) * wo].iter().enumerate() {
                                    if let Some(ix) = (ox * spec.stride + kx).checked_sub(spec.pad) {
                                        if ix < w {
                                            row[ix] += wv * gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn add_into<S: Real>(dst: Option<&mut Vec<S>>, g: &[S]) {
    if let Some(d) = dst {
        d.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
    }
}

pub fn conv_out_dims(h: usize, w: usize, kh: usize, kw: usize, spec: Conv2dSpec) -> (usize, usize) {
    let ho = (h + 2 * spec.pad).saturating_sub(kh) / spec.stride + 1;
    let wo = (w + 2 * spec.pad).saturating_sub(kw) / spec.stride + 1;
    (ho, wo)
}

pub fn sigmoid<S: Real>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

pub fn log_sigmoid<S: Real>(x: S) -> S {
    x.min(S::zero()) - (-x.abs()).exp().ln_1p()
}

pub fn softmax<S: Real>(x: &[S]) -> Vec<S> {
    let m = x.iter().copied().fold(S::neg_infinity(), S::max);
    let e: Vec<S> = x.iter().map(|&v| (v - m).exp()).collect();
    let z: S = e.iter().copied().sum();
    e.into_iter().map(|v| v / z).collect()
}

pub fn log_softmax<S: Real>(x: &[S]) -> Vec<S> {
    let m = x.iter().copied().fold(S::neg_infinity(), S::max);
    let lse = x.iter().map(|&v| (v - m).exp()).sum::<S>().ln() + m;
    x.iter().map(|&v| v - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(g: &mut Graph<f64>, x: &[f64]) -> NodeId {
        g.variable(Tensor::vector(x.to_vec()))
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = v(&mut g, &[0.0; 4]);
        let y = g.softmax(x);
        assert_eq!(g.value(y).data(), &[0.25; 4]);
    }

    #[test]
    fn sigmoid_symmetry_point() {
        let mut g = Graph::new();
        let x = v(&mut g, &[0.0]);
        let y = g.sigmoid(x);
        assert_eq!(g.item(y), 0.5);
    }

    #[test]
    fn hadamard_by_hand() {
        let mut g = Graph::new();
        let a = v(&mut g, &[1.0, 2.0, 3.0]);
        let b = v(&mut g, &[4.0, 5.0, 6.0]);
        let c = g.mul(a, b);
        assert_eq!(g.value(c).data(), &[4.0, 10.0, 18.0]);
    }

    #[test]
    fn square_has_gradient_two_x() {
        let mut g = Graph::new();
        let x = v(&mut g, &[3.0]);
        let y = g.mul(x, x);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn constant_loss_leaves_parameters_without_gradient() {
        let mut g = Graph::<f64>::new();
        let x = v(&mut g, &[1.0, 2.0]);
        let c = g.constant(Tensor::scalar(5.0));
        let _unused = g.sum(x);
        g.backward(c).unwrap();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = v(&mut g, &[1.0, 2.0]);
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    #[should_panic(expected = "shape mismatch in add: [3] vs [2]")]
    fn shape_mismatch_reports_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = v(&mut g, &[1.0, 2.0, 3.0]);
        let b = v(&mut g, &[1.0, 2.0]);
        g.add(a, b);
    }

    #[test]
    fn log_sigmoid_is_stable_for_large_inputs() {
        assert!((log_sigmoid(-800.0f64) + 800.0).abs() < 1e-9);
        assert!(log_sigmoid(800.0f64).abs() < 1e-12);
        assert!((log_sigmoid(0.0f64) + std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn pool_merges_trailing_row() {
        // 3x1 grid, window 2x1: rows 0..2 -> cell 0 would be rows 0,1 but
        // only one output row fits, so row 2 joins it.
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::from_f64(&[3, 1], &[1.0, 2.0, 6.0]));
        let y = g.pool_bins(x, (3, 1), (2, 1));
        assert_eq!(g.value(y).data(), &[3.0]);
    }

    #[test]
    fn conv_output_dims_halve_with_stride_two() {
        let spec = Conv2dSpec { stride: 2, pad: 1 };
        assert_eq!(conv_out_dims(64, 32, 3, 3, spec), (32, 16));
        assert_eq!(conv_out_dims(8, 4, 3, 3, spec), (4, 2));
    }
}
