//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and the ids of
//! its inputs. Node ids are assigned in creation order, so inputs always
//! precede their consumers and walking the node list backwards is a valid
//! reverse topological order.
//!
//! Broadcasting is never implicit. The only mixed-shape operations are
//! [`Graph::scale`] (constant scalar times tensor) and [`Graph::add_bias`]
//! (explicit row broadcast of a vector over a matrix).

use super::tensor::{axis_extents, axpy, dot, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatVec(Var, Var),
    VecMat(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    MeanAlong(Var, usize),
    Sum(Var),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Transpose(Var),
    Pick(Var, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Gradients of leaves created with [`Graph::param`] accumulate across
/// repeated [`Graph::backward`] calls until [`Graph::zero_grad`] is called.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    min_relu_margin: f64,
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            min_relu_margin: f64::INFINITY,
        }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Smallest |pre-activation| seen by any ReLU in this graph.
    ///
    /// Finite-difference checks are only meaningful when this exceeds the
    /// perturbation scale.
    pub fn min_relu_margin(&self) -> f64 {
        self.min_relu_margin
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Accumulated gradient of `v`; zeros if backward never reached it.
    pub fn grad(&self, v: Var) -> Tensor {
        let value = &self.nodes[v.0].value;
        match &self.grads[v.0] {
            Some(g) => Tensor::new(value.shape().to_vec(), g.clone()).expect("grad shape matches value"),
            None => Tensor::zeros(value.shape()),
        }
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn expect_rank(&self, op: &'static str, v: Var, rank: usize) -> Result<(), TensorError> {
        if self.value(v).rank() != rank {
            return Err(TensorError::Rank {
                op,
                expected: rank,
                shape: self.shape(v).to_vec(),
            });
        }
        Ok(())
    }

    /// `a[m×k] · b[k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.expect_rank("matmul", a, 2)?;
        self.expect_rank("matmul", b, 2)?;
        let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
        let (k2, n) = (self.shape(b)[0], self.shape(b)[1]);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                axpy(av[i * k + p], &bv[p * n..(p + 1) * n], row);
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    /// `a[m×k] · x[k]`
    pub fn matvec(&mut self, a: Var, x: Var) -> Result<Var, TensorError> {
        self.expect_rank("matvec", a, 2)?;
        self.expect_rank("matvec", x, 1)?;
        let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
        if self.shape(x)[0] != k {
            return Err(TensorError::ShapeMismatch {
                op: "matvec",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(x).to_vec(),
            });
        }
        let (av, xv) = (self.value(a).data(), self.value(x).data());
        let out: Vec<f64> = (0..m).map(|i| dot(&av[i * k..(i + 1) * k], xv)).collect();
        let t = Tensor::new(vec![m], out)?;
        let rg = self.any_grad(&[a, x]);
        Ok(self.push(t, Op::MatVec(a, x), rg))
    }

    /// `x[m]ᵀ · a[m×k]`, i.e. the `x`-weighted sum of the rows of `a`.
    pub fn vecmat(&mut self, x: Var, a: Var) -> Result<Var, TensorError> {
        self.expect_rank("vecmat", x, 1)?;
        self.expect_rank("vecmat", a, 2)?;
        let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
        if self.shape(x)[0] != m {
            return Err(TensorError::ShapeMismatch {
                op: "vecmat",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(a).to_vec(),
            });
        }
        let (xv, av) = (self.value(x).data(), self.value(a).data());
        let mut out = vec![0.0; k];
        for (i, xi) in xv.iter().enumerate() {
            axpy(*xi, &av[i * k..(i + 1) * k], &mut out);
        }
        let t = Tensor::new(vec![k], out)?;
        let rg = self.any_grad(&[x, a]);
        Ok(self.push(t, Op::VecMat(x, a), rg))
    }

    fn zip_with(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        node: Op,
    ) -> Result<Var, TensorError> {
        self.same_shape(op, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(t, node, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Constant scalar times tensor.
    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let data = self.value(a).data().iter().map(|x| x * s).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[a]);
        self.push(t, Op::Scale(a, s), rg)
    }

    /// Adds the vector `b[n]` to every row of `x[m×n]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, TensorError> {
        self.expect_rank("add_bias", x, 2)?;
        self.expect_rank("add_bias", b, 1)?;
        let n = self.shape(x)[1];
        if self.shape(b)[0] != n {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let bv = self.value(b).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(n) {
            for (r, bb) in row.iter_mut().zip(bv) {
                *r += bb;
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.any_grad(&[x, b]);
        Ok(self.push(t, Op::AddBias(x, b), rg))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, node: Op) -> Var {
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[a]);
        self.push(t, node, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let margin = self
            .value(a)
            .data()
            .iter()
            .fold(f64::INFINITY, |m, x| m.min(x.abs()));
        self.min_relu_margin = self.min_relu_margin.min(margin);
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let (outer, len, inner) = axis_extents("softmax", self.shape(x), axis)?;
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).fold(f64::NEG_INFINITY, |m, l| m.max(src[at(l)]));
                let mut total = 0.0;
                for l in 0..len {
                    let e = (src[at(l)] - max).exp();
                    out[at(l)] = e;
                    total += e;
                }
                for l in 0..len {
                    out[at(l)] /= total;
                }
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::Softmax(x, axis), rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let (outer, len, inner) = axis_extents("log_softmax", self.shape(x), axis)?;
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).fold(f64::NEG_INFINITY, |m, l| m.max(src[at(l)]));
                let total: f64 = (0..len).map(|l| (src[at(l)] - max).exp()).sum();
                let lse = max + total.ln();
                for l in 0..len {
                    out[at(l)] = src[at(l)] - lse;
                }
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::LogSoftmax(x, axis), rg))
    }

    /// Arithmetic mean along `axis`; the axis is removed from the shape.
    pub fn mean_along(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let (outer, len, inner) = axis_extents("mean_along", self.shape(x), axis)?;
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let inv = 1.0 / len as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut shape = self.shape(x).to_vec();
        shape.remove(axis);
        let t = Tensor::new(shape, out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::MeanAlong(x, axis), rg))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    /// Concatenates along `axis`. All other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or(TensorError::EmptyAxis {
            op: "concat",
            axis,
        })?;
        let base = self.shape(first).to_vec();
        axis_extents("concat", &base, axis)?;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let src = self.value(p).data();
                out.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(shape, out)?;
        let rg = self.any_grad(parts);
        Ok(self.push(t, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Half-open slice `[start, end)` along `axis`.
    pub fn slice(
        &mut self,
        x: Var,
        axis: usize,
        start: usize,
        end: usize,
    ) -> Result<Var, TensorError> {
        let (outer, len, inner) = axis_extents("slice", self.shape(x), axis)?;
        if start >= end || end > len {
            return Err(TensorError::Index {
                op: "slice",
                index: end,
                len,
            });
        }
        let width = end - start;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut shape = self.shape(x).to_vec();
        shape[axis] = width;
        let t = Tensor::new(shape, out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::Slice { x, axis, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(x).clone().reshaped(shape.to_vec())?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        self.expect_rank("transpose", x, 2)?;
        let (m, n) = (self.shape(x)[0], self.shape(x)[1]);
        let src = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let t = Tensor::new(vec![n, m], out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::Transpose(x), rg))
    }

    /// Element at flat `index`, as a scalar.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var, TensorError> {
        let len = self.value(x).numel();
        if index >= len {
            return Err(TensorError::Index {
                op: "pick",
                index,
                len,
            });
        }
        let v = self.value(x).data()[index];
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::scalar(v), Op::Pick(x, index), rg))
    }

    /// Propagates d`loss`/d(node) to every node and adds the result into the
    /// gradient buffers of `param` leaves. Calling it twice without
    /// [`Graph::zero_grad`] accumulates.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[id].take() else { continue };
            if let Op::Leaf = node.op {
                let slot = self.grads[id].get_or_insert_with(|| vec![0.0; g.len()]);
                axpy(1.0, &g, slot);
                continue;
            }
            self.backprop_node(id, &g, &mut adj);
        }
        Ok(())
    }

    fn backprop_node(&self, id: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[id].value;
        let wants = |v: Var| nodes[v.0].requires_grad;
        macro_rules! acc {
            ($v:expr) => {
                adjoint(adj, nodes[$v.0].value.numel(), $v.0)
            };
        }

        match &nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let n = nodes[b.0].value.shape()[1];
                if wants(a) {
                    let ga = acc!(a);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            ga[i * k + p] += dot(grow, &bv[p * n..(p + 1) * n]);
                        }
                    }
                }
                if wants(b) {
                    let gb = acc!(b);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            axpy(av[i * k + p], grow, &mut gb[p * n..(p + 1) * n]);
                        }
                    }
                }
            }
            Op::MatVec(a, x) => {
                let (a, x) = (*a, *x);
                let av = nodes[a.0].value.data();
                let xv = nodes[x.0].value.data();
                let k = xv.len();
                if wants(a) {
                    let ga = acc!(a);
                    for (i, gi) in g.iter().enumerate() {
                        axpy(*gi, xv, &mut ga[i * k..(i + 1) * k]);
                    }
                }
                if wants(x) {
                    let gx = acc!(x);
                    for (i, gi) in g.iter().enumerate() {
                        axpy(*gi, &av[i * k..(i + 1) * k], gx);
                    }
                }
            }
            Op::VecMat(x, a) => {
                let (x, a) = (*x, *a);
                let xv = nodes[x.0].value.data();
                let av = nodes[a.0].value.data();
                let k = g.len();
                if wants(x) {
                    let gx = acc!(x);
                    for (i, s) in gx.iter_mut().enumerate() {
                        *s += dot(&av[i * k..(i + 1) * k], g);
                    }
                }
                if wants(a) {
                    let ga = acc!(a);
                    for (i, xi) in xv.iter().enumerate() {
                        axpy(*xi, g, &mut ga[i * k..(i + 1) * k]);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        axpy(1.0, g, acc!(v));
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    axpy(1.0, g, acc!(*a));
                }
                if wants(*b) {
                    axpy(-1.0, g, acc!(*b));
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if wants(a) {
                    let bv = nodes[b.0].value.data();
                    let ga = acc!(a);
                    for ((s, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                        *s += gi * bi;
                    }
                }
                if wants(b) {
                    let av = nodes[a.0].value.data();
                    let gb = acc!(b);
                    for ((s, gi), ai) in gb.iter_mut().zip(g).zip(av) {
                        *s += gi * ai;
                    }
                }
            }
            Op::Scale(a, s) => {
                if wants(*a) {
                    axpy(*s, g, acc!(*a));
                }
            }
            Op::AddBias(x, b) => {
                let (x, b) = (*x, *b);
                if wants(x) {
                    axpy(1.0, g, acc!(x));
                }
                if wants(b) {
                    let gb = acc!(b);
                    let n = gb.len();
                    for row in g.chunks_exact(n) {
                        axpy(1.0, row, gb);
                    }
                }
            }
            Op::Tanh(a) => {
                if wants(*a) {
                    let ga = acc!(*a);
                    for ((s, gi), y) in ga.iter_mut().zip(g).zip(out.data()) {
                        *s += gi * (1.0 - y * y);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if wants(*a) {
                    let ga = acc!(*a);
                    for ((s, gi), y) in ga.iter_mut().zip(g).zip(out.data()) {
                        *s += gi * y * (1.0 - y);
                    }
                }
            }
            Op::Relu(a) => {
                if wants(*a) {
                    let xv = nodes[a.0].value.data();
                    let ga = acc!(*a);
                    for ((s, gi), x) in ga.iter_mut().zip(g).zip(xv) {
                        if *x > 0.0 {
                            *s += gi;
                        }
                    }
                }
            }
            Op::Softmax(x, axis) => {
                if wants(*x) {
                    let (outer, len, inner) =
                        axis_extents("softmax", nodes[x.0].value.shape(), *axis).unwrap();
                    let y = out.data();
                    let gx = acc!(*x);
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            let inner_prod: f64 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                            for l in 0..len {
                                gx[at(l)] += y[at(l)] * (g[at(l)] - inner_prod);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax(x, axis) => {
                if wants(*x) {
                    let (outer, len, inner) =
                        axis_extents("log_softmax", nodes[x.0].value.shape(), *axis).unwrap();
                    let y = out.data();
                    let gx = acc!(*x);
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            let total: f64 = (0..len).map(|l| g[at(l)]).sum();
                            for l in 0..len {
                                gx[at(l)] += g[at(l)] - y[at(l)].exp() * total;
                            }
                        }
                    }
                }
            }
            Op::MeanAlong(x, axis) => {
                if wants(*x) {
                    let (outer, len, inner) =
                        axis_extents("mean_along", nodes[x.0].value.shape(), *axis).unwrap();
                    let inv = 1.0 / len as f64;
                    let gx = acc!(*x);
                    for o in 0..outer {
                        let gsrc = &g[o * inner..(o + 1) * inner];
                        for l in 0..len {
                            let base = (o * len + l) * inner;
                            axpy(inv, gsrc, &mut gx[base..base + inner]);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    let gx = acc!(*x);
                    for s in gx.iter_mut() {
                        *s += g[0];
                    }
                }
            }
            Op::Concat(parts, axis) => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.shape()[*axis];
                    if wants(p) {
                        let gp = acc!(p);
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            axpy(1.0, src, &mut gp[o * len * inner..(o + 1) * len * inner]);
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                if wants(*x) {
                    let (outer, len, inner) =
                        axis_extents("slice", nodes[x.0].value.shape(), *axis).unwrap();
                    let width = out.shape()[*axis];
                    let gx = acc!(*x);
                    for o in 0..outer {
                        let dst = &mut gx[(o * len + start) * inner..(o * len + start + width) * inner];
                        axpy(1.0, &g[o * width * inner..(o + 1) * width * inner], dst);
                    }
                }
            }
            Op::Reshape(x) => {
                if wants(*x) {
                    axpy(1.0, g, acc!(*x));
                }
            }
            Op::Transpose(x) => {
                if wants(*x) {
                    let (m, n) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
                    let gx = acc!(*x);
                    for i in 0..m {
                        for j in 0..n {
                            gx[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Pick(x, index) => {
                if wants(*x) {
                    acc!(*x)[*index] += g[0];
                }
            }
        }
    }
}

fn adjoint(adj: &mut [Option<Vec<f64>>], len: usize, id: usize) -> &mut Vec<f64> {
    adj[id].get_or_insert_with(|| vec![0.0; len])
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
