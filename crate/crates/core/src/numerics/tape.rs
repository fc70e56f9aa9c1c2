//! Reverse-mode differentiation over a linear record of tensor operations.
//!
//! Nodes are appended in evaluation order, so every node's inputs precede
//! it and a single reverse sweep visits each node once.

use std::borrow::Cow;

use rand::Rng;

use super::ops::{self, Activation, ConvGeometry, Mode, KERNEL_VOLUME};
use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param,
    Affine { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Act(Var, Activation),
    Dropout { x: Var, mask: Vec<f64> },
    Concat { parts: Vec<Var>, axis: usize },
    GatherRows { table: Var, rows: Vec<usize> },
    Take { x: Var, indices: Vec<usize> },
    Reshape(Var),
    Conv3d { x: Var, w: Var, b: Var, geom: ConvGeometry },
    MeanRows { x: Var, cols: usize },
    SquaredError { pred: Var, target: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    SumSquares(Var),
    Sum(Var),
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param => "param",
            Op::Affine { .. } => "affine",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Act(..) => "activation",
            Op::Dropout { .. } => "dropout",
            Op::Concat { .. } => "concat",
            Op::GatherRows { .. } => "gather_rows",
            Op::Take { .. } => "take",
            Op::Reshape(..) => "reshape",
            Op::Conv3d { .. } => "conv3d",
            Op::MeanRows { .. } => "mean_rows",
            Op::SquaredError { .. } => "squared_error",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::SumSquares(..) => "sum_squares",
            Op::Sum(..) => "sum",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Input | Op::Param => vec![],
            Op::Affine { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Act(a, _) | Op::Reshape(a) | Op::SumSquares(a) | Op::Sum(a) => {
                vec![*a]
            }
            Op::Dropout { x, .. } | Op::Take { x, .. } | Op::MeanRows { x, .. } => vec![*x],
            Op::Concat { parts, .. } => parts.clone(),
            Op::GatherRows { table, .. } => vec![*table],
            Op::Conv3d { x, w, b, .. } => vec![*x, *w, *b],
            Op::SquaredError { pred, target } => vec![*pred, *target],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// One entry of the recorded computation, for inspection.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TapeEntry {
    pub kind: &'static str,
    pub inputs: Vec<Var>,
    pub output: Var,
}

/// Parameter leaves borrow their stores for the tape's lifetime `'a`.
#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    params: Vec<(u64, ParamId, Var)>,
}

impl<'a> Tape<'a> {
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

    pub fn entries(&self) -> Vec<TapeEntry> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| TapeEntry {
                kind: n.op.kind(),
                inputs: n.op.inputs(),
                output: Var(i),
            })
            .collect()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.push_cow(Cow::Owned(value), op)
    }

    fn push_cow(&mut self, value: Cow<'a, Tensor>, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Input => false,
            Op::Param => true,
            other => other.inputs().iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant leaf; receives no gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    /// Trainable leaf holding a copy of a stored parameter. Registering the
    /// same parameter twice returns the existing node.
    pub fn param(&mut self, store: &'a ParamStore, id: ParamId) -> Var {
        let uid = store.uid();
        if let Some(&(_, _, v)) = self.params.iter().find(|(s, p, _)| *s == uid && *p == id) {
            return v;
        }
        let v = self.push_cow(Cow::Borrowed(store.get(id)), Op::Param);
        self.params.push((uid, id, v));
        v
    }

    /// Stored parameter used as a constant: borrowed, never differentiated.
    pub fn frozen(&mut self, store: &'a ParamStore, id: ParamId) -> Var {
        self.push_cow(Cow::Borrowed(store.get(id)), Op::Input)
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let value = ops::affine(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        Ok(self.push(value, Op::Affine { x, w, b }))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("shapes checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let v = ops::activation(self.value(x), kind);
        self.push(v, Op::Act(x, kind))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        ops::check_dropout_p(p)?;
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let mask = ops::dropout_mask(self.value(x).len(), p, rng);
        let t = self.value(x);
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Dropout { x, mask }))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|v| self.value(*v)).collect();
        let value = ops::concat(&tensors, axis)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Concatenation along the last axis.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let axis = parts
            .first()
            .map(|v| self.value(*v).shape().len().saturating_sub(1))
            .unwrap_or(0);
        self.concat(parts, axis)
    }

    /// Selects rows of a `[N, d]` table.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(Error::dim("gather_rows", format!("table shape {:?}", t.shape())));
        }
        let (n, d) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Index(format!("row {bad} of a {n}-row table")));
        }
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(&t.data()[r * d..(r + 1) * d]);
        }
        let value = Tensor::new(vec![rows.len(), d], data)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                table,
                rows: rows.to_vec(),
            },
        ))
    }

    /// `out[i] = x.flat[indices[i]]`, reshaped to `shape`.
    pub fn take(&mut self, x: Var, indices: &[usize], shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.len()) {
            return Err(Error::Index(format!("flat index {bad} of {} values", t.len())));
        }
        let data = indices.iter().map(|&i| t.data()[i]).collect();
        let value = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(
            value,
            Op::Take {
                x,
                indices: indices.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeometry) -> Result<Var> {
        let value = ops::conv3d(self.value(x), self.value(w), self.value(b), geom)?;
        Ok(self.push(value, Op::Conv3d { x, w, b, geom }))
    }

    /// Means over consecutive groups of `cols` values → shape `[len / cols]`.
    pub fn mean_rows(&mut self, x: Var, cols: usize) -> Result<Var> {
        let t = self.value(x);
        if cols == 0 || t.len() % cols != 0 {
            return Err(Error::dim(
                "mean_rows",
                format!("{} values do not split into rows of {}", t.len(), cols),
            ));
        }
        let data: Vec<f64> = t
            .data()
            .chunks(cols)
            .map(|c| c.iter().sum::<f64>() / cols as f64)
            .collect();
        let value = Tensor::vector(data);
        Ok(self.push(value, Op::MeanRows { x, cols }))
    }

    /// Scalar Σ (pred − target)².
    pub fn squared_error(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("squared_error", pred, target)?;
        let s = ops::squared_error(self.value(pred).data(), self.value(target).data());
        Ok(self.push(Tensor::scalar(s), Op::SquaredError { pred, target }))
    }

    /// Mean over rows of −log softmax(logits[row])[targets[row]].
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (rows, c) = t.as_rows();
        if rows != targets.len() {
            return Err(Error::dim(
                "cross_entropy",
                format!("{} logit rows for {} targets", rows, targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= c) {
            return Err(Error::Label(format!("class {bad} out of range for {c} logits")));
        }
        let mut probs = Vec::with_capacity(rows * c);
        let mut total = 0.0;
        for (r, &y) in targets.iter().enumerate() {
            let row = t.row(r);
            let lse = ops::log_sum_exp(row);
            total += lse - row[y];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let n = rows.max(1) as f64;
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        self.push(Tensor::scalar(s), Op::SumSquares(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Adjoints> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);
        let mut visited = 0;
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            visited += 1;
            self.propagate(node, &g, &mut adj);
            adj[i] = Some(g);
        }
        Ok(Adjoints { adj, visited })
    }

    /// Backward sweep followed by routing leaf adjoints to `store`.
    pub fn gradients(&self, loss: Var, store: &ParamStore) -> Result<Gradients> {
        Ok(self.backward(loss)?.take_gradients(self, store))
    }

    /// Loss value, plus gradients for `store` when `want_grad` is set.
    pub fn evaluate(&self, loss: Var, store: &ParamStore, want_grad: bool) -> Result<(f64, Option<Gradients>)> {
        let value = self.value(loss).item();
        let grads = if want_grad {
            Some(self.gradients(loss, store)?)
        } else {
            None
        };
        Ok((value, grads))
    }

    fn propagate(&self, node: &Node<'_>, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        // Allocates the adjoint buffer of `v` on first use.
        fn slot<'b>(tape: &Tape<'_>, adj: &'b mut [Option<Vec<f64>>], v: Var) -> Option<&'b mut Vec<f64>> {
            if !tape.nodes[v.0].needs_grad {
                return None;
            }
            let len = tape.nodes[v.0].value.len();
            Some(adj[v.0].get_or_insert_with(|| vec![0.0; len]))
        }

        match &node.op {
            Op::Input | Op::Param => {}
            Op::Affine { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (rows, n) = xv.as_rows();
                let m = wv.shape()[0];
                if let Some(dx) = slot(self, adj, *x) {
                    gemm(rows, m, n, g, false, wv.data(), false, 1.0, dx);
                }
                if let Some(dw) = slot(self, adj, *w) {
                    gemm(m, rows, n, g, true, xv.data(), false, 1.0, dw);
                }
                if let Some(b) = b {
                    if let Some(db) = slot(self, adj, *b) {
                        for row in g.chunks(m) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = slot(self, adj, v) {
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = slot(self, adj, *a) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if let Some(d) = slot(self, adj, *b) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(d) = slot(self, adj, *a) {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(vb) {
                        *d += g * y;
                    }
                }
                if let Some(d) = slot(self, adj, *b) {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(va) {
                        *d += g * x;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(d) = slot(self, adj, *a) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += c * g);
                }
            }
            Op::Act(x, kind) => {
                let y = node.value.data();
                if let Some(d) = slot(self, adj, *x) {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                        *d += g * kind.derivative_from_output(*y);
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(d) = slot(self, adj, *x) {
                    for ((d, g), m) in d.iter_mut().zip(g).zip(mask) {
                        *d += g * m;
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let chunk = self.value(*p).shape()[*axis] * inner;
                    if let Some(d) = slot(self, adj, *p) {
                        for o in 0..outer {
                            let src = &g[o * row + offset..o * row + offset + chunk];
                            for (d, s) in d[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += chunk;
                }
            }
            Op::GatherRows { table, rows } => {
                let d = self.value(*table).shape()[1];
                if let Some(dt) = slot(self, adj, *table) {
                    for (i, &r) in rows.iter().enumerate() {
                        for (a, b) in dt[r * d..(r + 1) * d].iter_mut().zip(&g[i * d..(i + 1) * d]) {
                            *a += b;
                        }
                    }
                }
            }
            Op::Take { x, indices } => {
                if let Some(d) = slot(self, adj, *x) {
                    for (&i, gv) in indices.iter().zip(g) {
                        d[i] += gv;
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(d) = slot(self, adj, *x) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
            }
            Op::Conv3d { x, w, b, geom } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let k = wv.shape()[0];
                let v = geom.voxels();
                let n = xv.shape()[0];
                let mut patches = vec![0.0; v * KERNEL_VOLUME];
                let mut dpatches = vec![0.0; v * KERNEL_VOLUME];
                let want_x = self.needs(*x);
                let want_w = self.needs(*w);
                for f in 0..n {
                    let gf = &g[f * k * v..(f + 1) * k * v];
                    if want_w {
                        geom.im2col(&xv.data()[f * v..(f + 1) * v], &mut patches);
                        let dw = slot(self, adj, *w).expect("needs grad");
                        gemm(k, v, KERNEL_VOLUME, gf, false, &patches, false, 1.0, dw);
                    }
                    if want_x {
                        gemm(v, k, KERNEL_VOLUME, gf, true, wv.data(), false, 0.0, &mut dpatches);
                        let dx = slot(self, adj, *x).expect("needs grad");
                        geom.col2im(&dpatches, &mut dx[f * v..(f + 1) * v]);
                    }
                }
                if let Some(db) = slot(self, adj, *b) {
                    for (i, row) in g.chunks(v).enumerate() {
                        db[i % k] += row.iter().sum::<f64>();
                    }
                }
            }
            Op::MeanRows { x, cols } => {
                if let Some(d) = slot(self, adj, *x) {
                    let inv = 1.0 / *cols as f64;
                    for (chunk, gv) in d.chunks_mut(*cols).zip(g) {
                        chunk.iter_mut().for_each(|c| *c += gv * inv);
                    }
                }
            }
            Op::SquaredError { pred, target } => {
                let (p, t) = (self.value(*pred).data(), self.value(*target).data());
                let s = 2.0 * g[0];
                if let Some(d) = slot(self, adj, *pred) {
                    for ((d, p), t) in d.iter_mut().zip(p).zip(t) {
                        *d += s * (p - t);
                    }
                }
                if let Some(d) = slot(self, adj, *target) {
                    for ((d, p), t) in d.iter_mut().zip(p).zip(t) {
                        *d -= s * (p - t);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (_, c) = self.value(*logits).as_rows();
                let s = g[0] / targets.len().max(1) as f64;
                if let Some(d) = slot(self, adj, *logits) {
                    for (r, &y) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            d[r * c + j] += s * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
            Op::SumSquares(x) => {
                let xv = self.value(*x).data();
                if let Some(d) = slot(self, adj, *x) {
                    for (d, x) in d.iter_mut().zip(xv) {
                        *d += 2.0 * x * g[0];
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(d) = slot(self, adj, *x) {
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
        }
    }
}

/// Adjoints of every node after a reverse sweep.
#[derive(Debug)]
pub struct Adjoints {
    adj: Vec<Option<Vec<f64>>>,
    visited: usize,
}

impl Adjoints {
    /// Number of nodes the sweep propagated through.
    pub fn visited(&self) -> usize {
        self.visited
    }

    pub fn of(&self, v: Var) -> Option<&[f64]> {
        self.adj[v.0].as_deref()
    }

    /// Gradients for every parameter of `store`; zeros where the parameter
    /// was not used on the tape.
    pub fn for_store(&self, tape: &Tape<'_>, store: &ParamStore) -> Gradients {
        let mut grads = Gradients::zeros_like(store);
        for &(uid, id, v) in &tape.params {
            if uid == store.uid() {
                if let Some(g) = self.of(v) {
                    grads.accumulate(id, g);
                }
            }
        }
        grads
    }

    /// Like [`for_store`](Self::for_store) but moves the adjoint buffers
    /// out instead of copying them; a second call for the same store sees
    /// zeros.
    pub fn take_gradients(&mut self, tape: &Tape<'_>, store: &ParamStore) -> Gradients {
        let mut slots: Vec<Option<Vec<f64>>> = vec![None; store.len()];
        for &(uid, id, v) in &tape.params {
            if uid == store.uid() {
                slots[id.index()] = self.adj[v.0].take();
            }
        }
        Gradients::from_slots(store, slots)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn square_gradient() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(3.0));
        let mut tape = Tape::new();
        let xv = tape.param(&store, x);
        let y = tape.mul(xv, xv).unwrap();
        let g = tape.gradients(y, &store).unwrap();
        assert_eq!(g.get(x).item(), 6.0);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(0.0));
        let mut tape = Tape::new();
        let xv = tape.param(&store, x);
        let y = tape.sigmoid(xv);
        assert_eq!(tape.gradients(y, &store).unwrap().get(x).item(), 0.25);
    }

    #[test]
    fn unused_params_get_zeros() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::vector(vec![1.0, 2.0]));
        let b = store.add("b", Tensor::vector(vec![5.0, 5.0, 5.0]));
        let mut tape = Tape::new();
        let av = tape.param(&store, a);
        let l = tape.sum_squares(av);
        let g = tape.gradients(l, &store).unwrap();
        assert_eq!(g.get(a).data(), &[2.0, 4.0]);
        assert_eq!(g.get(b).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn entries_are_topological() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::identity(3));
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![1.0, -2.0, 0.5]));
        let wv = tape.param(&store, w);
        let h = tape.affine(x, wv, None).unwrap();
        let h = tape.tanh(h);
        let l = tape.sum_squares(h);
        for e in tape.entries() {
            assert!(e.inputs.iter().all(|i| i.index() < e.output.index()));
        }
        let adj = tape.backward(l).unwrap();
        // input node carries no gradient; the other four are each visited once
        assert_eq!(adj.visited(), 4);
    }

    #[test]
    fn param_registered_once() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(2.0));
        let mut tape = Tape::new();
        let a = tape.param(&store, w);
        let b = tape.param(&store, w);
        assert_eq!(a, b);
        let y = tape.mul(a, b).unwrap();
        assert_eq!(tape.gradients(y, &store).unwrap().get(w).item(), 4.0);
    }

    #[test]
    fn gradients_routed_per_store() {
        let mut s1 = ParamStore::new();
        let mut s2 = ParamStore::new();
        let a = s1.add("a", Tensor::scalar(2.0));
        let b = s2.add("b", Tensor::scalar(3.0));
        let mut tape = Tape::new();
        let av = tape.param(&s1, a);
        let bv = tape.param(&s2, b);
        let y = tape.mul(av, bv).unwrap();
        let adj = tape.backward(y).unwrap();
        assert_eq!(adj.for_store(&tape, &s1).get(a).item(), 3.0);
        assert_eq!(adj.for_store(&tape, &s2).get(b).item(), 2.0);
    }

    #[test]
    fn cross_entropy_batch_gradient() {
        let mut store = ParamStore::new();
        let z = store.add("z", Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let mut tape = Tape::new();
        let zv = tape.param(&store, z);
        let l = tape.cross_entropy(zv, &[0, 2]).unwrap();
        assert_abs_diff_eq!(tape.value(l).item(), 3f64.ln(), epsilon = 1e-12);
        let g = tape.gradients(l, &store).unwrap();
        let third = 1.0 / 3.0;
        let expect = [third - 1.0, third, third, third, third, third - 1.0].map(|v| v / 2.0);
        for (a, b) in g.get(z).data().iter().zip(expect) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
    }
}
