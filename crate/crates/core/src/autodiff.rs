//! Reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every forward operation as a node holding its value.
//! Parameters live in a [`ParamStore`] that the graph borrows; parameter nodes
//! read their value from the store so no weights are copied per forward pass.
//! [`Graph::backward`] walks the nodes in reverse creation order and returns a
//! [`Gradients`] table keyed by [`ParamId`]. Only nodes that can reach a
//! trainable parameter carry gradients, so frozen sub-networks cost a forward
//! pass and nothing more.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_into, matmul_tn_acc, transpose, Tensor};

/// Population-variance epsilon used by every layer norm.
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Role of a parameter in the staged freeze policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Numerical,
    VisualNorm,
    VisualOther,
    Gate,
}

impl ParamGroup {
    pub fn is_visual(self) -> bool {
        matches!(self, ParamGroup::VisualNorm | ParamGroup::VisualOther)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Numerical => "numerical",
            ParamGroup::VisualNorm => "visual_norm",
            ParamGroup::VisualOther => "visual_other",
            ParamGroup::Gate => "gate",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub group: ParamGroup,
    pub trainable: bool,
}

/// Owns every named parameter of a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            grad,
            group,
            trainable: true,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Marks exactly the parameters whose group is listed as trainable.
    pub fn set_trainable_groups(&mut self, groups: &[ParamGroup]) {
        for p in &mut self.params {
            p.trainable = groups.contains(&p.group);
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).count()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds `scale * grads` into the gradient slot of each trainable parameter.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) {
        for (p, g) in self.params.iter_mut().zip(&grads.by_param) {
            if let (true, Some(g)) = (p.trainable, g) {
                for (acc, d) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *acc += scale * d;
                }
            }
        }
    }

    /// Snapshot of all parameter values, in id order.
    pub fn values(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore_values(&mut self, values: &[Tensor]) {
        for (p, v) in self.params.iter_mut().zip(values) {
            p.value = v.clone();
        }
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Scalar,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Scale(Var, f64),
    AddScalar(Var),
    Transpose(Var),
    Reshape(Var),
    Slice { x: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Gather { x: Var, index: Vec<usize> },
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    Gelu(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Mse(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-parameter gradients produced by one backward pass.
#[derive(Clone, Debug)]
pub struct Gradients {
    by_param: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(id.0).and_then(|g| g.as_ref())
    }
}

/// A recorded forward computation over a borrowed parameter store.
pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match self.nodes[v.0].op {
            Op::Param(id) => &self.store.get(id).value,
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let trainable = self.store.get(id).trainable;
        self.push(Tensor::zeros(&[0]), Op::Param(id), trainable)
    }

    /// Value copy that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let out = matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() == vb.shape() {
            Ok(Bcast::Same)
        } else if vb.numel() == 1 {
            Ok(Bcast::Scalar)
        } else if vb.numel() == va.last_dim() && va.numel() % vb.numel() == 0 {
            Ok(Bcast::Row)
        } else {
            Err(self.mismatch(op, a, b))
        }
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, Bcast)> {
        let mode = self.bcast(op, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let bd = vb.data();
        let n = bd.len();
        let data: Vec<f64> = match mode {
            Bcast::Same => va.data().iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Scalar => va.data().iter().map(|&x| f(x, bd[0])).collect(),
            Bcast::Row => va.data().iter().enumerate().map(|(i, &x)| f(x, bd[i % n])).collect(),
        };
        Ok((Tensor::new(va.shape().to_vec(), data)?, mode))
    }

    /// Elementwise sum; `b` may also be a scalar or a row broadcast over the last axis.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.order_commutative(a, b);
        let (value, mode) = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(value, Op::Add(a, b, mode), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, mode) = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(value, Op::Sub(a, b, mode), rg))
    }

    /// Elementwise product with the same broadcasting rules as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.order_commutative(a, b);
        let (value, mode) = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(value, Op::Mul(a, b, mode), rg))
    }

    fn order_commutative(&self, a: Var, b: Var) -> (Var, Var) {
        if self.value(a).numel() < self.value(b).numel() {
            (b, a)
        } else {
            (a, b)
        }
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| e * factor).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.requires_grad(x);
        self.push(value, Op::Scale(x, factor), rg)
    }

    pub fn add_scalar(&mut self, x: Var, offset: f64) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| e + offset).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.requires_grad(x);
        self.push(value, Op::AddScalar(x), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transposed()?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape.to_vec())?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Contiguous slice of a 2-D tensor along `axis` (0 = rows, 1 = columns).
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        let (r, c) = v.dims2()?;
        let extent = if axis == 0 { r } else { c };
        if axis > 1 || start + len > extent || len == 0 {
            return Err(Error::ShapeMismatch {
                op: "slice",
                left: v.shape().to_vec(),
                right: vec![axis, start, len],
            });
        }
        let value = if axis == 0 {
            Tensor::new(vec![len, c], v.data()[start * c..(start + len) * c].to_vec())?
        } else {
            let mut data = Vec::with_capacity(r * len);
            for i in 0..r {
                data.extend_from_slice(&v.data()[i * c + start..i * c + start + len]);
            }
            Tensor::new(vec![r, len], data)?
        };
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Slice { x, axis, start }, rg))
    }

    /// Concatenation of 2-D tensors along `axis`.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::ShapeMismatch {
                op: "concat",
                left: vec![parts.len()],
                right: vec![axis],
            });
        }
        let (r0, c0) = self.value(parts[0]).dims2()?;
        let mut rows = 0;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if (axis == 0 && c != c0) || (axis == 1 && r != r0) {
                return Err(self.mismatch("concat", parts[0], p));
            }
            rows += r;
            cols += c;
        }
        let value = if axis == 0 {
            let mut data = Vec::with_capacity(rows * c0);
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            Tensor::new(vec![rows, c0], data)?
        } else {
            let mut data = Vec::with_capacity(r0 * cols);
            for i in 0..r0 {
                for &p in parts {
                    let (_, c) = self.value(p).dims2()?;
                    data.extend_from_slice(&self.value(p).data()[i * c..(i + 1) * c]);
                }
            }
            Tensor::new(vec![r0, cols], data)?
        };
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `out[i] = x.flat[index[i]]`, reshaped to `shape`. Indices may repeat.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if index.iter().any(|&i| i >= v.numel()) || shape.iter().product::<usize>() != index.len() {
            return Err(Error::ShapeMismatch {
                op: "gather",
                left: v.shape().to_vec(),
                right: shape.to_vec(),
            });
        }
        let data = index.iter().map(|&i| v.data()[i]).collect();
        let value = Tensor::new(shape.to_vec(), data)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Gather { x, index }, rg))
    }

    /// Row gather from a 2-D tensor.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (_, c) = self.value(x).dims2()?;
        let index = rows.iter().flat_map(|&r| (r * c)..(r * c + c)).collect();
        self.gather(x, index, &[rows.len(), c])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = v.last_dim();
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for e in row.iter_mut() {
                *e = (*e - max).exp();
                total += *e;
            }
            for e in row.iter_mut() {
                *e /= total;
            }
        }
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.requires_grad(x);
        self.push(value, Op::Softmax(x), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| gelu(e)).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.requires_grad(x);
        self.push(value, Op::Gelu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| sigmoid(e)).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.requires_grad(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    /// Layer norm over the last axis with learnable `gamma`/`beta` of that length.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let v = self.value(x);
        let n = v.last_dim();
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(self.mismatch("layer_norm", x, gamma));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = v.numel() / n;
        let mut xhat = vec![0.0; v.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; v.numel()];
        for (r, row) in v.data().chunks(n).enumerate() {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = inv;
            for j in 0..n {
                let h = (row[j] - mean) * inv;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.requires_grad(x) || self.requires_grad(gamma) || self.requires_grad(beta);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Mean squared error between two tensors of identical shape.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(self.mismatch("mse", pred, target));
        }
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let s = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
        let rg = self.requires_grad(pred) || self.requires_grad(target);
        Ok(self.push(Tensor::scalar(s), Op::Mse(pred, target), rg))
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::ShapeMismatch {
            op,
            left: self.shape(a).to_vec(),
            right: self.shape(b).to_vec(),
        }
    }

    /// Gradients of the scalar `loss` with respect to every trainable parameter
    /// reachable from it. Frozen parameters get no entry.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NotScalarLoss(shape.to_vec()));
        }
        let mut by_param: Vec<Option<Tensor>> = vec![None; self.store.len()];
        if !self.requires_grad(loss) {
            return Ok(Gradients { by_param });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    let slot = &mut by_param[id.0];
                    match slot {
                        Some(t) => t.data_mut().iter_mut().zip(&gy).for_each(|(a, d)| *a += d),
                        None => *slot = Some(Tensor::new(self.store.get(*id).value.shape().to_vec(), gy)?),
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.value(*a).dims2()?;
                    let (_, n) = self.value(*b).dims2()?;
                    if self.requires_grad(*a) {
                        let bt = transpose(self.value(*b).data(), k, n);
                        let mut da = vec![0.0; m * k];
                        matmul_into(&gy, &bt, &mut da, m, n, k);
                        self.acc(&mut grads, *a, da);
                    }
                    if self.requires_grad(*b) {
                        let mut db = vec![0.0; k * n];
                        matmul_tn_acc(self.value(*a).data(), &gy, &mut db, m, k, n);
                        self.acc(&mut grads, *b, db);
                    }
                }
                Op::Add(a, b, mode) => {
                    if self.requires_grad(*b) {
                        let db = self.reduce_bcast(&gy, *b, *mode, |g, _| g);
                        self.acc(&mut grads, *b, db);
                    }
                    self.acc(&mut grads, *a, gy);
                }
                Op::Sub(a, b, mode) => {
                    if self.requires_grad(*b) {
                        let db = self.reduce_bcast(&gy, *b, *mode, |g, _| -g);
                        self.acc(&mut grads, *b, db);
                    }
                    self.acc(&mut grads, *a, gy);
                }
                Op::Mul(a, b, mode) => {
                    if self.requires_grad(*b) {
                        let av = self.value(*a).data();
                        let db = self.reduce_bcast(&gy, *b, *mode, |g, idx| g * av[idx]);
                        self.acc(&mut grads, *b, db);
                    }
                    if self.requires_grad(*a) {
                        let bd = self.value(*b).data();
                        let n = bd.len();
                        let da = gy
                            .iter()
                            .enumerate()
                            .map(|(idx, g)| {
                                g * match mode {
                                    Bcast::Same => bd[idx],
                                    Bcast::Scalar => bd[0],
                                    Bcast::Row => bd[idx % n],
                                }
                            })
                            .collect();
                        self.acc(&mut grads, *a, da);
                    }
                }
                Op::Scale(x, f) => {
                    let dx = gy.iter().map(|g| g * f).collect();
                    self.acc(&mut grads, *x, dx);
                }
                Op::AddScalar(x) | Op::Reshape(x) => self.acc(&mut grads, *x, gy),
                Op::Transpose(x) => {
                    let (r, c) = self.value(*x).dims2()?;
                    self.acc(&mut grads, *x, transpose(&gy, c, r));
                }
                Op::Slice { x, axis, start } => {
                    if self.requires_grad(*x) {
                        let (r, c) = self.value(*x).dims2()?;
                        let mut dx = vec![0.0; r * c];
                        if *axis == 0 {
                            dx[start * c..start * c + gy.len()].copy_from_slice(&gy);
                        } else {
                            let len = gy.len() / r;
                            for i in 0..r {
                                dx[i * c + start..i * c + start + len].copy_from_slice(&gy[i * len..(i + 1) * len]);
                            }
                        }
                        self.acc(&mut grads, *x, dx);
                    }
                }
                Op::Concat { parts, axis } => {
                    let (rows, cols) = node.value.dims2()?;
                    let mut offset = 0;
                    for &p in parts {
                        let (r, c) = self.value(p).dims2()?;
                        if self.requires_grad(p) {
                            let dp = if *axis == 0 {
                                gy[offset * cols..(offset + r) * cols].to_vec()
                            } else {
                                let mut d = Vec::with_capacity(r * c);
                                for i in 0..rows {
                                    d.extend_from_slice(&gy[i * cols + offset..i * cols + offset + c]);
                                }
                                d
                            };
                            self.acc(&mut grads, p, dp);
                        }
                        offset += if *axis == 0 { r } else { c };
                    }
                }
                Op::Gather { x, index } => {
                    if self.requires_grad(*x) {
                        let mut dx = vec![0.0; self.value(*x).numel()];
                        for (&src, g) in index.iter().zip(&gy) {
                            dx[src] += g;
                        }
                        self.acc(&mut grads, *x, dx);
                    }
                }
                Op::Sum(x) => {
                    let n = self.value(*x).numel();
                    self.acc(&mut grads, *x, vec![gy[0]; n]);
                }
                Op::Mean(x) => {
                    let n = self.value(*x).numel();
                    self.acc(&mut grads, *x, vec![gy[0] / n as f64; n]);
                }
                Op::Softmax(x) => {
                    let y = node.value.data();
                    let n = node.value.last_dim();
                    let mut dx = vec![0.0; y.len()];
                    for ((dr, yr), gr) in dx.chunks_mut(n).zip(y.chunks(n)).zip(gy.chunks(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    self.acc(&mut grads, *x, dx);
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x).data();
                    let dx = xv.iter().zip(&gy).map(|(&e, g)| g * gelu_grad(e)).collect();
                    self.acc(&mut grads, *x, dx);
                }
                Op::Sigmoid(x) => {
                    let y = node.value.data();
                    let dx = y.iter().zip(&gy).map(|(s, g)| g * s * (1.0 - s)).collect();
                    self.acc(&mut grads, *x, dx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let n = self.value(*gamma).numel();
                    if self.requires_grad(*gamma) || self.requires_grad(*beta) {
                        let mut dg = vec![0.0; n];
                        let mut db = vec![0.0; n];
                        for (hr, gr) in xhat.chunks(n).zip(gy.chunks(n)) {
                            for j in 0..n {
                                dg[j] += gr[j] * hr[j];
                                db[j] += gr[j];
                            }
                        }
                        self.acc(&mut grads, *gamma, dg);
                        self.acc(&mut grads, *beta, db);
                    }
                    if self.requires_grad(*x) {
                        let gv = self.value(*gamma).data();
                        let nf = n as f64;
                        let mut dx = vec![0.0; gy.len()];
                        for (r, ((dr, hr), gr)) in dx.chunks_mut(n).zip(xhat.chunks(n)).zip(gy.chunks(n)).enumerate() {
                            let mut sum_dh = 0.0;
                            let mut sum_dh_h = 0.0;
                            for j in 0..n {
                                let dh = gr[j] * gv[j];
                                sum_dh += dh;
                                sum_dh_h += dh * hr[j];
                            }
                            let inv = inv_std[r];
                            for j in 0..n {
                                let dh = gr[j] * gv[j];
                                dr[j] = inv / nf * (nf * dh - sum_dh - hr[j] * sum_dh_h);
                            }
                        }
                        self.acc(&mut grads, *x, dx);
                    }
                }
                Op::Mse(p, t) => {
                    let (pv, tv) = (self.value(*p).data(), self.value(*t).data());
                    let k = 2.0 * gy[0] / pv.len() as f64;
                    let dp: Vec<f64> = pv.iter().zip(tv).map(|(a, b)| k * (a - b)).collect();
                    if self.requires_grad(*t) {
                        self.acc(&mut grads, *t, dp.iter().map(|d| -d).collect());
                    }
                    self.acc(&mut grads, *p, dp);
                }
            }
        }
        Ok(Gradients { by_param })
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
            slot => *slot = Some(delta),
        }
    }

    /// Reduces an output-shaped gradient onto a broadcast operand.
    fn reduce_bcast(&self, gy: &[f64], b: Var, mode: Bcast, f: impl Fn(f64, usize) -> f64) -> Vec<f64> {
        let n = self.value(b).numel();
        match mode {
            Bcast::Same => gy.iter().enumerate().map(|(i, &g)| f(g, i)).collect(),
            Bcast::Scalar => vec![gy.iter().enumerate().map(|(i, &g)| f(g, i)).sum()],
            Bcast::Row => {
                let mut out = vec![0.0; n];
                for (i, &g) in gy.iter().enumerate() {
                    out[i % n] += f(g, i);
                }
                out
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
