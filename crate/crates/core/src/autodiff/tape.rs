//! Wengert-list tape for reverse-mode differentiation.
//!
//! Operations append nodes in execution order, so every node's inputs have
//! smaller indices than the node itself. Backward walks the list once from
//! the loss toward the leaves.

use std::collections::BTreeMap;

use super::kernels;
use super::optim::ParamGroup;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Location of a parameter tensor: group index and position inside the group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamKey {
    pub group: usize,
    pub index: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamKey),
    MatMul(Var, Var),
    Transpose(Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Concat(Vec<Var>),
    Relu(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Detach(Var),
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    bound: BTreeMap<ParamKey, Var>,
}

fn dims2(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::Dimension {
            op,
            left: shape.to_vec(),
            right: vec![0, 0],
        }),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// Records a leaf holding a copy of `t`; it is differentiable iff `t.requires_grad()`.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Input, t.requires_grad())
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.input(&t))
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> Var {
        let n = shape.iter().product();
        self.push(shape, vec![0.0; n], Op::Input, false)
    }

    /// Binds a parameter tensor. Binding the same key twice returns the same node,
    /// so every use of a shared parameter feeds one gradient slot.
    pub fn param(&mut self, key: ParamKey, t: &Tensor) -> Var {
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let v = self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Param(key),
            t.requires_grad(),
        );
        self.bound.insert(key, v);
        v
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        match self.node(v).value.as_slice() {
            [x] => Ok(*x),
            other => Err(Error::usage(format!(
                "expected a scalar, node has {} elements",
                other.len()
            ))),
        }
    }

    /// Accumulated gradient of a node over every backward call so far.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Direct inputs of a node, in argument order.
    pub fn inputs_of(&self, v: Var) -> Vec<Var> {
        match &self.node(v).op {
            Op::Input | Op::Param(_) => Vec::new(),
            Op::MatMul(a, b) | Op::AddBias(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Transpose(a) | Op::Scale(a, _) | Op::Sum(a) | Op::Relu(a) | Op::Detach(a) => {
                vec![*a]
            }
            Op::Concat(parts) => parts.clone(),
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
        }
    }

    pub fn is_detach(&self, v: Var) -> bool {
        matches!(self.node(v).op, Op::Detach(_))
    }

    /// The parameter a node was bound from, if it is a parameter leaf.
    pub fn param_key(&self, v: Var) -> Option<ParamKey> {
        match self.node(v).op {
            Op::Param(key) => Some(key),
            _ => None,
        }
    }

    // ---- operations ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, p) = dims2(self.shape(a), "matmul")?;
        let (p2, q) = dims2(self.shape(b), "matmul")?;
        if p != p2 {
            return Err(Error::Dimension {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let out = kernels::matmul(self.value(a), self.value(b), n, p, q);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(vec![n, q], out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = dims2(self.shape(a), "transpose")?;
        let out = kernels::transpose(self.value(a), r, c);
        let rg = self.requires_grad(a);
        Ok(self.push(vec![c, r], out, Op::Transpose(a), rg))
    }

    /// `x [n x q] + b [q]`, with `b` repeated over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, q) = dims2(self.shape(x), "add_bias")?;
        let bn: usize = self.shape(b).iter().product();
        if bn != q || self.shape(b).len() > 2 || (self.shape(b).len() == 2 && self.shape(b)[0] != 1)
        {
            return Err(Error::Dimension {
                op: "add_bias",
                left: self.shape(x).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let bias = self.value(b);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(q.max(1)).take(n) {
            row.iter_mut().zip(bias).for_each(|(o, b)| *o += b);
        }
        let rg = self.requires_grad(x) || self.requires_grad(b);
        Ok(self.push(vec![n, q], out, Op::AddBias(x, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|x| c * x).collect();
        let rg = self.requires_grad(a);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, c), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.requires_grad(a);
        self.push(Vec::new(), vec![s], Op::Sum(a), rg)
    }

    /// Stacks `n x d_k` parts column-wise in argument order.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::usage("concat of an empty list"))?;
        let (n, _) = dims2(self.shape(*first), "concat")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pn, d) = dims2(self.shape(p), "concat")?;
            if pn != n {
                return Err(Error::usage(format!(
                    "concat parts disagree on rows: {:?} vs {:?}",
                    self.shape(*first),
                    self.shape(p)
                )));
            }
            widths.push(d);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for (&p, &d) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * d..(r + 1) * d]);
            }
        }
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(vec![n, total], out, Op::Concat(parts.to_vec()), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        // NaN must survive so that non-finite inputs surface in the loss
        let out = self.value(a).iter().map(|&x| if x > 0.0 || x.is_nan() { x } else { 0.0 }).collect();
        let rg = self.requires_grad(a);
        self.push(self.shape(a).to_vec(), out, Op::Relu(a), rg)
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = dims2(self.shape(logits), "softmax_cross_entropy")?;
        if n == 0 {
            return Err(Error::usage("cross-entropy over an empty batch"));
        }
        if labels.len() != n {
            return Err(Error::Dimension {
                op: "softmax_cross_entropy",
                left: vec![n, k],
                right: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::data(format!("label {bad} out of range for {k} classes")));
        }
        let x = self.value(logits);
        let mut probs = vec![0.0; n * k];
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = &x[r * k..(r + 1) * k];
            let p = &mut probs[r * k..(r + 1) * k];
            let lse = kernels::softmax_row(row, p);
            total += lse - row[y];
        }
        let rg = self.requires_grad(logits);
        let op = Op::SoftmaxCrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(Vec::new(), vec![total / n as f64], op, rg))
    }

    /// Same values as `x`, but no gradient flows back through the result.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).to_vec();
        self.push(self.shape(x).to_vec(), value, Op::Detach(x), false)
    }

    // ---- backward ----

    /// Backpropagates from a scalar `loss`, adding into each node's accumulated gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let local = self.propagate(loss, None)?;
        self.accumulate(&local);
        Ok(())
    }

    /// Like [`Tape::backward`], and additionally adds the gradient of every bound
    /// parameter into the matching tensor of `groups`.
    pub fn backward_into(&mut self, loss: Var, groups: &mut [ParamGroup]) -> Result<()> {
        let local = self.propagate(loss, None)?;
        for (&key, &v) in &self.bound {
            if let Some(g) = &local[v.0] {
                let group = groups
                    .get_mut(key.group)
                    .ok_or_else(|| Error::usage(format!("no parameter group {}", key.group)))?;
                group.accumulate(key.index, g)?;
            }
        }
        self.accumulate(&local);
        Ok(())
    }

    /// Backward pass that also returns the order in which nodes were processed.
    pub fn backward_traced(&mut self, loss: Var) -> Result<Vec<Var>> {
        let mut trace = Vec::new();
        let local = self.propagate(loss, Some(&mut trace))?;
        self.accumulate(&local);
        Ok(trace)
    }

    fn accumulate(&mut self, local: &[Option<Vec<f64>>]) {
        for (slot, g) in self.grads.iter_mut().zip(local) {
            if let Some(g) = g {
                match slot {
                    Some(acc) => acc.iter_mut().zip(g).for_each(|(a, d)| *a += d),
                    None => *slot = Some(g.clone()),
                }
            }
        }
    }

    fn propagate(
        &self,
        loss: Var,
        mut trace: Option<&mut Vec<Var>>,
    ) -> Result<Vec<Option<Vec<f64>>>> {
        if self.node(loss).value.len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut local: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.requires_grad(loss) {
            return Ok(local);
        }
        local[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = local[i].take() else { continue };
            if let Some(t) = trace.as_deref_mut() {
                t.push(Var(i));
            }
            self.backprop_node(node, &g, &mut local);
            local[i] = Some(g);
        }
        Ok(local)
    }

    fn send(&self, local: &mut [Option<Vec<f64>>], to: Var, delta: Vec<f64>) {
        if !self.requires_grad(to) {
            return;
        }
        match &mut local[to.0] {
            Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, node: &Node, g: &[f64], local: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Input | Op::Param(_) | Op::Detach(_) => {}
            Op::MatMul(a, b) => {
                let (n, p) = (self.shape(*a)[0], self.shape(*a)[1]);
                let q = self.shape(*b)[1];
                if self.requires_grad(*a) {
                    self.send(local, *a, kernels::matmul_a_bt(g, self.value(*b), n, q, p));
                }
                if self.requires_grad(*b) {
                    self.send(local, *b, kernels::matmul_at_b(self.value(*a), g, n, p, q));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                self.send(local, *a, kernels::transpose(g, c, r));
            }
            Op::AddBias(x, b) => {
                let q = node.shape[1];
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; q];
                    for row in g.chunks(q.max(1)) {
                        gb.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                    }
                    self.send(local, *b, gb);
                }
                self.send(local, *x, g.to_vec());
            }
            Op::Add(a, b) => {
                self.send(local, *a, g.to_vec());
                self.send(local, *b, g.to_vec());
            }
            Op::Mul(a, b) => {
                let ga = g.iter().zip(self.value(*b)).map(|(g, y)| g * y).collect();
                let gb = g.iter().zip(self.value(*a)).map(|(g, x)| g * x).collect();
                self.send(local, *a, ga);
                self.send(local, *b, gb);
            }
            Op::Scale(a, c) => {
                self.send(local, *a, g.iter().map(|v| c * v).collect());
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.send(local, *a, vec![g[0]; n]);
            }
            Op::Concat(parts) => {
                let (n, total) = (node.shape[0], node.shape[1]);
                let mut offset = 0;
                for &p in parts {
                    let d = self.shape(p)[1];
                    if self.requires_grad(p) {
                        let mut gp = Vec::with_capacity(n * d);
                        for r in 0..n {
                            gp.extend_from_slice(&g[r * total + offset..r * total + offset + d]);
                        }
                        self.send(local, p, gp);
                    }
                    offset += d;
                }
            }
            Op::Relu(a) => {
                let ga = g
                    .iter()
                    .zip(self.value(*a))
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.send(local, *a, ga);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = self.shape(*logits)[1];
                let n = labels.len();
                let scale = g[0] / n as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &y) in labels.iter().enumerate() {
                    gl[r * k + y] -= scale;
                }
                self.send(local, *logits, gl);
            }
        }
    }
}
