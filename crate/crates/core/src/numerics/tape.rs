//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every primitive in execution order, so the node list is
//! already topologically sorted. Two backward passes are provided:
//!
//! * [`Tape::backward`] accumulates plain tensors and is what training uses.
//! * [`Tape::backward_graph`] expresses each gradient as new nodes on the same
//!   tape. Those nodes are differentiable in turn, which is how second-order
//!   quantities (the lookahead hypergradient) are obtained exactly.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Const,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    /// `x * s` where `s` is a `1 x 1` node.
    ScaleBy(Var, Var),
    Hadamard(Var, Var),
    Transpose(Var),
    Relu(Var),
    Sigmoid(Var),
    RowSoftmax(Var),
    MeanPoolRows(Var),
    Sum(Var),
    CrossEntropy(Var, Arc<[usize]>),
    Mse(Var, Var),
    Diag(Var),
    DiagPart(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients keyed by leaf handle.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(&var)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.grads.iter().map(|(v, t)| (*v, t))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn into_map(self) -> BTreeMap<Var, Tensor> {
        self.grads
    }
}

/// Append-only record of a computation.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    tracing: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            tracing: true,
        }
    }

    /// A tape that computes values but keeps no backward structure.
    pub fn untraced() -> Self {
        Tape {
            nodes: Vec::new(),
            tracing: false,
        }
    }

    pub fn is_tracing(&self) -> bool {
        self.tracing
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

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Const,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn record(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = self.tracing && inputs.iter().any(|&v| self.needs(v));
        let op = if self.tracing { op } else { Op::Const };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.record(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.record(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.record(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        self.record(value, Op::Scale(a, c), &[a])
    }

    /// Multiplies `x` by the `1 x 1` node `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.shape() != (1, 1) {
            return Err(Error::Dimension {
                op: "scale_by",
                left: self.value(x).shape(),
                right: sv.shape(),
            });
        }
        let value = self.value(x).scale(sv.item());
        Ok(self.record(value, Op::ScaleBy(x, s), &[x, s]))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        Ok(self.record(value, Op::Hadamard(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.record(value, Op::Transpose(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).relu();
        self.record(value, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).sigmoid();
        self.record(value, Op::Sigmoid(a), &[a])
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let value = self.value(a).row_softmax();
        self.record(value, Op::RowSoftmax(a), &[a])
    }

    pub fn mean_pool_rows(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).mean_pool_rows()?;
        Ok(self.record(value, Op::MeanPoolRows(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.record(value, Op::Sum(a), &[a])
    }

    /// Mean cross-entropy of row logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let value = Tensor::scalar(self.value(logits).cross_entropy(labels)?);
        Ok(self.record(value, Op::CrossEntropy(logits, labels.into()), &[logits]))
    }

    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(pred).mse(self.value(target))?);
        Ok(self.record(value, Op::Mse(pred, target), &[pred, target]))
    }

    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).diag()?;
        Ok(self.record(value, Op::Diag(a), &[a]))
    }

    pub fn diag_part(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).diag_part()?;
        Ok(self.record(value, Op::DiagPart(a), &[a]))
    }

    /// Repeats a `1 x n` row `rows` times, via a product with a ones column.
    pub fn repeat_row(&mut self, row: Var, rows: usize) -> Result<Var> {
        let ones = self.constant(Tensor::ones(rows, 1));
        self.matmul(ones, row)
    }

    /// Adds a `1 x n` bias to every row of `x`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let rows = self.value(x).rows();
        let b = self.repeat_row(bias, rows)?;
        self.add(x, b)
    }

    /// Stacks `1 x n` rows into a `parts.len() x n` matrix.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = parts.len();
        if n == 0 {
            return Err(Error::Domain("stack_rows of nothing".into()));
        }
        let mut acc: Option<Var> = None;
        for (i, &p) in parts.iter().enumerate() {
            let mut e = Tensor::zeros(n, 1);
            e.set(i, 0, 1.0);
            let e = self.constant(e);
            let placed = self.matmul(e, p)?;
            acc = Some(match acc {
                None => placed,
                Some(a) => self.add(a, placed)?,
            });
        }
        Ok(acc.expect("nonempty"))
    }

    fn check_backward_args(&self, loss: Var, wanted: &[Var]) -> Result<()> {
        if !self.tracing {
            return Err(Error::Domain("backward on an untraced tape".into()));
        }
        let lv = self
            .nodes
            .get(loss.0)
            .ok_or(Error::UnknownParameter(loss.0))?;
        if lv.value.shape() != (1, 1) {
            return Err(Error::Domain(format!(
                "backward needs a scalar loss, got {:?}",
                lv.value.shape()
            )));
        }
        for &w in wanted {
            match self.nodes.get(w.0) {
                Some(Node { op: Op::Leaf, .. }) => {}
                _ => return Err(Error::UnknownParameter(w.0)),
            }
        }
        Ok(())
    }

    /// Exact reverse-mode gradients of the scalar `loss` for every wanted leaf.
    ///
    /// Leaves that do not influence `loss` receive a zero tensor.
    pub fn backward(&self, loss: Var, wanted: &[Var]) -> Result<Gradients> {
        self.check_backward_args(loss, wanted)?;
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
            match &mut grads[v.0] {
                Some(existing) => existing.axpy(1.0, &g),
                slot @ None => {
                    *slot = Some(g);
                    Ok(())
                }
            }
        }

        let mut out = BTreeMap::new();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let val = |v: Var| &self.nodes[v.0].value;
            let needs = |v: Var| self.nodes[v.0].needs_grad;
            match &node.op {
                Op::Leaf => {
                    out.insert(Var(i), g);
                }
                Op::Const => {}
                Op::MatMul(a, b) => {
                    if needs(*a) {
                        acc(&mut grads, *a, g.matmul(&val(*b).transpose())?)?;
                    }
                    if needs(*b) {
                        acc(&mut grads, *b, val(*a).transpose().matmul(&g)?)?;
                    }
                }
                Op::Add(a, b) => {
                    if needs(*b) {
                        acc(&mut grads, *b, g.clone())?;
                    }
                    if needs(*a) {
                        acc(&mut grads, *a, g)?;
                    }
                }
                Op::Sub(a, b) => {
                    if needs(*b) {
                        acc(&mut grads, *b, g.scale(-1.0))?;
                    }
                    if needs(*a) {
                        acc(&mut grads, *a, g)?;
                    }
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g.scale(*c))?,
                Op::ScaleBy(x, s) => {
                    if needs(*x) {
                        acc(&mut grads, *x, g.scale(val(*s).item()))?;
                    }
                    if needs(*s) {
                        acc(&mut grads, *s, Tensor::scalar(g.hadamard(val(*x))?.sum()))?;
                    }
                }
                Op::Hadamard(a, b) => {
                    if needs(*a) {
                        acc(&mut grads, *a, g.hadamard(val(*b))?)?;
                    }
                    if needs(*b) {
                        acc(&mut grads, *b, g.hadamard(val(*a))?)?;
                    }
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.transpose())?,
                Op::Relu(a) => acc(&mut grads, *a, g.hadamard(&val(*a).relu_mask())?)?,
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let dy = y.hadamard(&Tensor::ones(y.rows(), y.cols()).sub(y)?)?;
                    acc(&mut grads, *a, g.hadamard(&dy)?)?;
                }
                Op::RowSoftmax(a) => {
                    let y = &node.value;
                    let gy = g.hadamard(y)?;
                    let row_dot = gy.matmul(&Tensor::ones(y.cols(), 1))?;
                    let spread = row_dot.matmul(&Tensor::ones(1, y.cols()))?;
                    acc(&mut grads, *a, y.hadamard(&g.sub(&spread)?)?)?;
                }
                Op::MeanPoolRows(a) => {
                    let rows = val(*a).rows();
                    let spread = Tensor::ones(rows, 1).matmul(&g)?;
                    acc(&mut grads, *a, spread.scale(1.0 / rows as f64))?;
                }
                Op::Sum(a) => {
                    let (r, c) = val(*a).shape();
                    acc(&mut grads, *a, Tensor::ones(r, c).scale(g.item()))?;
                }
                Op::CrossEntropy(a, labels) => {
                    let logits = val(*a);
                    let (n, c) = logits.shape();
                    let diff = logits.row_softmax().sub(&Tensor::one_hot(n, c, labels))?;
                    acc(&mut grads, *a, diff.scale(1.0 / n as f64).scale(g.item()))?;
                }
                Op::Mse(p, t) => {
                    let diff = val(*p).sub(val(*t))?;
                    let gp = diff.scale(2.0 / diff.len() as f64).scale(g.item());
                    if needs(*t) {
                        acc(&mut grads, *t, gp.scale(-1.0))?;
                    }
                    if needs(*p) {
                        acc(&mut grads, *p, gp)?;
                    }
                }
                Op::Diag(a) => acc(&mut grads, *a, g.diag_part()?)?,
                Op::DiagPart(a) => acc(&mut grads, *a, g.diag()?)?,
            }
        }

        for &w in wanted {
            out.entry(w)
                .or_insert_with(|| Tensor::zeros(self.nodes[w.0].value.rows(), self.nodes[w.0].value.cols()));
        }
        out.retain(|k, _| wanted.contains(k));
        Ok(Gradients { grads: out })
    }

    /// Like [`Tape::backward`], but every gradient is itself a node on this
    /// tape, so it can be differentiated again. Returned in `wanted` order.
    pub fn backward_graph(&mut self, loss: Var, wanted: &[Var]) -> Result<Vec<Var>> {
        self.check_backward_args(loss, wanted)?;
        let mut grads: Vec<Option<Var>> = vec![None; loss.0 + 1];
        let seed = self.constant(Tensor::scalar(1.0));
        grads[loss.0] = Some(seed);

        let mut leaf_grads: BTreeMap<Var, Var> = BTreeMap::new();
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let op = self.nodes[i].op.clone();
            let this = Var(i);
            let mut contributions: Vec<(Var, Var)> = Vec::with_capacity(2);
            match op {
                Op::Leaf => {
                    leaf_grads.insert(this, g);
                }
                Op::Const => {}
                Op::MatMul(a, b) => {
                    if self.needs(a) {
                        let bt = self.transpose(b);
                        contributions.push((a, self.matmul(g, bt)?));
                    }
                    if self.needs(b) {
                        let at = self.transpose(a);
                        contributions.push((b, self.matmul(at, g)?));
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(b) {
                        contributions.push((b, g));
                    }
                    if self.needs(a) {
                        contributions.push((a, g));
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(b) {
                        contributions.push((b, self.scale(g, -1.0)));
                    }
                    if self.needs(a) {
                        contributions.push((a, g));
                    }
                }
                Op::Scale(a, c) => contributions.push((a, self.scale(g, c))),
                Op::ScaleBy(x, s) => {
                    if self.needs(x) {
                        contributions.push((x, self.scale_by(g, s)?));
                    }
                    if self.needs(s) {
                        let prod = self.hadamard(g, x)?;
                        contributions.push((s, self.sum(prod)));
                    }
                }
                Op::Hadamard(a, b) => {
                    if self.needs(a) {
                        contributions.push((a, self.hadamard(g, b)?));
                    }
                    if self.needs(b) {
                        contributions.push((b, self.hadamard(g, a)?));
                    }
                }
                Op::Transpose(a) => contributions.push((a, self.transpose(g))),
                Op::Relu(a) => {
                    let mask = self.constant(self.value(a).relu_mask());
                    contributions.push((a, self.hadamard(g, mask)?));
                }
                Op::Sigmoid(a) => {
                    let (r, c) = self.value(this).shape();
                    let ones = self.constant(Tensor::ones(r, c));
                    let one_minus = self.sub(ones, this)?;
                    let dy = self.hadamard(this, one_minus)?;
                    contributions.push((a, self.hadamard(g, dy)?));
                }
                Op::RowSoftmax(a) => {
                    let k = self.value(this).cols();
                    let gy = self.hadamard(g, this)?;
                    let ones_col = self.constant(Tensor::ones(k, 1));
                    let row_dot = self.matmul(gy, ones_col)?;
                    let ones_row = self.constant(Tensor::ones(1, k));
                    let spread = self.matmul(row_dot, ones_row)?;
                    let centered = self.sub(g, spread)?;
                    contributions.push((a, self.hadamard(this, centered)?));
                }
                Op::MeanPoolRows(a) => {
                    let rows = self.value(a).rows();
                    let spread = self.repeat_row(g, rows)?;
                    contributions.push((a, self.scale(spread, 1.0 / rows as f64)));
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(a).shape();
                    let ones = self.constant(Tensor::ones(r, c));
                    contributions.push((a, self.scale_by(ones, g)?));
                }
                Op::CrossEntropy(a, labels) => {
                    let (n, c) = self.value(a).shape();
                    let probs = self.row_softmax(a);
                    let onehot = self.constant(Tensor::one_hot(n, c, &labels));
                    let diff = self.sub(probs, onehot)?;
                    let mean = self.scale(diff, 1.0 / n as f64);
                    contributions.push((a, self.scale_by(mean, g)?));
                }
                Op::Mse(p, t) => {
                    let count = self.value(p).len();
                    let diff = self.sub(p, t)?;
                    let scaled = self.scale(diff, 2.0 / count as f64);
                    let gp = self.scale_by(scaled, g)?;
                    if self.needs(t) {
                        contributions.push((t, self.scale(gp, -1.0)));
                    }
                    if self.needs(p) {
                        contributions.push((p, gp));
                    }
                }
                Op::Diag(a) => contributions.push((a, self.diag_part(g)?)),
                Op::DiagPart(a) => contributions.push((a, self.diag(g)?)),
            }
            for (target, contrib) in contributions {
                grads[target.0] = Some(match grads[target.0] {
                    None => contrib,
                    Some(prev) => self.add(prev, contrib)?,
                });
            }
        }

        let mut result = Vec::with_capacity(wanted.len());
        for &w in wanted {
            let v = match leaf_grads.get(&w) {
                Some(&g) => g,
                None => {
                    let (r, c) = self.value(w).shape();
                    self.constant(Tensor::zeros(r, c))
                }
            };
            result.push(v);
        }
        Ok(result)
    }
}
