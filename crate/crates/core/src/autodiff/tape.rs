//! Wengert-list tape for reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node vector is already a
//! topological order of the computation. [`Tape::backward`] walks it in
//! reverse, accumulating adjoints only into nodes that depend on a
//! differentiable leaf. The tape is not consumed by a backward pass: the
//! sampler runs one reverse sweep per output hour over the same recording.

use super::tensor::{gemm, Tensor};
use super::AutodiffError;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Smooth pointwise nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Silu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Silu => x / (1.0 + (-x).exp()),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Scale(NodeId, f64),
    Activation(NodeId, Activation),
    Concat(Vec<NodeId>),
    Slice(NodeId, usize, usize),
    Sum(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::Activation(..) => "activation",
            Op::Concat(..) => "concat",
            Op::Slice(..) => "slice",
            Op::Sum(..) => "sum",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive operations.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `id`; `None` when the node does not depend on any
    /// differentiable leaf.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(), AutodiffError> {
    if t.is_matrix() {
        Ok(())
    } else {
        Err(AutodiffError::Shape {
            op,
            shapes: vec![t.shape().to_vec()],
        })
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

    /// Number of non-leaf primitives recorded.
    pub fn op_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .count()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is wanted.
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant; no adjoint is ever computed for it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    fn shapes(&self, ids: &[NodeId]) -> Vec<Vec<usize>> {
        ids.iter()
            .map(|id| self.nodes[id.0].value.shape().to_vec())
            .collect()
    }

    fn mismatch(&self, op: &'static str, ids: &[NodeId]) -> AutodiffError {
        AutodiffError::Shape {
            op,
            shapes: self.shapes(ids),
        }
    }

    fn grad_of(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        require_matrix("matmul", va)?;
        require_matrix("matmul", vb)?;
        if va.cols() != vb.rows() {
            return Err(self.mismatch("matmul", &[a, b]));
        }
        let (m, k, n) = (va.rows(), va.cols(), vb.cols());
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            va.values(),
            false,
            vb.values(),
            false,
            &mut out,
            false,
        );
        let value = Tensor::matrix(m, n, out)?;
        let rg = self.grad_of(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId, AutodiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(self.mismatch(name, &[a, b]));
        }
        let value = va.zip_map(vb, f);
        let rg = self.grad_of(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `[1, n]` bias row to every row of an `[m, n]` matrix.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, AutodiffError> {
        let (va, vb) = (self.value(a), self.value(bias));
        require_matrix("add_bias", va)?;
        if !vb.is_matrix() || vb.rows() != 1 || vb.cols() != va.cols() {
            return Err(self.mismatch("add_bias", &[a, bias]));
        }
        let n = va.cols();
        let mut out = va.clone();
        for row in out.values_mut().chunks_mut(n) {
            for (x, b) in row.iter_mut().zip(vb.values()) {
                *x += b;
            }
        }
        let rg = self.grad_of(&[a, bias]);
        Ok(self.push(out, Op::AddBias(a, bias), rg))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let value = self.value(a).map(|x| x * factor);
        let rg = self.grad_of(&[a]);
        self.push(value, Op::Scale(a, factor), rg)
    }

    pub fn activation(&mut self, a: NodeId, act: Activation) -> NodeId {
        let value = self.value(a).map(|x| act.apply(x));
        let rg = self.grad_of(&[a]);
        self.push(value, Op::Activation(a, act), rg)
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, AutodiffError> {
        let Some(first) = parts.first() else {
            return Err(AutodiffError::Shape {
                op: "concat",
                shapes: Vec::new(),
            });
        };
        let rows = self.value(*first).rows();
        for &p in parts {
            let v = self.value(p);
            if !v.is_matrix() || v.rows() != rows {
                return Err(self.mismatch("concat", parts));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let v = self.value(p);
                let c = v.cols();
                out.extend_from_slice(&v.values()[r * c..(r + 1) * c]);
            }
        }
        let value = Tensor::matrix(rows, total, out)?;
        let rg = self.grad_of(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId, AutodiffError> {
        let va = self.value(a);
        require_matrix("slice", va)?;
        if start >= end || end > va.cols() {
            return Err(AutodiffError::Slice {
                start,
                end,
                shape: va.shape().to_vec(),
            });
        }
        let (rows, cols) = (va.rows(), va.cols());
        let mut out = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            out.extend_from_slice(&va.values()[r * cols + start..r * cols + end]);
        }
        let value = Tensor::matrix(rows, end - start, out)?;
        let rg = self.grad_of(&[a]);
        Ok(self.push(value, Op::Slice(a, start, end), rg))
    }

    /// Sum of all entries, as a `[1, 1]` tensor.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).values().iter().sum();
        let rg = self.grad_of(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Vector-Jacobian product of `output` with `seed`.
    pub fn backward(&self, output: NodeId, seed: &Tensor) -> Result<Gradients, AutodiffError> {
        let out_shape = self.value(output).shape();
        if seed.shape() != out_shape {
            return Err(AutodiffError::SeedShape {
                expected: out_shape.to_vec(),
                found: seed.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        if self.nodes[output.0].requires_grad {
            grads[output.0] = Some(seed.clone());
        }

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if !g.all_finite() {
                return Err(AutodiffError::NonFiniteAdjoint {
                    node: idx,
                    op: node.op.name(),
                });
            }
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                    if self.requires_grad(*a) {
                        // dA = dC * B^T
                        let mut da = vec![0.0; m * k];
                        gemm(
                            m,
                            n,
                            k,
                            g.values(),
                            false,
                            vb.values(),
                            true,
                            &mut da,
                            false,
                        );
                        self.accumulate(&mut grads, *a, Tensor::matrix(m, k, da)?);
                    }
                    if self.requires_grad(*b) {
                        // dB = A^T * dC
                        let mut db = vec![0.0; k * n];
                        gemm(
                            k,
                            m,
                            n,
                            va.values(),
                            true,
                            g.values(),
                            false,
                            &mut db,
                            false,
                        );
                        self.accumulate(&mut grads, *b, Tensor::matrix(k, n, db)?);
                    }
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, g.clone());
                    self.accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, *b, g.map(|x| -x));
                    self.accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if self.requires_grad(*a) {
                        self.accumulate(&mut grads, *a, g.zip_map(vb, |x, y| x * y));
                    }
                    if self.requires_grad(*b) {
                        self.accumulate(&mut grads, *b, g.zip_map(va, |x, y| x * y));
                    }
                }
                Op::AddBias(a, bias) => {
                    if self.requires_grad(*bias) {
                        let n = g.cols();
                        let mut db = vec![0.0; n];
                        for row in g.values().chunks(n) {
                            for (acc, x) in db.iter_mut().zip(row) {
                                *acc += x;
                            }
                        }
                        self.accumulate(&mut grads, *bias, Tensor::row(db));
                    }
                    self.accumulate(&mut grads, *a, g);
                }
                Op::Scale(a, factor) => {
                    let f = *factor;
                    self.accumulate(&mut grads, *a, g.map(|x| x * f));
                }
                Op::Activation(a, act) => {
                    let va = self.value(*a);
                    let act = *act;
                    self.accumulate(&mut grads, *a, g.zip_map(va, |x, z| x * act.derivative(z)));
                }
                Op::Concat(parts) => {
                    let rows = g.rows();
                    let total = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.value(p).cols();
                        if self.requires_grad(p) {
                            let mut dp = Vec::with_capacity(rows * c);
                            for r in 0..rows {
                                dp.extend_from_slice(
                                    &g.values()[r * total + offset..r * total + offset + c],
                                );
                            }
                            self.accumulate(&mut grads, p, Tensor::matrix(rows, c, dp)?);
                        }
                        offset += c;
                    }
                }
                Op::Slice(a, start, end) => {
                    let va = self.value(*a);
                    let (rows, cols) = (va.rows(), va.cols());
                    let w = end - start;
                    let mut da = Tensor::zeros(vec![rows, cols]);
                    for r in 0..rows {
                        da.values_mut()[r * cols + start..r * cols + end]
                            .copy_from_slice(&g.values()[r * w..(r + 1) * w]);
                    }
                    self.accumulate(&mut grads, *a, da);
                }
                Op::Sum(a) => {
                    let s = g.values()[0];
                    let da = self.value(*a).map(|_| s);
                    self.accumulate(&mut grads, *a, da);
                }
            }
        }

        // Differentiable leaves that the output does not depend on get an
        // explicit zero gradient.
        for (idx, node) in self.nodes.iter().enumerate().take(output.0 + 1) {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[idx].is_none() {
                grads[idx] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        for (idx, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.all_finite() {
                    return Err(AutodiffError::NonFiniteAdjoint {
                        node: idx,
                        op: self.nodes[idx].op.name(),
                    });
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        if !self.requires_grad(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

/// Leaf specification for [`forward`].
#[derive(Clone, Debug)]
pub struct Leaf {
    pub value: Tensor,
    pub differentiable: bool,
}

impl Leaf {
    pub fn variable(value: Tensor) -> Self {
        Self {
            value,
            differentiable: true,
        }
    }

    pub fn constant(value: Tensor) -> Self {
        Self {
            value,
            differentiable: false,
        }
    }
}

/// A recorded evaluation: the tape, the output node and the leaf handles.
#[derive(Clone, Debug)]
pub struct Recording {
    pub tape: Tape,
    pub output: NodeId,
    pub leaves: Vec<NodeId>,
}

impl Recording {
    pub fn output_value(&self) -> &Tensor {
        self.tape.value(self.output)
    }

    /// Gradient per leaf (in leaf order); `None` for constant leaves.
    pub fn backward(&self, seed: &Tensor) -> Result<Vec<Option<Tensor>>, AutodiffError> {
        let mut grads = self.tape.backward(self.output, seed)?;
        Ok(self
            .leaves
            .iter()
            .map(|&id| {
                if self.tape.requires_grad(id) {
                    grads.take(id)
                } else {
                    None
                }
            })
            .collect())
    }
}

/// Records `program` applied to `leaves` on a fresh tape.
pub fn forward<F>(leaves: Vec<Leaf>, program: F) -> Result<Recording, AutodiffError>
where
    F: FnOnce(&mut Tape, &[NodeId]) -> Result<NodeId, AutodiffError>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = leaves
        .into_iter()
        .map(|leaf| {
            if leaf.differentiable {
                tape.variable(leaf.value)
            } else {
                tape.constant(leaf.value)
            }
        })
        .collect();
    let output = program(&mut tape, &ids)?;
    let value = tape.value(output);
    if !value.all_finite() {
        return Err(AutodiffError::NonFiniteValue { node: output.0 });
    }
    Ok(Recording {
        tape,
        output,
        leaves: ids,
    })
}
