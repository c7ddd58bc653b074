//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Each call to
//! [`Graph::forward_op`] evaluates one operation eagerly and appends it to the
//! tape; [`Graph::backward`] then walks the tape once in reverse append order.

use std::collections::BTreeMap;

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation tags understood by [`Graph::forward_op`].
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// `a[m,k] · b[k,n]`.
    MatMul,
    /// Elementwise sum of equal shapes.
    Add,
    /// Elementwise difference of equal shapes.
    Sub,
    /// Elementwise product of equal shapes.
    Mul,
    /// Multiplication by a constant.
    Scale(f64),
    /// Adds a length-`n` vector to every row of an `m × n` matrix.
    AddRowBroadcast,
    Exp,
    /// Natural logarithm; inputs must be strictly positive.
    Log,
    /// Clamps into `[lo, hi]`; gradient flows only strictly inside the range.
    Clamp { lo: f64, hi: f64 },
    /// Sum of a matrix over axis 0 (giving a row vector) or axis 1.
    SumAxis(usize),
    /// Sum of every element, giving a scalar.
    SumAll,
    /// Mean of every element, giving a scalar.
    Mean,
    /// Row-wise layer normalisation with gain and bias: inputs `[x, gain, bias]`.
    LayerNorm { eps: f64 },
    /// GELU, tanh approximation.
    Gelu,
    Relu,
    SoftmaxRows,
    LogSoftmaxRows,
    /// Selects rows of a table by index (embedding lookup).
    Gather(Vec<usize>),
    Transpose,
    SliceRows { start: usize, end: usize },
    SliceCols { start: usize, end: usize },
    ConcatRows,
    ConcatCols,
    /// Identity forward, no gradient backward.
    StopGradient,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::AddRowBroadcast => "add_row_broadcast",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Clamp { .. } => "clamp",
            Op::SumAxis(_) => "sum_axis",
            Op::SumAll => "sum_all",
            Op::Mean => "mean",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu => "gelu",
            Op::Relu => "relu",
            Op::SoftmaxRows => "softmax",
            Op::LogSoftmaxRows => "log_softmax",
            Op::Gather(_) => "gather",
            Op::Transpose => "transpose",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatRows => "concat_rows",
            Op::ConcatCols => "concat_cols",
            Op::StopGradient => "stop_gradient",
        }
    }
}

#[derive(Debug)]
enum NodeKind {
    Constant,
    Param,
    Op(Op),
}

#[derive(Debug)]
struct Node {
    kind: NodeKind,
    inputs: Vec<Var>,
    value: Tensor,
    requires_grad: bool,
    /// Layer norm keeps the normalised input and per-row inverse std.
    cache: Option<(Tensor, Vec<f64>)>,
}

/// The tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(NodeKind::Constant, Vec::new(), value, false, None)
    }

    /// Registers a named trainable leaf. Names are unique per graph.
    pub fn param(&mut self, name: &str, value: Tensor) -> Result<Var> {
        if self.params.contains_key(name) {
            return Err(Error::invalid(format!("parameter `{name}` registered twice")));
        }
        let v = self.push(NodeKind::Param, Vec::new(), value, true, None);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(
        &mut self,
        kind: NodeKind,
        inputs: Vec<Var>,
        value: Tensor,
        requires_grad: bool,
        cache: Option<(Tensor, Vec<f64>)>,
    ) -> Var {
        self.nodes.push(Node {
            kind,
            inputs,
            value,
            requires_grad,
            cache,
        });
        Var(self.nodes.len() - 1)
    }

    /// Evaluates `op` on `inputs` and records it on the tape.
    pub fn forward_op(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        let (value, cache) = self.evaluate(&op, inputs)?;
        if !value.is_finite() {
            return Err(Error::Numerical(format!(
                "{} produced a non-finite value",
                op.name()
            )));
        }
        let requires_grad =
            !matches!(op, Op::StopGradient) && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(NodeKind::Op(op), inputs.to_vec(), value, requires_grad, cache))
    }

    fn arity(op: &Op, inputs: &[Var]) -> Result<()> {
        let expected = match op {
            Op::MatMul | Op::Add | Op::Sub | Op::Mul | Op::AddRowBroadcast => Some(2),
            Op::LayerNorm { .. } => Some(3),
            Op::ConcatRows | Op::ConcatCols => None,
            _ => Some(1),
        };
        match expected {
            Some(n) if n != inputs.len() => Err(Error::invalid(format!(
                "{} takes {} inputs, got {}",
                op.name(),
                n,
                inputs.len()
            ))),
            None if inputs.is_empty() => {
                Err(Error::invalid(format!("{} needs at least one input", op.name())))
            }
            _ => Ok(()),
        }
    }

    fn shape_err(&self, op: &Op, a: Var, b: Var) -> Error {
        Error::Shape {
            op: op.name(),
            left: self.shape(a).to_vec(),
            right: self.shape(b).to_vec(),
        }
    }

    fn require_matrix(&self, op: &Op, v: Var) -> Result<()> {
        if self.value(v).rank() != 2 {
            return Err(Error::Shape {
                op: op.name(),
                left: self.shape(v).to_vec(),
                right: vec![],
            });
        }
        Ok(())
    }

    fn evaluate(&self, op: &Op, inputs: &[Var]) -> Result<(Tensor, Option<(Tensor, Vec<f64>)>)> {
        Self::arity(op, inputs)?;
        let x = self.value(inputs[0]);
        let out = match op {
            Op::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                self.require_matrix(op, a)?;
                self.require_matrix(op, b)?;
                let bv = self.value(b);
                if x.cols() != bv.rows() {
                    return Err(self.shape_err(op, a, b));
                }
                gemm(x, false, bv, false)
            }
            Op::Add | Op::Sub | Op::Mul => {
                let y = self.value(inputs[1]);
                if x.shape() != y.shape() {
                    return Err(self.shape_err(op, inputs[0], inputs[1]));
                }
                match op {
                    Op::Add => x.zip_map(y, |a, b| a + b),
                    Op::Sub => x.zip_map(y, |a, b| a - b),
                    _ => x.zip_map(y, |a, b| a * b),
                }
            }
            Op::Scale(c) => x.map(|v| v * c),
            Op::AddRowBroadcast => {
                self.require_matrix(op, inputs[0])?;
                let b = self.value(inputs[1]);
                if b.numel() != x.cols() || b.rank() > 2 {
                    return Err(self.shape_err(op, inputs[0], inputs[1]));
                }
                let mut out = x.clone();
                let c = x.cols();
                for row in out.data_mut().chunks_mut(c) {
                    for (o, bv) in row.iter_mut().zip(b.data()) {
                        *o += bv;
                    }
                }
                out
            }
            Op::Exp => x.map(f64::exp),
            Op::Log => {
                if x.data().iter().any(|&v| v <= 0.0) {
                    return Err(Error::invalid("log of a non-positive value"));
                }
                x.map(f64::ln)
            }
            Op::Clamp { lo, hi } => {
                if lo > hi {
                    return Err(Error::invalid("clamp bounds out of order"));
                }
                x.map(|v| v.clamp(*lo, *hi))
            }
            Op::SumAxis(axis) => {
                self.require_matrix(op, inputs[0])?;
                let (r, c) = (x.rows(), x.cols());
                match axis {
                    0 => {
                        let mut out = vec![0.0; c];
                        for i in 0..r {
                            for (o, v) in out.iter_mut().zip(x.row(i)) {
                                *o += v;
                            }
                        }
                        Tensor::vector(out)
                    }
                    1 => Tensor::vector((0..r).map(|i| x.row(i).iter().sum()).collect()),
                    _ => return Err(Error::invalid(format!("sum over axis {axis} of a matrix"))),
                }
            }
            Op::SumAll => Tensor::scalar(x.sum()),
            Op::Mean => {
                if x.numel() == 0 {
                    return Err(Error::invalid("mean of an empty tensor"));
                }
                Tensor::scalar(x.sum() / x.numel() as f64)
            }
            Op::LayerNorm { eps } => {
                self.require_matrix(op, inputs[0])?;
                let (gain, bias) = (self.value(inputs[1]), self.value(inputs[2]));
                let c = x.cols();
                if gain.numel() != c {
                    return Err(self.shape_err(op, inputs[0], inputs[1]));
                }
                if bias.numel() != c {
                    return Err(self.shape_err(op, inputs[0], inputs[2]));
                }
                let mut xhat = x.clone();
                let mut inv_std = Vec::with_capacity(x.rows());
                for row in xhat.data_mut().chunks_mut(c) {
                    let mean = row.iter().sum::<f64>() / c as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    for v in row.iter_mut() {
                        *v = (*v - mean) * inv;
                    }
                    inv_std.push(inv);
                }
                let mut out = xhat.clone();
                for row in out.data_mut().chunks_mut(c) {
                    for ((v, g), b) in row.iter_mut().zip(gain.data()).zip(bias.data()) {
                        *v = *v * g + b;
                    }
                }
                return Ok((out, Some((xhat, inv_std))));
            }
            Op::Gelu => x.map(gelu),
            Op::Relu => x.map(|v| v.max(0.0)),
            Op::SoftmaxRows => {
                self.require_matrix(op, inputs[0])?;
                x.softmax_rows()
            }
            Op::LogSoftmaxRows => {
                self.require_matrix(op, inputs[0])?;
                x.log_softmax_rows()
            }
            Op::Gather(ids) => {
                self.require_matrix(op, inputs[0])?;
                let (r, c) = (x.rows(), x.cols());
                let mut out = Vec::with_capacity(ids.len() * c);
                for &id in ids {
                    if id >= r {
                        return Err(Error::invalid(format!("gather index {id} out of range {r}")));
                    }
                    out.extend_from_slice(x.row(id));
                }
                Tensor::new(vec![ids.len(), c], out)?
            }
            Op::Transpose => {
                self.require_matrix(op, inputs[0])?;
                x.transpose()
            }
            Op::SliceRows { start, end } => {
                self.require_matrix(op, inputs[0])?;
                if start >= end || *end > x.rows() {
                    return Err(Error::invalid(format!(
                        "row slice {start}..{end} of {:?}",
                        x.shape()
                    )));
                }
                let c = x.cols();
                Tensor::new(vec![end - start, c], x.data()[start * c..end * c].to_vec())?
            }
            Op::SliceCols { start, end } => {
                self.require_matrix(op, inputs[0])?;
                if start >= end || *end > x.cols() {
                    return Err(Error::invalid(format!(
                        "column slice {start}..{end} of {:?}",
                        x.shape()
                    )));
                }
                let mut out = Vec::with_capacity(x.rows() * (end - start));
                for i in 0..x.rows() {
                    out.extend_from_slice(&x.row(i)[*start..*end]);
                }
                Tensor::new(vec![x.rows(), end - start], out)?
            }
            Op::ConcatRows => {
                let c = self.value(inputs[0]).cols();
                let mut data = Vec::new();
                let mut rows = 0;
                for &v in inputs {
                    self.require_matrix(op, v)?;
                    let t = self.value(v);
                    if t.cols() != c {
                        return Err(self.shape_err(op, inputs[0], v));
                    }
                    rows += t.rows();
                    data.extend_from_slice(t.data());
                }
                Tensor::new(vec![rows, c], data)?
            }
            Op::ConcatCols => {
                let r = self.value(inputs[0]).rows();
                let mut total = 0;
                for &v in inputs {
                    self.require_matrix(op, v)?;
                    if self.value(v).rows() != r {
                        return Err(self.shape_err(op, inputs[0], v));
                    }
                    total += self.value(v).cols();
                }
                let mut data = Vec::with_capacity(r * total);
                for i in 0..r {
                    for &v in inputs {
                        data.extend_from_slice(self.value(v).row(i));
                    }
                }
                Tensor::new(vec![r, total], data)?
            }
            Op::StopGradient => x.clone(),
        };
        Ok((out, None))
    }

    /// Propagates gradients from a scalar `loss` back to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(loss_value.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let NodeKind::Op(op) = &node.kind else {
                continue;
            };
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let contributions = self.input_grads(op, node, &g);
            grads[idx] = Some(g);
            for (input, contribution) in node.inputs.iter().zip(contributions) {
                let Some(c) = contribution else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&c),
                    slot @ None => *slot = Some(c),
                }
            }
        }

        let params = self
            .params
            .iter()
            .map(|(name, &v)| {
                let grad = grads[v.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.shape(v)));
                (name.clone(), grad)
            })
            .collect();
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }

    fn input_grads(&self, op: &Op, node: &Node, g: &Tensor) -> Vec<Option<Tensor>> {
        let inp = |i: usize| self.value(node.inputs[i]);
        let wants = |i: usize| self.nodes[node.inputs[i].0].requires_grad;
        match op {
            Op::MatMul => vec![
                wants(0).then(|| gemm(g, false, inp(1), true)),
                wants(1).then(|| gemm(inp(0), true, g, false)),
            ],
            Op::Add => vec![Some(g.clone()), Some(g.clone())],
            Op::Sub => vec![Some(g.clone()), wants(1).then(|| g.map(|v| -v))],
            Op::Mul => vec![
                wants(0).then(|| g.zip_map(inp(1), |a, b| a * b)),
                wants(1).then(|| g.zip_map(inp(0), |a, b| a * b)),
            ],
            Op::Scale(c) => vec![Some(g.map(|v| v * c))],
            Op::AddRowBroadcast => {
                let bias_grad = wants(1).then(|| {
                    let c = g.cols();
                    let mut acc = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        for (a, v) in acc.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    Tensor::new(inp(1).shape().to_vec(), acc).expect("bias shape")
                });
                vec![Some(g.clone()), bias_grad]
            }
            Op::Exp => vec![Some(g.zip_map(&node.value, |a, y| a * y))],
            Op::Log => vec![Some(g.zip_map(inp(0), |a, x| a / x))],
            Op::Clamp { lo, hi } => vec![Some(g.zip_map(inp(0), |a, x| {
                if x > *lo && x < *hi {
                    a
                } else {
                    0.0
                }
            }))],
            Op::SumAxis(axis) => {
                let x = inp(0);
                let (r, c) = (x.rows(), x.cols());
                let mut out = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    for j in 0..c {
                        out.data_mut()[i * c + j] = if *axis == 0 { g.data()[j] } else { g.data()[i] };
                    }
                }
                vec![Some(out)]
            }
            Op::SumAll => vec![Some(Tensor::full(inp(0).shape(), g.item()))],
            Op::Mean => {
                let x = inp(0);
                vec![Some(Tensor::full(x.shape(), g.item() / x.numel() as f64))]
            }
            Op::LayerNorm { .. } => {
                let (xhat, inv_std) = node.cache.as_ref().expect("layer norm cache");
                let gain = inp(1);
                let c = xhat.cols();
                let n = c as f64;
                let mut dx = Tensor::zeros(xhat.shape());
                let mut dgain = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                for i in 0..xhat.rows() {
                    let gr = g.row(i);
                    let xr = xhat.row(i);
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for j in 0..c {
                        dgain[j] += gr[j] * xr[j];
                        dbias[j] += gr[j];
                        let d = gr[j] * gain.data()[j];
                        sum_d += d;
                        sum_dx += d * xr[j];
                    }
                    let out = &mut dx.data_mut()[i * c..(i + 1) * c];
                    for j in 0..c {
                        let d = gr[j] * gain.data()[j];
                        out[j] = inv_std[i] / n * (n * d - sum_d - xr[j] * sum_dx);
                    }
                }
                vec![
                    Some(dx),
                    wants(1).then(|| Tensor::new(gain.shape().to_vec(), dgain).expect("gain")),
                    wants(2).then(|| Tensor::new(inp(2).shape().to_vec(), dbias).expect("bias")),
                ]
            }
            Op::Gelu => vec![Some(g.zip_map(inp(0), |a, x| a * gelu_grad(x)))],
            Op::Relu => vec![Some(g.zip_map(inp(0), |a, x| if x > 0.0 { a } else { 0.0 }))],
            Op::SoftmaxRows => {
                let y = &node.value;
                let c = y.cols();
                let mut out = Tensor::zeros(y.shape());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        out.data_mut()[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![Some(out)]
            }
            Op::LogSoftmaxRows => {
                let y = &node.value;
                let c = y.cols();
                let mut out = Tensor::zeros(y.shape());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let total: f64 = gr.iter().sum();
                    for j in 0..c {
                        out.data_mut()[i * c + j] = gr[j] - yr[j].exp() * total;
                    }
                }
                vec![Some(out)]
            }
            Op::Gather(ids) => {
                let table = inp(0);
                let c = table.cols();
                let mut out = Tensor::zeros(table.shape());
                for (k, &id) in ids.iter().enumerate() {
                    let dst = &mut out.data_mut()[id * c..(id + 1) * c];
                    for (d, v) in dst.iter_mut().zip(g.row(k)) {
                        *d += v;
                    }
                }
                vec![Some(out)]
            }
            Op::Transpose => vec![Some(g.transpose())],
            Op::SliceRows { start, .. } => {
                let x = inp(0);
                let c = x.cols();
                let mut out = Tensor::zeros(x.shape());
                out.data_mut()[start * c..start * c + g.numel()].copy_from_slice(g.data());
                vec![Some(out)]
            }
            Op::SliceCols { start, end } => {
                let x = inp(0);
                let c = x.cols();
                let w = end - start;
                let mut out = Tensor::zeros(x.shape());
                for i in 0..x.rows() {
                    out.data_mut()[i * c + start..i * c + end].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                vec![Some(out)]
            }
            Op::ConcatRows => {
                let c = g.cols();
                let mut offset = 0;
                node.inputs
                    .iter()
                    .map(|&v| {
                        let r = self.value(v).rows();
                        let part = g.data()[offset * c..(offset + r) * c].to_vec();
                        offset += r;
                        Some(Tensor::new(vec![r, c], part).expect("concat part"))
                    })
                    .collect()
            }
            Op::ConcatCols => {
                let total = g.cols();
                let mut offset = 0;
                node.inputs
                    .iter()
                    .map(|&v| {
                        let t = self.value(v);
                        let w = t.cols();
                        let mut part = Vec::with_capacity(t.numel());
                        for i in 0..t.rows() {
                            part.extend_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                        }
                        offset += w;
                        Some(Tensor::new(vec![t.rows(), w], part).expect("concat part"))
                    })
                    .collect()
            }
            Op::StopGradient => vec![None],
        }
    }

    // Convenience wrappers over `forward_op`.

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward_op(Op::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward_op(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward_op(Op::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward_op(Op::Mul, &[a, b])
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.forward_op(Op::Scale(c), &[a])
    }
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        self.forward_op(Op::AddRowBroadcast, &[a, bias])
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.forward_op(Op::Exp, &[a])
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.forward_op(Op::Log, &[a])
    }
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.forward_op(Op::Clamp { lo, hi }, &[a])
    }
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.forward_op(Op::SumAxis(axis), &[a])
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.forward_op(Op::SumAll, &[a])
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.forward_op(Op::Mean, &[a])
    }
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        self.forward_op(Op::LayerNorm { eps }, &[x, gain, bias])
    }
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.forward_op(Op::Gelu, &[a])
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.forward_op(Op::Relu, &[a])
    }
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.forward_op(Op::SoftmaxRows, &[a])
    }
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.forward_op(Op::LogSoftmaxRows, &[a])
    }
    pub fn gather(&mut self, table: Var, ids: Vec<usize>) -> Result<Var> {
        self.forward_op(Op::Gather(ids), &[table])
    }
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.forward_op(Op::Transpose, &[a])
    }
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.forward_op(Op::SliceRows { start, end }, &[a])
    }
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.forward_op(Op::SliceCols { start, end }, &[a])
    }
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.forward_op(Op::ConcatRows, parts)
    }
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.forward_op(Op::ConcatCols, parts)
    }
    pub fn stop_gradient(&mut self, a: Var) -> Result<Var> {
        self.forward_op(Op::StopGradient, &[a])
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient of the loss with respect to any node; zero if unreachable.
    pub fn wrt(&self, graph: &Graph, v: Var) -> Tensor {
        self.nodes[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(graph.shape(v)))
    }

    /// Gradients of every registered parameter, zero where unreachable.
    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let i = g.constant(m(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let out = g.matmul(a, i).unwrap();
        assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn sum_axis_zero() {
        let mut g = Graph::new();
        let a = g.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let s = g.sum_axis(a, 0).unwrap();
        assert_eq!(g.value(s).shape(), &[2]);
        assert_eq!(g.value(s).data(), &[4.0, 6.0]);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
        assert!(err.contains("[2, 3]"), "{err}");
        let c = g.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(g.add(a, c), Err(Error::Shape { op: "add", .. })));
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(m(&[&[1.0, 1.0, 1.0]]));
        let gain = g.constant(Tensor::full(&[3], 1.0));
        let bias = g.constant(Tensor::zeros(&[3]));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        // (x - mean) = 0 exactly, so the epsilon guard leaves a clean zero.
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn linear_gradient() {
        let mut g = Graph::new();
        let w = g.param("w", Tensor::vector(vec![0.5, -1.0, 2.0])).unwrap();
        let x = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let wx = g.mul(w, x).unwrap();
        let loss = g.sum(wx).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.params()["w"].data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn quadratic_gradient() {
        let mut g = Graph::new();
        let w = g.param("w", Tensor::scalar(5.0)).unwrap();
        let two = g.constant(Tensor::scalar(2.0));
        let d = g.sub(w, two).unwrap();
        let sq = g.mul(d, d).unwrap();
        let grads = g.backward(sq).unwrap();
        assert_eq!(grads.params()["w"].item(), 6.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let w = g.param("w", Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert!(g.backward(w).is_err());
    }

    #[test]
    fn unreachable_param_gets_zero() {
        let mut g = Graph::new();
        let w = g.param("w", Tensor::scalar(3.0)).unwrap();
        g.param("unused", Tensor::vector(vec![1.0, 1.0])).unwrap();
        let loss = g.scale(w, 2.0).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.params()["unused"].data(), &[0.0, 0.0]);
        assert_eq!(grads.params()["w"].item(), 2.0);
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let mut g = Graph::new();
        let w = g.param("w", Tensor::scalar(3.0)).unwrap();
        let s = g.stop_gradient(w).unwrap();
        let y = g.mul(w, s).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.params()["w"].item(), 3.0);
    }

    #[test]
    fn duplicate_param_rejected() {
        let mut g = Graph::new();
        g.param("w", Tensor::scalar(1.0)).unwrap();
        assert!(g.param("w", Tensor::scalar(1.0)).is_err());
    }
}
