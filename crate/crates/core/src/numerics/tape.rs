//! Reverse-mode differentiation over a recorded operation list.
//!
//! Every primitive's vector-Jacobian product is itself recorded as primitive
//! operations on the same tape. Gradients returned by [`Tape::grad`] are
//! therefore ordinary tape variables and can be differentiated again, which is
//! how the R1 penalty is trained through.

use std::sync::atomic::{AtomicU32, Ordering};

use super::contract::{contract_parsed, ContractionSpec};
use super::ops::{OpKind, Ops, Unary};
use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.index as usize
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Contract(ContractionSpec, String),
    Add,
    Sub,
    Mul,
    Div,
    Unary(Unary),
    SumAxis(usize),
    MaxAxis(usize),
    Expand { axis: usize, extent: usize },
    Reshape(Vec<usize>),
    Permute(Vec<usize>),
    Slice { axis: usize, start: usize, len: usize },
    Pad { axis: usize, before: usize, total: usize },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Contract(..) => OpKind::Contract,
            Op::Add => OpKind::Add,
            Op::Sub => OpKind::Sub,
            Op::Mul => OpKind::Mul,
            Op::Div => OpKind::Div,
            Op::Unary(u) => (*u).into(),
            Op::SumAxis(_) => OpKind::SumAxis,
            Op::MaxAxis(_) => OpKind::MaxAxis,
            Op::Expand { .. } => OpKind::Expand,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Permute(_) => OpKind::Permute,
            Op::Slice { .. } => OpKind::Slice,
            Op::Pad { .. } => OpKind::Pad,
        }
    }

    fn differentiable(&self) -> bool {
        match self {
            Op::Leaf | Op::MaxAxis(_) => false,
            Op::Unary(u) => u.differentiable(),
            _ => true,
        }
    }

    fn eval(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        match self {
            Op::Leaf => unreachable!("leaves carry their own value"),
            Op::Contract(spec, text) => contract_parsed(spec, text, inputs[0], inputs[1]),
            Op::Add => inputs[0].add(inputs[1]),
            Op::Sub => inputs[0].sub(inputs[1]),
            Op::Mul => inputs[0].mul(inputs[1]),
            Op::Div => inputs[0].div(inputs[1]),
            Op::Unary(u) => Ok(u.apply(inputs[0])),
            Op::SumAxis(axis) => inputs[0].sum_axis(*axis),
            Op::MaxAxis(axis) => inputs[0].max_axis(*axis),
            Op::Expand { axis, extent } => inputs[0].expand(*axis, *extent),
            Op::Reshape(shape) => inputs[0].reshape(shape),
            Op::Permute(perm) => inputs[0].permute(perm),
            Op::Slice { axis, start, len } => inputs[0].slice_axis(*axis, *start, *len),
            Op::Pad { axis, before, total } => inputs[0].pad_axis(*axis, *before, *total),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    inputs: Vec<u32>,
    value: Tensor,
    requires_grad: bool,
    tracked: bool,
}

/// Gradients of a scalar loss, one per tracked leaf.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    entries: Vec<(Var, Tensor)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.entries.iter().find(|(k, _)| *k == v).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = &(Var, Tensor)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Ordered record of f64 operations with saved outputs.
///
/// A tape is single-writer: recording and differentiation take `&mut self`.
#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), fault: None }
    }

    /// Test fixture: perturbs the derivative rule of one primitive so that
    /// verification suites can demonstrate they catch a broken rule.
    pub fn with_faulty_rule(mut self, kind: OpKind) -> Self {
        self.fault = Some(kind);
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Tracked leaf: receives a gradient from [`Tape::backward`].
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, Vec::new(), t, true, true)
    }

    /// Differentiable input that is not reported by [`Tape::backward`]; use
    /// it for data whose gradient is taken explicitly with [`Tape::grad`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, Vec::new(), t, true, false)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, Vec::new(), t, false, false)
    }

    fn push(&mut self, op: Op, inputs: Vec<u32>, value: Tensor, requires_grad: bool, tracked: bool) -> Var {
        let index = u32::try_from(self.nodes.len()).expect("tape length fits in u32");
        self.nodes.push(Node { op, inputs, value, requires_grad, tracked });
        Var { tape: self.id, index }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index() >= self.nodes.len() {
            return Err(Error::NotOnTape);
        }
        Ok(v.index())
    }

    fn var(&self, index: usize) -> Var {
        Var { tape: self.id, index: index as u32 }
    }

    pub fn get(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.nodes[self.check(v)?].value)
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        Ok(self.nodes[self.check(v)?].requires_grad)
    }

    pub fn op_kind(&self, v: Var) -> Result<OpKind> {
        Ok(self.nodes[self.check(v)?].op.kind())
    }

    /// Kinds of every recorded node, in recording order.
    pub fn op_kinds(&self) -> impl Iterator<Item = OpKind> + '_ {
        self.nodes.iter().map(|n| n.op.kind())
    }

    fn record(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        let idx: Vec<usize> = inputs.iter().map(|&v| self.check(v)).collect::<Result<_>>()?;
        let value = {
            let vals: Vec<&Tensor> = idx.iter().map(|&i| &self.nodes[i].value).collect();
            op.eval(&vals)?
        };
        let requires_grad = op.differentiable() && idx.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push(op, idx.into_iter().map(|i| i as u32).collect(), value, requires_grad, false))
    }

    /// Gradients of `loss` with respect to `wrt`, recorded on this tape so they
    /// can be differentiated further. Variables the loss does not depend on get
    /// a zero constant.
    pub fn grad(&mut self, loss: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let grads = self.propagate(loss)?;
        wrt.iter()
            .map(|&w| {
                let i = self.check(w)?;
                Ok(match grads.get(i).copied().flatten() {
                    Some(g) => g,
                    None => {
                        let zeros = Tensor::zeros(self.nodes[i].value.shape());
                        self.constant(zeros)
                    }
                })
            })
            .collect()
    }

    /// First-order gradients of a scalar loss for every tracked leaf.
    ///
    /// The tape is left exactly as it was: intermediate derivative nodes are
    /// discarded before returning.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let mark = self.nodes.len();
        let result = self.propagate(loss).map(|grads| {
            let mut entries = Vec::new();
            for i in 0..mark {
                if !self.nodes[i].tracked {
                    continue;
                }
                let value = match grads.get(i).copied().flatten() {
                    Some(g) => self.nodes[g.index()].value.clone(),
                    None => Tensor::zeros(self.nodes[i].value.shape()),
                };
                entries.push((self.var(i), value));
            }
            Gradients { entries }
        });
        self.nodes.truncate(mark);
        result
    }

    fn propagate(&mut self, loss: Var) -> Result<Vec<Option<Var>>> {
        let li = self.check(loss)?;
        let shape = self.nodes[li].value.shape().to_vec();
        if self.nodes[li].value.numel() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Var>> = vec![None; li + 1];
        if !self.nodes[li].requires_grad {
            return Ok(grads);
        }
        grads[li] = Some(self.constant(Tensor::ones(&shape)));
        for i in (0..=li).rev() {
            let Some(g) = grads[i] else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let op = node.op.clone();
            let inputs: Vec<usize> = node.inputs.iter().map(|&x| x as usize).collect();
            let needs: Vec<bool> = inputs.iter().map(|&j| self.nodes[j].requires_grad).collect();
            let contributions = self.vjp(&op, i, &inputs, &needs, g)?;
            for ((&j, need), c) in inputs.iter().zip(needs).zip(contributions) {
                let (true, Some(mut c)) = (need, c) else { continue };
                if self.fault == Some(op.kind()) {
                    c = self.scale(&c, 1.5)?;
                }
                grads[j] = Some(match grads[j] {
                    Some(prev) => self.add(&prev, &c)?,
                    None => c,
                });
            }
        }
        Ok(grads)
    }

    /// Recorded vector-Jacobian product of node `out` for each input.
    fn vjp(&mut self, op: &Op, out: usize, inputs: &[usize], needs: &[bool], g: Var) -> Result<Vec<Option<Var>>> {
        let id = self.id;
        let x = |k: usize| Var { tape: id, index: inputs[k] as u32 };
        let out = self.var(out);
        let in_shape = |tape: &Self, k: usize| tape.nodes[inputs[k]].value.shape().to_vec();
        Ok(match op {
            Op::Leaf | Op::MaxAxis(_) => vec![None; inputs.len()],
            Op::Contract(spec, _) => {
                let ga = if needs[0] {
                    Some(self.contract_grad(&spec.out, &spec.rhs, &spec.lhs, g, x(1), &in_shape(self, 0))?)
                } else {
                    None
                };
                let gb = if needs[1] {
                    Some(self.contract_grad(&spec.lhs, &spec.out, &spec.rhs, x(0), g, &in_shape(self, 1))?)
                } else {
                    None
                };
                vec![ga, gb]
            }
            Op::Add => vec![Some(g), Some(g)],
            Op::Sub => vec![Some(g), Some(self.scale(&g, -1.0)?)],
            Op::Mul => {
                let ga = if needs[0] { Some(self.mul(&g, &x(1))?) } else { None };
                let gb = if needs[1] { Some(self.mul(&g, &x(0))?) } else { None };
                vec![ga, gb]
            }
            Op::Div => {
                let ga = if needs[0] { Some(self.div(&g, &x(1))?) } else { None };
                let gb = if needs[1] {
                    let t = self.mul(&g, &out)?;
                    let t = self.div(&t, &x(1))?;
                    Some(self.scale(&t, -1.0)?)
                } else {
                    None
                };
                vec![ga, gb]
            }
            Op::Unary(u) => {
                let d = match *u {
                    Unary::Exp => self.mul(&g, &out)?,
                    Unary::Powf(p) => {
                        let t = self.powf(&x(0), p - 1.0)?;
                        let t = self.scale(&t, p)?;
                        self.mul(&g, &t)?
                    }
                    Unary::Sigmoid => {
                        let one_minus = self.scale(&out, -1.0)?;
                        let one_minus = self.add_scalar(&one_minus, 1.0)?;
                        let t = self.mul(&out, &one_minus)?;
                        self.mul(&g, &t)?
                    }
                    Unary::Softplus => {
                        let s = self.sigmoid(&x(0))?;
                        self.mul(&g, &s)?
                    }
                    Unary::Relu => {
                        let mask = self.unary(Unary::Step, &x(0))?;
                        self.mul(&g, &mask)?
                    }
                    Unary::Scale(c) => self.scale(&g, c)?,
                    Unary::AddScalar(_) => g,
                    Unary::Step => return Ok(vec![None]),
                };
                vec![Some(d)]
            }
            Op::SumAxis(axis) => {
                let extent = in_shape(self, 0)[*axis];
                vec![Some(self.expand(&g, *axis, extent)?)]
            }
            Op::Expand { axis, .. } => vec![Some(self.sum_axis(&g, *axis)?)],
            Op::Reshape(_) => {
                let shape = in_shape(self, 0);
                vec![Some(self.reshape(&g, &shape)?)]
            }
            Op::Permute(perm) => {
                let mut inv = vec![0; perm.len()];
                for (j, &p) in perm.iter().enumerate() {
                    inv[p] = j;
                }
                vec![Some(self.permute(&g, &inv)?)]
            }
            Op::Slice { axis, start, .. } => {
                let total = in_shape(self, 0)[*axis];
                vec![Some(self.pad(&g, *axis, *start, total)?)]
            }
            Op::Pad { axis, before, .. } => {
                let len = in_shape(self, 0)[*axis];
                vec![Some(self.slice(&g, *axis, *before, len)?)]
            }
        })
    }

    /// Gradient of one contraction operand: contract the other two tensors
    /// onto `target` labels, then broadcast labels that only `target` carried.
    fn contract_grad(
        &mut self,
        left_labels: &[char],
        right_labels: &[char],
        target: &[char],
        left: Var,
        right: Var,
        target_shape: &[usize],
    ) -> Result<Var> {
        let kept: Vec<char> =
            target.iter().copied().filter(|c| left_labels.contains(c) || right_labels.contains(c)).collect();
        let spec = ContractionSpec { lhs: left_labels.to_vec(), rhs: right_labels.to_vec(), out: kept };
        let mut v = self.contract(&spec.render(), &left, &right)?;
        for (pos, c) in target.iter().enumerate() {
            if !spec.out.contains(c) {
                v = self.expand(&v, pos, target_shape[pos])?;
            }
        }
        Ok(v)
    }

    /// Recomputes every node from the leaves.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Leaf => node.value.clone(),
                ref op => {
                    let ins: Vec<&Tensor> = node.inputs.iter().map(|&j| &values[j as usize]).collect();
                    op.eval(&ins)?
                }
            };
            values.push(v);
        }
        Ok(values)
    }

    /// True when [`Tape::replay`] reproduces every recorded value bit for bit.
    pub fn replay_matches(&self) -> Result<bool> {
        let replayed = self.replay()?;
        Ok(self.nodes.iter().zip(&replayed).all(|(n, r)| {
            n.value.shape() == r.shape() && n.value.data().iter().zip(r.data()).all(|(a, b)| a.to_bits() == b.to_bits())
        }))
    }
}

impl Ops for Tape {
    type Elem = f64;
    type Value = Var;

    fn constant(&mut self, t: Tensor) -> Var {
        Tape::constant(self, t)
    }

    fn value<'a>(&'a self, v: &'a Var) -> Result<&'a Tensor> {
        self.get(*v)
    }

    fn contract(&mut self, spec: &str, a: &Var, b: &Var) -> Result<Var> {
        let parsed = ContractionSpec::parse(spec)?;
        self.record(Op::Contract(parsed, spec.to_string()), &[*a, *b])
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.record(Op::Add, &[*a, *b])
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.record(Op::Sub, &[*a, *b])
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.record(Op::Mul, &[*a, *b])
    }

    fn div(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.record(Op::Div, &[*a, *b])
    }

    fn unary(&mut self, op: Unary, a: &Var) -> Result<Var> {
        self.record(Op::Unary(op), &[*a])
    }

    fn sum_axis(&mut self, a: &Var, axis: usize) -> Result<Var> {
        self.record(Op::SumAxis(axis), &[*a])
    }

    fn max_axis_detached(&mut self, a: &Var, axis: usize) -> Result<Var> {
        self.record(Op::MaxAxis(axis), &[*a])
    }

    fn expand(&mut self, a: &Var, axis: usize, extent: usize) -> Result<Var> {
        self.record(Op::Expand { axis, extent }, &[*a])
    }

    fn reshape(&mut self, a: &Var, shape: &[usize]) -> Result<Var> {
        self.record(Op::Reshape(shape.to_vec()), &[*a])
    }

    fn permute(&mut self, a: &Var, perm: &[usize]) -> Result<Var> {
        self.record(Op::Permute(perm.to_vec()), &[*a])
    }

    fn slice(&mut self, a: &Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.record(Op::Slice { axis, start, len }, &[*a])
    }

    fn pad(&mut self, a: &Var, axis: usize, before: usize, total: usize) -> Result<Var> {
        self.record(Op::Pad { axis, before, total }, &[*a])
    }
}
