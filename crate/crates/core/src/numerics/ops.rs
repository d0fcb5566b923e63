//! Primitive operation set shared by the eager evaluator and the gradient tape.
//!
//! Composite layers (softmax, linear, attention, normalization, the generator)
//! are written once against [`Ops`]. Evaluating them with [`Eager`] or with
//! [`Tape`](super::tape::Tape) calls the same tensor kernels in the same order,
//! so both backends produce bit-identical values.

use std::fmt;
use std::marker::PhantomData;

use super::contract;
use super::tensor::{Scalar, Tensor};
use crate::error::Result;

/// Elementwise unary maps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unary {
    Exp,
    Powf(f64),
    Sigmoid,
    Softplus,
    Relu,
    /// `1` where the input is positive, `0` elsewhere. Not differentiated.
    Step,
    Scale(f64),
    AddScalar(f64),
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Unary {
    pub fn apply<T: Scalar>(self, t: &Tensor<T>) -> Tensor<T> {
        match self {
            Unary::Exp => t.map(|x| x.exp()),
            Unary::Powf(p) => {
                let p = T::from_f64(p);
                t.map(|x| x.powf(p))
            }
            Unary::Sigmoid => t.map(sigmoid),
            Unary::Softplus => t.map(softplus),
            // ReLU subgradient at 0 is 0, matching Step.
            Unary::Relu => t.map(|x| if x > T::zero() { x } else { T::zero() }),
            Unary::Step => t.map(|x| if x > T::zero() { T::one() } else { T::zero() }),
            Unary::Scale(c) => {
                let c = T::from_f64(c);
                t.map(|x| x * c)
            }
            Unary::AddScalar(c) => {
                let c = T::from_f64(c);
                t.map(|x| x + c)
            }
        }
    }

    pub fn differentiable(self) -> bool {
        !matches!(self, Unary::Step)
    }
}

/// Names of primitive operations, used in reports and fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Contract,
    Add,
    Sub,
    Mul,
    Div,
    Exp,
    Powf,
    Sigmoid,
    Softplus,
    Relu,
    Step,
    Scale,
    AddScalar,
    SumAxis,
    MaxAxis,
    Expand,
    Reshape,
    Permute,
    Slice,
    Pad,
}

impl OpKind {
    pub const ALL: [OpKind; 21] = [
        OpKind::Leaf,
        OpKind::Contract,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::Exp,
        OpKind::Powf,
        OpKind::Sigmoid,
        OpKind::Softplus,
        OpKind::Relu,
        OpKind::Step,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::SumAxis,
        OpKind::MaxAxis,
        OpKind::Expand,
        OpKind::Reshape,
        OpKind::Permute,
        OpKind::Slice,
        OpKind::Pad,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Contract => "contract",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Exp => "exp",
            OpKind::Powf => "powf",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Softplus => "softplus",
            OpKind::Relu => "relu",
            OpKind::Step => "step",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::SumAxis => "sum_axis",
            OpKind::MaxAxis => "max_axis",
            OpKind::Expand => "expand",
            OpKind::Reshape => "reshape",
            OpKind::Permute => "permute",
            OpKind::Slice => "slice",
            OpKind::Pad => "pad",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    /// False for leaves and for ops that pass no gradient to their inputs.
    pub fn has_derivative_rule(self) -> bool {
        !matches!(self, OpKind::Leaf | OpKind::Step | OpKind::MaxAxis)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl From<Unary> for OpKind {
    fn from(u: Unary) -> Self {
        match u {
            Unary::Exp => OpKind::Exp,
            Unary::Powf(_) => OpKind::Powf,
            Unary::Sigmoid => OpKind::Sigmoid,
            Unary::Softplus => OpKind::Softplus,
            Unary::Relu => OpKind::Relu,
            Unary::Step => OpKind::Step,
            Unary::Scale(_) => OpKind::Scale,
            Unary::AddScalar(_) => OpKind::AddScalar,
        }
    }
}

/// The primitive operation set. Every composite in this crate is built from
/// these, and every primitive's derivative is expressible in them, which is
/// what makes higher-order differentiation on the tape work.
pub trait Ops {
    type Elem: Scalar;
    type Value: Clone;

    fn constant(&mut self, t: Tensor<Self::Elem>) -> Self::Value;
    fn value<'a>(&'a self, v: &'a Self::Value) -> Result<&'a Tensor<Self::Elem>>;

    fn contract(&mut self, spec: &str, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn sub(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn div(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn unary(&mut self, op: Unary, a: &Self::Value) -> Result<Self::Value>;
    fn sum_axis(&mut self, a: &Self::Value, axis: usize) -> Result<Self::Value>;
    /// Maximum along `axis`; treated as a constant by differentiation.
    fn max_axis_detached(&mut self, a: &Self::Value, axis: usize) -> Result<Self::Value>;
    fn expand(&mut self, a: &Self::Value, axis: usize, extent: usize) -> Result<Self::Value>;
    fn reshape(&mut self, a: &Self::Value, shape: &[usize]) -> Result<Self::Value>;
    fn permute(&mut self, a: &Self::Value, perm: &[usize]) -> Result<Self::Value>;
    fn slice(&mut self, a: &Self::Value, axis: usize, start: usize, len: usize) -> Result<Self::Value>;
    fn pad(&mut self, a: &Self::Value, axis: usize, before: usize, total: usize) -> Result<Self::Value>;

    /// Instrumentation hook: called by attention kernels with the number of
    /// logit entries they just produced.
    fn note_logits(&mut self, _count: usize) {}

    fn shape(&self, v: &Self::Value) -> Result<Vec<usize>> {
        Ok(self.value(v)?.shape().to_vec())
    }

    fn exp(&mut self, a: &Self::Value) -> Result<Self::Value> {
        self.unary(Unary::Exp, a)
    }

    fn powf(&mut self, a: &Self::Value, p: f64) -> Result<Self::Value> {
        self.unary(Unary::Powf(p), a)
    }

    fn sigmoid(&mut self, a: &Self::Value) -> Result<Self::Value> {
        self.unary(Unary::Sigmoid, a)
    }

    fn softplus(&mut self, a: &Self::Value) -> Result<Self::Value> {
        self.unary(Unary::Softplus, a)
    }

    fn relu(&mut self, a: &Self::Value) -> Result<Self::Value> {
        self.unary(Unary::Relu, a)
    }

    fn scale(&mut self, a: &Self::Value, c: f64) -> Result<Self::Value> {
        self.unary(Unary::Scale(c), a)
    }

    fn add_scalar(&mut self, a: &Self::Value, c: f64) -> Result<Self::Value> {
        self.unary(Unary::AddScalar(c), a)
    }
}

/// Direct evaluation with no recording.
#[derive(Debug, Default)]
pub struct Eager<T = f64> {
    logits: u64,
    _elem: PhantomData<T>,
}

impl<T: Scalar> Eager<T> {
    pub fn new() -> Self {
        Self { logits: 0, _elem: PhantomData }
    }

    /// Logit entries reported by attention kernels since construction.
    pub fn logit_count(&self) -> u64 {
        self.logits
    }
}

impl<T: Scalar> Ops for Eager<T> {
    type Elem = T;
    type Value = Tensor<T>;

    fn constant(&mut self, t: Tensor<T>) -> Tensor<T> {
        t
    }

    fn value<'a>(&'a self, v: &'a Tensor<T>) -> Result<&'a Tensor<T>> {
        Ok(v)
    }

    fn contract(&mut self, spec: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        contract::contract(spec, a, b)
    }

    fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        a.add(b)
    }

    fn sub(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        a.sub(b)
    }

    fn mul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        a.mul(b)
    }

    fn div(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        a.div(b)
    }

    fn unary(&mut self, op: Unary, a: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(op.apply(a))
    }

    fn sum_axis(&mut self, a: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
        a.sum_axis(axis)
    }

    fn max_axis_detached(&mut self, a: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
        a.max_axis(axis)
    }

    fn expand(&mut self, a: &Tensor<T>, axis: usize, extent: usize) -> Result<Tensor<T>> {
        a.expand(axis, extent)
    }

    fn reshape(&mut self, a: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
        a.reshape(shape)
    }

    fn permute(&mut self, a: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
        a.permute(perm)
    }

    fn slice(&mut self, a: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        a.slice_axis(axis, start, len)
    }

    fn pad(&mut self, a: &Tensor<T>, axis: usize, before: usize, total: usize) -> Result<Tensor<T>> {
        a.pad_axis(axis, before, total)
    }

    fn note_logits(&mut self, count: usize) {
        self.logits += count as u64;
    }
}
