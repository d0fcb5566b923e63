use std::fmt;

use num_traits::Float;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Element type tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
    /// Double-double, used by high-precision oracles.
    F64x2,
}

/// Floating point element types a [`Tensor`] can hold.
pub trait Scalar: Float + Send + Sync + fmt::Debug + fmt::Display + Default + 'static {
    const DTYPE: DType;

    fn from_f64(x: f64) -> Self;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64(x: f64) -> Self {
        x as f32
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn from_f64(x: f64) -> Self {
        x
    }
}

/// Dense row-major n-dimensional array.
///
/// Every extent is positive and `shape.iter().product() == data.len()`. A
/// rank-0 tensor holds a single scalar.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<T> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor").field("dtype", &T::DTYPE).field("shape", &self.shape).field("data", &preview).finish()
    }
}

fn check_extents(op: &'static str, shape: &[usize]) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::InvalidShape { op, msg: format!("zero extent in {shape:?}") });
    }
    Ok(())
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Splits `shape` around `axis` into (outer, axis extent, inner) element counts.
#[inline]
fn neumaier_add<T: Scalar>(acc: &mut T, comp: &mut T, x: T) {
    let t = *acc + x;
    if !t.is_finite() {
        *acc = t;
        *comp = T::zero();
        return;
    }
    if acc.abs() >= x.abs() {
        *comp = *comp + ((*acc - t) + x);
    } else {
        *comp = *comp + ((x - t) + *acc);
    }
    *acc = t;
}

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_extents("Tensor::new", shape)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                op: "Tensor::new",
                msg: format!("shape {shape:?} needs {numel} elements, got {}", data.len()),
            });
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    /// Panics on a zero extent.
    pub fn full(shape: &[usize], value: T) -> Self {
        check_extents("Tensor::full", shape).expect("positive extents");
        Self { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    /// Builds a tensor whose element at flat index `i` is `f(i)`.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Self {
        check_extents("Tensor::from_fn", shape).expect("positive extents");
        let n: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..n).map(f).collect() }
    }

    /// `0, 1, 2, ...` in row-major order.
    pub fn arange(shape: &[usize]) -> Self {
        Self::from_fn(shape, |i| T::from_f64(i as f64))
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        Self::from_fn(shape, |_| T::from_f64(rng.sample::<f64, _>(StandardNormal)))
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| T::from_f64(rng.gen_range(lo..hi)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.rank(), "index rank");
        index
            .iter()
            .zip(&self.shape)
            .zip(self.strides())
            .map(|((&i, &e), s)| {
                assert!(i < e, "index {i} out of bounds for extent {e}");
                i * s
            })
            .sum()
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    /// Single element of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::from_f64(x.to_f64().expect("float"))).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch { op, lhs: self.shape.clone(), rhs: other.shape.clone() });
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn div(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "div", |a, b| a / b)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|x| x * c)
    }

    /// Compensated sum of all elements.
    pub fn sum(&self) -> T {
        let (mut acc, mut comp) = (T::zero(), T::zero());
        for &x in &self.data {
            neumaier_add(&mut acc, &mut comp, x);
        }
        acc + comp
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        let d = self.zip_with(other, "max_abs_diff", |a, b| (a - b).abs())?;
        Ok(d.data.iter().fold(T::zero(), |m, &x| m.max(x)))
    }

    fn check_axis(&self, axis: usize) -> Result<()> {
        if axis >= self.rank() {
            return Err(Error::AxisOutOfRange { axis, rank: self.rank() });
        }
        Ok(())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        check_extents("reshape", shape)?;
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::ShapeMismatch { op: "reshape", lhs: self.shape.clone(), rhs: shape.to_vec() });
        }
        Ok(Self { shape: shape.to_vec(), data: self.data.clone() })
    }

    /// Output axis `j` is input axis `perm[j]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidShape {
                op: "permute",
                msg: format!("{perm:?} is not a permutation of {rank} axes"),
            });
        }
        let in_strides = self.strides();
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut data = Vec::with_capacity(self.numel());
        let mut idx = vec![0usize; rank];
        let mut off = 0usize;
        for _ in 0..self.numel() {
            data.push(self.data[off]);
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                off += src_strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                off -= src_strides[ax] * out_shape[ax];
                idx[ax] = 0;
            }
        }
        Ok(Self { shape: out_shape, data })
    }

    /// Sums over `axis` in increasing index order with Neumaier
    /// compensation, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Self> {
        self.check_axis(axis)?;
        let (outer, len, inner) = split_at_axis(&self.shape, axis);
        let mut data = vec![T::zero(); outer * inner];
        let mut comp = vec![T::zero(); inner];
        for o in 0..outer {
            let out = &mut data[o * inner..(o + 1) * inner];
            comp.iter_mut().for_each(|c| *c = T::zero());
            for l in 0..len {
                let src = &self.data[(o * len + l) * inner..(o * len + l + 1) * inner];
                for ((acc, c), &x) in out.iter_mut().zip(comp.iter_mut()).zip(src) {
                    neumaier_add(acc, c, x);
                }
            }
            for (acc, &c) in out.iter_mut().zip(&comp) {
                *acc = *acc + c;
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Ok(Self { shape, data })
    }

    /// Maximum over `axis`, removing it.
    pub fn max_axis(&self, axis: usize) -> Result<Self> {
        self.check_axis(axis)?;
        let (outer, len, inner) = split_at_axis(&self.shape, axis);
        let mut data = vec![T::neg_infinity(); outer * inner];
        for o in 0..outer {
            let out = &mut data[o * inner..(o + 1) * inner];
            for l in 0..len {
                let src = &self.data[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (acc, &x) in out.iter_mut().zip(src) {
                    *acc = acc.max(x);
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Ok(Self { shape, data })
    }

    /// Inserts a new axis at position `axis` with the given extent, replicating values.
    pub fn expand(&self, axis: usize, extent: usize) -> Result<Self> {
        if axis > self.rank() {
            return Err(Error::AxisOutOfRange { axis, rank: self.rank() + 1 });
        }
        check_extents("expand", &[extent])?;
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis..].iter().product();
        let mut data = Vec::with_capacity(self.numel() * extent);
        for o in 0..outer {
            let src = &self.data[o * inner..(o + 1) * inner];
            for _ in 0..extent {
                data.extend_from_slice(src);
            }
        }
        let mut shape = self.shape.clone();
        shape.insert(axis, extent);
        Ok(Self { shape, data })
    }

    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        self.check_axis(axis)?;
        if len == 0 || start + len > self.shape[axis] {
            return Err(Error::InvalidShape {
                op: "slice",
                msg: format!("range {start}..{} on extent {}", start + len, self.shape[axis]),
            });
        }
        let (outer, ext, inner) = split_at_axis(&self.shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Self { shape, data })
    }

    /// Embeds `self` into a zero tensor whose `axis` has extent `total`, at offset `before`.
    pub fn pad_axis(&self, axis: usize, before: usize, total: usize) -> Result<Self> {
        self.check_axis(axis)?;
        let (outer, len, inner) = split_at_axis(&self.shape, axis);
        if before + len > total {
            return Err(Error::InvalidShape {
                op: "pad",
                msg: format!("{len} elements at offset {before} exceed extent {total}"),
            });
        }
        let mut data = vec![T::zero(); outer * total * inner];
        for o in 0..outer {
            let dst = (o * total + before) * inner;
            data[dst..dst + len * inner].copy_from_slice(&self.data[o * len * inner..(o + 1) * len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = total;
        Ok(Self { shape, data })
    }

    /// Concatenates along `axis`.
    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = parts.first().ok_or(Error::InvalidShape { op: "concat", msg: "no inputs".into() })?;
        first.check_axis(axis)?;
        for p in parts {
            let mut a = p.shape.clone();
            let mut b = first.shape.clone();
            if a.len() != b.len() {
                return Err(Error::ShapeMismatch { op: "concat", lhs: b, rhs: a });
            }
            a[axis] = 0;
            b[axis] = 0;
            if a != b {
                return Err(Error::ShapeMismatch { op: "concat", lhs: first.shape.clone(), rhs: p.shape.clone() });
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.numel()).sum());
        for o in 0..outer {
            for p in parts {
                let chunk = p.numel() / outer;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Self { shape, data })
    }
}
