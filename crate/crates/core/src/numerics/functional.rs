//! Composite layers built from the [`Ops`] primitives.

use super::ops::{Eager, Ops};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

pub fn sum_all<G: Ops>(g: &mut G, x: &G::Value) -> Result<G::Value> {
    let n = g.value(x)?.numel();
    let flat = g.reshape(x, &[n])?;
    g.sum_axis(&flat, 0)
}

pub fn mean_all<G: Ops>(g: &mut G, x: &G::Value) -> Result<G::Value> {
    let n = g.value(x)?.numel();
    let s = sum_all(g, x)?;
    g.scale(&s, 1.0 / n as f64)
}

pub fn square<G: Ops>(g: &mut G, x: &G::Value) -> Result<G::Value> {
    g.mul(x, x)
}

/// `exp(x − max) / Σ exp(x − max)` along `axis`.
pub fn softmax<G: Ops>(g: &mut G, x: &G::Value, axis: usize) -> Result<G::Value> {
    let shape = g.shape(x)?;
    if axis >= shape.len() {
        return Err(Error::AxisOutOfRange { axis, rank: shape.len() });
    }
    let len = shape[axis];
    let m = g.max_axis_detached(x, axis)?;
    let m = g.expand(&m, axis, len)?;
    let shifted = g.sub(x, &m)?;
    let e = g.exp(&shifted)?;
    let s = g.sum_axis(&e, axis)?;
    let s = g.expand(&s, axis, len)?;
    g.div(&e, &s)
}

/// Eager softmax on a plain tensor.
pub fn softmax_tensor<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    softmax(&mut Eager::<T>::new(), x, axis)
}

/// Adds a `[d]` vector along the last axis of `x`.
pub fn add_bias<G: Ops>(g: &mut G, x: &G::Value, bias: &G::Value) -> Result<G::Value> {
    let shape = g.shape(x)?;
    let bshape = g.shape(bias)?;
    let d = *shape.last().ok_or(Error::InvalidShape { op: "add_bias", msg: "rank-0 input".into() })?;
    if bshape != [d] {
        return Err(Error::ShapeMismatch { op: "add_bias", lhs: shape, rhs: bshape });
    }
    let rows = shape.iter().product::<usize>() / d;
    let b = g.expand(bias, 0, rows)?;
    let b = g.reshape(&b, &shape)?;
    g.add(x, &b)
}

/// Multiplies every channel-last vector by a `[d]` vector.
pub fn mul_channels<G: Ops>(g: &mut G, x: &G::Value, scale: &G::Value) -> Result<G::Value> {
    let shape = g.shape(x)?;
    let d = *shape.last().expect("rank >= 1");
    let rows = shape.iter().product::<usize>() / d;
    let s = g.expand(scale, 0, rows)?;
    let s = g.reshape(&s, &shape)?;
    g.mul(x, &s)
}

/// Position-wise affine map over the last axis: `x·W (+ b)` with `W: [d_in, d_out]`.
pub fn linear<G: Ops>(g: &mut G, x: &G::Value, w: &G::Value, b: Option<&G::Value>) -> Result<G::Value> {
    let shape = g.shape(x)?;
    let wshape = g.shape(w)?;
    let d_in = *shape.last().ok_or(Error::InvalidShape { op: "linear", msg: "rank-0 input".into() })?;
    if wshape.len() != 2 || wshape[0] != d_in {
        return Err(Error::ShapeMismatch { op: "linear", lhs: shape, rhs: wshape });
    }
    let rows = shape.iter().product::<usize>() / d_in;
    let flat = g.reshape(x, &[rows, d_in])?;
    let y = g.contract("md,de->me", &flat, w)?;
    let mut out_shape = shape;
    *out_shape.last_mut().unwrap() = wshape[1];
    let y = g.reshape(&y, &out_shape)?;
    match b {
        Some(b) => add_bias(g, &y, b),
        None => Ok(y),
    }
}

/// Two-layer position-wise network `max(0, x·W1 + b1)·W2 + b2`.
#[derive(Debug, Clone)]
pub struct MlpParams<V> {
    pub w1: V,
    pub b1: V,
    pub w2: V,
    pub b2: V,
}

impl<V> MlpParams<V> {
    pub fn map<U>(&self, mut f: impl FnMut(&V) -> U) -> MlpParams<U> {
        MlpParams { w1: f(&self.w1), b1: f(&self.b1), w2: f(&self.w2), b2: f(&self.b2) }
    }
}

pub fn mlp<G: Ops>(g: &mut G, x: &G::Value, p: &MlpParams<G::Value>) -> Result<G::Value> {
    let hidden = linear(g, x, &p.w1, Some(&p.b1))?;
    let hidden = g.relu(&hidden)?;
    linear(g, &hidden, &p.w2, Some(&p.b2))
}

/// Eager MLP on plain tensors.
pub fn mlp_forward<T: Scalar>(x: &Tensor<T>, p: &MlpParams<Tensor<T>>) -> Result<Tensor<T>> {
    mlp(&mut Eager::<T>::new(), x, p)
}

/// Concatenation along `axis`, realized as two zero-pads and a sum.
pub fn concat<G: Ops>(g: &mut G, a: &G::Value, b: &G::Value, axis: usize) -> Result<G::Value> {
    let sa = g.shape(a)?;
    let sb = g.shape(b)?;
    let total = sa[axis] + sb[axis];
    let pa = g.pad(a, axis, 0, total)?;
    let pb = g.pad(b, axis, sa[axis], total)?;
    g.add(&pa, &pb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_uniform_and_ratio() {
        let x = Tensor::<f64>::zeros(&[3]);
        let s = softmax_tensor(&x, 0).unwrap();
        assert!(s.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-16));

        for c in [-50.0, 0.0, 3.25, 700.0] {
            let x = Tensor::<f64>::new(&[2], vec![c, c + std::f64::consts::LN_2]).unwrap();
            let s = softmax_tensor(&x, 0).unwrap();
            // Large offsets round the stored gap away from ln 2.
            let gap = x.data()[1] - x.data()[0];
            let hi = 1.0 / (1.0 + (-gap).exp());
            assert!((s.data()[0] - (1.0 - hi)).abs() < 1e-15, "c={c}");
            assert!((s.data()[1] - hi).abs() < 1e-15, "c={c}");
            if c.abs() < 10.0 {
                assert!((s.data()[0] - 1.0 / 3.0).abs() < 1e-15, "c={c}");
                assert!((s.data()[1] - 2.0 / 3.0).abs() < 1e-15, "c={c}");
            }
        }
    }

    #[test]
    fn softmax_leaves_other_axes_alone() {
        let x = Tensor::<f64>::arange(&[2, 3]);
        let s = softmax_tensor(&x, 0).unwrap();
        for j in 0..3 {
            let col = s.get(&[0, j]) + s.get(&[1, j]);
            assert!((col - 1.0).abs() < 1e-15);
        }
    }

    fn identity(d: usize) -> Tensor {
        Tensor::from_fn(&[d, d], |i| if i / d == i % d { 1.0 } else { 0.0 })
    }

    #[test]
    fn mlp_with_dead_hidden_layer_returns_output_bias() {
        let p = MlpParams {
            w1: identity(3),
            b1: Tensor::full(&[3], -10.0),
            w2: Tensor::ones(&[3, 2]),
            b2: Tensor::new(&[2], vec![0.25, -4.0]).unwrap(),
        };
        let x = Tensor::from_fn(&[2, 2, 3], |i| (i as f64) * 0.3 - 1.0);
        let y = mlp_forward(&x, &p).unwrap();
        assert_eq!(y.shape(), &[2, 2, 2]);
        for pair in y.data().chunks(2) {
            assert_eq!(pair, &[0.25, -4.0]);
        }
    }

    #[test]
    fn mlp_identity_on_nonnegative_input() {
        let p = MlpParams { w1: identity(4), b1: Tensor::zeros(&[4]), w2: identity(4), b2: Tensor::zeros(&[4]) };
        let x = Tensor::from_fn(&[3, 4], |i| i as f64 * 0.5);
        assert_eq!(mlp_forward(&x, &p).unwrap(), x);
    }

    #[test]
    fn mlp_rejects_mismatched_dims() {
        let p = MlpParams {
            w1: Tensor::<f64>::zeros(&[3, 5]),
            b1: Tensor::zeros(&[5]),
            w2: Tensor::zeros(&[4, 2]),
            b2: Tensor::zeros(&[2]),
        };
        assert!(mlp_forward(&Tensor::zeros(&[2, 3]), &p).is_err());
        assert!(mlp_forward(&Tensor::zeros(&[2, 4]), &p).is_err());
    }
}
