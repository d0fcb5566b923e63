//! Two-operand einsum-style contraction.
//!
//! A spec such as `"bmnd,hdk->bhmnk"` labels every axis of both operands and
//! names the output axes explicitly. Labels absent from the output are summed.
//! Summation order is fixed: contracted labels are ordered by first appearance
//! (left operand, then right), iterated row-major, accumulated from zero. The
//! result is therefore bit-reproducible regardless of thread count.

use rayon::prelude::*;

use super::tensor::{strides_of, Scalar, Tensor};
use crate::error::{Error, Result};

/// Parsed two-operand contraction descriptor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContractionSpec {
    pub lhs: Vec<char>,
    pub rhs: Vec<char>,
    pub out: Vec<char>,
}

impl ContractionSpec {
    pub fn parse(spec: &str) -> Result<Self> {
        let bad = |msg: &str| Error::InvalidSpec { spec: spec.to_string(), msg: msg.to_string() };
        let compact: String = spec.chars().filter(|c| !c.is_whitespace()).collect();
        let (inputs, out) = compact.split_once("->").ok_or_else(|| bad("missing '->' output section"))?;
        let operands: Vec<&str> = inputs.split(',').collect();
        if operands.len() != 2 {
            return Err(bad("exactly two operands are supported"));
        }
        let labels = |s: &str| -> Result<Vec<char>> {
            let v: Vec<char> = s.chars().collect();
            if let Some(c) = v.iter().find(|c| !c.is_ascii_alphabetic()) {
                return Err(bad(&format!("invalid label {c:?}")));
            }
            Ok(v)
        };
        let parsed = Self { lhs: labels(operands[0])?, rhs: labels(operands[1])?, out: labels(out)? };
        parsed.validate().map_err(|m| bad(&m))?;
        Ok(parsed)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        for side in [&self.lhs, &self.rhs, &self.out] {
            for (i, c) in side.iter().enumerate() {
                if side[..i].contains(c) {
                    return Err(format!("label {c:?} repeated within one operand"));
                }
            }
        }
        for c in &self.out {
            if !self.lhs.contains(c) && !self.rhs.contains(c) {
                return Err(format!("output label {c:?} does not appear in any input"));
            }
        }
        Ok(())
    }

    /// Contracted labels in summation order.
    pub fn summed(&self) -> Vec<char> {
        let mut v = Vec::new();
        for &c in self.lhs.iter().chain(&self.rhs) {
            if !self.out.contains(&c) && !v.contains(&c) {
                v.push(c);
            }
        }
        v
    }

    pub fn render(&self) -> String {
        let s = |v: &[char]| v.iter().collect::<String>();
        format!("{},{}->{}", s(&self.lhs), s(&self.rhs), s(&self.out))
    }
}

/// Per-label extent bookkeeping shared by the kernel and its callers.
struct Plan {
    out_shape: Vec<usize>,
    out_a: Vec<usize>,
    out_b: Vec<usize>,
    sum_ext: Vec<usize>,
    sum_a: Vec<usize>,
    sum_b: Vec<usize>,
}

fn plan(spec: &ContractionSpec, a_shape: &[usize], b_shape: &[usize], text: &str) -> Result<Plan> {
    let bad = |msg: String| Error::InvalidSpec { spec: text.to_string(), msg };
    if spec.lhs.len() != a_shape.len() {
        return Err(bad(format!("left operand has rank {}, spec labels {}", a_shape.len(), spec.lhs.len())));
    }
    if spec.rhs.len() != b_shape.len() {
        return Err(bad(format!("right operand has rank {}, spec labels {}", b_shape.len(), spec.rhs.len())));
    }
    let extent = |c: char| -> Result<usize> {
        let ea = spec.lhs.iter().position(|&x| x == c).map(|i| a_shape[i]);
        let eb = spec.rhs.iter().position(|&x| x == c).map(|i| b_shape[i]);
        match (ea, eb) {
            (Some(x), Some(y)) if x != y => {
                Err(Error::ShapeMismatch { op: "contract", lhs: a_shape.to_vec(), rhs: b_shape.to_vec() })
            }
            (Some(x), _) | (None, Some(x)) => Ok(x),
            (None, None) => unreachable!("label validated"),
        }
    };
    let stride_in =
        |labels: &[char], strides: &[usize], c: char| labels.iter().position(|&x| x == c).map_or(0, |i| strides[i]);
    let sa = strides_of(a_shape);
    let sb = strides_of(b_shape);
    let mut p = Plan {
        out_shape: Vec::new(),
        out_a: Vec::new(),
        out_b: Vec::new(),
        sum_ext: Vec::new(),
        sum_a: Vec::new(),
        sum_b: Vec::new(),
    };
    for &c in &spec.out {
        p.out_shape.push(extent(c)?);
        p.out_a.push(stride_in(&spec.lhs, &sa, c));
        p.out_b.push(stride_in(&spec.rhs, &sb, c));
    }
    for c in spec.summed() {
        p.sum_ext.push(extent(c)?);
        p.sum_a.push(stride_in(&spec.lhs, &sa, c));
        p.sum_b.push(stride_in(&spec.rhs, &sb, c));
    }
    Ok(p)
}

/// `out[o] = Σ_s a[..]·b[..]` for the given spec. See the module docs for the
/// summation order guarantee.
pub fn contract<T: Scalar>(spec: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let parsed = ContractionSpec::parse(spec)?;
    contract_parsed(&parsed, spec, a, b)
}

pub(crate) fn contract_parsed<T: Scalar>(
    spec: &ContractionSpec,
    text: &str,
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<Tensor<T>> {
    let p = plan(spec, a.shape(), b.shape(), text)?;
    let numel: usize = p.out_shape.iter().product();
    let inner_len: usize = p.sum_ext.iter().product();
    let mut out = vec![T::zero(); numel];

    const CHUNK: usize = 1024;
    let ad = a.data();
    let bd = b.data();
    let fill = |start: usize, dst: &mut [T]| {
        let rank = p.out_shape.len();
        let mut idx = vec![0usize; rank];
        let mut rem = start;
        let (mut oa, mut ob) = (0usize, 0usize);
        for ax in (0..rank).rev() {
            idx[ax] = rem % p.out_shape[ax];
            rem /= p.out_shape[ax];
            oa += idx[ax] * p.out_a[ax];
            ob += idx[ax] * p.out_b[ax];
        }
        for slot in dst.iter_mut() {
            *slot = inner_sum(&p, ad, bd, oa, ob);
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                oa += p.out_a[ax];
                ob += p.out_b[ax];
                if idx[ax] < p.out_shape[ax] {
                    break;
                }
                oa -= p.out_a[ax] * p.out_shape[ax];
                ob -= p.out_b[ax] * p.out_shape[ax];
                idx[ax] = 0;
            }
        }
    };
    if numel * inner_len.max(1) >= 1 << 16 {
        out.par_chunks_mut(CHUNK).enumerate().for_each(|(c, dst)| fill(c * CHUNK, dst));
    } else {
        fill(0, &mut out);
    }
    Tensor::new(&p.out_shape, out)
}

#[inline]
fn inner_sum<T: Scalar>(p: &Plan, a: &[T], b: &[T], oa: usize, ob: usize) -> T {
    let mut acc = T::zero();
    match p.sum_ext.len() {
        0 => acc = acc + a[oa] * b[ob],
        1 => {
            let (sa, sb) = (p.sum_a[0], p.sum_b[0]);
            for t in 0..p.sum_ext[0] {
                acc = acc + a[oa + t * sa] * b[ob + t * sb];
            }
        }
        n => {
            let mut idx = vec![0usize; n];
            let (mut ia, mut ib) = (oa, ob);
            loop {
                acc = acc + a[ia] * b[ib];
                let mut ax = n;
                loop {
                    if ax == 0 {
                        return acc;
                    }
                    ax -= 1;
                    idx[ax] += 1;
                    ia += p.sum_a[ax];
                    ib += p.sum_b[ax];
                    if idx[ax] < p.sum_ext[ax] {
                        break;
                    }
                    ia -= p.sum_a[ax] * p.sum_ext[ax];
                    ib -= p.sum_b[ax] * p.sum_ext[ax];
                    idx[ax] = 0;
                }
            }
        }
    }
    acc
}
