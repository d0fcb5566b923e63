//! Direct loop implementations used as oracles by the test and verification
//! suites. None of these go through the contraction engine or the tape.

use std::collections::HashMap;

use crate::attention::AttentionWeights;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Einsum by enumerating every label assignment: output labels outermost,
/// then summed labels by first appearance, all row-major.
pub fn einsum_loops(spec: &str, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let bad = |msg: &str| Error::InvalidSpec { spec: spec.to_string(), msg: msg.to_string() };
    let (ins, out) = spec.split_once("->").ok_or_else(|| bad("missing ->"))?;
    let (la, lb) = ins.split_once(',').ok_or_else(|| bad("missing ,"))?;
    let la: Vec<char> = la.trim().chars().collect();
    let lb: Vec<char> = lb.trim().chars().collect();
    let lo: Vec<char> = out.trim().chars().collect();
    if la.len() != a.rank() || lb.len() != b.rank() {
        return Err(bad("rank mismatch"));
    }
    let mut extent: HashMap<char, usize> = HashMap::new();
    for (labels, t) in [(&la, a), (&lb, b)] {
        for (c, &e) in labels.iter().zip(t.shape()) {
            if *extent.entry(*c).or_insert(e) != e {
                return Err(Error::ShapeMismatch {
                    op: "einsum_loops",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
        }
    }
    let mut order = lo.clone();
    for &c in la.iter().chain(&lb) {
        if !order.contains(&c) {
            order.push(c);
        }
    }
    let ext: Vec<usize> = order.iter().map(|c| extent[c]).collect();
    let out_shape: Vec<usize> = lo.iter().map(|c| extent[c]).collect();
    let out_len: usize = out_shape.iter().product();
    let mut out_data = vec![0.0; out_len];
    let total: usize = ext.iter().product();
    let pos =
        |labels: &[char]| -> Vec<usize> { labels.iter().map(|c| order.iter().position(|o| o == c).unwrap()).collect() };
    let (pa, pb, po) = (pos(&la), pos(&lb), pos(&lo));
    let mut idx = vec![0usize; order.len()];
    for _ in 0..total {
        let ia: Vec<usize> = pa.iter().map(|&p| idx[p]).collect();
        let ib: Vec<usize> = pb.iter().map(|&p| idx[p]).collect();
        let mut o = 0;
        for (k, &p) in po.iter().enumerate() {
            o = o * out_shape[k] + idx[p];
        }
        out_data[o] += a.get(&ia) * b.get(&ib);
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < ext[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    if out_shape.is_empty() {
        return Ok(Tensor::scalar(out_data[0]));
    }
    Tensor::new(&out_shape, out_data)
}

/// `out[b, i, j, (di·p + dj)·d + c] = in[b, i·p + di, j·p + dj, c]`.
pub fn space_to_depth_loops(x: &Tensor, p: usize) -> Tensor {
    let [b, h, w, d]: [usize; 4] = x.shape().try_into().expect("rank 4");
    let mut out = Tensor::zeros(&[b, h / p, w / p, p * p * d]);
    for bi in 0..b {
        for i in 0..h / p {
            for j in 0..w / p {
                for di in 0..p {
                    for dj in 0..p {
                        for c in 0..d {
                            let v = x.get(&[bi, i * p + di, j * p + dj, c]);
                            out.set(&[bi, i, j, (di * p + dj) * d + c], v);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Patch `i·(w/p) + j`, position `di·p + dj` holds pixel `(i·p + di, j·p + dj)`.
pub fn block_loops(x: &Tensor, p: usize) -> Tensor {
    let [b, h, w, d]: [usize; 4] = x.shape().try_into().expect("rank 4");
    let mut out = Tensor::zeros(&[b, (h / p) * (w / p), p * p, d]);
    for bi in 0..b {
        for r in 0..h {
            for col in 0..w {
                let patch = (r / p) * (w / p) + col / p;
                let within = (r % p) * p + col % p;
                for c in 0..d {
                    out.set(&[bi, patch, within, c], x.get(&[bi, r, col, c]));
                }
            }
        }
    }
    out
}

/// `out[b, i, j, c] = in[b, i/2, j/2, c]`.
pub fn nearest_upsample_loops(x: &Tensor) -> Tensor {
    let [b, h, w, d]: [usize; 4] = x.shape().try_into().expect("rank 4");
    let mut out = Tensor::zeros(&[b, 2 * h, 2 * w, d]);
    for bi in 0..b {
        for i in 0..2 * h {
            for j in 0..2 * w {
                for c in 0..d {
                    out.set(&[bi, i, j, c], x.get(&[bi, i / 2, j / 2, c]));
                }
            }
        }
    }
    out
}

/// Multi-query attention of `x: [b, N, d]` over `kv: [b, L, d_kv]` where head
/// `h` lets query `i` see key `j` only when `mask(h, i, j)` holds.
pub fn masked_attention(
    x: &Tensor,
    kv: &Tensor,
    w: &AttentionWeights<Tensor>,
    mask: impl Fn(usize, usize, usize) -> bool,
) -> Tensor {
    let [b, n, d]: [usize; 3] = x.shape().try_into().expect("rank 3");
    let [_, l, dkv]: [usize; 3] = kv.shape().try_into().expect("rank 3");
    let [heads, _, kd]: [usize; 3] = w.query.shape().try_into().expect("rank 3");
    let vd = w.value.shape()[1];
    let scale = 1.0 / (kd as f64).sqrt();
    let mut out = Tensor::zeros(&[b, n, d]);
    for bi in 0..b {
        let keys: Vec<Vec<f64>> = (0..l)
            .map(|j| (0..kd).map(|t| (0..dkv).map(|c| kv.get(&[bi, j, c]) * w.key.get(&[c, t])).sum()).collect())
            .collect();
        let values: Vec<Vec<f64>> = (0..l)
            .map(|j| (0..vd).map(|t| (0..dkv).map(|c| kv.get(&[bi, j, c]) * w.value.get(&[c, t])).sum()).collect())
            .collect();
        for hh in 0..heads {
            for i in 0..n {
                let q: Vec<f64> =
                    (0..kd).map(|t| (0..d).map(|c| x.get(&[bi, i, c]) * w.query.get(&[hh, c, t])).sum()).collect();
                let visible: Vec<usize> = (0..l).filter(|&j| mask(hh, i, j)).collect();
                let logits: Vec<f64> =
                    visible.iter().map(|&j| q.iter().zip(&keys[j]).map(|(a, b)| a * b).sum::<f64>() * scale).collect();
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|z| (z - mx).exp()).collect();
                let s: f64 = e.iter().sum();
                let mut agg = vec![0.0; vd];
                for (wgt, &j) in e.iter().zip(&visible) {
                    for t in 0..vd {
                        agg[t] += wgt / s * values[j][t];
                    }
                }
                for c in 0..d {
                    let add: f64 = (0..vd).map(|t| agg[t] * w.output.get(&[hh, c, t])).sum();
                    let cur = out.get(&[bi, i, c]);
                    out.set(&[bi, i, c], cur + add);
                }
            }
        }
    }
    out
}

/// Multi-axis attention on a `[b, m, n, d]` blocked tensor via masked full
/// attention over the `m·n` flattened positions.
pub fn multi_axis_loops(x: &Tensor, w: &AttentionWeights<Tensor>) -> Tensor {
    let [b, m, n, d]: [usize; 4] = x.shape().try_into().expect("rank 4");
    let heads = w.query.shape()[0];
    let flat = x.reshape(&[b, m * n, d]).unwrap();
    let out = masked_attention(&flat, &flat, w, |h, i, j| if h < heads / 2 { i % n == j % n } else { i / n == j / n });
    out.reshape(&[b, m, n, d]).unwrap()
}

/// Maps `[-1, 1]` to a byte with round-half-to-even.
pub fn to_byte(v: f64) -> u8 {
    let s = ((v + 1.0) / 2.0 * 255.0).clamp(0.0, 255.0);
    let f = s.floor();
    let r = if s - f > 0.5 || (s - f == 0.5 && f % 2.0 != 0.0) { f + 1.0 } else { f };
    r as u8
}
