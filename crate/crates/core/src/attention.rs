//! Multi-query attention kernels on blocked feature maps.
//!
//! All kernels share one key and one value projection across heads. Logits are
//! scaled by `1/√k` after the query-key contraction.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blocking::Blocked;
use crate::error::{Error, Result};
use crate::numerics::functional::{concat, mlp, softmax, MlpParams};
use crate::numerics::norm::{normalize, NormKind, NormMode, NormParams, NormState};
use crate::numerics::{Ops, Tensor};

/// Projections of one attention module.
///
/// Shapes: `query [h, d, k]`, `key [d_kv, k]`, `value [d_kv, v]`,
/// `output [h, d, v]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<V> {
    pub query: V,
    pub key: V,
    pub value: V,
    pub output: V,
}

impl<V> AttentionWeights<V> {
    pub fn map<U>(&self, mut f: impl FnMut(&V) -> U) -> AttentionWeights<U> {
        AttentionWeights { query: f(&self.query), key: f(&self.key), value: f(&self.value), output: f(&self.output) }
    }
}

impl AttentionWeights<Tensor> {
    /// Gaussian weights with standard deviation `1/√fan_in`.
    pub fn random<R: Rng + ?Sized>(
        heads: usize,
        dim: usize,
        kv_dim: usize,
        key_dim: usize,
        value_dim: usize,
        rng: &mut R,
    ) -> Self {
        let mut draw = |shape: &[usize], fan_in: usize| {
            let s = 1.0 / (fan_in as f64).sqrt();
            Tensor::randn(shape, rng).scale(s)
        };
        Self {
            query: draw(&[heads, dim, key_dim], dim),
            key: draw(&[kv_dim, key_dim], kv_dim),
            value: draw(&[kv_dim, value_dim], kv_dim),
            output: draw(&[heads, dim, value_dim], value_dim * heads),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Dims {
    heads: usize,
    key: usize,
}

fn dims<G: Ops>(g: &G, w: &AttentionWeights<G::Value>) -> Result<Dims> {
    let q = g.shape(&w.query)?;
    let k = g.shape(&w.key)?;
    let v = g.shape(&w.value)?;
    let o = g.shape(&w.output)?;
    let ok = q.len() == 3
        && k.len() == 2
        && v.len() == 2
        && o.len() == 3
        && k[1] == q[2]
        && v[0] == k[0]
        && o[0] == q[0]
        && o[1] == q[1]
        && o[2] == v[1];
    if !ok {
        return Err(Error::InvalidShape {
            op: "attention weights",
            msg: format!("query {q:?}, key {k:?}, value {v:?}, output {o:?}"),
        });
    }
    Ok(Dims { heads: q[0], key: q[2] })
}

/// Per-layer attention pattern on a `[b, m, n, d]` blocked tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kernel {
    /// First half of the heads dilated, second half regional.
    MultiAxis,
    /// Every head attends within its patch.
    Regional,
    /// Every head attends across patches at a fixed in-patch offset.
    Dilated,
}

/// Attention variants selectable per stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    MultiAxis,
    RegionalOnly,
    DilatedOnly,
    /// Consecutive layers alternate regional and dilated, regional first.
    Interleaved,
    /// Rows and columns of the unblocked map take the place of patches and
    /// in-patch positions.
    Axial,
    Full,
}

impl AttentionMode {
    pub const ALL: [AttentionMode; 6] = [
        AttentionMode::MultiAxis,
        AttentionMode::RegionalOnly,
        AttentionMode::DilatedOnly,
        AttentionMode::Interleaved,
        AttentionMode::Axial,
        AttentionMode::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttentionMode::MultiAxis => "multi_axis",
            AttentionMode::RegionalOnly => "regional_only",
            AttentionMode::DilatedOnly => "dilated_only",
            AttentionMode::Interleaved => "interleaved",
            AttentionMode::Axial => "axial",
            AttentionMode::Full => "full",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == name)
    }

    /// Whether the stage blocks its input before attending.
    pub fn uses_blocking(self) -> bool {
        !matches!(self, AttentionMode::Axial | AttentionMode::Full)
    }

    /// Kernel used by layer `layer` of a stage. `None` for full attention.
    pub fn kernel(self, layer: usize) -> Option<Kernel> {
        match self {
            AttentionMode::MultiAxis | AttentionMode::Axial => Some(Kernel::MultiAxis),
            AttentionMode::RegionalOnly => Some(Kernel::Regional),
            AttentionMode::DilatedOnly => Some(Kernel::Dilated),
            AttentionMode::Interleaved if layer.is_multiple_of(2) => Some(Kernel::Regional),
            AttentionMode::Interleaved => Some(Kernel::Dilated),
            AttentionMode::Full => None,
        }
    }
}

impl std::fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn scaled_softmax<G: Ops>(g: &mut G, logits: &G::Value, key_dim: usize, axis: usize) -> Result<G::Value> {
    let n = g.value(logits)?.numel();
    g.note_logits(n);
    let scaled = g.scale(logits, 1.0 / (key_dim as f64).sqrt())?;
    softmax(g, &scaled, axis)
}

/// Queries `[b, h, m, n, k]` attend across patches `m` at fixed offset `n`.
fn dilated<G: Ops>(g: &mut G, q: &G::Value, k: &G::Value, v: &G::Value, key_dim: usize) -> Result<G::Value> {
    let logits = g.contract("bhxyk,bzyk->bhyxz", q, k)?;
    let scores = scaled_softmax(g, &logits, key_dim, 4)?;
    g.contract("bhyxz,bzyv->bhxyv", &scores, v)
}

/// Queries `[b, h, m, n, k]` attend within their patch.
fn regional<G: Ops>(g: &mut G, q: &G::Value, k: &G::Value, v: &G::Value, key_dim: usize) -> Result<G::Value> {
    let logits = g.contract("bhxyk,bxzk->bhxyz", q, k)?;
    let scores = scaled_softmax(g, &logits, key_dim, 4)?;
    g.contract("bhxyz,bxzv->bhxyv", &scores, v)
}

/// Attention on `[b, m, n, d]` data. `x` provides queries, `y` keys and values.
pub fn blocked_attention<G: Ops>(
    g: &mut G,
    x: &G::Value,
    y: &G::Value,
    w: &AttentionWeights<G::Value>,
    kernel: Kernel,
) -> Result<G::Value> {
    let dm = dims(g, w)?;
    let xs = g.shape(x)?;
    let ys = g.shape(y)?;
    if xs.len() != 4 || xs != ys {
        return Err(Error::ShapeMismatch { op: "blocked attention", lhs: xs, rhs: ys });
    }
    let q = g.contract("bmnd,hdk->bhmnk", x, &w.query)?;
    let k = g.contract("bmnd,dk->bmnk", y, &w.key)?;
    let v = g.contract("bmnd,dv->bmnv", y, &w.value)?;
    let heads = match kernel {
        Kernel::Regional => regional(g, &q, &k, &v, dm.key)?,
        Kernel::Dilated => dilated(g, &q, &k, &v, dm.key)?,
        Kernel::MultiAxis => {
            if dm.heads % 2 != 0 {
                return Err(Error::OddHeads(dm.heads));
            }
            let half = dm.heads / 2;
            let q1 = g.slice(&q, 1, 0, half)?;
            let q2 = g.slice(&q, 1, half, half)?;
            let a = dilated(g, &q1, &k, &v, dm.key)?;
            let b = regional(g, &q2, &k, &v, dm.key)?;
            concat(g, &a, &b, 1)?
        }
    };
    g.contract("bhmnv,hdv->bmnd", &heads, &w.output)
}

/// Regional and dilated attention in parallel on the two head halves.
pub fn multi_axis_attention<G: Ops>(
    g: &mut G,
    x: &Blocked<G::Value>,
    y: &Blocked<G::Value>,
    w: &AttentionWeights<G::Value>,
) -> Result<Blocked<G::Value>> {
    if (x.patch_size, x.height, x.width) != (y.patch_size, y.height, y.width) {
        return Err(Error::InvalidShape {
            op: "multi_axis_attention",
            msg: "query and key/value blocks have different geometry".into(),
        });
    }
    let out = blocked_attention(g, &x.data, &y.data, w, Kernel::MultiAxis)?;
    Ok(x.with_data(out))
}

/// Half the heads attend along rows, half along columns of `[b, h, w, d]`.
pub fn axial_attention<G: Ops>(g: &mut G, x: &G::Value, w: &AttentionWeights<G::Value>) -> Result<G::Value> {
    // Regional heads see one row, dilated heads one column.
    blocked_attention(g, x, x, w, Kernel::MultiAxis)
}

/// Multi-query attention of `x: [b, N, d]` over `kv: [b, L, d_kv]`.
pub fn multi_query_attention<G: Ops>(
    g: &mut G,
    x: &G::Value,
    kv: &G::Value,
    w: &AttentionWeights<G::Value>,
) -> Result<G::Value> {
    let dm = dims(g, w)?;
    let q = g.contract("bnd,hdk->bhnk", x, &w.query)?;
    let k = g.contract("bld,dk->blk", kv, &w.key)?;
    let v = g.contract("bld,dv->blv", kv, &w.value)?;
    let logits = g.contract("bhnk,blk->bhnl", &q, &k)?;
    let scores = scaled_softmax(g, &logits, dm.key, 3)?;
    let heads = g.contract("bhnl,blv->bhnv", &scores, &v)?;
    g.contract("bhnv,hdv->bnd", &heads, &w.output)
}

/// All-pairs attention over `x: [b, N, d]`.
pub fn full_attention<G: Ops>(g: &mut G, x: &G::Value, w: &AttentionWeights<G::Value>) -> Result<G::Value> {
    multi_query_attention(g, x, x, w)
}

/// Attention with a separate key/value projection per head:
/// `key [h, d_kv, k]`, `value [h, d_kv, v]`.
pub fn multi_head_attention<G: Ops>(
    g: &mut G,
    x: &G::Value,
    kv: &G::Value,
    w: &AttentionWeights<G::Value>,
) -> Result<G::Value> {
    let ks = g.shape(&w.key)?;
    if ks.len() != 3 {
        return Err(Error::InvalidShape {
            op: "multi_head_attention",
            msg: format!("per-head key projection must be [h, d, k], got {ks:?}"),
        });
    }
    let q = g.contract("bnd,hdk->bhnk", x, &w.query)?;
    let k = g.contract("bld,hdk->bhlk", kv, &w.key)?;
    let v = g.contract("bld,hdv->bhlv", kv, &w.value)?;
    let logits = g.contract("bhnk,bhlk->bhnl", &q, &k)?;
    let scores = scaled_softmax(g, &logits, ks[2], 3)?;
    let heads = g.contract("bhnl,bhlv->bhnv", &scores, &v)?;
    g.contract("bhnv,hdv->bnd", &heads, &w.output)
}

/// Queries from the feature map, keys and values from the latent embedding
/// `z + pos`, where `z: [b, L, c]` and `pos: [L, c]`.
pub fn cross_attention_mqa<G: Ops>(
    g: &mut G,
    x: &G::Value,
    z: &G::Value,
    pos: &G::Value,
    w: &AttentionWeights<G::Value>,
) -> Result<G::Value> {
    let zs = g.shape(z)?;
    let ps = g.shape(pos)?;
    if zs.len() != 3 || ps[..] != zs[1..] {
        return Err(Error::ShapeMismatch { op: "cross_attention_mqa", lhs: zs, rhs: ps });
    }
    let pos = g.expand(pos, 0, zs[0])?;
    let kv = g.add(z, &pos)?;
    multi_query_attention(g, x, &kv, w)
}

/// Pre-norm position-wise MLP sub-block: `x + mlp(norm(x))`.
#[derive(Debug, Clone)]
pub struct MlpBlockParams<V> {
    pub norm: NormParams<V>,
    pub mlp: MlpParams<V>,
}

impl<V> MlpBlockParams<V> {
    pub fn map<U>(&self, mut f: impl FnMut(&V) -> U) -> MlpBlockParams<U> {
        MlpBlockParams { norm: self.norm.map(&mut f), mlp: self.mlp.map(&mut f) }
    }
}

/// Normalization and MLP parameters of a pre-norm residual block.
#[derive(Debug, Clone)]
pub struct BlockParams<V> {
    pub norm: NormParams<V>,
    pub mlp: Option<MlpBlockParams<V>>,
}

impl<V> BlockParams<V> {
    pub fn map<U>(&self, mut f: impl FnMut(&V) -> U) -> BlockParams<U> {
        BlockParams { norm: self.norm.map(&mut f), mlp: self.mlp.as_ref().map(|m| m.map(&mut f)) }
    }
}

/// Normalization settings and running statistics for one block.
#[derive(Debug)]
pub struct BlockNorm<'a> {
    pub kind: NormKind,
    pub mode: NormMode,
    pub states: &'a mut [NormState; 2],
}

/// `y = x + inner(norm(x))`, then `y + mlp(norm(y))` when an MLP is present.
pub fn attention_block<G, F>(
    g: &mut G,
    x: &G::Value,
    inner: F,
    params: &BlockParams<G::Value>,
    norm: BlockNorm<'_>,
) -> Result<G::Value>
where
    G: Ops,
    F: FnOnce(&mut G, &G::Value) -> Result<G::Value>,
{
    let [s1, s2] = norm.states;
    let xn = normalize(g, x, norm.kind, &params.norm, s1, norm.mode)?;
    let a = inner(g, &xn)?;
    let y = g.add(x, &a)?;
    match &params.mlp {
        None => Ok(y),
        Some(m) => mlp_block(g, &y, m, norm.kind, norm.mode, s2),
    }
}

/// `x + mlp(norm(x))`.
pub fn mlp_block<G: Ops>(
    g: &mut G,
    x: &G::Value,
    params: &MlpBlockParams<G::Value>,
    kind: NormKind,
    mode: NormMode,
    state: &mut NormState,
) -> Result<G::Value> {
    let xn = normalize(g, x, kind, &params.norm, state, mode)?;
    let h = mlp(g, &xn, &params.mlp)?;
    g.add(x, &h)
}

/// Common divisor `p` of `h` and `w` minimizing `|p² − hw/p²|`; ties go to
/// the smaller `p`.
pub fn balance_patch_size(h: usize, w: usize) -> Result<usize> {
    if h == 0 || w == 0 {
        return Err(Error::InvalidShape { op: "balance_patch_size", msg: format!("{h}x{w} map") });
    }
    let n = (h * w) as i128;
    (1..=h.min(w))
        .filter(|p| h.is_multiple_of(*p) && w.is_multiple_of(*p))
        .min_by_key(|&p| {
            let p2 = (p * p) as i128;
            // |p² − n/p²| scaled by p² to stay in integers.
            ((p2 * p2 - n).abs(), p)
        })
        .ok_or(Error::InvalidShape { op: "balance_patch_size", msg: "no common divisor".into() })
}

/// Logit entries computed by one attention layer over `b` maps blocked into
/// `m` patches of `n` positions with `h` heads.
///
/// Interleaved mode reports the per-layer average of a regional/dilated pair.
pub fn flop_count(mode: AttentionMode, b: u64, m: u64, n: u64, h: u64) -> u64 {
    let total = m * n;
    match mode {
        AttentionMode::Full => b * h * total * total,
        AttentionMode::RegionalOnly => b * h * m * n * n,
        AttentionMode::DilatedOnly => b * h * n * m * m,
        AttentionMode::MultiAxis | AttentionMode::Interleaved | AttentionMode::Axial => {
            b * (h / 2) * (n * m * m + m * n * n)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_patch_sizes() {
        assert_eq!(balance_patch_size(64, 64).unwrap(), 8);
        assert_eq!(balance_patch_size(8, 8).unwrap(), 2);
        assert_eq!(balance_patch_size(16, 16).unwrap(), 4);
        assert_eq!(balance_patch_size(32, 32).unwrap(), 4);
    }

    #[test]
    fn flop_counts() {
        assert_eq!(flop_count(AttentionMode::Full, 1, 64, 64, 2), 33_554_432);
        assert_eq!(flop_count(AttentionMode::MultiAxis, 1, 64, 64, 2), 524_288);
        assert_eq!(flop_count(AttentionMode::Full, 1, 4, 4, 2), 512);
        assert_eq!(flop_count(AttentionMode::MultiAxis, 1, 4, 4, 2), 128);
        assert_eq!(flop_count(AttentionMode::MultiAxis, 3, 1, 9, 4), 3 * 2 * (9 + 81));
    }

    #[test]
    fn mode_names_roundtrip() {
        for m in AttentionMode::ALL {
            assert_eq!(AttentionMode::from_name(m.name()), Some(m));
        }
    }

    #[test]
    fn interleaved_starts_regional() {
        assert_eq!(AttentionMode::Interleaved.kernel(0), Some(Kernel::Regional));
        assert_eq!(AttentionMode::Interleaved.kernel(1), Some(Kernel::Dilated));
        assert_eq!(AttentionMode::Interleaved.kernel(2), Some(Kernel::Regional));
    }
}
