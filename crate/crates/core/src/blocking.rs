//! Spatial layout transforms on channel-last feature maps `[b, h, w, d]`.
//!
//! Everything here is a reshape/permute/replicate composition, so the same
//! functions run eagerly or on the tape and are differentiable.

use crate::error::{Error, Result};
use crate::numerics::{Ops, Tensor};

/// A feature map laid out as `[batch, patches, positions per patch, channels]`.
///
/// Patches enumerate the `h/p × w/p` grid row-major; positions enumerate the
/// `p × p` offsets inside a patch row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Blocked<V> {
    pub data: V,
    pub patch_size: usize,
    pub height: usize,
    pub width: usize,
}

pub type BlockedTensor = Blocked<Tensor>;

impl<V> Blocked<V> {
    pub fn aspect_ratio(&self) -> f64 {
        self.width as f64 / self.height as f64
    }

    pub fn patches(&self) -> usize {
        (self.height / self.patch_size) * (self.width / self.patch_size)
    }

    pub fn positions(&self) -> usize {
        self.patch_size * self.patch_size
    }

    /// Same geometry, different payload.
    pub fn with_data<U>(&self, data: U) -> Blocked<U> {
        Blocked { data, patch_size: self.patch_size, height: self.height, width: self.width }
    }
}

fn rank4<G: Ops>(g: &G, x: &G::Value, op: &'static str) -> Result<[usize; 4]> {
    let s = g.shape(x)?;
    s.as_slice().try_into().map_err(|_| Error::InvalidShape { op, msg: format!("expected [b, h, w, d], got {s:?}") })
}

fn divides(op: &'static str, extent: usize, divisor: usize) -> Result<()> {
    if divisor == 0 || !extent.is_multiple_of(divisor) {
        return Err(Error::NotDivisible { op, extent, divisor });
    }
    Ok(())
}

/// `[b, h, w, d] → [b, h/p, w/p, p²d]` with
/// `out[b, i, j, (di·p + dj)·d + c] = in[b, i·p + di, j·p + dj, c]`.
pub fn space_to_depth<G: Ops>(g: &mut G, x: &G::Value, p: usize) -> Result<G::Value> {
    let [b, h, w, d] = rank4(g, x, "space_to_depth")?;
    divides("space_to_depth", h, p)?;
    divides("space_to_depth", w, p)?;
    let t = g.reshape(x, &[b, h / p, p, w / p, p, d])?;
    let t = g.permute(&t, &[0, 1, 3, 2, 4, 5])?;
    g.reshape(&t, &[b, h / p, w / p, p * p * d])
}

/// Inverse of [`space_to_depth`].
pub fn depth_to_space<G: Ops>(g: &mut G, x: &G::Value, p: usize) -> Result<G::Value> {
    let [b, h, w, c] = rank4(g, x, "depth_to_space")?;
    divides("depth_to_space", c, p * p)?;
    let d = c / (p * p);
    let t = g.reshape(x, &[b, h, w, p, p, d])?;
    let t = g.permute(&t, &[0, 1, 3, 2, 4, 5])?;
    g.reshape(&t, &[b, h * p, w * p, d])
}

pub fn block<G: Ops>(g: &mut G, x: &G::Value, p: usize) -> Result<Blocked<G::Value>> {
    let [b, h, w, d] = rank4(g, x, "block")?;
    let t = space_to_depth(g, x, p)?;
    let data = g.reshape(&t, &[b, (h / p) * (w / p), p * p, d])?;
    Ok(Blocked { data, patch_size: p, height: h, width: w })
}

/// Inverse of [`block`] using the geometry carried by `y`.
pub fn unblock<G: Ops>(g: &mut G, y: &Blocked<G::Value>) -> Result<G::Value> {
    let [b, m, n, d] = rank4(g, &y.data, "unblock")?;
    let p = y.patch_size;
    if n != p * p || m != y.patches() {
        return Err(Error::InvalidShape {
            op: "unblock",
            msg: format!("[{b}, {m}, {n}, {d}] does not fit a {}x{} map with patch {p}", y.height, y.width),
        });
    }
    let t = g.reshape(&y.data, &[b, y.height / p, y.width / p, n * d])?;
    depth_to_space(g, &t, p)
}

/// Recovers `(h, w)` of the unblocked map from `m` patches of `n` positions
/// and the aspect ratio `w / h`.
pub fn unblocked_extent(m: usize, n: usize, aspect_ratio: f64) -> Result<(usize, usize, usize)> {
    let bad = |msg: String| Error::InvalidShape { op: "unblock", msg };
    let p = (n as f64).sqrt().round() as usize;
    if p * p != n {
        return Err(bad(format!("{n} positions per patch is not a perfect square")));
    }
    if !(aspect_ratio > 0.0) || !aspect_ratio.is_finite() {
        return Err(bad(format!("aspect ratio {aspect_ratio} must be positive")));
    }
    let gh = (m as f64 / aspect_ratio).sqrt().round() as usize;
    let gw = (gh as f64 * aspect_ratio).round() as usize;
    if gh == 0 || gh * gw != m || ((gw as f64 / gh as f64) - aspect_ratio).abs() > 1e-12 {
        return Err(bad(format!("{m} patches do not form a grid with aspect ratio {aspect_ratio}")));
    }
    Ok((gh * p, gw * p, p))
}

/// Unblocks a bare `[b, m, n, d]` tensor given only the aspect ratio.
pub fn unblock_with_aspect<G: Ops>(g: &mut G, data: &G::Value, aspect_ratio: f64) -> Result<G::Value> {
    let [_, m, n, _] = rank4(g, data, "unblock")?;
    let (height, width, patch_size) = unblocked_extent(m, n, aspect_ratio)?;
    unblock(g, &Blocked { data: data.clone(), patch_size, height, width })
}

/// Sub-pixel upsampling: `[b, h, w, d] → [b, 2h, 2w, d/4]`.
pub fn pixel_shuffle<G: Ops>(g: &mut G, x: &G::Value) -> Result<G::Value> {
    let [_, _, _, d] = rank4(g, x, "pixel_shuffle")?;
    divides("pixel_shuffle", d, 4)?;
    depth_to_space(g, x, 2)
}

/// `out[b, i, j, c] = in[b, i/2, j/2, c]`.
pub fn nearest_upsample<G: Ops>(g: &mut G, x: &G::Value) -> Result<G::Value> {
    let [b, h, w, d] = rank4(g, x, "nearest_upsample")?;
    let t = g.expand(x, 3, 2)?;
    let t = g.expand(&t, 2, 2)?;
    g.reshape(&t, &[b, 2 * h, 2 * w, d])
}
