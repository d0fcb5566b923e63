use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Two-mode mixture of coloured Gaussian blobs on a square RGB canvas.
///
/// Mode 0 is a warm blob near the top-left quarter point, mode 1 a cool blob
/// near the bottom-right one; each sample picks a mode with probability ½,
/// jitters the centre and adds per-pixel noise. Pixels lie roughly in
/// `[-1, 1]` with a background of `-1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlobDataset {
    pub resolution: usize,
    /// Standard deviation of the blob profile, in pixels.
    pub blob_width: f64,
    /// Standard deviation of the centre offset, in pixels.
    pub center_jitter: f64,
    pub pixel_noise: f64,
}

impl Default for BlobDataset {
    fn default() -> Self {
        Self { resolution: 8, blob_width: 1.25, center_jitter: 0.5, pixel_noise: 0.02 }
    }
}

const MODE_COLORS: [[f64; 3]; 2] = [[1.0, 0.45, 0.1], [0.1, 0.5, 1.0]];

impl BlobDataset {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 2 || !(self.blob_width > 0.0) || !(self.center_jitter >= 0.0) || !(self.pixel_noise >= 0.0)
        {
            return Err(Error::Config(format!("invalid blob dataset {self:?}")));
        }
        Ok(())
    }

    fn mode_center(&self, mode: usize) -> (f64, f64) {
        let r = self.resolution as f64;
        match mode {
            0 => (r * 0.3, r * 0.3),
            _ => (r * 0.7, r * 0.7),
        }
    }

    /// `[n, r, r, 3]` samples.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Tensor {
        let r = self.resolution;
        let mut data = Vec::with_capacity(n * r * r * 3);
        for _ in 0..n {
            let mode = usize::from(rng.gen_bool(0.5));
            let (cy, cx) = self.mode_center(mode);
            let jy: f64 = rng.sample(StandardNormal);
            let jx: f64 = rng.sample(StandardNormal);
            let (cy, cx) = (cy + self.center_jitter * jy, cx + self.center_jitter * jx);
            let color = MODE_COLORS[mode];
            for h in 0..r {
                for w in 0..r {
                    let dy = h as f64 + 0.5 - cy;
                    let dx = w as f64 + 0.5 - cx;
                    let blob = (-(dy * dy + dx * dx) / (2.0 * self.blob_width * self.blob_width)).exp();
                    for c in color {
                        let noise: f64 = rng.sample(StandardNormal);
                        data.push(2.0 * c * blob - 1.0 + self.pixel_noise * noise);
                    }
                }
            }
        }
        Tensor::new(&[n, r, r, 3], data).expect("shape matches generated data")
    }
}

/// Sample mean and unbiased covariance of `[n, ...]` rows flattened to
/// `[n, d]`.
pub fn moments(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let shape = x.shape();
    let n = *shape.first().ok_or(Error::InvalidShape { op: "moments", msg: "rank-0 input".into() })?;
    if n < 2 {
        return Err(Error::InvalidShape {
            op: "moments",
            msg: format!("covariance needs at least 2 samples, got {n}"),
        });
    }
    let d = x.numel() / n;
    let data = x.data();
    let mut mean = vec![0.0; d];
    for row in data.chunks(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; d * d];
    let mut centered = vec![0.0; d];
    for row in data.chunks(d) {
        for ((c, v), m) in centered.iter_mut().zip(row).zip(&mean) {
            *c = v - m;
        }
        for i in 0..d {
            let ci = centered[i];
            let out = &mut cov[i * d..(i + 1) * d];
            for (o, cj) in out.iter_mut().zip(&centered) {
                *o += ci * cj;
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= (n - 1) as f64);
    Ok((mean, cov))
}

/// `‖μ_a − μ_b‖₂ + ‖Σ_a − Σ_b‖_F` between two sample sets of equal shape
/// per sample.
pub fn moment_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape().get(1..) != b.shape().get(1..) {
        return Err(Error::ShapeMismatch { op: "moment_distance", lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
    }
    let (ma, ca) = moments(a)?;
    let (mb, cb) = moments(b)?;
    let l2 = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
    Ok(l2(&ma, &mb) + l2(&ca, &cb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn samples_are_deterministic_and_bimodal() {
        let ds = BlobDataset::default();
        let a = ds.sample(64, &mut ChaCha8Rng::seed_from_u64(1));
        let b = ds.sample(64, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[64, 8, 8, 3]);
        // Red channel at the two mode centres separates the modes.
        let mut warm = 0;
        for i in 0..64 {
            let tl = a.get(&[i, 2, 2, 0]);
            let br = a.get(&[i, 5, 5, 0]);
            if tl > br {
                warm += 1;
            }
        }
        assert!((16..=48).contains(&warm), "{warm}");
    }

    #[test]
    fn identical_sets_are_at_distance_zero() {
        let x = BlobDataset::default().sample(16, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(moment_distance(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn shift_moves_only_the_mean() {
        let x = BlobDataset::default().sample(16, &mut ChaCha8Rng::seed_from_u64(3));
        let y = x.map(|v| v + 0.25);
        let d = moment_distance(&x, &y).unwrap();
        let expect = 0.25 * (192f64).sqrt();
        assert!((d - expect).abs() < 1e-9, "{d} vs {expect}");
    }
}
