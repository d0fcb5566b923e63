//! Wall-time and logit-count comparison of attention variants at balanced sizes.

use std::fmt::Write as _;
use std::time::Instant;

use anyhow::{bail, ensure, Result};
use hit_core::attention::{
    axial_attention, blocked_attention, flop_count, full_attention, AttentionMode, AttentionWeights, Kernel,
};
use hit_core::numerics::Scalar;
use hit_core::{Eager, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{BenchConfig, Precision};

const BATCH: u64 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub n: usize,
    pub mode: AttentionMode,
    pub logit_count: u64,
    /// `None` when the cell was skipped for memory.
    pub wall_ns_median: Option<u128>,
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("N,mode,logit_count,wall_ns_median\n");
    for r in rows {
        let wall = r.wall_ns_median.map_or_else(|| "skipped".to_string(), |ns| ns.to_string());
        let _ = writeln!(out, "{},{},{},{}", r.n, r.mode, r.logit_count, wall);
    }
    out
}

fn side(n: usize) -> Result<usize> {
    let s = (n as f64).sqrt().round() as usize;
    ensure!(s * s == n && n > 0, "benchmark size {n} is not a positive perfect square");
    Ok(s)
}

/// Logit count of one layer at `N = s²`, with the map blocked into `s`
/// patches of `s` positions.
pub fn logit_count(mode: AttentionMode, n: usize, heads: usize) -> Result<u64> {
    let s = side(n)? as u64;
    Ok(flop_count(mode, BATCH, s, s, heads as u64))
}

/// `b·h·N²` for full attention and `b·h·N^1.5` for every blocked variant.
pub fn expected_logit_count(mode: AttentionMode, n: usize, heads: usize) -> Result<u64> {
    let s = side(n)? as u64;
    let (n, h) = (n as u64, heads as u64);
    Ok(match mode {
        AttentionMode::Full => BATCH * h * n * n,
        _ => BATCH * h * n * s,
    })
}

/// Runs one layer and returns the logits it materialized.
fn run_layer<T: Scalar>(mode: AttentionMode, x: &Tensor<T>, w: &AttentionWeights<Tensor<T>>) -> Result<u64> {
    let g = &mut Eager::<T>::new();
    let [b, s, _, d]: [usize; 4] = x.shape().try_into().expect("rank 4");
    match mode {
        AttentionMode::Full => {
            full_attention(g, &x.reshape(&[b, s * s, d])?, w)?;
        }
        AttentionMode::Axial => {
            axial_attention(g, x, w)?;
        }
        AttentionMode::Interleaved => {
            // Two layers, reported per layer.
            let y = blocked_attention(g, x, x, w, Kernel::Regional)?;
            blocked_attention(g, &y, &y, w, Kernel::Dilated)?;
            return Ok(g.logit_count() / 2);
        }
        _ => {
            let kernel = mode.kernel(0).expect("blocked mode");
            blocked_attention(g, x, x, w, kernel)?;
        }
    }
    Ok(g.logit_count())
}

fn median(mut v: Vec<u128>) -> u128 {
    v.sort_unstable();
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        (v[k / 2 - 1] + v[k / 2]) / 2
    }
}

fn time_cell<T: Scalar>(cfg: &BenchConfig, mode: AttentionMode, n: usize) -> Result<u128> {
    let s = side(n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
    let key = (cfg.dim / cfg.heads).max(1);
    let x: Tensor<T> = Tensor::<f64>::randn(&[BATCH as usize, s, s, cfg.dim], &mut rng).cast();
    let w = AttentionWeights::random(cfg.heads, cfg.dim, cfg.dim, key, key, &mut rng).map(|t| t.cast::<T>());
    let counted = run_layer(mode, &x, &w)?;
    let formula = logit_count(mode, n, cfg.heads)?;
    ensure!(counted == formula, "{mode} at N={n}: kernel computed {counted} logits, formula says {formula}");
    let mut times = Vec::with_capacity(cfg.repeats);
    for _ in 0..cfg.repeats {
        let start = Instant::now();
        run_layer(mode, &x, &w)?;
        times.push(start.elapsed().as_nanos());
    }
    Ok(median(times))
}

/// One row per `(N, mode)` in configuration order.
pub fn run(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if cfg.repeats == 0 || cfg.heads == 0 || !cfg.heads.is_multiple_of(2) || cfg.dim == 0 {
        bail!("benchmark needs positive repeats, dim and an even head count");
    }
    let elem = match cfg.precision {
        Precision::F32 => 4,
        Precision::F64 => 8,
    };
    let mut rows = Vec::new();
    for &n in &cfg.sizes {
        for &mode in &cfg.modes {
            let count = logit_count(mode, n, cfg.heads)?;
            let expected = expected_logit_count(mode, n, cfg.heads)?;
            ensure!(count == expected, "{mode} at N={n}: {count} logits, expected {expected}");
            let wall = if count.saturating_mul(elem) > cfg.max_logit_bytes {
                None
            } else {
                Some(match cfg.precision {
                    Precision::F32 => time_cell::<f32>(cfg, mode, n)?,
                    Precision::F64 => time_cell::<f64>(cfg, mode, n)?,
                })
            };
            rows.push(BenchRow { n, mode, logit_count: count, wall_ns_median: wall });
        }
    }
    Ok(rows)
}

/// `(N, full/multi_axis)` for every size where both cells were timed.
pub fn wall_ratios(rows: &[BenchRow]) -> Vec<(usize, f64)> {
    let time = |n: usize, mode| rows.iter().find(|r| r.n == n && r.mode == mode).and_then(|r| r.wall_ns_median);
    let mut sizes: Vec<usize> = rows.iter().map(|r| r.n).collect();
    sizes.dedup();
    sizes
        .into_iter()
        .filter_map(|n| {
            let full = time(n, AttentionMode::Full)?;
            let ma = time(n, AttentionMode::MultiAxis)?;
            Some((n, full as f64 / ma.max(1) as f64))
        })
        .collect()
}
