use hit_core::blocking::{block, depth_to_space, space_to_depth, unblock};
use hit_core::generator::{build_generator, toy};
use hit_core::reference::{block_loops, to_byte};
use hit_core::training::{Trace, TraceRow};
use hit_core::{Eager, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{evaluate, Check, Property};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::ppm;

const PATCHES: [usize; 4] = [1, 2, 4, 8];
const MAX_SIDE: usize = 32;

/// Every `(p, h, w)` with `p | h`, `p | w` and sides up to 32.
fn geometries() -> impl Iterator<Item = (usize, usize, usize)> {
    PATCHES
        .into_iter()
        .flat_map(|p| (1..=MAX_SIDE / p).flat_map(move |i| (1..=MAX_SIDE / p).map(move |j| (p, i * p, j * p))))
}

fn map(h: usize, w: usize, seed: u64) -> Tensor {
    Tensor::randn(&[1, h, w, 2], &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn block_unblock() -> anyhow::Result<bool> {
    let g = &mut Eager::<f64>::new();
    for (i, (p, h, w)) in geometries().enumerate() {
        let x = map(h, w, i as u64);
        let b = block(g, &x, p)?;
        if unblock(g, &b)? != x {
            return Ok(false);
        }
    }
    Ok(true)
}

pub fn space_depth() -> anyhow::Result<bool> {
    let g = &mut Eager::<f64>::new();
    for (i, (p, h, w)) in geometries().enumerate() {
        let x = map(h, w, i as u64);
        let s = space_to_depth(g, &x, p)?;
        if depth_to_space(g, &s, p)? != x {
            return Ok(false);
        }
    }
    Ok(true)
}

fn block_layout() -> anyhow::Result<bool> {
    let g = &mut Eager::<f64>::new();
    for (p, h, w) in [(2, 4, 6), (4, 8, 8), (8, 16, 8), (1, 3, 5)] {
        let x = map(h, w, 99);
        if block(g, &x, p)?.data != block_loops(&x, p) {
            return Ok(false);
        }
    }
    Ok(true)
}

fn trace_csv() -> anyhow::Result<bool> {
    let trace = Trace {
        rows: vec![
            TraceRow { step: 0, loss_d: None, loss_g: None, r1: None, moment_distance: Some(95.904_412_345_678_9) },
            TraceRow {
                step: 1,
                loss_d: Some(1.0 / 3.0),
                loss_g: Some(std::f64::consts::LN_2),
                r1: Some(1e-300),
                moment_distance: None,
            },
        ],
    };
    Ok(Trace::from_csv(&trace.to_csv())? == trace)
}

fn byte_mapping() -> anyhow::Result<bool> {
    let spots = to_byte(-1.0) == 0 && to_byte(1.0) == 255 && to_byte(0.0) == 128;
    let img = Tensor::from_fn(&[3, 5, 3], |i| (i as f64 / 22.0) - 1.0);
    let bytes = ppm::encode(&img)?;
    let (w, h, body) = ppm::decode(&bytes)?;
    let expect: Vec<u8> = img.data().iter().map(|&v| to_byte(v)).collect();
    Ok(spots && (w, h) == (5, 3) && body == expect && bytes.starts_with(b"P6\n5 3\n255\n"))
}

fn checkpoint_json() -> anyhow::Result<bool> {
    let gen = build_generator(&toy(), 5)?;
    let ck = Checkpoint::from_generator(&gen);
    let back: Checkpoint = serde_json::from_str(&serde_json::to_string(&ck)?)?;
    Ok(back.into_generator()?.store.tensors == gen.store.tensors)
}

fn config_toml() -> anyhow::Result<bool> {
    let cfg = RunConfig::default().resolved()?;
    Ok(RunConfig::parse(&cfg.to_toml()?)? == cfg)
}

pub fn run(keep: &dyn Fn(&str) -> bool) -> Vec<Property> {
    let mut checks: Vec<Check<'_>> = Vec::new();
    let mut add = |name: &str, f: Box<dyn Fn() -> anyhow::Result<bool>>| {
        let n = format!("roundtrip/{name}");
        checks.push((
            n.clone(),
            Box::new(move || Property::from_result(n, 0.0, f().map(|ok| if ok { 0.0 } else { 1.0 }))),
        ));
    };
    add("unblock_after_block", Box::new(block_unblock));
    add("depth_to_space_after_space_to_depth", Box::new(space_depth));
    add("block_layout_vs_loops", Box::new(block_layout));
    add("trace_csv", Box::new(trace_csv));
    add("ppm_byte_mapping", Box::new(byte_mapping));
    add("checkpoint_json", Box::new(checkpoint_json));
    add("config_toml", Box::new(config_toml));
    evaluate(checks, keep)
}
