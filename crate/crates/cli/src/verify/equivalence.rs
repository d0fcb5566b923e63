use hit_core::attention::{
    axial_attention, blocked_attention, flop_count, full_attention, multi_head_attention, multi_query_attention,
    AttentionMode, AttentionWeights, Kernel,
};
use hit_core::generator::{param_count, preset, reference_param_millions};
use hit_core::numerics::contract;
use hit_core::reference::{einsum_loops, masked_attention, multi_axis_loops};
use hit_core::training::{loss_discriminator, loss_generator, r1_penalty, GanHyper, VqHitWeights};
use hit_core::{Eager, Ops, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{evaluate, Check, Property};

const TOLERANCE: f64 = 1e-12;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn e() -> Eager {
    Eager::new()
}

/// Dilated (first) and regional (second) head halves of `w`.
fn halves(w: &AttentionWeights<Tensor>) -> anyhow::Result<(AttentionWeights<Tensor>, AttentionWeights<Tensor>)> {
    let h = w.query.shape()[0] / 2;
    let pick = |start| -> anyhow::Result<AttentionWeights<Tensor>> {
        Ok(AttentionWeights {
            query: w.query.slice_axis(0, start, h)?,
            key: w.key.clone(),
            value: w.value.clone(),
            output: w.output.slice_axis(0, start, h)?,
        })
    };
    Ok((pick(0)?, pick(h)?))
}

/// 200 random geometries against the masked brute-force oracle.
pub fn multi_axis_oracle(instances: usize) -> anyhow::Result<f64> {
    let mut r = rng(1);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let m = r.gen_range(1..=8);
        let n = r.gen_range(1..=16);
        let h = if r.gen_bool(0.5) { 2 } else { 4 };
        let d = r.gen_range(1..=8);
        let (k, v) = (r.gen_range(1..=4), r.gen_range(1..=4));
        let x = Tensor::randn(&[2, m, n, d], &mut r);
        let w = AttentionWeights::random(h, d, d, k, v, &mut r);
        let fast = blocked_attention(&mut e(), &x, &x, &w, Kernel::MultiAxis)?;
        worst = worst.max(fast.max_abs_diff(&multi_axis_loops(&x, &w))?);
    }
    Ok(worst)
}

/// With one patch the regional heads are full attention and the dilated
/// heads only see their own position.
fn single_patch() -> anyhow::Result<f64> {
    let mut r = rng(2);
    let n = 16;
    let x = Tensor::randn(&[1, 1, n, 6], &mut r);
    let w = AttentionWeights::random(4, 6, 6, 3, 3, &mut r);
    let out = blocked_attention(&mut e(), &x, &x, &w, Kernel::MultiAxis)?;
    let (dil, reg) = halves(&w)?;
    let flat = x.reshape(&[1, n, 6])?;
    let full = full_attention(&mut e(), &flat, &reg)?;
    let own = masked_attention(&flat, &flat, &dil, |_, i, j| i == j);
    Ok(out.max_abs_diff(&full.add(&own)?.reshape(&[1, 1, n, 6])?)?)
}

/// With one position per patch the roles swap.
fn unit_patch() -> anyhow::Result<f64> {
    let mut r = rng(3);
    let m = 16;
    let x = Tensor::randn(&[1, m, 1, 6], &mut r);
    let w = AttentionWeights::random(4, 6, 6, 3, 3, &mut r);
    let out = blocked_attention(&mut e(), &x, &x, &w, Kernel::MultiAxis)?;
    let (dil, reg) = halves(&w)?;
    let flat = x.reshape(&[1, m, 6])?;
    let full = full_attention(&mut e(), &flat, &dil)?;
    let own = masked_attention(&flat, &flat, &reg, |_, i, j| i == j);
    Ok(out.max_abs_diff(&full.add(&own)?.reshape(&[1, m, 1, 6])?)?)
}

fn axial() -> anyhow::Result<f64> {
    let mut r = rng(6);
    let mut worst = 0.0f64;
    for (hh, ww) in [(4, 4), (3, 5), (6, 2)] {
        let x = Tensor::randn(&[1, hh, ww, 4], &mut r);
        let w = AttentionWeights::random(4, 4, 4, 2, 2, &mut r);
        let out = axial_attention(&mut e(), &x, &w)?;
        let flat = x.reshape(&[1, hh * ww, 4])?;
        let slow =
            masked_attention(&flat, &flat, &w, |h, i, j| if h < 2 { i % ww == j % ww } else { i / ww == j / ww });
        worst = worst.max(out.max_abs_diff(&slow.reshape(&[1, hh, ww, 4])?)?);
    }
    Ok(worst)
}

fn full_vs_oracle() -> anyhow::Result<f64> {
    let mut r = rng(4);
    let x = Tensor::randn(&[2, 16, 5], &mut r);
    let w = AttentionWeights::random(2, 5, 5, 4, 3, &mut r);
    let full = full_attention(&mut e(), &x, &w)?;
    Ok(full.max_abs_diff(&masked_attention(&x, &x, &w, |_, _, _| true))?)
}

fn contraction() -> anyhow::Result<f64> {
    let mut r = rng(5);
    let cases: [(&str, &[usize], &[usize]); 5] = [
        ("ij,jk->ik", &[3, 4], &[4, 5]),
        ("bmnd,hdk->bhmnk", &[2, 2, 3, 4], &[2, 4, 3]),
        ("bhxyk,bzyk->bhyxz", &[1, 2, 3, 2, 4], &[1, 3, 2, 4]),
        ("bhnv,hdv->bnd", &[2, 2, 3, 4], &[2, 5, 4]),
        ("i,j->ij", &[3], &[4]),
    ];
    let mut worst = 0.0f64;
    for (spec, a, b) in cases {
        let a = Tensor::randn(a, &mut r);
        let b = Tensor::randn(b, &mut r);
        worst = worst.max(contract(spec, &a, &b)?.max_abs_diff(&einsum_loops(spec, &a, &b)?)?);
    }
    Ok(worst)
}

fn tape_vs_eager() -> anyhow::Result<f64> {
    let mut r = rng(11);
    let x = Tensor::randn(&[2, 5, 8], &mut r);
    let w = AttentionWeights::random(4, 8, 8, 2, 3, &mut r);
    let eager = full_attention(&mut e(), &x, &w)?;
    let mut t = Tape::new();
    let xv = t.constant(x);
    let wv = w.map(|p| t.param(p.clone()));
    let y = full_attention(&mut t, &xv, &wv)?;
    Ok(if t.get(y)? == &eager { 0.0 } else { 1.0 })
}

fn tied_heads() -> anyhow::Result<f64> {
    let mut r = rng(12);
    let w = AttentionWeights::random(4, 6, 6, 3, 5, &mut r);
    let x = Tensor::randn(&[2, 7, 6], &mut r);
    let mqa = multi_query_attention(&mut e(), &x, &x, &w)?;
    let tied = AttentionWeights {
        query: w.query.clone(),
        key: w.key.expand(0, 4)?,
        value: w.value.expand(0, 4)?,
        output: w.output.clone(),
    };
    Ok(mqa.max_abs_diff(&multi_head_attention(&mut e(), &x, &x, &tied)?)?)
}

/// `|full/multi_axis − √N|` over balanced sizes, in exact integer arithmetic.
fn saving_ratio() -> f64 {
    let mut worst = 0u64;
    for s in [16u64, 32, 64] {
        let full = flop_count(AttentionMode::Full, 1, s, s, 2);
        let ma = flop_count(AttentionMode::MultiAxis, 1, s, s, 2);
        let off = if full.is_multiple_of(ma) { (full / ma).abs_diff(s) } else { u64::MAX };
        worst = worst.max(off);
    }
    worst as f64
}

/// Logits materialized by the kernels against the counting formula.
fn instrumented_counts() -> anyhow::Result<f64> {
    let mut r = rng(70);
    let mut off = 0u64;
    for (m, n, h) in [(4usize, 4usize, 2usize), (2, 8, 4), (1, 9, 2), (8, 8, 2)] {
        let x = Tensor::randn(&[2, m, n, 4], &mut r);
        let w = AttentionWeights::random(h, 4, 4, 2, 2, &mut r);
        let formula = |mode| flop_count(mode, 2, m as u64, n as u64, h as u64);
        for (kernel, mode) in [
            (Kernel::MultiAxis, AttentionMode::MultiAxis),
            (Kernel::Regional, AttentionMode::RegionalOnly),
            (Kernel::Dilated, AttentionMode::DilatedOnly),
        ] {
            let mut g = Eager::<f64>::new();
            blocked_attention(&mut g, &x, &x, &w, kernel)?;
            off = off.max(g.logit_count().abs_diff(formula(mode)));
        }
        let mut g = Eager::<f64>::new();
        full_attention(&mut g, &x.reshape(&[2, m * n, 4])?, &w)?;
        off = off.max(g.logit_count().abs_diff(formula(AttentionMode::Full)));
    }
    Ok(off as f64)
}

pub fn discriminator_loss_at_zero_logits() -> anyhow::Result<f64> {
    let mut t = Tape::new();
    let xr = t.input(Tensor::randn(&[4, 2, 2, 3], &mut rng(20)));
    let xf = t.constant(Tensor::randn(&[4, 2, 2, 3], &mut rng(21)));
    let loss = loss_discriminator(&mut t, |t, _| Ok(t.constant(Tensor::zeros(&[4]))), xr, xf, 0.0)?;
    Ok((t.get(loss.total)?.item() - 2.0 * std::f64::consts::LN_2).abs())
}

pub fn generator_loss_at_zero_logits() -> anyhow::Result<f64> {
    let l = loss_generator(&mut e(), &Tensor::zeros(&[8]))?.item();
    Ok((l - std::f64::consts::LN_2).abs())
}

/// `D(x) = ⟨w, x⟩` has `‖∇D‖² = ‖w‖²` for every sample.
pub fn r1_of_linear_discriminator() -> anyhow::Result<f64> {
    let weights = Tensor::randn(&[12, 1], &mut rng(22));
    let expect: f64 = weights.data().iter().map(|v| v * v).sum();
    let mut t = Tape::new();
    let x = t.input(Tensor::randn(&[5, 2, 2, 3], &mut rng(23)));
    let wv = t.constant(weights);
    let r1 = r1_penalty(&mut t, x, |t, x| {
        let flat = t.reshape(x, &[5, 12])?;
        let y = t.contract("bi,io->bo", &flat, &wv)?;
        t.reshape(&y, &[5])
    })?;
    Ok((t.get(r1)?.item() - expect).abs() / expect)
}

pub fn hyperparameter_defaults() -> bool {
    let h = GanHyper::default();
    let v = VqHitWeights::default();
    (h.gamma, h.lr, h.beta1, h.beta2) == (10.0, 1e-4, 0.0, 0.99) && (v.perceptual, v.adversarial) == (5e-5, 0.1)
}

/// Relative deviation of a preset's parameter count from its reported size.
pub fn preset_size_deviation(name: &str) -> anyhow::Result<f64> {
    let reference = reference_param_millions(name).ok_or_else(|| anyhow::anyhow!("{name} has no reported size"))?;
    let count = param_count(&preset(name)?)? as f64 / 1e6;
    Ok((count - reference).abs() / reference)
}

pub fn run(keep: &dyn Fn(&str) -> bool) -> Vec<Property> {
    let mut checks: Vec<Check<'_>> = Vec::new();
    let mut add = |name: &str, tol: f64, f: Box<dyn Fn() -> anyhow::Result<f64>>| {
        let n = format!("equivalence/{name}");
        checks.push((n.clone(), Box::new(move || Property::from_result(n, tol, f()))));
    };
    add("multi_axis_vs_masked_oracle", TOLERANCE, Box::new(|| multi_axis_oracle(200)));
    add("single_patch_regional_is_full", TOLERANCE, Box::new(single_patch));
    add("unit_patch_dilated_is_full", TOLERANCE, Box::new(unit_patch));
    add("axial_vs_row_column_oracle", TOLERANCE, Box::new(axial));
    add("full_vs_unmasked_oracle", TOLERANCE, Box::new(full_vs_oracle));
    add("contract_vs_loops", TOLERANCE, Box::new(contraction));
    add("tape_vs_eager_bitwise", 0.0, Box::new(tape_vs_eager));
    add("tied_multi_head_vs_multi_query", 0.0, Box::new(tied_heads));
    add("flop_count_saving_is_sqrt_n", 0.0, Box::new(|| Ok(saving_ratio())));
    add("instrumented_logits_vs_flop_count", 0.0, Box::new(instrumented_counts));
    add("loss/discriminator_zero_logits", TOLERANCE, Box::new(discriminator_loss_at_zero_logits));
    add("loss/generator_zero_logits", TOLERANCE, Box::new(generator_loss_at_zero_logits));
    add("loss/r1_linear_discriminator", TOLERANCE, Box::new(r1_of_linear_discriminator));
    add("defaults/hyperparameters", 0.0, Box::new(|| Ok(if hyperparameter_defaults() { 0.0 } else { 1.0 })));
    add("presets/hit_s_256_size", 0.15, Box::new(|| preset_size_deviation("hit_s_256")));
    add("presets/hit_b_256_size", 0.15, Box::new(|| preset_size_deviation("hit_b_256")));
    evaluate(checks, keep)
}
