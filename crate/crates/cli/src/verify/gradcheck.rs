use std::cell::RefCell;

use hit_core::attention::{
    attention_block, axial_attention, blocked_attention, cross_attention_mqa, full_attention, AttentionWeights,
    BlockNorm, BlockParams, Kernel, MlpBlockParams,
};
use hit_core::blocking::{block, unblock};
use hit_core::generator::{build_generator, forward, toy, Generator};
use hit_core::numerics::functional::{concat, linear, mlp, softmax, sum_all, MlpParams};
use hit_core::numerics::norm::{normalize, NormKind, NormMode, NormParams, NormState};
use hit_core::numerics::{finite_diff_check, finite_diff_check_wide, GradcheckConfig, OpKind, Wide};
use hit_core::training::{discriminate, r1_penalty, DiscriminatorConfig, DiscriminatorParams, ToyDiscriminator};
use hit_core::{Eager, Ops, Result, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{evaluate, Check, Property};

const OP_PREFIX: &str = "gradcheck/op/";
const TOLERANCE: f64 = 1e-6;
const R1_TOLERANCE: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `Σ y ⊙ R` for a fixed random `R`.
fn weighted(t: &mut Tape, y: &Var, seed: u64) -> Result<Var> {
    let shape = t.get(*y)?.shape().to_vec();
    let w = t.constant(Tensor::randn(&shape, &mut rng(seed)));
    let p = t.mul(y, &w)?;
    sum_all(t, &p)
}

type Probe = fn(&mut Tape, &[Var]) -> Result<Var>;

fn probes() -> Vec<(&'static str, Vec<Vec<usize>>, Probe)> {
    vec![
        ("contract", vec![vec![2, 3], vec![3, 4]], |t, v| t.contract("ij,jk->ik", &v[0], &v[1])),
        ("add", vec![vec![2, 3], vec![2, 3]], |t, v| t.add(&v[0], &v[1])),
        ("sub", vec![vec![2, 3], vec![2, 3]], |t, v| t.sub(&v[0], &v[1])),
        ("mul", vec![vec![2, 3], vec![2, 3]], |t, v| t.mul(&v[0], &v[1])),
        ("div", vec![vec![2, 3], vec![2, 3]], |t, v| {
            let d = t.exp(&v[1])?;
            t.div(&v[0], &d)
        }),
        ("exp", vec![vec![4]], |t, v| t.exp(&v[0])),
        ("powf", vec![vec![4]], |t, v| {
            let e = t.exp(&v[0])?;
            t.powf(&e, -0.5)
        }),
        ("sigmoid", vec![vec![4]], |t, v| t.sigmoid(&v[0])),
        ("softplus", vec![vec![4]], |t, v| t.softplus(&v[0])),
        ("relu", vec![vec![4]], |t, v| t.relu(&v[0])),
        ("scale", vec![vec![4]], |t, v| t.scale(&v[0], -2.5)),
        ("add_scalar", vec![vec![4]], |t, v| {
            let a = t.add_scalar(&v[0], 1.5)?;
            t.exp(&a)
        }),
        ("sum_axis", vec![vec![2, 3, 2]], |t, v| t.sum_axis(&v[0], 1)),
        ("expand", vec![vec![2, 3]], |t, v| t.expand(&v[0], 1, 4)),
        ("reshape", vec![vec![2, 3]], |t, v| t.reshape(&v[0], &[3, 2])),
        ("permute", vec![vec![2, 3, 4]], |t, v| t.permute(&v[0], &[2, 0, 1])),
        ("slice", vec![vec![5, 2]], |t, v| t.slice(&v[0], 0, 1, 3)),
        ("pad", vec![vec![2, 2]], |t, v| t.pad(&v[0], 1, 1, 4)),
        ("concat", vec![vec![2, 2], vec![2, 3]], |t, v| concat(t, &v[0], &v[1], 1)),
        ("softmax", vec![vec![3, 4]], |t, v| softmax(t, &v[0], 1)),
        ("linear", vec![vec![2, 3], vec![3, 2], vec![2]], |t, v| linear(t, &v[0], &v[1], Some(&v[2]))),
        ("mlp", vec![vec![2, 3], vec![3, 4], vec![4], vec![4, 3], vec![3]], |t, v| {
            let p = MlpParams { w1: v[1], b1: v[2], w2: v[3], b2: v[4] };
            mlp(t, &v[0], &p)
        }),
        ("layer_norm", vec![vec![3, 4], vec![4], vec![4]], |t, v| {
            let p = NormParams { scale: v[1], shift: v[2] };
            normalize(t, &v[0], NormKind::Layer, &p, &mut NormState::new(), NormMode::Train)
        }),
        ("batch_norm", vec![vec![4, 3], vec![3], vec![3]], |t, v| {
            let p = NormParams { scale: v[1], shift: v[2] };
            normalize(t, &v[0], NormKind::Batch, &p, &mut NormState::new(), NormMode::Train)
        }),
    ]
}

fn config(fault: Option<OpKind>) -> GradcheckConfig {
    GradcheckConfig { fault, ..GradcheckConfig::default() }
}

/// How a probe output is reduced to the scalar objective. Two reductions
/// sharing no primitive let a faulty rule be told apart from the harness.
#[derive(Debug, Clone, Copy)]
enum Reduction {
    Product,
    Contraction,
}

impl Reduction {
    const ALL: [Reduction; 2] = [Reduction::Product, Reduction::Contraction];

    /// `Σ y ⊙ R` for a fixed random `R`.
    fn apply(self, t: &mut Tape, y: &Var, seed: u64) -> Result<Var> {
        match self {
            Reduction::Product => weighted(t, y, seed),
            Reduction::Contraction => {
                let shape = t.get(*y)?.shape().to_vec();
                let w = t.constant(Tensor::randn(&shape, &mut rng(seed)));
                let axes: String = (b'a'..).take(shape.len()).map(char::from).collect();
                t.contract(&format!("{axes},{axes}->"), y, &w)
            }
        }
    }
}

/// One probe evaluated under one reduction.
#[derive(Debug, Clone)]
struct ProbeRun {
    error: f64,
    kinds: Vec<OpKind>,
}

fn probe_inputs(shapes: &[Vec<usize>], seed: u64) -> Vec<Tensor> {
    let mut r = rng(seed);
    // Inputs stay clear of the ReLU kink.
    shapes
        .iter()
        .map(|s| Tensor::randn(s, &mut r).map(|v: f64| if v.abs() < 0.05 { v + 0.1f64.copysign(v) } else { v }))
        .collect()
}

fn op_probe(probe: Probe, shapes: &[Vec<usize>], seed: u64, fault: Option<OpKind>) -> anyhow::Result<Vec<ProbeRun>> {
    let mut runs = Vec::new();
    for reduction in Reduction::ALL {
        let mut error = 0.0f64;
        let mut kinds = Vec::new();
        for trial in 0..3u64 {
            let params = probe_inputs(shapes, seed * 10 + trial);
            let objective = |t: &mut Tape, v: &[Var]| {
                let y = probe(t, v)?;
                reduction.apply(t, &y, 7 + trial)
            };
            let mut t = Tape::new();
            let vars: Vec<Var> = params.iter().map(|p| t.param(p.clone())).collect();
            objective(&mut t, &vars)?;
            for k in t.op_kinds().filter(|&k| k != OpKind::Leaf) {
                if !kinds.contains(&k) {
                    kinds.push(k);
                }
            }
            let report = finite_diff_check(objective, &params, &config(fault))?;
            error = error.max(report.max_rel_error);
        }
        runs.push(ProbeRun { error, kinds });
    }
    Ok(runs)
}

/// Kinds present in every failing run and absent from every passing one.
fn isolate(runs: &[ProbeRun]) -> Vec<OpKind> {
    let (failing, passing): (Vec<&ProbeRun>, Vec<&ProbeRun>) = runs.iter().partition(|r| !(r.error <= TOLERANCE));
    if failing.is_empty() {
        return Vec::new();
    }
    OpKind::ALL
        .into_iter()
        .filter(|k| failing.iter().all(|r| r.kinds.contains(k)))
        .filter(|k| passing.iter().all(|r| !r.kinds.contains(k)))
        .collect()
}

fn second_derivative(fault: Option<OpKind>) -> anyhow::Result<f64> {
    let x = Tensor::randn(&[5], &mut rng(9));
    let report = finite_diff_check(
        |t, v| {
            let s = t.softplus(&v[0])?;
            let s = weighted(t, &s, 3)?;
            let g = t.grad(s, &[v[0]])?;
            let sq = t.mul(&g[0], &g[0])?;
            sum_all(t, &sq)
        },
        &[x],
        &config(fault),
    )?;
    Ok(report.max_rel_error)
}

fn attention_params(h: usize, d: usize, kv: usize, seed: u64) -> Vec<Tensor> {
    let w = AttentionWeights::random(h, d, kv, 3, 3, &mut rng(seed));
    vec![w.query, w.key, w.value, w.output]
}

fn as_weights(v: &[Var]) -> AttentionWeights<Var> {
    AttentionWeights { query: v[0], key: v[1], value: v[2], output: v[3] }
}

fn kernel_check(kernel: Kernel, seed: u64, fault: Option<OpKind>) -> anyhow::Result<f64> {
    let mut params = attention_params(2, 4, 4, seed);
    params.push(Tensor::randn(&[1, 3, 4, 4], &mut rng(seed + 1)));
    let report = finite_diff_check(
        |t, v| {
            let y = blocked_attention(t, &v[4], &v[4], &as_weights(&v[..4]), kernel)?;
            weighted(t, &y, 1)
        },
        &params,
        &config(fault),
    )?;
    Ok(report.max_rel_error)
}

fn axial_check(fault: Option<OpKind>) -> anyhow::Result<f64> {
    let mut params = attention_params(2, 4, 4, 40);
    params.push(Tensor::randn(&[1, 3, 3, 4], &mut rng(41)));
    let report = finite_diff_check(
        |t, v| {
            let y = axial_attention(t, &v[4], &as_weights(&v[..4]))?;
            weighted(t, &y, 2)
        },
        &params,
        &config(fault),
    )?;
    Ok(report.max_rel_error)
}

fn full_check(fault: Option<OpKind>) -> anyhow::Result<f64> {
    let mut params = attention_params(2, 4, 4, 45);
    params.push(Tensor::randn(&[2, 5, 4], &mut rng(46)));
    let report = finite_diff_check(
        |t, v| {
            let y = full_attention(t, &v[4], &as_weights(&v[..4]))?;
            weighted(t, &y, 5)
        },
        &params,
        &config(fault),
    )?;
    Ok(report.max_rel_error)
}

fn cross_check(fault: Option<OpKind>) -> anyhow::Result<f64> {
    let mut params = attention_params(2, 4, 5, 50);
    params.push(Tensor::randn(&[1, 6, 4], &mut rng(53)));
    params.push(Tensor::randn(&[1, 4, 5], &mut rng(54)));
    params.push(Tensor::randn(&[4, 5], &mut rng(55)));
    let report = finite_diff_check(
        |t, v| {
            let y = cross_attention_mqa(t, &v[4], &v[5], &v[6], &as_weights(&v[..4]))?;
            weighted(t, &y, 3)
        },
        &params,
        &config(fault),
    )?;
    Ok(report.max_rel_error)
}

/// Pre-norm multi-axis block with an MLP on a blocked 16×16 map.
fn block_check(fault: Option<OpKind>) -> anyhow::Result<f64> {
    let d = 4;
    let mut r = rng(60);
    let mut params = attention_params(2, d, d, 61);
    params.push(Tensor::randn(&[1, 16, 16, d], &mut r));
    params.push(Tensor::randn(&[d], &mut r).map(|v| 1.0 + 0.1 * v));
    params.push(Tensor::randn(&[d], &mut r).scale(0.1));
    params.push(Tensor::randn(&[d, 8], &mut r).scale(0.5));
    params.push(Tensor::randn(&[8], &mut r).scale(0.1));
    params.push(Tensor::randn(&[8, d], &mut r).scale(0.35));
    params.push(Tensor::randn(&[d], &mut r).scale(0.1));
    let report = finite_diff_check(
        |t, v| {
            let w = as_weights(&v[..4]);
            let norm = NormParams { scale: v[5], shift: v[6] };
            let bp = BlockParams {
                norm: norm.clone(),
                mlp: Some(MlpBlockParams { norm, mlp: MlpParams { w1: v[7], b1: v[8], w2: v[9], b2: v[10] } }),
            };
            let b = block(t, &v[4], 4)?;
            let mut states = [NormState::new(), NormState::new()];
            let y = attention_block(
                t,
                &b.data,
                |g, x| blocked_attention(g, x, x, &w, Kernel::MultiAxis),
                &bp,
                BlockNorm { kind: NormKind::Layer, mode: NormMode::Train, states: &mut states },
            )?;
            let img = unblock(t, &b.with_data(y))?;
            weighted(t, &img, 4)
        },
        &params,
        &GradcheckConfig { fault, ..GradcheckConfig::sampled(24) },
    )?;
    Ok(report.max_rel_error)
}

/// Moves every MLP hidden bias past the largest pre-activation magnitude its
/// layer-normed input allows, so no ReLU sits near its kink.
fn kink_free(g: &mut Generator) {
    let names: Vec<String> = g.store.specs.iter().map(|s| s.name.clone()).collect();
    for name in names.iter().filter(|n| n.ends_with(".fc1.weight")) {
        let prefix = name.trim_end_matches(".fc1.weight");
        let find = |g: &Generator, suffix: &str| g.store.find(&format!("{prefix}.{suffix}")).expect("layout");
        let w = g.store.tensors[find(g, "fc1.weight")].clone();
        let si = find(g, "norm.scale");
        g.store.tensors[si] = g.store.tensors[si].scale(0.2);
        let scale = &g.store.tensors[si];
        let shift = &g.store.tensors[find(g, "norm.shift")];
        let (d, hidden) = (w.shape()[0], w.shape()[1]);
        let smax = scale.data().iter().fold(0.0f64, |a, b| a.max(b.abs()));
        let reach = smax * (d as f64).sqrt() + shift.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let bi = find(g, "fc1.bias");
        for j in 0..hidden {
            let col = (0..d).map(|i| w.get(&[i, j]).powi(2)).sum::<f64>().sqrt();
            let sign = if j % 3 == 0 { -1.0 } else { 1.0 };
            g.store.tensors[bi].data_mut()[j] = sign * 1.5 * reach * col;
        }
    }
}

/// Toy generator with layer norm whose summed output is close to zero, so
/// rounding in the objective stays small next to the difference signal.
fn generator_fixture(seed: u64, z: &Tensor) -> anyhow::Result<Generator> {
    let mut cfg = toy();
    cfg.norm = NormKind::Layer;
    let mut g = build_generator(&cfg, seed)?;
    kink_free(&mut g);
    let img = g.generate(z)?;
    let pixels = (img.numel() / 3) as f64;
    let bias = g.store.find("stage3.rgb.bias").expect("toy has three stages");
    for c in 0..3 {
        let mean = img.data().iter().skip(c).step_by(3).sum::<f64>() / pixels;
        g.store.tensors[bias].data_mut()[c] -= mean;
    }
    Ok(g)
}

/// End-to-end toy generator, parameter group by parameter group.
pub fn generator_check(fault: Option<OpKind>) -> anyhow::Result<f64> {
    let z = Tensor::randn(&[1, toy().latent_dim], &mut rng(32));
    let g = generator_fixture(31, &z)?;
    let mut groups: Vec<String> = Vec::new();
    for spec in &g.store.specs {
        let mut parts = spec.name.split('.');
        let head = parts.next().unwrap_or_default();
        let group = match (head.starts_with("stage"), parts.next()) {
            (true, Some(sub)) => format!("{head}.{sub}"),
            _ => head.to_string(),
        };
        if !groups.contains(&group) {
            groups.push(group);
        }
    }
    let wide_store: Vec<Tensor<Wide>> = g.store.tensors.iter().map(Tensor::cast).collect();
    let wide_z: Tensor<Wide> = z.cast();
    let mut worst = 0.0f64;
    for group in groups {
        let members: Vec<usize> = (0..g.store.len())
            .filter(|&i| {
                let n = &g.store.specs[i].name;
                n == &group || n.starts_with(&format!("{group}."))
            })
            .collect();
        let tensors: Vec<Tensor> = members.iter().map(|&i| g.store.tensors[i].clone()).collect();
        let report = finite_diff_check_wide(
            |t, v| {
                let mut leaves: Vec<Var> = g.store.tensors.iter().map(|p| t.constant(p.clone())).collect();
                for (slot, &i) in members.iter().enumerate() {
                    leaves[i] = v[slot];
                }
                let params = g.index.map(|&i| leaves[i]);
                let zv = t.constant(z.clone());
                let mut state = g.state.clone();
                let img = forward(t, &g.config, &params, &mut state, &zv, NormMode::Eval)?;
                sum_all(t, &img)
            },
            |group_values| {
                let mut values = wide_store.clone();
                for (slot, &i) in members.iter().enumerate() {
                    values[i] = group_values[slot].clone();
                }
                let params = g.index.map(|&i| values[i].clone());
                let mut state = g.state.clone();
                let img = forward(&mut Eager::<Wide>::new(), &g.config, &params, &mut state, &wide_z, NormMode::Eval)?;
                Ok(img.sum())
            },
            &tensors,
            &GradcheckConfig { seed: 41, fault, ..GradcheckConfig::sampled(8) },
        )?;
        worst = worst.max(report.max_rel_error);
    }
    Ok(worst)
}

/// `γ·R1` differentiated with respect to the discriminator parameters, the
/// gradient the discriminator update actually uses.
pub fn r1_check(fault: Option<OpKind>) -> anyhow::Result<f64> {
    let d = ToyDiscriminator::new(DiscriminatorConfig { resolution: 4, hidden: 16 }, 12)?;
    let x = Tensor::randn(&[3, 4, 4, 3], &mut rng(13));
    let report = finite_diff_check(
        |t, v| {
            let dp = DiscriminatorParams::from_flat(v)?;
            let xv = t.input(x.clone());
            let r1 = r1_penalty(t, xv, |t, x| discriminate(t, &dp, x))?;
            t.scale(&r1, 10.0)
        },
        &d.tensors,
        &GradcheckConfig { seed: 3, fault, ..GradcheckConfig::sampled(24) },
    )?;
    Ok(report.max_rel_error)
}

/// Properties in a fixed order, and the primitives the op probes isolate as
/// having a broken derivative rule.
pub fn run(fault: Option<OpKind>, keep: &dyn Fn(&str) -> bool) -> (Vec<Property>, Vec<OpKind>) {
    let runs = RefCell::new(Vec::new());
    let mut checks: Vec<Check<'_>> = Vec::new();
    for (i, (name, shapes, probe)) in probes().into_iter().enumerate() {
        let label = format!("{OP_PREFIX}{name}");
        let l = label.clone();
        let runs = &runs;
        checks.push((
            label,
            Box::new(move || {
                let result = op_probe(probe, &shapes, 100 + i as u64, fault).map(|r| {
                    let worst = r.iter().fold(0.0f64, |a, p| a.max(p.error));
                    runs.borrow_mut().extend(r);
                    worst
                });
                Property::from_result(l, TOLERANCE, result)
            }),
        ));
    }
    let mut add = |name: &str, tol: f64, f: Box<dyn Fn() -> anyhow::Result<f64>>| {
        let n = format!("gradcheck/{name}");
        checks.push((n.clone(), Box::new(move || Property::from_result(n, tol, f()))));
    };
    add("second_derivative", TOLERANCE, Box::new(move || second_derivative(fault)));
    add("attention/multi_axis", TOLERANCE, Box::new(move || kernel_check(Kernel::MultiAxis, 20, fault)));
    add("attention/regional", TOLERANCE, Box::new(move || kernel_check(Kernel::Regional, 22, fault)));
    add("attention/dilated", TOLERANCE, Box::new(move || kernel_check(Kernel::Dilated, 24, fault)));
    add("attention/axial", TOLERANCE, Box::new(move || axial_check(fault)));
    add("attention/full", TOLERANCE, Box::new(move || full_check(fault)));
    add("attention/cross_mqa", TOLERANCE, Box::new(move || cross_check(fault)));
    add("attention/block_with_mlp", TOLERANCE, Box::new(move || block_check(fault)));
    add("generator/toy_end_to_end", TOLERANCE, Box::new(move || generator_check(fault)));
    add("training/r1_through_discriminator", R1_TOLERANCE, Box::new(move || r1_check(fault)));
    let properties = evaluate(checks, keep);
    let culprits = isolate(&runs.borrow());
    (properties, culprits)
}
