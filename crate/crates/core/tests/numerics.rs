use hit_core::attention::{full_attention, AttentionWeights};
use hit_core::numerics::functional::{concat, linear, mlp, mlp_forward, softmax, softmax_tensor, sum_all, MlpParams};
use hit_core::numerics::norm::{normalize, NormKind, NormMode, NormParams, NormState};
use hit_core::numerics::{contract, finite_diff_check, GradcheckConfig, Ops, Tape, Tensor, Var};
use hit_core::reference::einsum_loops;
use hit_core::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn int_tensor(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| r.gen_range(-5i32..=5) as f64)
}

/// `Σ out ⊙ R` for a fixed random `R`, so every output entry matters.
fn weighted_sum(t: &mut Tape, out: &Var, seed: u64) -> Result<Var> {
    let shape = t.get(*out)?.shape().to_vec();
    let weights = t.constant(Tensor::randn(&shape, &mut rng(seed)));
    let prod = t.mul(out, &weights)?;
    sum_all(t, &prod)
}

#[test]
fn contract_matches_loops_on_attention_projection() {
    let mut r = rng(1);
    let a = int_tensor(&[1, 2, 2, 2], &mut r);
    let b = int_tensor(&[2, 2, 2], &mut r);
    let fast = contract("bmnd,hdk->bhmnk", &a, &b).unwrap();
    assert_eq!(fast.shape(), &[1, 2, 2, 2, 2]);
    // five nested loops
    let mut slow = Tensor::zeros(&[1, 2, 2, 2, 2]);
    for h in 0..2 {
        for m in 0..2 {
            for n in 0..2 {
                for k in 0..2 {
                    let s: f64 = (0..2).map(|d| a.get(&[0, m, n, d]) * b.get(&[h, d, k])).sum();
                    slow.set(&[0, h, m, n, k], s);
                }
            }
        }
    }
    assert_eq!(fast, slow);
}

#[test]
fn contract_dilated_value_gather_is_exact() {
    let mut r = rng(2);
    let s = Tensor::randn(&[2, 2, 3, 4, 4], &mut r);
    let v = Tensor::randn(&[2, 4, 3, 5], &mut r);
    let fast = contract("bhyxz,bzyv->bhxyv", &s, &v).unwrap();
    let slow = einsum_loops("bhyxz,bzyv->bhxyv", &s, &v).unwrap();
    assert_eq!(fast.shape(), &[2, 2, 4, 3, 5]);
    assert_eq!(fast, slow);
}

#[derive(Debug, Clone)]
struct EinsumCase {
    spec: String,
    a_shape: Vec<usize>,
    b_shape: Vec<usize>,
    seed: u64,
}

fn einsum_case() -> impl Strategy<Value = EinsumCase> {
    (1usize..=6, any::<u64>()).prop_map(|(labels, seed)| {
        let mut r = rng(seed);
        let names: Vec<char> = "abcdefghijklmnopqrstuvwxyz".chars().collect();
        let mut chosen: Vec<char> = Vec::new();
        while chosen.len() < labels {
            let c = names[r.gen_range(0..names.len())];
            if !chosen.contains(&c) {
                chosen.push(c);
            }
        }
        let extents: Vec<usize> = (0..labels).map(|_| r.gen_range(1..=5)).collect();
        let mut lhs = Vec::new();
        let mut rhs = Vec::new();
        for (i, &c) in chosen.iter().enumerate() {
            match r.gen_range(0..3) {
                0 => lhs.push((c, extents[i])),
                1 => rhs.push((c, extents[i])),
                _ => {
                    lhs.push((c, extents[i]));
                    rhs.push((c, extents[i]));
                }
            }
        }
        let mut out: Vec<char> = chosen.iter().copied().filter(|_| r.gen_bool(0.5)).collect();
        for v in [&mut lhs, &mut rhs] {
            for i in (1..v.len()).rev() {
                v.swap(i, r.gen_range(0..=i));
            }
        }
        for i in (1..out.len()).rev() {
            out.swap(i, r.gen_range(0..=i));
        }
        let s = |v: &[(char, usize)]| v.iter().map(|p| p.0).collect::<String>();
        EinsumCase {
            spec: format!("{},{}->{}", s(&lhs), s(&rhs), out.iter().collect::<String>()),
            a_shape: lhs.iter().map(|p| p.1).collect(),
            b_shape: rhs.iter().map(|p| p.1).collect(),
            seed,
        }
    })
}

proptest! {
    #[test]
    fn contract_agrees_with_loop_oracle(case in einsum_case()) {
        let mut r = rng(case.seed ^ 0x5eed);
        let a = Tensor::randn(&case.a_shape, &mut r);
        let b = Tensor::randn(&case.b_shape, &mut r);
        let fast = contract(&case.spec, &a, &b).unwrap();
        let slow = einsum_loops(&case.spec, &a, &b).unwrap();
        prop_assert_eq!(fast, slow, "spec {}", case.spec);
    }

    #[test]
    fn softmax_normalizes_and_ignores_shifts(
        data in proptest::collection::vec(-30.0f64..30.0, 12),
        shift in -100.0f64..100.0,
        axis in 0usize..2,
    ) {
        let x = Tensor::new(&[3, 4], data).unwrap();
        let s = softmax_tensor(&x, axis).unwrap();
        let sums = s.sum_axis(axis).unwrap();
        for v in sums.data() {
            prop_assert!((v - 1.0).abs() <= 1e-12);
        }
        let shifted = softmax_tensor(&x.map(|v| v + shift), axis).unwrap();
        prop_assert!(s.max_abs_diff(&shifted).unwrap() <= 1e-12);
    }
}

#[test]
fn softmax_matches_extended_precision() {
    let x = Tensor::new(&[4], vec![0.3141592653589793, -1.2345678901234567, std::f64::consts::E, 0.5772156649015329])
        .unwrap();
    // tests/oracles/softmax.py
    let want: [f64; 4] = [0.07362614182453427, 0.015646902827761957, 0.8149467010388232, 0.09578025430888067];
    let got = softmax_tensor(&x, 0).unwrap();
    for (g, w) in got.data().iter().zip(want) {
        assert!(((g - w) / w).abs() <= 1e-15, "{g} vs {w}");
    }
}

#[test]
fn mlp_matches_explicit_matmuls() {
    let mut r = rng(3);
    let p = MlpParams {
        w1: Tensor::randn(&[3, 5], &mut r),
        b1: Tensor::randn(&[5], &mut r),
        w2: Tensor::randn(&[5, 2], &mut r),
        b2: Tensor::randn(&[2], &mut r),
    };
    let x = Tensor::randn(&[2, 4, 3], &mut r);
    let y: Tensor = mlp_forward(&x, &p).unwrap();
    for row in 0..8 {
        let xi = &x.data()[row * 3..row * 3 + 3];
        let hidden: Vec<f64> = (0..5)
            .map(|j| {
                let s: f64 = (0..3).map(|i| xi[i] * p.w1.get(&[i, j])).sum::<f64>() + p.b1.data()[j];
                s.max(0.0)
            })
            .collect();
        for o in 0..2 {
            let want: f64 = (0..5).map(|j| hidden[j] * p.w2.get(&[j, o])).sum::<f64>() + p.b2.data()[o];
            assert!((y.data()[row * 2 + o] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn backward_of_sum_is_ones() {
    let mut t = Tape::new();
    let x = t.param(Tensor::randn(&[3, 4], &mut rng(4)));
    let s = sum_all(&mut t, &x).unwrap();
    let g = t.backward(s).unwrap();
    assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
}

#[test]
fn backward_of_softmax_sum_is_zero() {
    let mut t = Tape::new();
    let x = t.param(Tensor::randn(&[2, 5], &mut rng(5)));
    let s = softmax(&mut t, &x, 1).unwrap();
    let s = sum_all(&mut t, &s).unwrap();
    let g = t.backward(s).unwrap();
    assert!(g.get(x).unwrap().data().iter().all(|&v| v.abs() < 1e-15));
}

#[test]
fn untouched_params_get_zero_gradients() {
    let mut t = Tape::new();
    let x = t.param(Tensor::ones(&[2]));
    let unused = t.param(Tensor::ones(&[3]));
    let s = sum_all(&mut t, &x).unwrap();
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(unused).unwrap(), &Tensor::zeros(&[3]));
}

#[test]
fn full_attention_gradcheck() {
    let mut r = rng(6);
    let w = AttentionWeights::random(2, 16, 16, 4, 4, &mut r);
    let x = Tensor::randn(&[1, 8, 16], &mut r);
    let report = finite_diff_check(
        |t, v| {
            let w = AttentionWeights { query: v[1], key: v[2], value: v[3], output: v[4] };
            let y = full_attention(t, &v[0], &w)?;
            sum_all(t, &y)
        },
        &[x, w.query, w.key, w.value, w.output],
        &GradcheckConfig::default(),
    )
    .unwrap();
    assert!(report.passes(1e-6), "{report:?}");
}

type Probe = fn(&mut Tape, &[Var]) -> Result<Var>;

/// One probe per differentiable primitive and composite.
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
            t.mul(&a, &a)
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

#[test]
fn every_op_passes_gradcheck() {
    for (seed, (name, shapes, f)) in probes().into_iter().enumerate() {
        for trial in 0..3u64 {
            let mut r = rng(100 + seed as u64 * 10 + trial);
            // Keep ReLU inputs away from the kink.
            let params: Vec<Tensor> = shapes
                .iter()
                .map(|s| Tensor::randn(s, &mut r).map(|v: f64| if v.abs() < 0.05 { v + 0.1f64.copysign(v) } else { v }))
                .collect();
            let wseed = 7 + trial;
            let report = finite_diff_check(
                |t, v| {
                    let y = f(t, v)?;
                    weighted_sum(t, &y, wseed)
                },
                &params,
                &GradcheckConfig::default(),
            )
            .unwrap();
            assert!(report.passes(1e-6), "{name} trial {trial}: {report:?}");
        }
    }
}

#[test]
fn second_derivatives_match_finite_differences() {
    // d/dx of (d/dx Σ softplus(x)·c) checked against finite differences.
    let x = Tensor::randn(&[5], &mut rng(9));
    let report = finite_diff_check(
        |t, v| {
            let s = t.softplus(&v[0])?;
            let s = weighted_sum(t, &s, 3)?;
            let g = t.grad(s, &[v[0]])?;
            let sq = t.mul(&g[0], &g[0])?;
            sum_all(t, &sq)
        },
        &[x],
        &GradcheckConfig::default(),
    )
    .unwrap();
    assert!(report.passes(1e-6), "{report:?}");
}

#[test]
fn replay_is_bit_exact() {
    let mut r = rng(10);
    let mut t = Tape::new();
    let x = t.param(Tensor::randn(&[1, 6, 8], &mut r));
    let w = AttentionWeights::random(2, 8, 8, 4, 4, &mut r).map(|p| t.param(p.clone()));
    let y = full_attention(&mut t, &x, &w).unwrap();
    let s = sum_all(&mut t, &y).unwrap();
    let g = t.grad(s, &[x]).unwrap();
    let _ = sum_all(&mut t, &g[0]).unwrap();
    assert!(t.replay_matches().unwrap());
}

#[test]
fn tape_and_eager_agree_bitwise() {
    let mut r = rng(11);
    let x = Tensor::randn(&[2, 5, 8], &mut r);
    let w = AttentionWeights::random(4, 8, 8, 2, 3, &mut r);
    let eager = full_attention(&mut hit_core::Eager::new(), &x, &w).unwrap();
    let mut t = Tape::new();
    let xv = t.constant(x);
    let wv = w.map(|p| t.param(p.clone()));
    let y = full_attention(&mut t, &xv, &wv).unwrap();
    assert_eq!(t.get(y).unwrap(), &eager);
}

#[test]
fn identical_seeds_give_identical_tensors() {
    let a = Tensor::<f64>::randn(&[16], &mut rng(12));
    let b = Tensor::<f64>::randn(&[16], &mut rng(12));
    assert_eq!(a, b);
}
