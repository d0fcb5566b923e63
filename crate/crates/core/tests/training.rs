use hit_core::numerics::{finite_diff_check, GradcheckConfig, Tensor, Wide};
use hit_core::training::{
    discriminate, loss_discriminator, loss_generator, loss_vqhit, r1_penalty, train_toy, train_toy_with,
    DiscriminatorConfig, DiscriminatorParams, GanHyper, ToyDiscriminator, ToySetup, Trace, VqHitWeights,
};
use hit_core::{Eager, Error, Ops, Tape};
use num_traits::Float;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_disc(seed: u64) -> ToyDiscriminator {
    let mut d = ToyDiscriminator::new(DiscriminatorConfig { resolution: 2, hidden: 5 }, seed).unwrap();
    // Non-zero biases so every term of the oracle is exercised.
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for i in [1, 3, 5] {
        let shape = d.tensors[i].shape().to_vec();
        d.tensors[i] = Tensor::uniform(&shape, -0.5, 0.5, &mut rng);
    }
    d
}

fn images(batch: usize, res: usize, seed: u64) -> Tensor {
    Tensor::randn(&[batch, res, res, 3], &mut ChaCha8Rng::seed_from_u64(seed))
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

fn w(x: f64) -> Wide {
    Wide::from(x)
}

fn sigmoid(x: Wide) -> Wide {
    w(1.0) / (w(1.0) + (-x).exp())
}

fn softplus(x: Wide) -> Wide {
    if x.hi() > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Hand-written double-double forward and input gradient of the toy
/// discriminator for one flattened sample.
fn oracle_logit_and_grad(d: &ToyDiscriminator, x: &[f64]) -> (Wide, Vec<Wide>) {
    let t: Vec<Vec<Wide>> = d.tensors.iter().map(|t| t.data().iter().map(|&v| w(v)).collect()).collect();
    let (w1, b1, w2, b2, w3, b3) = (&t[0], &t[1], &t[2], &t[3], &t[4], &t[5]);
    let n_in = x.len();
    let h = b1.len();
    let z1: Vec<Wide> = (0..h).map(|j| (0..n_in).fold(b1[j], |acc, i| acc + w(x[i]) * w1[i * h + j])).collect();
    let a1: Vec<Wide> = z1.iter().map(|&z| softplus(z)).collect();
    let z2: Vec<Wide> = (0..h).map(|j| (0..h).fold(b2[j], |acc, i| acc + a1[i] * w2[i * h + j])).collect();
    let a2: Vec<Wide> = z2.iter().map(|&z| softplus(z)).collect();
    let logit = (0..h).fold(b3[0], |acc, i| acc + a2[i] * w3[i]);
    let dz2: Vec<Wide> = (0..h).map(|j| w3[j] * sigmoid(z2[j])).collect();
    let dz1: Vec<Wide> =
        (0..h).map(|i| (0..h).fold(w(0.0), |acc, j| acc + w2[i * h + j] * dz2[j]) * sigmoid(z1[i])).collect();
    let dx = (0..n_in).map(|i| (0..h).fold(w(0.0), |acc, j| acc + w1[i * h + j] * dz1[j])).collect();
    (logit, dx)
}

fn oracle_batch(d: &ToyDiscriminator, x: &Tensor) -> (Vec<Wide>, Wide) {
    let b = x.shape()[0];
    let n = x.numel() / b;
    let mut logits = Vec::new();
    let mut r1 = w(0.0);
    for row in x.data().chunks(n) {
        let (l, g) = oracle_logit_and_grad(d, row);
        logits.push(l);
        r1 = r1 + g.iter().fold(w(0.0), |acc, &v| acc + v * v);
    }
    (logits, r1 / w(b as f64))
}

fn mean(v: impl Iterator<Item = Wide>, n: usize) -> Wide {
    v.fold(w(0.0), |a, x| a + x) / w(n as f64)
}

fn tape_disc(d: &ToyDiscriminator, t: &mut Tape) -> DiscriminatorParams<hit_core::Var> {
    d.params_with(|p| t.constant(p.clone()))
}

#[test]
fn r1_of_constant_discriminator_is_zero() {
    let mut t = Tape::new();
    let x = t.input(images(3, 2, 1));
    let r1 = r1_penalty(&mut t, x, |t, _| Ok(t.constant(Tensor::full(&[3], 0.7)))).unwrap();
    assert_eq!(t.get(r1).unwrap().item(), 0.0);
}

#[test]
fn r1_of_linear_discriminator_is_weight_norm() {
    let weights = Tensor::from_fn(&[12, 1], |i| (i as f64 - 5.5) * 0.3);
    let expect: f64 = weights.data().iter().map(|v| v * v).sum();
    for seed in 0..3 {
        let mut t = Tape::new();
        let x = t.input(images(4, 2, seed));
        let wv = t.constant(weights.clone());
        let r1 = r1_penalty(&mut t, x, |t, x| {
            let flat = t.reshape(x, &[4, 12])?;
            let y = t.contract("bi,io->bo", &flat, &wv)?;
            t.reshape(&y, &[4])
        })
        .unwrap();
        assert!(rel(t.get(r1).unwrap().item(), expect) < 1e-14);
    }
}

#[test]
fn r1_matches_finite_difference_gradient_norm() {
    let d = ToyDiscriminator::new(DiscriminatorConfig::default(), 5).unwrap();
    let x = images(3, 8, 6);
    let mut t = Tape::new();
    let dp = tape_disc(&d, &mut t);
    let xv = t.input(x.clone());
    let r1 = r1_penalty(&mut t, xv, |t, x| discriminate(t, &dp, x)).unwrap();
    let analytic = t.get(r1).unwrap().item();

    let h = 1e-5;
    let mut numeric = 0.0;
    let mut probe = x.clone();
    for j in 0..x.numel() {
        let orig = x.data()[j];
        probe.data_mut()[j] = orig + h;
        let up = d.logits(&probe).unwrap();
        probe.data_mut()[j] = orig - h;
        let down = d.logits(&probe).unwrap();
        probe.data_mut()[j] = orig;
        let sample = j / 192;
        let g = (up.data()[sample] - down.data()[sample]) / (2.0 * h);
        numeric += g * g;
    }
    numeric /= 3.0;
    assert!(rel(analytic, numeric) <= 1e-4, "{analytic} vs {numeric}");
}

#[test]
fn discriminator_loss_limits() {
    let mut t = Tape::new();
    let xr = t.input(images(4, 2, 2));
    let xf = t.constant(images(4, 2, 3));
    let zero = |t: &mut Tape, _: &hit_core::Var| Ok(t.constant(Tensor::zeros(&[4])));
    let loss = loss_discriminator(&mut t, zero, xr, xf, 0.0).unwrap();
    assert!((t.get(loss.total).unwrap().item() - 2.0 * 2f64.ln()).abs() < 1e-15);

    for big in [40.0, 1e6, f64::INFINITY] {
        let mut t = Tape::new();
        let xr = t.input(images(4, 2, 2));
        let xf = t.constant(images(4, 2, 3));
        let (xr_i, xf_i) = (xr.index(), xf.index());
        let perfect = move |t: &mut Tape, x: &hit_core::Var| {
            let sign = if x.index() == xr_i { 1.0 } else { -1.0 };
            assert!(x.index() == xr_i || x.index() == xf_i);
            Ok(t.constant(Tensor::full(&[4], sign * big)))
        };
        let loss = loss_discriminator(&mut t, perfect, xr, xf, 0.0).unwrap();
        assert!(t.get(loss.total).unwrap().item() < 1e-17, "{big}");
    }
}

#[test]
fn discriminator_loss_matches_extended_precision_oracle() {
    for seed in 0..3 {
        let d = small_disc(seed);
        let (real, fake) = (images(5, 2, seed + 10), images(5, 2, seed + 20));
        let gamma = 10.0;
        let mut t = Tape::new();
        let dp = tape_disc(&d, &mut t);
        let xr = t.input(real.clone());
        let xf = t.constant(fake.clone());
        let loss = loss_discriminator(&mut t, |t, x| discriminate(t, &dp, x), xr, xf, gamma).unwrap();

        let (lr, r1) = oracle_batch(&d, &real);
        let (lf, _) = oracle_batch(&d, &fake);
        let adv = mean(lr.iter().map(|&l| -(sigmoid(l).ln())), 5)
            + mean(lf.iter().map(|&l| -((w(1.0) - sigmoid(l)).ln())), 5);
        let expect = adv + w(gamma) * r1;
        let got = t.get(loss.total).unwrap().item();
        assert!(rel(got, expect.as_f64()) <= 1e-12, "{got} vs {expect:?}");
        assert!(rel(t.get(loss.r1).unwrap().item(), r1.as_f64()) <= 1e-12);
    }
}

#[test]
fn discriminator_loss_rejects_bad_inputs() {
    let mut t = Tape::new();
    let xr = t.input(images(4, 2, 2));
    let xf = t.constant(images(3, 2, 3));
    let zero = |t: &mut Tape, _: &hit_core::Var| Ok(t.constant(Tensor::zeros(&[4])));
    assert!(matches!(loss_discriminator(&mut t, zero, xr, xf, 0.0), Err(Error::ShapeMismatch { .. })));
    let xf = t.constant(images(4, 2, 3));
    assert!(matches!(loss_discriminator(&mut t, zero, xr, xf, -1.0), Err(Error::Config(_))));
    let nan = |t: &mut Tape, _: &hit_core::Var| Ok(t.constant(Tensor::full(&[4], f64::NAN)));
    assert!(matches!(loss_discriminator(&mut t, nan, xr, xf, 0.0), Err(Error::NonFinite(_))));
}

#[test]
fn generator_loss_limits_and_oracle() {
    let e = &mut Eager::<f64>::new();
    let zero = loss_generator(e, &Tensor::zeros(&[6])).unwrap().item();
    assert!((zero - 2f64.ln()).abs() < 4e-16);
    let big = loss_generator(e, &Tensor::full(&[6], 800.0)).unwrap().item();
    assert!(big < 1e-300);
    assert!(loss_generator(e, &Tensor::full(&[2], f64::NEG_INFINITY)).is_err());

    let logits = Tensor::randn(&[16], &mut ChaCha8Rng::seed_from_u64(4)).scale(6.0);
    let got = loss_generator(e, &logits).unwrap().item();
    let expect = mean(logits.data().iter().map(|&l| -(sigmoid(w(l)).ln())), 16);
    assert!(rel(got, expect.as_f64()) <= 1e-12);
}

#[test]
fn vqhit_terms() {
    let d = small_disc(7);
    let dp = d.params_with(Tensor::clone);
    let x = images(3, 2, 30);
    let e = &mut Eager::<f64>::new();
    let zero_disc = |_: &mut Eager<f64>, _: &Tensor| Ok(Tensor::zeros(&[3]));
    let id = |_: &mut Eager<f64>, v: &Tensor| Ok(v.clone());
    let same = loss_vqhit(e, &x, &x, zero_disc, id, VqHitWeights::default()).unwrap();
    assert!((same.total.item() - 0.1 * 2f64.ln()).abs() < 1e-16);

    let x_hat = images(3, 2, 31);
    let with = |l1: f64, e: &mut Eager<f64>| {
        let weights = VqHitWeights { perceptual: l1, adversarial: 0.1 };
        loss_vqhit(e, &x, &x_hat, |g, v| discriminate(g, &dp, v), id, weights).unwrap()
    };
    let (a, b) = (with(0.0, e), with(1.0, e));
    let gap = b.total.item() - a.total.item();
    assert!(rel(gap, a.reconstruction.item()) < 1e-12);
    assert_eq!(a.reconstruction, a.perceptual);

    let x_big = images(3, 4, 32);
    assert!(matches!(
        loss_vqhit(e, &x, &x_big, zero_disc, id, VqHitWeights::default()),
        Err(Error::ShapeMismatch { .. })
    ));
}

#[test]
fn vqhit_matches_term_by_term_oracle() {
    let d = small_disc(8);
    let dp = d.params_with(Tensor::clone);
    let (x, x_hat) = (images(4, 2, 40), images(4, 2, 41));
    let features = Tensor::from_fn(&[12, 5], |i| ((i * 7 % 11) as f64 - 5.0) * 0.2);
    let e = &mut Eager::<f64>::new();
    let got = loss_vqhit(
        e,
        &x,
        &x_hat,
        |g, v| discriminate(g, &dp, v),
        |g, v| {
            let flat = g.reshape(v, &[4, 12])?;
            g.contract("bi,if->bf", &flat, &features)
        },
        VqHitWeights::default(),
    )
    .unwrap();

    let mut rec = w(0.0);
    let mut perc = w(0.0);
    for b in 0..4 {
        let xa = &x.data()[b * 12..(b + 1) * 12];
        let xb = &x_hat.data()[b * 12..(b + 1) * 12];
        for (p, q) in xa.iter().zip(xb) {
            rec = rec + (w(*p) - w(*q)) * (w(*p) - w(*q));
        }
        for f in 0..5 {
            let proj = |v: &[f64]| (0..12).fold(w(0.0), |acc, i| acc + w(v[i]) * w(features.data()[i * 5 + f]));
            let diff = proj(xa) - proj(xb);
            perc = perc + diff * diff;
        }
    }
    let (rec, perc) = (rec / w(4.0), perc / w(4.0));
    let (logits, _) = oracle_batch(&d, &x_hat);
    let adv = mean(logits.iter().map(|&l| -(sigmoid(l).ln())), 4);
    let total = rec + w(5e-5) * perc + w(0.1) * adv;
    assert!(rel(got.reconstruction.item(), rec.as_f64()) <= 1e-12);
    assert!(rel(got.perceptual.item(), perc.as_f64()) <= 1e-12);
    assert!(rel(got.adversarial.item(), adv.as_f64()) <= 1e-12);
    assert!(rel(got.total.item(), total.as_f64()) <= 1e-12);
}

#[test]
fn r1_trained_through_matches_finite_differences() {
    let d = ToyDiscriminator::new(DiscriminatorConfig { resolution: 4, hidden: 16 }, 12).unwrap();
    let x = images(3, 4, 13);
    let gamma = 10.0;
    let report = finite_diff_check(
        |t, v| {
            let dp = DiscriminatorParams::from_flat(v)?;
            let xv = t.input(x.clone());
            let r1 = r1_penalty(t, xv, |t, x| discriminate(t, &dp, x))?;
            t.scale(&r1, gamma)
        },
        &d.tensors,
        &GradcheckConfig { seed: 3, ..GradcheckConfig::sampled(24) },
    )
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn generator_loss_pushes_fake_logits_up(logits in prop::collection::vec(-30.0f64..30.0, 1..8)) {
        let n = logits.len();
        let mut t = Tape::new();
        let l = t.param(Tensor::new(&[n], logits).unwrap());
        let loss = loss_generator(&mut t, &l).unwrap();
        let g = t.backward(loss).unwrap();
        prop_assert!(g.get(l).unwrap().data().iter().all(|&v| v < 0.0));
    }

    #[test]
    fn r1_ignores_output_shift(seed in 0u64..1000, shift in -5.0f64..5.0) {
        let d = small_disc(seed);
        let mut shifted = d.clone();
        shifted.tensors[5] = shifted.tensors[5].map(|b| b + shift);
        let x = images(2, 2, seed + 1);
        let r1_of = |d: &ToyDiscriminator| {
            let mut t = Tape::new();
            let dp = tape_disc(d, &mut t);
            let xv = t.input(x.clone());
            let r1 = r1_penalty(&mut t, xv, |t, x| discriminate(t, &dp, x)).unwrap();
            t.get(r1).unwrap().item()
        };
        prop_assert_eq!(r1_of(&d), r1_of(&shifted));
    }

    #[test]
    fn losses_are_pure(seed in 0u64..1000) {
        let logits = Tensor::randn(&[5], &mut ChaCha8Rng::seed_from_u64(seed));
        let e = &mut Eager::<f64>::new();
        let a = loss_generator(e, &logits).unwrap();
        let b = loss_generator(e, &logits).unwrap();
        prop_assert_eq!(a, b);
    }
}

fn short_setup(steps: usize, gamma: f64) -> ToySetup {
    ToySetup {
        hyper: GanHyper { steps, gamma, batch: 8, ..GanHyper::default() },
        eval_samples: 32,
        log_every: 5,
        ..ToySetup::default()
    }
}

#[test]
fn zero_steps_log_only_the_initial_distance() {
    let out = train_toy(&short_setup(0, 10.0)).unwrap();
    assert_eq!(out.trace.rows.len(), 1);
    let row = out.trace.rows[0];
    assert_eq!(row.step, 0);
    assert!(row.moment_distance.unwrap() > 0.0);
    assert!(row.loss_d.is_none() && row.loss_g.is_none() && row.r1.is_none());
}

#[test]
fn training_is_deterministic_and_logs_on_schedule() {
    let a = train_toy(&short_setup(12, 10.0)).unwrap();
    let b = train_toy(&short_setup(12, 10.0)).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.generator.store.tensors, b.generator.store.tensors);
    let logged: Vec<usize> = a.trace.moment_distances().iter().map(|p| p.0).collect();
    assert_eq!(logged, vec![0, 5, 10, 12]);
    assert_eq!(a.trace.rows.len(), 13);
    let other = train_toy(&ToySetup { seed: 1, ..short_setup(12, 10.0) }).unwrap();
    assert_ne!(a.trace, other.trace);
}

#[test]
fn r1_weight_changes_the_first_update() {
    let with = train_toy(&short_setup(1, 10.0)).unwrap();
    let without = train_toy(&short_setup(1, 0.0)).unwrap();
    assert_ne!(with.discriminator.tensors, without.discriminator.tensors);
    assert_ne!(with.trace.rows[1].loss_g, without.trace.rows[1].loss_g);
    assert_eq!(with.trace.rows[0], without.trace.rows[0]);
}

#[test]
fn addend_hook_participates_and_divergence_names_the_step() {
    let setup = short_setup(3, 10.0);
    let zero = |t: &mut Tape, _: &DiscriminatorParams<hit_core::Var>, _: hit_core::Var, _: hit_core::Var| {
        Ok(t.constant(Tensor::<f64>::scalar(0.0)))
    };
    let plain = train_toy(&setup).unwrap();
    let hooked = train_toy_with(&setup, Some(&zero)).unwrap();
    assert_eq!(plain.trace, hooked.trace);

    let poison = |t: &mut Tape, _: &DiscriminatorParams<hit_core::Var>, _: hit_core::Var, _: hit_core::Var| {
        Ok(t.constant(Tensor::<f64>::scalar(f64::NAN)))
    };
    match train_toy_with(&setup, Some(&poison)) {
        Err(Error::Diverged { step, .. }) => assert_eq!(step, 1),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn trace_csv_roundtrips() {
    let out = train_toy(&short_setup(6, 10.0)).unwrap();
    let csv = out.trace.to_csv();
    assert!(csv.starts_with("step,loss_d,loss_g,r1,moment_distance\n0,,,,"));
    assert_eq!(Trace::from_csv(&csv).unwrap(), out.trace);
    assert!(Trace::from_csv("step,loss\n").is_err());
}

#[test]
fn setup_validation() {
    let mut s = ToySetup::default();
    s.data.resolution = 16;
    assert!(matches!(train_toy(&s), Err(Error::Config(_))));
    let mut s = ToySetup::default();
    s.hyper.gamma = -1.0;
    assert!(train_toy(&s).is_err());
    let mut s = ToySetup::default();
    s.hyper.batch = 0;
    assert!(train_toy(&s).is_err());
}

#[test]
fn setup_config_rejects_unknown_keys() {
    let text = serde_json::json!({"generator": hit_core::generator::toy_training(), "extra": 1}).to_string();
    assert!(serde_json::from_str::<ToySetup>(&text).is_err());
    let ok = serde_json::json!({"generator": hit_core::generator::toy_training()}).to_string();
    let parsed: ToySetup = serde_json::from_str(&ok).unwrap();
    assert_eq!(parsed, ToySetup::default());
}
