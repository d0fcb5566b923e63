use crate::error::{Error, Result};
use crate::numerics::functional::{mean_all, sum_all};
use crate::numerics::{Ops, Tape, Var};

fn check_finite<G: Ops>(g: &G, v: &G::Value, what: &str) -> Result<()> {
    if g.value(v)?.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Non-saturating generator loss `−E[log σ(l)] = E[softplus(−l)]`.
pub fn loss_generator<G: Ops>(g: &mut G, fake_logits: &G::Value) -> Result<G::Value> {
    let neg = g.scale(fake_logits, -1.0)?;
    let sp = g.softplus(&neg)?;
    let loss = mean_all(g, &sp)?;
    check_finite(g, &loss, "generator loss")?;
    Ok(loss)
}

/// Logistic discrimination loss `−E[log σ(l_real)] − E[log(1 − σ(l_fake))]`.
pub fn adversarial_loss_d<G: Ops>(g: &mut G, real_logits: &G::Value, fake_logits: &G::Value) -> Result<G::Value> {
    let neg = g.scale(real_logits, -1.0)?;
    let real = g.softplus(&neg)?;
    let real = mean_all(g, &real)?;
    let fake = g.softplus(fake_logits)?;
    let fake = mean_all(g, &fake)?;
    let loss = g.add(&real, &fake)?;
    check_finite(g, &loss, "discriminator loss")?;
    Ok(loss)
}

/// `E‖∇_x D(x)‖²` from logits already recorded on `tape` for the input `x`.
///
/// The gradient of `Σ logits` is taken, which equals the per-sample input
/// gradients as long as `D` treats batch elements independently. The result
/// stays on the tape, so it can be differentiated again.
pub fn r1_from_logits(tape: &mut Tape, logits: Var, x: Var) -> Result<Var> {
    let b =
        *tape.get(x)?.shape().first().ok_or(Error::InvalidShape { op: "r1_penalty", msg: "rank-0 input".into() })?;
    let total = sum_all(tape, &logits)?;
    let grad = tape.grad(total, &[x])?[0];
    check_finite(tape, &grad, "R1 input gradient")?;
    let sq = tape.mul(&grad, &grad)?;
    let s = sum_all(tape, &sq)?;
    tape.scale(&s, 1.0 / b as f64)
}

/// Gradient penalty on real data: mean over the batch of `‖∇_x D(x)‖²₂`.
pub fn r1_penalty<D>(tape: &mut Tape, x_real: Var, d: D) -> Result<Var>
where
    D: FnOnce(&mut Tape, &Var) -> Result<Var>,
{
    let logits = d(tape, &x_real)?;
    r1_from_logits(tape, logits, x_real)
}

/// Terms of the discriminator objective, all recorded on the tape.
#[derive(Debug, Clone, Copy)]
pub struct DiscriminatorLoss {
    pub total: Var,
    pub adversarial: Var,
    pub r1: Var,
}

/// `−E[log σ(D(x_real))] − E[log(1 − σ(D(x_fake)))] + γ·E‖∇D(x_real)‖²`.
///
/// `x_real` must be a differentiable tape value (see [`Tape::input`]).
pub fn loss_discriminator<D>(tape: &mut Tape, d: D, x_real: Var, x_fake: Var, gamma: f64) -> Result<DiscriminatorLoss>
where
    D: Fn(&mut Tape, &Var) -> Result<Var>,
{
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(Error::Config(format!("R1 weight must be finite and non-negative, got {gamma}")));
    }
    let rs = tape.get(x_real)?.shape().to_vec();
    let fs = tape.get(x_fake)?.shape().to_vec();
    if rs != fs {
        return Err(Error::ShapeMismatch { op: "loss_discriminator", lhs: rs, rhs: fs });
    }
    let real_logits = d(tape, &x_real)?;
    let fake_logits = d(tape, &x_fake)?;
    let adversarial = adversarial_loss_d(tape, &real_logits, &fake_logits)?;
    let r1 = r1_from_logits(tape, real_logits, x_real)?;
    let weighted = tape.scale(&r1, gamma)?;
    let total = tape.add(&adversarial, &weighted)?;
    check_finite(tape, &total, "discriminator loss")?;
    Ok(DiscriminatorLoss { total, adversarial, r1 })
}

/// Weights of the auxiliary terms in [`loss_vqhit`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VqHitWeights {
    pub perceptual: f64,
    pub adversarial: f64,
}

impl Default for VqHitWeights {
    fn default() -> Self {
        Self { perceptual: 5e-5, adversarial: 0.1 }
    }
}

#[derive(Debug, Clone)]
pub struct VqHitLoss<V> {
    pub total: V,
    pub reconstruction: V,
    pub perceptual: V,
    pub adversarial: V,
}

/// Per-sample squared L2 distance, averaged over the leading batch axis.
fn batch_mean_sq_dist<G: Ops>(g: &mut G, a: &G::Value, b: &G::Value) -> Result<G::Value> {
    let n = g.shape(a)?.first().copied().unwrap_or(1);
    let diff = g.sub(a, b)?;
    let sq = g.mul(&diff, &diff)?;
    let s = sum_all(g, &sq)?;
    g.scale(&s, 1.0 / n as f64)
}

/// Decoder objective `‖x − x̂‖² + λ1·‖F(x) − F(x̂)‖² − λ2·E[log σ(D(x̂))]`
/// with squared norms taken per sample and averaged over the batch.
pub fn loss_vqhit<G, D, F>(
    g: &mut G,
    x: &G::Value,
    x_hat: &G::Value,
    mut disc: D,
    mut features: F,
    weights: VqHitWeights,
) -> Result<VqHitLoss<G::Value>>
where
    G: Ops,
    D: FnMut(&mut G, &G::Value) -> Result<G::Value>,
    F: FnMut(&mut G, &G::Value) -> Result<G::Value>,
{
    let (xs, hs) = (g.shape(x)?, g.shape(x_hat)?);
    if xs != hs || xs.is_empty() {
        return Err(Error::ShapeMismatch { op: "loss_vqhit", lhs: xs, rhs: hs });
    }
    let reconstruction = batch_mean_sq_dist(g, x, x_hat)?;
    let fx = features(g, x)?;
    let fh = features(g, x_hat)?;
    let perceptual = batch_mean_sq_dist(g, &fx, &fh)?;
    let logits = disc(g, x_hat)?;
    let adversarial = loss_generator(g, &logits)?;
    let p = g.scale(&perceptual, weights.perceptual)?;
    let a = g.scale(&adversarial, weights.adversarial)?;
    let total = g.add(&reconstruction, &p)?;
    let total = g.add(&total, &a)?;
    check_finite(g, &total, "VQ-HiT loss")?;
    Ok(VqHitLoss { total, reconstruction, perceptual, adversarial })
}
