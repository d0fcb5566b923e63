use std::fmt::Write as _;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{moment_distance, BlobDataset};
use super::discriminator::{discriminate, DiscriminatorConfig, DiscriminatorParams, ToyDiscriminator};
use super::losses::{loss_discriminator, loss_generator};
use crate::error::{Error, Result};
use crate::generator::{build_generator, forward, sample_latent, toy_training, Generator, GeneratorConfig};
use crate::numerics::{adam_step, AdamConfig, AdamState, Gradients, NormMode, Ops, Tape, Tensor, Var};

/// Optimization settings for adversarial training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanHyper {
    /// R1 weight.
    pub gamma: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch: usize,
    pub steps: usize,
}

impl Default for GanHyper {
    fn default() -> Self {
        Self { gamma: 10.0, lr: 1e-4, beta1: 0.0, beta2: 0.99, batch: 32, steps: 2000 }
    }
}

impl GanHyper {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, ..AdamConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::Config(format!("gamma must be finite and non-negative, got {}", self.gamma)));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config(format!(
                "invalid Adam settings lr {} beta1 {} beta2 {}",
                self.lr, self.beta1, self.beta2
            )));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Everything that determines a toy training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToySetup {
    pub generator: GeneratorConfig,
    #[serde(default)]
    pub discriminator: DiscriminatorConfig,
    #[serde(default)]
    pub hyper: GanHyper,
    #[serde(default)]
    pub data: BlobDataset,
    #[serde(default)]
    pub seed: u64,
    /// Size of the fixed real and generated sets compared by the moment
    /// distance.
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

fn default_eval_samples() -> usize {
    256
}

fn default_log_every() -> usize {
    100
}

impl Default for ToySetup {
    fn default() -> Self {
        Self {
            generator: toy_training(),
            discriminator: DiscriminatorConfig::default(),
            hyper: GanHyper::default(),
            data: BlobDataset::default(),
            seed: 0,
            eval_samples: default_eval_samples(),
            log_every: default_log_every(),
        }
    }
}

impl ToySetup {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.hyper.validate()?;
        self.data.validate()?;
        let out = self.generator.output_resolution();
        if out != self.data.resolution || out != self.discriminator.resolution {
            return Err(Error::Config(format!(
                "generator emits {out}×{out}, data is {r}×{r}, discriminator expects {d}×{d}",
                r = self.data.resolution,
                d = self.discriminator.resolution
            )));
        }
        if self.eval_samples < 2 || self.log_every == 0 {
            return Err(Error::Config(format!(
                "need at least 2 evaluation samples and a positive log interval, got {} and {}",
                self.eval_samples, self.log_every
            )));
        }
        Ok(())
    }
}

/// One line of the metric trace. Step 0 carries only the initial moment
/// distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub loss_d: Option<f64>,
    pub loss_g: Option<f64>,
    pub r1: Option<f64>,
    pub moment_distance: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub rows: Vec<TraceRow>,
}

pub const TRACE_HEADER: &str = "step,loss_d,loss_g,r1,moment_distance";

fn field(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_field(s: &str) -> std::result::Result<Option<f64>, String> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|e| format!("{s:?}: {e}"))
}

impl Trace {
    /// `(step, distance)` at every logged step.
    pub fn moment_distances(&self) -> Vec<(usize, f64)> {
        self.rows.iter().filter_map(|r| r.moment_distance.map(|d| (r.step, d))).collect()
    }

    /// Comma-separated rows under [`TRACE_HEADER`]; missing values are empty.
    /// Floats use the shortest representation that round-trips.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRACE_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.step,
                field(r.loss_d),
                field(r.loss_g),
                field(r.r1),
                field(r.moment_distance)
            );
        }
        out
    }

    /// Parses [`Trace::to_csv`] output; leading `#` comment lines are skipped.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().skip_while(|l| l.starts_with('#'));
        if lines.next().map(str::trim) != Some(TRACE_HEADER) {
            return Err(Error::Config(format!("trace must start with {TRACE_HEADER:?}")));
        }
        let rows = lines
            .filter(|l| !l.trim().is_empty())
            .map(|line| {
                let cols: Vec<&str> = line.trim().split(',').collect();
                let bad = |msg: String| Error::Config(format!("trace row {line:?}: {msg}"));
                if cols.len() != 5 {
                    return Err(bad(format!("{} columns", cols.len())));
                }
                Ok(TraceRow {
                    step: cols[0].parse().map_err(|e| bad(format!("step: {e}")))?,
                    loss_d: parse_field(cols[1]).map_err(bad)?,
                    loss_g: parse_field(cols[2]).map_err(bad)?,
                    r1: parse_field(cols[3]).map_err(bad)?,
                    moment_distance: parse_field(cols[4]).map_err(bad)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { rows })
    }
}

/// Extra discriminator objective added to the loss at every D step, given
/// the parameters, the real batch and the fake batch on the tape.
pub type DiscriminatorAddend<'a> = dyn Fn(&mut Tape, &DiscriminatorParams<Var>, Var, Var) -> Result<Var> + 'a;

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub trace: Trace,
    pub generator: Generator,
    pub discriminator: ToyDiscriminator,
}

/// Independent RNG streams derived from the run seed.
const STREAM_GENERATOR_INIT: u64 = 1;
const STREAM_DISCRIMINATOR_INIT: u64 = 2;
const STREAM_BATCHES: u64 = 3;
const STREAM_EVAL: u64 = 4;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn init_seed(seed: u64, id: u64) -> u64 {
    rand::Rng::gen(&mut stream(seed, id))
}

fn collect_grads(grads: &Gradients, leaves: &[Var]) -> Result<Vec<Tensor>> {
    leaves.iter().map(|v| grads.get(*v).cloned().ok_or(Error::NotOnTape)).collect()
}

fn diverged(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(what) => Error::Diverged { step, reason: what },
        other => other,
    }
}

/// Alternating Adam updates of the toy discriminator (logistic loss plus R1,
/// trained through by double backward) and the generator (non-saturating
/// loss). Logs the losses of every step and the moment distance between a
/// fixed real set and generated images from fixed latents at step 0, every
/// `log_every` steps and the final step.
pub fn train_toy(setup: &ToySetup) -> Result<TrainOutcome> {
    train_toy_with(setup, None)
}

pub fn train_toy_with(setup: &ToySetup, addend: Option<&DiscriminatorAddend<'_>>) -> Result<TrainOutcome> {
    setup.validate()?;
    let hyper = setup.hyper;
    let adam = hyper.adam();
    let mut gen = build_generator(&setup.generator, init_seed(setup.seed, STREAM_GENERATOR_INIT))?;
    let mut disc = ToyDiscriminator::new(setup.discriminator, init_seed(setup.seed, STREAM_DISCRIMINATOR_INIT))?;
    let mut g_opt = AdamState::new(&gen.store.tensors);
    let mut d_opt = AdamState::new(&disc.tensors);

    let mut eval_rng = stream(setup.seed, STREAM_EVAL);
    let eval_real = setup.data.sample(setup.eval_samples, &mut eval_rng);
    let eval_z = sample_latent(&gen.config, setup.eval_samples, &mut eval_rng);
    let measure = |gen: &Generator| -> Result<f64> { moment_distance(&gen.generate(&eval_z)?, &eval_real) };

    let mut rng = stream(setup.seed, STREAM_BATCHES);
    let mut rows = vec![TraceRow {
        step: 0,
        loss_d: None,
        loss_g: None,
        r1: None,
        moment_distance: Some(measure(&gen).map_err(diverged(0))?),
    }];

    for step in 1..=hyper.steps {
        let real = setup.data.sample(hyper.batch, &mut rng);
        let z = sample_latent(&gen.config, hyper.batch, &mut rng);
        let params = gen.params_with(Tensor::clone);
        let fake = forward(&mut crate::Eager::new(), &gen.config, &params, &mut gen.state, &z, NormMode::Train)
            .map_err(diverged(step))?;

        let (loss_d, r1) = {
            let mut t = Tape::new();
            let leaves: Vec<Var> = disc.tensors.iter().map(|p| t.param(p.clone())).collect();
            let dp = DiscriminatorParams::from_flat(&leaves)?;
            let xr = t.input(real);
            let xf = t.constant(fake);
            let loss = loss_discriminator(&mut t, |t, x| discriminate(t, &dp, x), xr, xf, hyper.gamma)
                .map_err(diverged(step))?;
            let total = match addend {
                Some(f) => {
                    let extra = f(&mut t, &dp, xr, xf)?;
                    t.add(&loss.total, &extra)?
                }
                None => loss.total,
            };
            let value = t.get(total)?.item();
            if !value.is_finite() {
                return Err(Error::Diverged { step, reason: format!("discriminator loss {value}") });
            }
            let r1 = t.get(loss.r1)?.item();
            let grads = t.backward(total)?;
            let grads = collect_grads(&grads, &leaves)?;
            adam_step(&mut disc.tensors, &grads, &mut d_opt, &adam).map_err(diverged(step))?;
            (value, r1)
        };

        let loss_g = {
            let z = sample_latent(&gen.config, hyper.batch, &mut rng);
            let mut t = Tape::new();
            let leaves: Vec<Var> = gen.store.tensors.iter().map(|p| t.param(p.clone())).collect();
            let gp = gen.index.map(|&i| leaves[i]);
            let zv = t.constant(z);
            let fake =
                forward(&mut t, &gen.config, &gp, &mut gen.state, &zv, NormMode::Train).map_err(diverged(step))?;
            let dp = disc.params_with(|p| t.constant(p.clone()));
            let logits = discriminate(&mut t, &dp, &fake)?;
            let loss = loss_generator(&mut t, &logits).map_err(diverged(step))?;
            let value = t.get(loss)?.item();
            let grads = t.backward(loss)?;
            let grads = collect_grads(&grads, &leaves)?;
            adam_step(&mut gen.store.tensors, &grads, &mut g_opt, &adam).map_err(diverged(step))?;
            value
        };

        let moment = if step % setup.log_every == 0 || step == hyper.steps {
            Some(measure(&gen).map_err(diverged(step))?)
        } else {
            None
        };
        rows.push(TraceRow { step, loss_d: Some(loss_d), loss_g: Some(loss_g), r1: Some(r1), moment_distance: moment });
    }
    Ok(TrainOutcome { trace: Trace { rows }, generator: gen, discriminator: disc })
}
