//! The staged generator: latent projections, per-stage cross-attention,
//! blocked self-attention or MLP bodies, and RGB accumulation.

mod config;
mod params;

pub use config::{
    preset, reference_param_millions, toy, toy_training, CrossAttnSpec, GeneratorConfig, MlpSpec, SelfAttnSpec,
    StageKind, StageSpec, Tail, BASE_RESOLUTION, PRESET_EMBED_DIM, PRESET_NAMES,
};
pub use params::{
    init_tensors, layout, param_count, stage_param_counts, AttentionBlockParams, GeneratorParams, GeneratorState, Init,
    LinearParams, ParamSpec, StageNormState, StageParams, POSITION_STD,
};

use rand::Rng;

use crate::attention::{
    attention_block, axial_attention, blocked_attention, cross_attention_mqa, full_attention, mlp_block, BlockNorm,
};
use crate::blocking::{block, nearest_upsample, pixel_shuffle, unblock};
use crate::error::{Error, Result};
use crate::numerics::functional::linear;
use crate::numerics::{Eager, NormMode, Ops, Tensor};

fn apply_linear<G: Ops>(g: &mut G, x: &G::Value, p: &LinearParams<G::Value>) -> Result<G::Value> {
    linear(g, x, &p.weight, Some(&p.bias))
}

/// Features entering the RGB projection of each high-res stage, in stage order.
pub type RgbFeatures<V> = Vec<V>;

/// Runs the generator on `z: [b, latent_dim]` and returns `[b, H, W, 3]`.
pub fn forward<G: Ops>(
    g: &mut G,
    config: &GeneratorConfig,
    params: &GeneratorParams<G::Value>,
    state: &mut GeneratorState,
    z: &G::Value,
    mode: NormMode,
) -> Result<G::Value> {
    forward_with_features(g, config, params, state, z, mode).map(|(image, _)| image)
}

/// [`forward`], also returning the inputs of every RGB projection.
pub fn forward_with_features<G: Ops>(
    g: &mut G,
    config: &GeneratorConfig,
    params: &GeneratorParams<G::Value>,
    state: &mut GeneratorState,
    z: &G::Value,
    mode: NormMode,
) -> Result<(G::Value, RgbFeatures<G::Value>)> {
    let zs = g.shape(z)?;
    if zs.len() != 2 || zs[1] != config.latent_dim {
        return Err(Error::ShapeMismatch { op: "generator latent", lhs: zs, rhs: vec![0, config.latent_dim] });
    }
    if params.stages.len() != config.stages.len() || state.stages.len() != config.stages.len() {
        return Err(Error::Config(format!(
            "{} stages configured, parameters cover {}, state covers {}",
            config.stages.len(),
            params.stages.len(),
            state.stages.len()
        )));
    }
    let b = zs[0];
    let side = BASE_RESOLUTION;
    let x = apply_linear(g, z, &params.feature_proj)?;
    let mut x = g.reshape(&x, &[b, side, side, config.initial_dim()])?;
    let embed = apply_linear(g, z, &params.embed_proj)?;
    let embed = g.reshape(&embed, &[b, side * side, config.embed_dim])?;
    let kind = config.norm;

    let mut features = Vec::new();
    let mut image: Option<G::Value> = None;
    for (i, ((spec, sp), st)) in config.stages.iter().zip(&params.stages).zip(&mut state.stages).enumerate() {
        let r = spec.resolution;
        let d = spec.dim();
        let pos = g.expand(&sp.position, 0, b)?;
        x = g.add(&x, &pos)?;

        let tokens = g.reshape(&x, &[b, r * r, d])?;
        let tokens = attention_block(
            g,
            &tokens,
            |g, q| cross_attention_mqa(g, q, &embed, &params.embed_position, &sp.cross.weights),
            &sp.cross.block,
            BlockNorm { kind, mode, states: &mut st.cross },
        )?;
        x = g.reshape(&tokens, &[b, r, r, d])?;

        if let Some(a) = spec.self_attn {
            x = match a.mode.kernel(0) {
                Some(_) if a.mode.uses_blocking() => {
                    let blocked = block(g, &x, a.block)?;
                    let mut data = blocked.data.clone();
                    for (j, (layer, norms)) in sp.attention.iter().zip(&mut st.attention).enumerate() {
                        let kernel = a.mode.kernel(j).expect("blocking modes have kernels");
                        data = attention_block(
                            g,
                            &data,
                            |g, h| blocked_attention(g, h, h, &layer.weights, kernel),
                            &layer.block,
                            BlockNorm { kind, mode, states: norms },
                        )?;
                    }
                    unblock(g, &blocked.with_data(data))?
                }
                Some(_) => {
                    for (layer, norms) in sp.attention.iter().zip(&mut st.attention) {
                        x = attention_block(
                            g,
                            &x,
                            |g, h| axial_attention(g, h, &layer.weights),
                            &layer.block,
                            BlockNorm { kind, mode, states: norms },
                        )?;
                    }
                    x
                }
                None => {
                    let mut seq = g.reshape(&x, &[b, r * r, d])?;
                    for (layer, norms) in sp.attention.iter().zip(&mut st.attention) {
                        seq = attention_block(
                            g,
                            &seq,
                            |g, h| full_attention(g, h, &layer.weights),
                            &layer.block,
                            BlockNorm { kind, mode, states: norms },
                        )?;
                    }
                    g.reshape(&seq, &[b, r, r, d])?
                }
            };
        }
        for (layer, norm) in sp.mlp.iter().zip(&mut st.mlp) {
            x = mlp_block(g, &x, layer, kind, mode, norm)?;
        }
        if !g.value(&x)?.all_finite() {
            return Err(Error::NonFinite(format!("stage {} activations", i + 1)));
        }

        if let Some(rgb) = &sp.rgb {
            features.push(x.clone());
            let colors = apply_linear(g, &x, rgb)?;
            image = Some(match image {
                None => colors,
                Some(prev) => {
                    let up = nearest_upsample(g, &prev)?;
                    g.add(&up, &colors)?
                }
            });
        }
        if let Some(tail) = &sp.tail {
            let shuffled = pixel_shuffle(g, &x)?;
            x = apply_linear(g, &shuffled, tail)?;
        }
    }
    let image = image.ok_or_else(|| Error::Config("no high-res stage emits an image".into()))?;
    Ok((image, features))
}

/// Recomputes the image from frozen RGB inputs: upsample-and-add over the
/// projections of each high-res stage.
pub fn accumulate_rgb<G: Ops>(
    g: &mut G,
    features: &[G::Value],
    projections: &[&LinearParams<G::Value>],
) -> Result<G::Value> {
    if features.is_empty() || features.len() != projections.len() {
        return Err(Error::Config(format!(
            "{} feature maps for {} RGB projections",
            features.len(),
            projections.len()
        )));
    }
    let mut image: Option<G::Value> = None;
    for (x, p) in features.iter().zip(projections) {
        let colors = apply_linear(g, x, p)?;
        image = Some(match image {
            None => colors,
            Some(prev) => {
                let up = nearest_upsample(g, &prev)?;
                g.add(&up, &colors)?
            }
        });
    }
    Ok(image.expect("non-empty"))
}

/// Flat parameter storage with its layout.
#[derive(Debug, Clone)]
pub struct ParamStore {
    pub specs: Vec<ParamSpec>,
    pub tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Index of the tensor called `name`.
    pub fn find(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }
}

/// A built generator: configuration, parameters and normalization state.
#[derive(Debug, Clone)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub index: GeneratorParams<usize>,
    pub store: ParamStore,
    pub state: GeneratorState,
}

/// Allocates and initializes every parameter of `config` from `seed`.
pub fn build_generator(config: &GeneratorConfig, seed: u64) -> Result<Generator> {
    config.validate()?;
    let (index, specs) = layout(config);
    let tensors = init_tensors(&specs, seed);
    Ok(Generator {
        config: config.clone(),
        index,
        store: ParamStore { specs, tensors },
        state: GeneratorState::new(config),
    })
}

/// `[batch, latent_dim]` standard-normal latent codes.
pub fn sample_latent<R: Rng + ?Sized>(config: &GeneratorConfig, batch: usize, rng: &mut R) -> Tensor {
    Tensor::randn(&[batch, config.latent_dim], rng)
}

/// `(1 − t)·a + t·b` elementwise.
pub fn lerp(a: &Tensor, b: &Tensor, t: f64) -> Result<Tensor> {
    a.zip_with(b, "lerp", |x, y| (1.0 - t) * x + t * y)
}

impl Generator {
    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// Parameters as values of backend `g`, built with `leaf`.
    pub fn params_with<V: Clone>(&self, leaf: impl FnMut(&Tensor) -> V) -> GeneratorParams<V> {
        let values: Vec<V> = self.store.tensors.iter().map(leaf).collect();
        self.index.map(|&i| values[i].clone())
    }

    /// Images for `z: [b, latent_dim]` with normalization in eval mode.
    pub fn generate(&self, z: &Tensor) -> Result<Tensor> {
        let params = self.params_with(Tensor::clone);
        let mut state = self.state.clone();
        forward(&mut Eager::new(), &self.config, &params, &mut state, z, NormMode::Eval)
    }

    /// [`Generator::generate`] at single precision.
    pub fn generate_f32(&self, z: &Tensor) -> Result<Tensor<f32>> {
        let params = self.params_with(|t| t.cast::<f32>());
        let mut state = self.state.clone();
        forward(&mut Eager::<f32>::new(), &self.config, &params, &mut state, &z.cast(), NormMode::Eval)
    }

    /// Images along the segment from `z_a` to `z_b` at `t = i/(steps−1)`.
    pub fn interpolate(&self, z_a: &Tensor, z_b: &Tensor, steps: usize) -> Result<Vec<Tensor>> {
        if steps < 2 {
            return Err(Error::Config(format!("interpolation needs at least 2 steps, got {steps}")));
        }
        (0..steps)
            .map(|i| {
                let t = i as f64 / (steps - 1) as f64;
                self.generate(&lerp(z_a, z_b, t)?)
            })
            .collect()
    }
}
