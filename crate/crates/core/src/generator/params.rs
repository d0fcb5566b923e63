use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::config::{GeneratorConfig, StageKind, Tail, BASE_RESOLUTION};
use crate::attention::{AttentionWeights, BlockParams, MlpBlockParams};
use crate::error::Result;
use crate::numerics::{MlpParams, NormParams, NormState, Tensor};

/// Standard deviation of positional embeddings at initialization.
pub const POSITION_STD: f64 = 0.02;

/// How a parameter tensor is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Truncated normal at ±2σ with `σ = 1/√fan_in`.
    Weight {
        fan_in: usize,
    },
    /// Truncated normal with `σ = 0.02`.
    Position,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams<V> {
    /// `[d_in, d_out]`
    pub weight: V,
    pub bias: V,
}

impl<V> LinearParams<V> {
    pub fn map<U>(&self, mut f: impl FnMut(&V) -> U) -> LinearParams<U> {
        LinearParams { weight: f(&self.weight), bias: f(&self.bias) }
    }
}

/// Attention projections plus the residual block around them.
#[derive(Debug, Clone)]
pub struct AttentionBlockParams<V> {
    pub weights: AttentionWeights<V>,
    pub block: BlockParams<V>,
}

impl<V> AttentionBlockParams<V> {
    pub fn map<U>(&self, mut f: impl FnMut(&V) -> U) -> AttentionBlockParams<U> {
        AttentionBlockParams { weights: self.weights.map(&mut f), block: self.block.map(&mut f) }
    }
}

#[derive(Debug, Clone)]
pub struct StageParams<V> {
    /// `[r, r, d]`
    pub position: V,
    pub cross: AttentionBlockParams<V>,
    pub attention: Vec<AttentionBlockParams<V>>,
    pub mlp: Vec<MlpBlockParams<V>>,
    pub rgb: Option<LinearParams<V>>,
    /// Linear map applied after the pixel shuffle.
    pub tail: Option<LinearParams<V>>,
}

impl<V> StageParams<V> {
    pub fn map<U>(&self, mut f: impl FnMut(&V) -> U) -> StageParams<U> {
        StageParams {
            position: f(&self.position),
            cross: self.cross.map(&mut f),
            attention: self.attention.iter().map(|a| a.map(&mut f)).collect(),
            mlp: self.mlp.iter().map(|m| m.map(&mut f)).collect(),
            rgb: self.rgb.as_ref().map(|l| l.map(&mut f)),
            tail: self.tail.as_ref().map(|l| l.map(&mut f)),
        }
    }
}

/// Every parameter of a generator, generic over the storage of one tensor.
#[derive(Debug, Clone)]
pub struct GeneratorParams<V> {
    /// Latent code to the initial `8×8×C0` feature map.
    pub feature_proj: LinearParams<V>,
    /// Latent code to the `8×8×C_Z` embedding.
    pub embed_proj: LinearParams<V>,
    /// `[64, C_Z]`
    pub embed_position: V,
    pub stages: Vec<StageParams<V>>,
}

impl<V> GeneratorParams<V> {
    pub fn map<U>(&self, mut f: impl FnMut(&V) -> U) -> GeneratorParams<U> {
        GeneratorParams {
            feature_proj: self.feature_proj.map(&mut f),
            embed_proj: self.embed_proj.map(&mut f),
            embed_position: f(&self.embed_position),
            stages: self.stages.iter().map(|s| s.map(&mut f)).collect(),
        }
    }

    pub fn for_each(&self, mut f: impl FnMut(&V)) {
        self.map(|v| f(v));
    }
}

struct Builder<'a> {
    specs: &'a mut Vec<ParamSpec>,
}

impl Builder<'_> {
    fn push(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        self.specs.push(ParamSpec { name, shape: shape.to_vec(), init });
        self.specs.len() - 1
    }

    fn weight(&mut self, name: String, shape: &[usize], fan_in: usize) -> usize {
        self.push(name, shape, Init::Weight { fan_in })
    }

    fn linear(&mut self, prefix: &str, d_in: usize, d_out: usize) -> LinearParams<usize> {
        LinearParams {
            weight: self.weight(format!("{prefix}.weight"), &[d_in, d_out], d_in),
            bias: self.push(format!("{prefix}.bias"), &[d_out], Init::Zeros),
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> NormParams<usize> {
        NormParams {
            scale: self.push(format!("{prefix}.scale"), &[d], Init::Ones),
            shift: self.push(format!("{prefix}.shift"), &[d], Init::Zeros),
        }
    }

    fn mlp_block(&mut self, prefix: &str, d: usize, hidden: usize) -> MlpBlockParams<usize> {
        let norm = self.norm(&format!("{prefix}.norm"), d);
        let fc1 = self.linear(&format!("{prefix}.fc1"), d, hidden);
        let fc2 = self.linear(&format!("{prefix}.fc2"), hidden, d);
        MlpBlockParams { norm, mlp: MlpParams { w1: fc1.weight, b1: fc1.bias, w2: fc2.weight, b2: fc2.bias } }
    }

    fn attention(
        &mut self,
        prefix: &str,
        d: usize,
        heads: usize,
        kv_dim: usize,
        hidden: Option<usize>,
    ) -> AttentionBlockParams<usize> {
        let k = d / heads;
        let weights = AttentionWeights {
            query: self.weight(format!("{prefix}.query"), &[heads, d, k], d),
            key: self.weight(format!("{prefix}.key"), &[kv_dim, k], kv_dim),
            value: self.weight(format!("{prefix}.value"), &[kv_dim, k], kv_dim),
            output: self.weight(format!("{prefix}.output"), &[heads, d, k], heads * k),
        };
        let norm = self.norm(&format!("{prefix}.norm"), d);
        let mlp = hidden.map(|h| self.mlp_block(&format!("{prefix}.mlp"), d, h));
        AttentionBlockParams { weights, block: BlockParams { norm, mlp } }
    }
}

/// Lays out every parameter of `config` in a fixed order. The returned
/// structure holds indices into the spec list.
pub fn layout(config: &GeneratorConfig) -> (GeneratorParams<usize>, Vec<ParamSpec>) {
    let mut specs = Vec::new();
    let mut b = Builder { specs: &mut specs };
    let tokens = BASE_RESOLUTION * BASE_RESOLUTION;
    let c0 = config.initial_dim();
    let cz = config.embed_dim;
    let feature_proj = b.linear("feature_proj", config.latent_dim, tokens * c0);
    let embed_proj = b.linear("embed_proj", config.latent_dim, tokens * cz);
    let embed_position = b.push("embed_position".into(), &[tokens, cz], Init::Position);
    let mut stages = Vec::with_capacity(config.stages.len());
    for (i, s) in config.stages.iter().enumerate() {
        let p = format!("stage{}", i + 1);
        let d = s.dim();
        let r = s.resolution;
        let hidden = d * config.mlp_ratio;
        let position = b.push(format!("{p}.position"), &[r, r, d], Init::Position);
        let cross_hidden = config.cross_attn_mlp.then_some(hidden);
        let cross = b.attention(&format!("{p}.cross"), d, s.cross_attn.heads, cz, cross_hidden);
        let attention = match s.self_attn {
            Some(a) => (0..a.repeats)
                .map(|j| b.attention(&format!("{p}.attention{}", j + 1), d, a.heads, d, Some(hidden)))
                .collect(),
            None => Vec::new(),
        };
        let mlp = match s.mlp {
            Some(m) => (0..m.repeats).map(|j| b.mlp_block(&format!("{p}.mlp{}", j + 1), d, hidden)).collect(),
            None => Vec::new(),
        };
        let rgb = (s.kind == StageKind::HighRes).then(|| b.linear(&format!("{p}.rgb"), d, 3));
        let tail = match s.tail {
            Tail::PixelShuffle { out_dim } => Some(b.linear(&format!("{p}.tail"), d / 4, out_dim)),
            Tail::Rgb => None,
        };
        stages.push(StageParams { position, cross, attention, mlp, rgb, tail });
    }
    let index = GeneratorParams { feature_proj, embed_proj, embed_position, stages };
    (index, specs)
}

/// Exact number of scalars allocated by [`build_params`].
pub fn param_count(config: &GeneratorConfig) -> Result<usize> {
    config.validate()?;
    Ok(layout(config).1.iter().map(ParamSpec::numel).sum())
}

/// Parameter counts of the shared latent path followed by each stage.
pub fn stage_param_counts(config: &GeneratorConfig) -> Result<(usize, Vec<usize>)> {
    config.validate()?;
    let mut shared = 0;
    let mut stages = vec![0; config.stages.len()];
    for spec in layout(config).1 {
        let stage = spec
            .name
            .strip_prefix("stage")
            .and_then(|rest| rest.split('.').next())
            .and_then(|n| n.parse::<usize>().ok());
        match stage {
            Some(n) => stages[n - 1] += spec.numel(),
            None => shared += spec.numel(),
        }
    }
    Ok((shared, stages))
}

fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    loop {
        let v: f64 = rng.sample(StandardNormal);
        if v.abs() <= 2.0 {
            return v * std;
        }
    }
}

/// Draws a tensor per spec from a ChaCha8 stream seeded with `seed`.
pub fn init_tensors(specs: &[ParamSpec], seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    specs
        .iter()
        .map(|spec| match spec.init {
            Init::Weight { fan_in } => {
                let std = 1.0 / (fan_in as f64).sqrt();
                Tensor::from_fn(&spec.shape, |_| truncated_normal(&mut rng, std))
            }
            Init::Position => Tensor::from_fn(&spec.shape, |_| truncated_normal(&mut rng, POSITION_STD)),
            Init::Zeros => Tensor::zeros(&spec.shape),
            Init::Ones => Tensor::ones(&spec.shape),
        })
        .collect()
}

/// Running statistics for every normalization layer of one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageNormState {
    pub cross: [NormState; 2],
    pub attention: Vec<[NormState; 2]>,
    pub mlp: Vec<NormState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorState {
    pub stages: Vec<StageNormState>,
}

impl GeneratorState {
    /// Statistics initialized to zero mean and unit variance.
    pub fn new(config: &GeneratorConfig) -> Self {
        let stages = config
            .stages
            .iter()
            .map(|s| {
                let d = s.dim();
                let pair = || [NormState::identity(d), NormState::identity(d)];
                StageNormState {
                    cross: pair(),
                    attention: (0..s.self_attn.map_or(0, |a| a.repeats)).map(|_| pair()).collect(),
                    mlp: (0..s.mlp.map_or(0, |m| m.repeats)).map(|_| NormState::identity(d)).collect(),
                }
            })
            .collect();
        Self { stages }
    }
}
