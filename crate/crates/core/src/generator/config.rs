use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::attention::{balance_patch_size, AttentionMode};
use crate::error::{Error, Result};
use crate::numerics::NormKind;

/// Spatial side of the initial feature map and the latent embedding.
pub const BASE_RESOLUTION: usize = 8;

/// Channel dimension of the latent embedding used by every preset.
pub const PRESET_EMBED_DIM: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    LowRes,
    HighRes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrossAttnSpec {
    pub dim: usize,
    pub heads: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelfAttnSpec {
    /// Side length of a square patch.
    pub block: usize,
    pub dim: usize,
    pub heads: usize,
    pub repeats: usize,
    #[serde(default = "default_mode")]
    pub mode: AttentionMode,
}

fn default_mode() -> AttentionMode {
    AttentionMode::MultiAxis
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub dim: usize,
    pub repeats: usize,
}

/// How a stage hands its features on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Tail {
    /// Pixel shuffle followed by a linear map to `out_dim` channels.
    PixelShuffle { out_dim: usize },
    /// Linear map to RGB; only valid on the final stage.
    Rgb,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub resolution: usize,
    pub kind: StageKind,
    pub cross_attn: CrossAttnSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub self_attn: Option<SelfAttnSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mlp: Option<MlpSpec>,
    pub tail: Tail,
}

impl StageSpec {
    pub fn dim(&self) -> usize {
        self.cross_attn.dim
    }

    fn low(resolution: usize, cross: (usize, usize), attn: (usize, usize, usize, usize), out_dim: usize) -> Self {
        Self {
            resolution,
            kind: StageKind::LowRes,
            cross_attn: CrossAttnSpec { dim: cross.0, heads: cross.1 },
            self_attn: Some(SelfAttnSpec {
                block: attn.0,
                dim: attn.1,
                heads: attn.2,
                repeats: attn.3,
                mode: AttentionMode::MultiAxis,
            }),
            mlp: None,
            tail: Tail::PixelShuffle { out_dim },
        }
    }

    fn high(resolution: usize, cross: (usize, usize), mlp: (usize, usize), tail: Tail) -> Self {
        Self {
            resolution,
            kind: StageKind::HighRes,
            cross_attn: CrossAttnSpec { dim: cross.0, heads: cross.1 },
            self_attn: None,
            mlp: Some(MlpSpec { dim: mlp.0, repeats: mlp.1 }),
            tail,
        }
    }
}

/// A complete generator variant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub name: String,
    pub latent_dim: usize,
    /// Channels of the 8×8 latent embedding used as cross-attention keys and values.
    pub embed_dim: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default = "default_norm")]
    pub norm: NormKind,
    /// Whether the cross-attention block carries its own MLP sub-block.
    #[serde(default = "default_true")]
    pub cross_attn_mlp: bool,
    #[serde(default)]
    pub seed: u64,
    pub stages: Vec<StageSpec>,
}

fn default_mlp_ratio() -> usize {
    4
}

fn default_norm() -> NormKind {
    NormKind::Batch
}

fn default_true() -> bool {
    true
}

pub const PRESET_NAMES: [&str; 5] = ["hit_s_256", "hit_b_256", "hit_l_256", "hit_b_1024", "hit_imagenet_128"];

/// Reported parameter counts in millions, where one exists.
pub fn reference_param_millions(name: &str) -> Option<f64> {
    match name {
        "hit_s_256" => Some(38.01),
        "hit_b_256" => Some(46.22),
        "hit_l_256" => Some(97.46),
        _ => None,
    }
}

fn low_res_b() -> Vec<StageSpec> {
    vec![
        StageSpec::low(8, (512, 16), (4, 512, 16, 2), 512),
        StageSpec::low(16, (512, 8), (4, 512, 8, 2), 256),
        StageSpec::low(32, (256, 4), (8, 256, 4, 2), 128),
        StageSpec::low(64, (128, 4), (8, 128, 4, 2), 64),
    ]
}

fn low_res_l() -> Vec<StageSpec> {
    vec![
        StageSpec::low(8, (1024, 16), (4, 1024, 16, 2), 512),
        StageSpec::low(16, (512, 8), (4, 512, 8, 2), 256),
        StageSpec::low(32, (256, 4), (8, 256, 4, 2), 128),
        StageSpec::low(64, (128, 4), (8, 128, 4, 2), 128),
    ]
}

fn config(name: &str, latent_dim: usize, stages: Vec<StageSpec>) -> GeneratorConfig {
    GeneratorConfig {
        name: name.to_string(),
        latent_dim,
        embed_dim: PRESET_EMBED_DIM,
        mlp_ratio: default_mlp_ratio(),
        norm: default_norm(),
        cross_attn_mlp: true,
        seed: 0,
        stages,
    }
}

/// Named variant from the published architecture table.
pub fn preset(name: &str) -> Result<GeneratorConfig> {
    let ps = |d| Tail::PixelShuffle { out_dim: d };
    let cfg = match name {
        "hit_s_256" => config(
            name,
            512,
            vec![
                StageSpec::low(8, (512, 16), (4, 512, 16, 2), 256),
                StageSpec::low(16, (256, 8), (4, 256, 8, 2), 128),
                StageSpec::low(32, (128, 4), (8, 128, 4, 1), 64),
                StageSpec::low(64, (64, 4), (8, 64, 4, 1), 32),
                StageSpec::high(128, (32, 4), (32, 1), ps(32)),
                StageSpec::high(256, (32, 4), (32, 1), Tail::Rgb),
            ],
        ),
        "hit_b_256" => {
            let mut stages = low_res_b();
            stages.push(StageSpec::high(128, (64, 4), (64, 1), ps(64)));
            stages.push(StageSpec::high(256, (64, 4), (64, 1), Tail::Rgb));
            config(name, 512, stages)
        }
        "hit_l_256" => {
            let mut stages = low_res_l();
            stages.push(StageSpec::high(128, (128, 4), (128, 2), ps(128)));
            stages.push(StageSpec::high(256, (128, 4), (128, 2), Tail::Rgb));
            config(name, 512, stages)
        }
        "hit_b_1024" => {
            let mut stages = low_res_b();
            stages.push(StageSpec::high(128, (64, 4), (64, 1), ps(64)));
            stages.push(StageSpec::high(256, (64, 4), (64, 1), ps(32)));
            stages.push(StageSpec::high(512, (32, 4), (32, 1), ps(32)));
            stages.push(StageSpec::high(1024, (32, 4), (32, 1), Tail::Rgb));
            config(name, 512, stages)
        }
        "hit_imagenet_128" => {
            let mut stages = low_res_l();
            stages.push(StageSpec::high(128, (128, 4), (128, 2), Tail::Rgb));
            config(name, 256, stages)
        }
        _ => return Err(Error::UnknownPreset(name.to_string())),
    };
    Ok(cfg)
}

/// Small three-stage variant: 8 → 16 → 32 at 16 channels.
pub fn toy() -> GeneratorConfig {
    GeneratorConfig {
        name: "toy".into(),
        latent_dim: 16,
        embed_dim: 8,
        mlp_ratio: 2,
        norm: NormKind::Batch,
        cross_attn_mlp: true,
        seed: 0,
        stages: vec![
            StageSpec::low(8, (16, 2), (4, 16, 2, 1), 16),
            StageSpec::low(16, (16, 2), (4, 16, 2, 1), 16),
            StageSpec::high(32, (16, 2), (16, 1), Tail::Rgb),
        ],
    }
}

/// Single high-resolution stage emitting 8×8 images, sized for toy adversarial training.
pub fn toy_training() -> GeneratorConfig {
    GeneratorConfig {
        name: "toy_training".into(),
        latent_dim: 8,
        embed_dim: 8,
        mlp_ratio: 2,
        norm: NormKind::Layer,
        cross_attn_mlp: true,
        seed: 0,
        stages: vec![StageSpec::high(8, (8, 2), (8, 1), Tail::Rgb)],
    }
}

fn invalid(msg: String) -> Error {
    Error::Config(msg)
}

impl GeneratorConfig {
    /// Channels of the initial 8×8 feature map.
    pub fn initial_dim(&self) -> usize {
        self.stages.first().map_or(0, StageSpec::dim)
    }

    /// Side length of the emitted image.
    pub fn output_resolution(&self) -> usize {
        self.stages.last().map_or(0, |s| s.resolution)
    }

    pub fn low_res_stages(&self) -> usize {
        self.stages.iter().filter(|s| s.kind == StageKind::LowRes).count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.embed_dim == 0 || self.mlp_ratio == 0 {
            return Err(invalid("latent_dim, embed_dim and mlp_ratio must be positive".into()));
        }
        if self.stages.is_empty() {
            return Err(invalid("at least one stage is required".into()));
        }
        let last = self.stages.len() - 1;
        let mut seen_high = false;
        for (i, s) in self.stages.iter().enumerate() {
            let n = i + 1;
            let want = BASE_RESOLUTION << i;
            if s.resolution != want {
                return Err(invalid(format!("stage {n}: resolution {} (expected {want})", s.resolution)));
            }
            let d = s.dim();
            check_heads(n, "cross_attn", d, s.cross_attn.heads)?;
            match (s.self_attn, s.mlp) {
                (Some(a), None) => {
                    if a.dim != d {
                        return Err(invalid(format!("stage {n}: self_attn dim {} differs from stage dim {d}", a.dim)));
                    }
                    check_heads(n, "self_attn", d, a.heads)?;
                    if a.repeats == 0 {
                        return Err(invalid(format!("stage {n}: self_attn repeats must be positive")));
                    }
                    if matches!(a.mode, AttentionMode::MultiAxis | AttentionMode::Axial) && a.heads % 2 != 0 {
                        return Err(Error::OddHeads(a.heads));
                    }
                    if a.mode.uses_blocking() && (a.block == 0 || s.resolution % a.block != 0) {
                        return Err(Error::NotDivisible {
                            op: "stage block size",
                            extent: s.resolution,
                            divisor: a.block,
                        });
                    }
                }
                (None, Some(m)) => {
                    if m.dim != d {
                        return Err(invalid(format!("stage {n}: mlp dim {} differs from stage dim {d}", m.dim)));
                    }
                    if m.repeats == 0 {
                        return Err(invalid(format!("stage {n}: mlp repeats must be positive")));
                    }
                }
                _ => return Err(invalid(format!("stage {n}: exactly one of self_attn and mlp must be set"))),
            }
            match s.kind {
                StageKind::HighRes => seen_high = true,
                StageKind::LowRes if seen_high => {
                    return Err(invalid(format!("stage {n}: low-res stage after a high-res stage")));
                }
                StageKind::LowRes => {}
            }
            match (s.tail, i == last) {
                (Tail::Rgb, true) => {
                    if s.kind != StageKind::HighRes {
                        return Err(invalid(format!("stage {n}: the final stage must be high-res")));
                    }
                }
                (Tail::PixelShuffle { out_dim }, false) => {
                    if d % 4 != 0 {
                        return Err(Error::NotDivisible { op: "pixel shuffle", extent: d, divisor: 4 });
                    }
                    let next = self.stages[i + 1].dim();
                    if out_dim != next {
                        return Err(invalid(format!(
                            "stage {n}: tail emits {out_dim} channels, next stage expects {next}"
                        )));
                    }
                }
                (Tail::Rgb, false) => {
                    return Err(invalid(format!("stage {n}: only the final stage may project to RGB")))
                }
                (Tail::PixelShuffle { .. }, true) => {
                    return Err(invalid(format!("stage {n}: the final stage must project to RGB")));
                }
            }
        }
        Ok(())
    }

    /// Stage-by-stage summary used for structural comparisons.
    pub fn structure(&self) -> String {
        let mut out = String::new();
        let norm = match self.norm {
            NormKind::Batch => "batch",
            NormKind::Layer => "layer",
        };
        let _ = writeln!(
            out,
            "{} latent {} embed {}x{}x{} mlp_ratio {} norm {} cross_attn_mlp {}",
            self.name,
            self.latent_dim,
            BASE_RESOLUTION,
            BASE_RESOLUTION,
            self.embed_dim,
            self.mlp_ratio,
            norm,
            self.cross_attn_mlp
        );
        for (i, s) in self.stages.iter().enumerate() {
            let kind = match s.kind {
                StageKind::LowRes => "low_res",
                StageKind::HighRes => "high_res",
            };
            let body = match (s.self_attn, s.mlp) {
                (Some(a), _) => {
                    format!("self block {b}x{b} dim {} heads {} x{} {}", a.dim, a.heads, a.repeats, a.mode, b = a.block)
                }
                (None, Some(m)) => format!("mlp dim {} x{}", m.dim, m.repeats),
                (None, None) => "empty".into(),
            };
            let tail = match s.tail {
                Tail::PixelShuffle { out_dim } => format!("pixel_shuffle {out_dim}"),
                Tail::Rgb => "linear 3".into(),
            };
            let _ = writeln!(
                out,
                "stage {} | {r}x{r} {kind} | cross dim {} heads {} | {body} | {tail}",
                i + 1,
                s.cross_attn.dim,
                s.cross_attn.heads,
                r = s.resolution
            );
        }
        out
    }

    /// Keeps self-attention in the first `low` low-res stages and adds it to the
    /// first `high` high-res stages; every other stage runs MLP blocks only.
    pub fn with_attention_stages(&self, low: usize, high: usize) -> Result<GeneratorConfig> {
        let lows = self.low_res_stages();
        let highs = self.stages.len() - lows;
        if low > lows || high > highs {
            return Err(invalid(format!(
                "attention in {low} low-res and {high} high-res stages, config has {lows} and {highs}"
            )));
        }
        let mut out = self.clone();
        let (mut li, mut hi) = (0, 0);
        for s in &mut out.stages {
            let attend = match s.kind {
                StageKind::LowRes => {
                    li += 1;
                    li <= low
                }
                StageKind::HighRes => {
                    hi += 1;
                    hi <= high
                }
            };
            let d = s.dim();
            let repeats = s.self_attn.map(|a| a.repeats).or(s.mlp.map(|m| m.repeats)).unwrap_or(1);
            if attend && s.self_attn.is_none() {
                s.self_attn = Some(SelfAttnSpec {
                    block: balance_patch_size(s.resolution, s.resolution)?,
                    dim: d,
                    heads: s.cross_attn.heads,
                    repeats,
                    mode: AttentionMode::MultiAxis,
                });
                s.mlp = None;
            } else if !attend && s.mlp.is_none() {
                s.mlp = Some(MlpSpec { dim: d, repeats });
                s.self_attn = None;
            }
        }
        out.name = format!("{}_attn_{low}_{high}", self.name);
        out.validate()?;
        Ok(out)
    }
}

fn check_heads(stage: usize, what: &str, dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(invalid(format!("stage {stage}: {what} dim {dim} is not divisible by {heads} heads")));
    }
    Ok(())
}
