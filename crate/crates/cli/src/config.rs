//! TOML run configuration shared by every subcommand.
//!
//! ```toml
//! seed = 7
//! out = "runs/demo"
//! generator = "toy"            # preset name, or an inline table
//!
//! [bench]
//! sizes = [256, 1024, 4096]
//! modes = ["full", "multi_axis"]
//!
//! [train.hyper]
//! steps = 500
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hit_core::attention::AttentionMode;
use hit_core::generator::{preset, toy, toy_training, GeneratorConfig, PRESET_NAMES};
use hit_core::training::{BlobDataset, DiscriminatorConfig, GanHyper, ToySetup};
use serde::{Deserialize, Serialize};

/// A named preset or a complete inline generator description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GeneratorChoice {
    Preset(String),
    Custom(GeneratorConfig),
}

impl GeneratorChoice {
    pub fn resolve(&self) -> Result<GeneratorConfig> {
        let cfg = match self {
            GeneratorChoice::Preset(name) => resolve_preset(name)?,
            GeneratorChoice::Custom(cfg) => cfg.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Every name accepted by [`resolve_preset`].
pub fn preset_names() -> Vec<&'static str> {
    let mut names = vec!["toy", "toy_training"];
    names.extend(PRESET_NAMES);
    names
}

pub fn resolve_preset(name: &str) -> Result<GeneratorConfig> {
    Ok(match name {
        "toy" => toy(),
        "toy_training" => toy_training(),
        _ => preset(name).with_context(|| format!("known presets: {}", preset_names().join(", ")))?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    /// Token counts; each must be a perfect square.
    pub sizes: Vec<usize>,
    pub modes: Vec<AttentionMode>,
    pub repeats: usize,
    pub heads: usize,
    /// Channels per token.
    pub dim: usize,
    pub precision: Precision,
    /// Cells whose logit tensor would exceed this many bytes are skipped.
    pub max_logit_bytes: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sizes: vec![256, 1024, 4096],
            modes: vec![AttentionMode::Full, AttentionMode::MultiAxis],
            repeats: 3,
            heads: 2,
            dim: 16,
            precision: Precision::F32,
            max_logit_bytes: 1 << 30,
        }
    }
}

/// Toy adversarial training; the run seed drives every random stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub generator: GeneratorChoice,
    pub discriminator: DiscriminatorConfig,
    pub hyper: GanHyper,
    pub data: BlobDataset,
    pub eval_samples: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let setup = ToySetup::default();
        Self {
            generator: GeneratorChoice::Preset("toy_training".into()),
            discriminator: setup.discriminator,
            hyper: setup.hyper,
            data: setup.data,
            eval_samples: setup.eval_samples,
            log_every: setup.log_every,
        }
    }
}

impl TrainConfig {
    pub fn setup(&self, seed: u64) -> Result<ToySetup> {
        let setup = ToySetup {
            generator: self.generator.resolve()?,
            discriminator: self.discriminator,
            hyper: self.hyper,
            data: self.data,
            seed,
            eval_samples: self.eval_samples,
            log_every: self.log_every,
        };
        setup.validate()?;
        Ok(setup)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub generator: GeneratorChoice,
    pub bench: BenchConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            generator: GeneratorChoice::Preset("toy".into()),
            bench: BenchConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.generator.resolve()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Replaces preset names with their full descriptions so the output
    /// alone reproduces the run.
    pub fn resolved(&self) -> Result<Self> {
        let mut cfg = self.clone();
        cfg.generator = GeneratorChoice::Custom(self.generator.resolve()?);
        cfg.train.generator = GeneratorChoice::Custom(self.train.generator.resolve()?);
        for &n in &cfg.bench.sizes {
            let r = (n as f64).sqrt().round() as usize;
            if r * r != n {
                bail!("benchmark size {n} is not a perfect square");
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// The configuration as one JSON line, for report headers.
    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("sed = 3").is_err());
        assert!(RunConfig::parse("[bench]\nsize = [16]").is_err());
        assert!(RunConfig::parse("[train.hyper]\ngama = 1.0").is_err());
        assert!(RunConfig::parse("generator = \"hit_q_256\"").is_err());
    }

    #[test]
    fn resolved_config_roundtrips_through_toml() {
        let cfg = RunConfig::parse("seed = 4\ngenerator = \"toy\"\n[train.hyper]\nsteps = 10").unwrap();
        let resolved = cfg.resolved().unwrap();
        let text = resolved.to_toml().unwrap();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, resolved);
        assert_eq!(back.generator.resolve().unwrap(), toy());
        assert_eq!(back.train.hyper.steps, 10);
    }

    #[test]
    fn non_square_bench_sizes_are_rejected() {
        let cfg = RunConfig::parse("[bench]\nsizes = [200]").unwrap();
        assert!(cfg.resolved().is_err());
    }
}
