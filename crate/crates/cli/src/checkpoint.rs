use std::path::Path;

use anyhow::{bail, Context, Result};
use hit_core::generator::{build_generator, Generator, GeneratorConfig, GeneratorState};
use hit_core::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

/// Generator weights and normalization statistics as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub config: GeneratorConfig,
    pub params: Vec<NamedTensor>,
    pub state: GeneratorState,
}

impl Checkpoint {
    pub fn from_generator(gen: &Generator) -> Self {
        let params = gen
            .store
            .specs
            .iter()
            .zip(&gen.store.tensors)
            .map(|(s, t)| NamedTensor { name: s.name.clone(), tensor: t.clone() })
            .collect();
        Self { config: gen.config.clone(), params, state: gen.state.clone() }
    }

    pub fn into_generator(self) -> Result<Generator> {
        let mut gen = build_generator(&self.config, self.config.seed)?;
        if self.params.len() != gen.store.len() {
            bail!("checkpoint holds {} tensors, the config needs {}", self.params.len(), gen.store.len());
        }
        for (slot, (spec, p)) in gen.store.tensors.iter_mut().zip(gen.store.specs.iter().zip(self.params)) {
            if spec.name != p.name || spec.shape != p.tensor.shape() {
                bail!(
                    "checkpoint tensor {} {:?} does not match {} {:?}",
                    p.name,
                    p.tensor.shape(),
                    spec.name,
                    spec.shape
                );
            }
            *slot = p.tensor;
        }
        if self.state.stages.len() != gen.state.stages.len() {
            bail!("checkpoint normalization state has the wrong stage count");
        }
        gen.state = self.state;
        Ok(gen)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing checkpoint {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use hit_core::generator::toy;

    #[test]
    fn json_roundtrip_is_exact() {
        let gen = build_generator(&toy(), 3).unwrap();
        let ck = Checkpoint::from_generator(&gen);
        let text = serde_json::to_string(&ck).unwrap();
        let back: Checkpoint = serde_json::from_str(&text).unwrap();
        assert_eq!(back, ck);
        let rebuilt = back.into_generator().unwrap();
        assert_eq!(rebuilt.store.tensors, gen.store.tensors);
    }

    #[test]
    fn mismatched_tensors_are_rejected() {
        let gen = build_generator(&toy(), 3).unwrap();
        let mut ck = Checkpoint::from_generator(&gen);
        ck.params.pop();
        assert!(ck.clone().into_generator().is_err());
        let mut ck = Checkpoint::from_generator(&gen);
        ck.params[0].name = "bogus".into();
        assert!(ck.into_generator().is_err());
    }
}
