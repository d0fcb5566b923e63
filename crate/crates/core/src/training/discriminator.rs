use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{init_tensors, Init, LinearParams, ParamSpec};
use crate::numerics::functional::linear;
use crate::numerics::{Ops, Tensor};

/// Flatten, then three affine layers with softplus between them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    /// Side of the square RGB input.
    pub resolution: usize,
    pub hidden: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { resolution: 8, hidden: 64 }
    }
}

impl DiscriminatorConfig {
    pub fn input_dim(&self) -> usize {
        self.resolution * self.resolution * 3
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 || self.hidden == 0 {
            return Err(Error::Config(format!(
                "discriminator needs positive resolution and width, got {} and {}",
                self.resolution, self.hidden
            )));
        }
        Ok(())
    }

    fn specs(&self) -> Vec<ParamSpec> {
        let widths = [self.input_dim(), self.hidden, self.hidden, 1];
        let mut specs = Vec::new();
        for (i, w) in widths.windows(2).enumerate() {
            specs.push(ParamSpec {
                name: format!("layer{}.weight", i + 1),
                shape: vec![w[0], w[1]],
                init: Init::Weight { fan_in: w[0] },
            });
            specs.push(ParamSpec { name: format!("layer{}.bias", i + 1), shape: vec![w[1]], init: Init::Zeros });
        }
        specs
    }
}

#[derive(Debug, Clone)]
pub struct DiscriminatorParams<V> {
    pub layers: [LinearParams<V>; 3],
}

impl<V> DiscriminatorParams<V> {
    /// Groups flat `weight, bias` values per layer.
    pub fn from_flat(values: &[V]) -> Result<Self>
    where
        V: Clone,
    {
        if values.len() != 6 {
            return Err(Error::Config(format!("discriminator has 6 parameter tensors, got {}", values.len())));
        }
        let layer = |i: usize| LinearParams { weight: values[2 * i].clone(), bias: values[2 * i + 1].clone() };
        Ok(Self { layers: [layer(0), layer(1), layer(2)] })
    }

    pub fn map<U>(&self, mut f: impl FnMut(&V) -> U) -> DiscriminatorParams<U> {
        DiscriminatorParams {
            layers: [self.layers[0].map(&mut f), self.layers[1].map(&mut f), self.layers[2].map(&mut f)],
        }
    }
}

/// A discriminator with its parameters stored flat, in layer order
/// `weight, bias` per layer.
#[derive(Debug, Clone)]
pub struct ToyDiscriminator {
    pub config: DiscriminatorConfig,
    pub specs: Vec<ParamSpec>,
    pub tensors: Vec<Tensor>,
}

impl ToyDiscriminator {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let specs = config.specs();
        let tensors = init_tensors(&specs, seed);
        Ok(Self { config, specs, tensors })
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn params_with<V: Clone>(&self, leaf: impl FnMut(&Tensor) -> V) -> DiscriminatorParams<V> {
        let v: Vec<V> = self.tensors.iter().map(leaf).collect();
        DiscriminatorParams::from_flat(&v).expect("layout has three layers")
    }

    /// Logits for `[b, r, r, 3]` images.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let params = self.params_with(Tensor::clone);
        discriminate(&mut crate::Eager::new(), &params, x)
    }
}

/// `[b, r, r, 3] → [b]` logits. Samples are processed independently.
pub fn discriminate<G: Ops>(g: &mut G, p: &DiscriminatorParams<G::Value>, x: &G::Value) -> Result<G::Value> {
    let shape = g.shape(x)?;
    let b = *shape.first().ok_or(Error::InvalidShape { op: "discriminate", msg: "rank-0 input".into() })?;
    let d: usize = shape[1..].iter().product();
    let h = g.reshape(x, &[b, d])?;
    let h = linear(g, &h, &p.layers[0].weight, Some(&p.layers[0].bias))?;
    let h = g.softplus(&h)?;
    let h = linear(g, &h, &p.layers[1].weight, Some(&p.layers[1].bias))?;
    let h = g.softplus(&h)?;
    let out = linear(g, &h, &p.layers[2].weight, Some(&p.layers[2].bias))?;
    g.reshape(&out, &[b])
}
