//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.0, beta2: 0.99, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { first: zeros(), second: zeros(), step: 0 }
    }
}

/// One in-place update. Gradients are validated before anything is mutated,
/// so a rejected step leaves parameters and state untouched.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if !(cfg.lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::InvalidShape {
            op: "adam_step",
            msg: format!("{} parameters, {} gradients, {} state slots", params.len(), grads.len(), state.first.len()),
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.first[i].shape() {
            return Err(Error::ShapeMismatch { op: "adam_step", lhs: p.shape().to_vec(), rhs: g.shape().to_vec() });
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter {i}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.first.iter_mut().zip(state.second.iter_mut())) {
        let pd = p.data_mut();
        let md = m.data_mut();
        let vd = v.data_mut();
        for (j, &gj) in g.data().iter().enumerate() {
            md[j] = cfg.beta1 * md[j] + (1.0 - cfg.beta1) * gj;
            vd[j] = cfg.beta2 * vd[j] + (1.0 - cfg.beta2) * gj * gj;
            let mh = md[j] / c1;
            let vh = vd[j] / c2;
            pd[j] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![Tensor::new(&[2], vec![1.0, -2.0]).unwrap()];
        let g = vec![Tensor::zeros(&[2])];
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &g, &mut s, &AdamConfig::default()).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn degenerate_moments_give_sign_step() {
        let cfg = AdamConfig { lr: 0.01, beta1: 0.0, beta2: 0.0, eps: 1e-8 };
        let mut p = vec![Tensor::zeros(&[2])];
        let g = vec![Tensor::new(&[2], vec![3.0, -0.5]).unwrap()];
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &g, &mut s, &cfg).unwrap();
        assert_eq!(p[0].data()[0], -0.01 * 3.0 / (3.0 + 1e-8));
        assert_eq!(p[0].data()[1], -0.01 * -0.5 / (0.5 + 1e-8));
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_mutation() {
        let mut p = vec![Tensor::ones(&[2])];
        let g = vec![Tensor::new(&[2], vec![1.0, f64::NAN]).unwrap()];
        let mut s = AdamState::new(&p);
        assert!(adam_step(&mut p, &g, &mut s, &AdamConfig::default()).is_err());
        assert_eq!(p[0].data(), &[1.0, 1.0]);
        assert_eq!(s.step, 0);
    }

    #[test]
    fn scalar_quadratic_matches_recurrence() {
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        let mut p = vec![Tensor::scalar(0.0)];
        let mut s = AdamState::new(&p);
        // Independent scalar recurrence.
        let (mut q, mut v) = (0.0f64, 0.0f64);
        let mut dist = Vec::new();
        for t in 1..=100 {
            let g = vec![Tensor::scalar(p[0].item() - 3.0)];
            adam_step(&mut p, &g, &mut s, &cfg).unwrap();
            let gq = q - 3.0;
            v = 0.99 * v + 0.01 * gq * gq;
            q -= 0.1 * gq / ((v / (1.0 - 0.99f64.powi(t))).sqrt() + 1e-8);
            assert!((p[0].item() - q).abs() < 1e-12);
            dist.push((p[0].item() - 3.0).abs());
        }
        assert!(dist[5..].windows(2).all(|w| w[1] < w[0]));
        assert!(dist[99] < 0.5);
    }
}
