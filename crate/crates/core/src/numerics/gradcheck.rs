//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ops::OpKind;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::Wide;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradcheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Check at most this many coordinates per parameter, chosen by `seed`.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Perturb one derivative rule on the analytic side (mutation testing).
    pub fault: Option<OpKind>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { step: 1e-5, max_coords: None, seed: 0, fault: None }
    }
}

impl GradcheckConfig {
    pub fn sampled(max_coords: usize) -> Self {
        Self { max_coords: Some(max_coords), ..Self::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coordinate {
    pub param: usize,
    pub flat_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub worst: Option<Coordinate>,
    pub checked: usize,
}

impl GradcheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let t = tape.get(loss)?;
    if t.numel() != 1 {
        return Err(Error::NonScalarLoss(t.shape().to_vec()));
    }
    let v = t.item();
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("objective evaluated to {v}")));
    }
    Ok(v)
}

/// Compares `backward` against `(f(p + h·e) − f(p − h·e)) / 2h` coordinate by
/// coordinate.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], cfg: &GradcheckConfig) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut work: Vec<Tensor> = params.to_vec();
    let step = cfg.step;
    compare(&f, params, cfg, |pi, j, _| {
        let orig = params[pi].data()[j];
        work[pi].data_mut()[j] = orig + step;
        let up = evaluate(&f, &work)?;
        work[pi].data_mut()[j] = orig - step;
        let down = evaluate(&f, &work)?;
        work[pi].data_mut()[j] = orig;
        Ok((up - down) / (2.0 * step))
    })
}

/// Relative error above which [`finite_diff_check_wide`] re-evaluates a
/// coordinate in double-double.
pub const WIDE_REFINE_ABOVE: f64 = 1e-7;

/// [`finite_diff_check`] with central differences re-taken on `wide`, an
/// evaluation of the same objective in double-double arithmetic, wherever the
/// `f64` estimate misses the analytic gradient by more than
/// [`WIDE_REFINE_ABOVE`]. Rounding in the objective then stays far below the
/// finite-difference signal even for small gradients of large sums.
pub fn finite_diff_check_wide<F, W>(f: F, wide: W, params: &[Tensor], cfg: &GradcheckConfig) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    W: Fn(&[Tensor<Wide>]) -> Result<Wide>,
{
    let mut narrow: Vec<Tensor> = params.to_vec();
    let mut work: Vec<Tensor<Wide>> = params.iter().map(Tensor::cast).collect();
    let step = Wide::from(cfg.step);
    let eval = |work: &[Tensor<Wide>]| -> Result<Wide> {
        let v = wide(work)?;
        if !num_traits::Float::is_finite(v) {
            return Err(Error::NonFinite(format!("objective evaluated to {v}")));
        }
        Ok(v)
    };
    compare(&f, params, cfg, |pi, j, analytic| {
        let orig = params[pi].data()[j];
        narrow[pi].data_mut()[j] = orig + cfg.step;
        let up = evaluate(&f, &narrow)?;
        narrow[pi].data_mut()[j] = orig - cfg.step;
        let down = evaluate(&f, &narrow)?;
        narrow[pi].data_mut()[j] = orig;
        let estimate = (up - down) / (2.0 * cfg.step);
        if relative_error(analytic, estimate) <= WIDE_REFINE_ABOVE {
            return Ok(estimate);
        }
        let orig = work[pi].data()[j];
        work[pi].data_mut()[j] = orig + step;
        let up = eval(&work)?;
        work[pi].data_mut()[j] = orig - step;
        let down = eval(&work)?;
        work[pi].data_mut()[j] = orig;
        Ok(((up - down) / (step + step)).as_f64())
    })
}

fn compare<F, N>(f: &F, params: &[Tensor], cfg: &GradcheckConfig, mut numeric: N) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    N: FnMut(usize, usize, f64) -> Result<f64>,
{
    if !(cfg.step > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {}", cfg.step)));
    }
    let mut tape = match cfg.fault {
        Some(kind) => Tape::new().with_faulty_rule(kind),
        None => Tape::new(),
    };
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradcheckReport { max_rel_error: 0.0, worst: None, checked: 0 };
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).ok_or(Error::NotOnTape)?.clone();
        let n = params[pi].numel();
        let coords: Vec<usize> = match cfg.max_coords {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for j in coords {
            let a = analytic.data()[j];
            let numeric = numeric(pi, j, a)?;
            let err = relative_error(a, numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some(Coordinate { param: pi, flat_index: j, analytic: a, numeric });
            }
        }
    }
    Ok(report)
}
