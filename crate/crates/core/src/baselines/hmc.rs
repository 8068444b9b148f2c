//! Leapfrog Hamiltonian Monte Carlo with identity mass matrix.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::substream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HmcConfig {
    /// Initial step size; adapted during burn-in when `adapt` is set.
    pub step_size: f64,
    pub leapfrog_steps: usize,
    /// Total iterations, burn-in included.
    pub chain_length: usize,
    pub burn_in: usize,
    pub seed: u64,
    pub adapt: bool,
    pub target_accept: f64,
}

impl Default for HmcConfig {
    fn default() -> Self {
        Self {
            step_size: 0.1,
            leapfrog_steps: 10,
            chain_length: 6000,
            burn_in: 1000,
            seed: 0,
            adapt: true,
            target_accept: 0.7,
        }
    }
}

impl HmcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidConfig("hmc step size must be positive".into()));
        }
        if self.leapfrog_steps == 0 {
            return Err(Error::InvalidConfig("hmc needs at least one leapfrog step".into()));
        }
        if self.burn_in >= self.chain_length {
            return Err(Error::InvalidConfig("hmc burn-in must be shorter than the chain".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::InvalidConfig("hmc target acceptance must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct HmcOutput {
    /// Post-burn-in draws, one per row.
    pub draws: Array2<f64>,
    /// Fraction of accepted proposals after burn-in.
    pub acceptance_rate: f64,
    /// Step size used after burn-in.
    pub step_size: f64,
}

/// A point with its log-density and gradient.
struct State {
    q: Vec<f64>,
    logp: f64,
    grad: Vec<f64>,
}

/// `-log p(q) + ‖p‖²/2`.
pub fn hamiltonian(logp: f64, momentum: &[f64]) -> f64 {
    -logp + 0.5 * momentum.iter().map(|v| v * v).sum::<f64>()
}

/// Runs `steps` leapfrog steps from `(q, p)`; returns the end point, end
/// momentum and the log-density there.
pub fn leapfrog<F>(target: &mut F, q: &[f64], p: &[f64], step: f64, steps: usize) -> Result<(Vec<f64>, Vec<f64>, f64)>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (logp, grad) = target(q)?;
    let s = integrate(target, State { q: q.to_vec(), logp, grad }, p.to_vec(), step, steps)?;
    Ok((s.0.q, s.1, s.0.logp))
}

fn integrate<F>(target: &mut F, mut s: State, mut p: Vec<f64>, step: f64, steps: usize) -> Result<(State, Vec<f64>)>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    for _ in 0..steps {
        for (pi, g) in p.iter_mut().zip(&s.grad) {
            *pi += 0.5 * step * g;
        }
        for (qi, pi) in s.q.iter_mut().zip(&p) {
            *qi += step * pi;
        }
        let (logp, grad) = target(&s.q)?;
        s.logp = logp;
        s.grad = grad;
        for (pi, g) in p.iter_mut().zip(&s.grad) {
            *pi += 0.5 * step * g;
        }
        if !s.logp.is_finite() {
            break;
        }
    }
    Ok((s, p))
}

/// Draws from the density whose log (up to a constant) and gradient `target`
/// returns. During burn-in the step size follows a Robbins-Monro recursion
/// on its logarithm toward `target_accept`; the post-burn-in step is the
/// average of the second half of the burn-in iterates.
pub fn hmc_sample<F>(mut target: F, cfg: &HmcConfig, init: &[f64]) -> Result<HmcOutput>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    cfg.validate()?;
    let d = init.len();
    let (logp, grad) = target(init)?;
    if !logp.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::non_finite("hmc initial energy"));
    }
    let mut rng = substream(cfg.seed, "hmc");
    let mut current = State { q: init.to_vec(), logp, grad };
    let mut log_step = cfg.step_size.ln();
    let mut avg_sum = 0.0;
    let mut avg_n = 0usize;
    let mut step = cfg.step_size;
    let kept = cfg.chain_length - cfg.burn_in;
    let mut draws = Array2::zeros((kept, d));
    let mut accepted = 0usize;
    for it in 0..cfg.chain_length {
        let burning = it < cfg.burn_in;
        if burning && cfg.adapt {
            step = log_step.exp();
        }
        let p0: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let h0 = hamiltonian(current.logp, &p0);
        let start = State {
            q: current.q.clone(),
            logp: current.logp,
            grad: current.grad.clone(),
        };
        let (prop, p1) = integrate(&mut target, start, p0, step, cfg.leapfrog_steps)?;
        let h1 = hamiltonian(prop.logp, &p1);
        let accept_prob = if h1.is_finite() { (h0 - h1).exp().min(1.0) } else { 0.0 };
        let u: f64 = rng.random();
        let accept = u < accept_prob;
        if accept {
            current = prop;
        }
        if burning {
            if cfg.adapt {
                let gain = 1.0 / ((it + 10) as f64).powf(0.6);
                log_step += 2.0 * gain * (accept_prob - cfg.target_accept);
                if 2 * it >= cfg.burn_in {
                    avg_sum += log_step;
                    avg_n += 1;
                }
                if it + 1 == cfg.burn_in {
                    step = if avg_n > 0 { (avg_sum / avg_n as f64).exp() } else { log_step.exp() };
                }
            }
        } else {
            if accept {
                accepted += 1;
            }
            draws.row_mut(it - cfg.burn_in).assign(&ndarray::ArrayView1::from(&current.q));
        }
    }
    Ok(HmcOutput {
        draws,
        acceptance_rate: accepted as f64 / kept as f64,
        step_size: step,
    })
}
