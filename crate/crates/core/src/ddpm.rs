//! Denoising diffusion probabilistic model over wrench actions.
//!
//! The forward process pollutes a clean action over `T` steps,
//!
//! ```text
//!   alpha_tau = 1 - beta_tau
//!   a_tau     = sqrt(alpha_tau) a_{tau-1} + sqrt(beta_tau) eps_tau
//! ```
//!
//! and the reverse process reconstructs it with a learned noise estimator,
//!
//! ```text
//!   a_{tau-1} = (a_tau - (1 - alpha_tau)/sqrt(1 - abar_tau) eps_hat) / sqrt(alpha_tau)
//!             + sigma_tau eps
//! ```
//!
//! with `abar_tau` the running product of the alphas and `sigma_tau =
//! sqrt(beta_tau)`. Everything here is dimension-generic and independent of
//! the concrete noise-estimator implementation.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameters from which a [`VarianceSchedule`] is built.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub horizon: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { horizon: 50, beta_start: 1e-4, beta_end: 1e-2 }
    }
}

/// Precomputed beta, alpha, alpha-bar and sigma sequences over the horizon.
///
/// Step indices `tau` run `1..=horizon`; accessors do the offset.
#[derive(Clone, Debug, PartialEq)]
pub struct VarianceSchedule {
    config: ScheduleConfig,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl VarianceSchedule {
    /// Build a schedule with beta interpolated linearly from `beta_start`
    /// to `beta_end` over `horizon` steps.
    pub fn build(horizon: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::InvalidArgument("diffusion horizon must be >= 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "betas must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let beta: Vec<f64> = if horizon == 1 {
            vec![beta_start]
        } else {
            (0..horizon)
                .map(|i| {
                    let t = i as f64 / (horizon - 1) as f64;
                    beta_start + t * (beta_end - beta_start)
                })
                .collect()
        };
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(horizon);
        let mut prod = 1.0;
        for a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }
        let sigma: Vec<f64> = beta.iter().map(|b| b.sqrt()).collect();
        Ok(Self {
            config: ScheduleConfig { horizon, beta_start, beta_end },
            beta,
            alpha,
            alpha_bar,
            sigma,
        })
    }

    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self> {
        Self::build(cfg.horizon, cfg.beta_start, cfg.beta_end)
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    pub fn horizon(&self) -> usize {
        self.config.horizon
    }

    fn check_tau(&self, tau: usize) -> Result<()> {
        if tau == 0 || tau > self.horizon() {
            Err(Error::StepOutOfRange { tau, horizon: self.horizon() })
        } else {
            Ok(())
        }
    }

    pub fn beta(&self, tau: usize) -> f64 {
        self.beta[tau - 1]
    }

    pub fn alpha(&self, tau: usize) -> f64 {
        self.alpha[tau - 1]
    }

    pub fn alpha_bar(&self, tau: usize) -> f64 {
        self.alpha_bar[tau - 1]
    }

    pub fn sigma(&self, tau: usize) -> f64 {
        self.sigma[tau - 1]
    }
}

/// An action vector part-way through the diffusion process.
///
/// `tau = 0` is a clean action, `tau = horizon` is prior noise.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusedAction {
    pub value: Vec<f64>,
    pub tau: usize,
}

impl DiffusedAction {
    pub fn clean(value: Vec<f64>) -> Self {
        Self { value, tau: 0 }
    }

    pub fn is_finite(&self) -> bool {
        self.value.iter().all(|v| v.is_finite())
    }
}

fn check_dims(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        Err(Error::DimensionMismatch { what, expected, got })
    } else {
        Ok(())
    }
}

/// One forward diffusion step: pollute `prev` (at `tau - 1`) into step `tau`.
pub fn diffuse_step(
    prev: &DiffusedAction,
    eps: &[f64],
    tau: usize,
    sched: &VarianceSchedule,
) -> Result<DiffusedAction> {
    sched.check_tau(tau)?;
    if prev.tau != tau - 1 {
        return Err(Error::InvalidArgument(format!(
            "diffuse_step to tau={tau} requires input at tau={}, got {}",
            tau - 1,
            prev.tau
        )));
    }
    check_dims("diffuse_step noise", prev.value.len(), eps.len())?;
    let sa = sched.alpha(tau).sqrt();
    let sb = sched.beta(tau).sqrt();
    let value = prev
        .value
        .iter()
        .zip(eps)
        .map(|(a, e)| sa * a + sb * e)
        .collect();
    Ok(DiffusedAction { value, tau })
}

/// Jump from a clean action straight to step `tau` using the closed form
/// `a_tau = sqrt(abar_tau) a_0 + sqrt(1 - abar_tau) eps`.
pub fn diffuse_closed_form(
    a0: &[f64],
    eps: &[f64],
    tau: usize,
    sched: &VarianceSchedule,
) -> Result<DiffusedAction> {
    sched.check_tau(tau)?;
    check_dims("diffuse_closed_form noise", a0.len(), eps.len())?;
    let ab = sched.alpha_bar(tau);
    let sa = ab.sqrt();
    let sn = (1.0 - ab).sqrt();
    let value = a0.iter().zip(eps).map(|(a, e)| sa * a + sn * e).collect();
    Ok(DiffusedAction { value, tau })
}

/// A noise estimator `eps_hat(obs, a_tau, tau)`.
///
/// Implementations must be deterministic functions of their inputs.
pub trait NoiseEstimator {
    fn action_dim(&self) -> usize;
    fn estimate(&self, obs: &[f64], a_tau: &[f64], tau: usize, out: &mut [f64]) -> Result<()>;
}

/// Wrap a closure as a [`NoiseEstimator`]; handy in tests and toy problems.
pub struct FnEstimator<F> {
    dim: usize,
    f: F,
}

impl<F> FnEstimator<F>
where
    F: Fn(&[f64], &[f64], usize, &mut [f64]),
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> NoiseEstimator for FnEstimator<F>
where
    F: Fn(&[f64], &[f64], usize, &mut [f64]),
{
    fn action_dim(&self) -> usize {
        self.dim
    }

    fn estimate(&self, obs: &[f64], a_tau: &[f64], tau: usize, out: &mut [f64]) -> Result<()> {
        (self.f)(obs, a_tau, tau, out);
        Ok(())
    }
}

/// Per-sample squared-error training loss
/// `|| eps_hat(obs, a_tau, tau) - eps ||^2` with `a_tau` from the closed form.
pub fn training_loss(
    obs: &[f64],
    a0: &[f64],
    tau: usize,
    eps: &[f64],
    net: &dyn NoiseEstimator,
    sched: &VarianceSchedule,
) -> Result<f64> {
    let a_tau = diffuse_closed_form(a0, eps, tau, sched)?;
    let mut eps_hat = vec![0.0; net.action_dim()];
    check_dims("noise estimate", eps.len(), eps_hat.len())?;
    net.estimate(obs, &a_tau.value, tau, &mut eps_hat)?;
    Ok(eps_hat
        .iter()
        .zip(eps)
        .map(|(h, e)| (h - e) * (h - e))
        .sum())
}

/// One reverse step of the denoising rule. `eps` is the fresh noise draw;
/// it is ignored when `tau == 1` and `final_step_noise` is false, making the
/// last step deterministic given the estimate.
pub fn denoise_step(
    a_tau: &DiffusedAction,
    eps_hat: &[f64],
    eps: &[f64],
    tau: usize,
    sched: &VarianceSchedule,
    final_step_noise: bool,
) -> Result<DiffusedAction> {
    sched.check_tau(tau)?;
    if a_tau.tau != tau {
        return Err(Error::InvalidArgument(format!(
            "denoise_step at tau={tau} requires input at tau={tau}, got {}",
            a_tau.tau
        )));
    }
    check_dims("denoise eps_hat", a_tau.value.len(), eps_hat.len())?;
    check_dims("denoise noise", a_tau.value.len(), eps.len())?;
    let alpha = sched.alpha(tau);
    let coeff = (1.0 - alpha) / (1.0 - sched.alpha_bar(tau)).sqrt();
    let inv_sa = 1.0 / alpha.sqrt();
    let sigma = if tau == 1 && !final_step_noise { 0.0 } else { sched.sigma(tau) };
    let value = a_tau
        .value
        .iter()
        .zip(eps_hat)
        .zip(eps)
        .map(|((a, h), e)| inv_sa * (a - coeff * h) + sigma * e)
        .collect();
    Ok(DiffusedAction { value, tau: tau - 1 })
}

/// Knobs for [`sample`].
#[derive(Clone, Copy, Debug)]
pub struct SampleOptions {
    /// Apply the `sigma_tau eps` term at `tau = 1` too (the literal
    /// denoising rule); off by default so sampling ends deterministically.
    pub final_step_noise: bool,
    /// Record the trajectory `a_T .. a_0`.
    pub trace: bool,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self { final_step_noise: false, trace: false }
    }
}

/// Output of [`sample`]: the reconstructed clean action and, when requested,
/// the full denoising trajectory (`horizon + 1` states from `a_T` to `a_0`).
#[derive(Clone, Debug)]
pub struct Sample {
    pub action: Vec<f64>,
    pub trace: Option<Vec<DiffusedAction>>,
}

/// Draw `a_T ~ N(0, I)` and run the reverse process down to `a_0`.
///
/// Pure in `(obs, net, rng state)`: identical seeds give identical output.
pub fn sample<R: Rng>(
    obs: &[f64],
    net: &dyn NoiseEstimator,
    sched: &VarianceSchedule,
    rng: &mut R,
    opts: &SampleOptions,
) -> Result<Sample> {
    let dim = net.action_dim();
    let horizon = sched.horizon();
    let mut a = DiffusedAction {
        value: (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
        tau: horizon,
    };
    let mut trace = opts.trace.then(|| {
        let mut t = Vec::with_capacity(horizon + 1);
        t.push(a.clone());
        t
    });
    let mut eps_hat = vec![0.0; dim];
    let mut eps = vec![0.0; dim];
    for tau in (1..=horizon).rev() {
        net.estimate(obs, &a.value, tau, &mut eps_hat)?;
        if tau == 1 && !opts.final_step_noise {
            eps.fill(0.0);
        } else {
            for e in eps.iter_mut() {
                *e = rng.sample(StandardNormal);
            }
        }
        a = denoise_step(&a, &eps_hat, &eps, tau, sched, opts.final_step_noise)?;
        if !a.is_finite() {
            return Err(Error::NonFinite(format!("denoised action at tau={}", tau - 1)));
        }
        if let Some(t) = trace.as_mut() {
            t.push(a.clone());
        }
    }
    Ok(Sample { action: a.value, trace })
}
