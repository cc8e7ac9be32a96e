//! Noise-level arithmetic: EDM preconditioning coefficients, the lognormal
//! training-noise proposal, the Karras inference step grid, and the
//! consistency-tuning annealing schedule that maps tuning progress to the
//! (t, r) noise-level pair.

use num_traits::Float;
use rand_chacha::ChaCha8Rng;

use crate::error::CoreError;
use crate::rng::normal_f64;

/// A noise standard deviation. Zero is allowed only where an operation
/// explicitly supports it (grid terminals, the degenerate tuning target).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct NoiseLevel(f64);

impl NoiseLevel {
    pub fn new(sigma: f64) -> Result<Self, CoreError> {
        if !sigma.is_finite() || sigma < 0.0 {
            return Err(CoreError::NonPositiveSigma { sigma });
        }
        Ok(NoiseLevel(sigma))
    }

    pub const ZERO: NoiseLevel = NoiseLevel(0.0);

    pub fn get(self) -> f64 {
        self.0
    }

    pub fn is_zero(self) -> bool {
        self.0 == 0.0
    }

    fn require_positive(self) -> Result<f64, CoreError> {
        if self.0 <= 0.0 {
            return Err(CoreError::NonPositiveSigma { sigma: self.0 });
        }
        Ok(self.0)
    }
}

/// Noise-level domain and annealing parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleConfig {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub sigma_data: f64,
    /// Step-grid curvature.
    pub rho: f64,
    /// Lognormal training-noise proposal: sigma = exp(p_mean + p_std * z).
    pub p_mean: f64,
    pub p_std: f64,
    /// Number of gap halvings over the tuning run.
    pub anneal_doublings: u32,
    /// Total tuning steps the annealing schedule spans.
    pub total_tune_steps: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            sigma_min: 0.002,
            sigma_max: 80.0,
            sigma_data: 0.5,
            rho: 7.0,
            p_mean: -1.2,
            p_std: 1.2,
            anneal_doublings: 8,
            total_tune_steps: 10_000,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        let fail = |msg: &str| Err(CoreError::InvalidArgument(msg.into()));
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max) {
            return fail("require 0 < sigma_min < sigma_max");
        }
        if self.sigma_data <= 0.0 {
            return fail("sigma_data must be positive");
        }
        if self.rho < 1.0 {
            return fail("rho must be >= 1");
        }
        if self.p_std <= 0.0 {
            return fail("p_std must be positive");
        }
        if self.anneal_doublings < 1 {
            return fail("anneal_doublings must be >= 1");
        }
        if self.total_tune_steps < 1 {
            return fail("total_tune_steps must be >= 1");
        }
        Ok(())
    }
}

/// Skip-path weight sigma_data^2 / (sigma^2 + sigma_data^2). Tends to 1 as
/// sigma tends to 0, so the denoiser reduces to the identity at the
/// noise-free boundary.
pub fn c_skip(sigma: NoiseLevel, cfg: &ScheduleConfig) -> Result<f64, CoreError> {
    let s = sigma.require_positive()?;
    let sd2 = cfg.sigma_data * cfg.sigma_data;
    Ok(sd2 / (s * s + sd2))
}

/// Backbone-output weight sigma * sigma_data / sqrt(sigma^2 + sigma_data^2).
/// Tends to 0 as sigma tends to 0.
pub fn c_out(sigma: NoiseLevel, cfg: &ScheduleConfig) -> Result<f64, CoreError> {
    let s = sigma.require_positive()?;
    let sd = cfg.sigma_data;
    Ok(s * sd / (s * s + sd * sd).sqrt())
}

/// Input scaling 1 / sqrt(sigma^2 + sigma_data^2), applied to the noisy
/// input before the backbone. Well defined at sigma = 0.
pub fn c_in(sigma: NoiseLevel, cfg: &ScheduleConfig) -> Result<f64, CoreError> {
    let s = sigma.get();
    let sd = cfg.sigma_data;
    Ok(1.0 / (s * s + sd * sd).sqrt())
}

/// Noise-level embedding input ln(sigma) / 4.
pub fn c_noise(sigma: NoiseLevel) -> Result<f64, CoreError> {
    let s = sigma.require_positive()?;
    Ok(s.ln() / 4.0)
}

/// Lognormal proposal clamped into [sigma_min, sigma_max].
pub fn sample_training_sigma(rng: &mut ChaCha8Rng, cfg: &ScheduleConfig) -> NoiseLevel {
    let z = normal_f64(rng);
    let sigma = (cfg.p_mean + cfg.p_std * z).exp();
    NoiseLevel(sigma.clamp(cfg.sigma_min, cfg.sigma_max))
}

/// Descending inference grid sigma_max = sigma_0 > ... > sigma_{n-1} =
/// sigma_min with a terminal 0 appended for the final integration step.
pub fn karras_step_grid(
    n_steps: usize,
    cfg: &ScheduleConfig,
) -> Result<alloc::vec::Vec<NoiseLevel>, CoreError> {
    if n_steps == 0 {
        return Err(CoreError::InvalidArgument("n_steps must be >= 1".into()));
    }
    let mut grid = alloc::vec::Vec::with_capacity(n_steps + 1);
    if n_steps == 1 {
        grid.push(NoiseLevel(cfg.sigma_max));
    } else {
        let inv_rho = 1.0 / cfg.rho;
        let hi = cfg.sigma_max.powf(inv_rho);
        let lo = cfg.sigma_min.powf(inv_rho);
        for i in 0..n_steps {
            let frac = i as f64 / (n_steps - 1) as f64;
            grid.push(NoiseLevel((hi + frac * (lo - hi)).powf(cfg.rho)));
        }
    }
    grid.push(NoiseLevel::ZERO);
    Ok(grid)
}

/// Annealed lower noise level for tuning step k of K: the gap shrinks as
/// g(k) = 2^-floor(k * M / K) and r = t * (1 - g(k)). Starts at r = 0
/// (plain diffusion training) and tightens toward t.
pub fn anneal_r(t: NoiseLevel, tune_step: u64, cfg: &ScheduleConfig) -> Result<NoiseLevel, CoreError> {
    if tune_step > cfg.total_tune_steps {
        return Err(CoreError::InvalidArgument(alloc::format!(
            "tune step {tune_step} exceeds total {}",
            cfg.total_tune_steps
        )));
    }
    let doublings = (tune_step * cfg.anneal_doublings as u64) / cfg.total_tune_steps;
    let gap = 2.0f64.powi(-(doublings as i32));
    Ok(NoiseLevel(t.get() * (1.0 - gap)))
}
