//! Noise-level schedules.
//!
//! A [`NoiseSchedule`] stores `σ_T > … > σ_1 > 0` in sampling order (index 0
//! is the noisiest level). The terminal level `σ_0 = 0` is implicit: it is
//! what [`NoiseSchedule::next_sigma`] returns after the last step.
//! `α_t = 1/(1 + σ_t²)` is kept alongside so that `σ_t = √((1 − α_t)/α_t)`.

mod dpm;
mod lut;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dpm::{vp_coefficients, DpmSchedule};
pub use lut::{lut_query, record_and_build_lut, LookupTable, DEFAULT_LUT_BINS};

pub const DEFAULT_TRAIN_STEPS: usize = 1000;
pub const DEFAULT_BETA_MIN: f64 = 1e-4;
pub const DEFAULT_BETA_MAX: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleFamily {
    DdpmLinear,
    EdmRho,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    sigmas: Vec<f64>,
    alphas: Vec<f64>,
    family: ScheduleFamily,
}

impl NoiseSchedule {
    /// Validates a strictly decreasing sequence of positive levels.
    pub fn new(sigmas: Vec<f64>, family: ScheduleFamily) -> Result<Self> {
        if sigmas.is_empty() {
            return Err(Error::InvalidRange("schedule needs at least one level".into()));
        }
        if sigmas.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidRange("noise levels must be finite and positive".into()));
        }
        if let Some(w) = sigmas.windows(2).find(|w| w[1] >= w[0]) {
            return Err(Error::InvalidRange(format!(
                "noise levels must strictly decrease ({} then {})",
                w[0], w[1]
            )));
        }
        let alphas = sigmas.iter().map(|s| 1.0 / (1.0 + s * s)).collect();
        Ok(Self {
            sigmas,
            alphas,
            family,
        })
    }

    pub fn custom(sigmas: Vec<f64>) -> Result<Self> {
        Self::new(sigmas, ScheduleFamily::Custom)
    }

    /// Number of noisy levels (the sentinel is not counted).
    pub fn len(&self) -> usize {
        self.sigmas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigmas.is_empty()
    }

    pub fn family(&self) -> ScheduleFamily {
        self.family
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn sigma(&self, step: usize) -> f64 {
        self.sigmas[step]
    }

    /// Level after `step`; `0.0` after the last one.
    pub fn next_sigma(&self, step: usize) -> f64 {
        self.sigmas.get(step + 1).copied().unwrap_or(0.0)
    }

    pub fn largest(&self) -> f64 {
        self.sigmas[0]
    }

    pub fn smallest(&self) -> f64 {
        self.sigmas[self.sigmas.len() - 1]
    }

    /// Keeps `steps` levels at a uniform stride, always including the
    /// noisiest one: training index `T − ⌊k·T/steps⌋` for `k = 0..steps`.
    pub fn subsample(&self, steps: usize) -> Result<NoiseSchedule> {
        let total = self.len();
        if steps < 2 || steps > total {
            return Err(Error::InvalidRange(format!(
                "subsample needs 2 <= steps <= {total}, got {steps}"
            )));
        }
        let sigmas = (0..steps).map(|k| self.sigmas[k * total / steps]).collect();
        NoiseSchedule::new(sigmas, self.family)
    }
}

/// Linear-β variance-preserving schedule expressed as noise levels:
/// `ᾱ_t = Π_{i≤t}(1 − β_i)`, `σ_t = √((1 − ᾱ_t)/ᾱ_t)`.
///
/// A constant schedule (`beta_min == beta_max`) is accepted.
pub fn build_ddpm_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::InvalidRange(format!("need T >= 2, got {steps}")));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::InvalidRange(format!(
            "need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})"
        )));
    }
    let mut alpha_bar = 1.0;
    let mut ascending = Vec::with_capacity(steps);
    for i in 0..steps {
        let beta = beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64;
        alpha_bar *= 1.0 - beta;
        ascending.push(((1.0 - alpha_bar) / alpha_bar).sqrt());
    }
    ascending.reverse();
    NoiseSchedule::new(ascending, ScheduleFamily::DdpmLinear)
}

/// The default training schedule: `T = 1000`, β linear in `[1e-4, 0.02]`.
pub fn default_train_schedule() -> NoiseSchedule {
    build_ddpm_schedule(DEFAULT_TRAIN_STEPS, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX)
        .expect("default schedule parameters are valid")
}

/// ρ-interpolated levels:
/// `σ_i = (σ_max^{1/ρ} + i/(N−1)·(σ_min^{1/ρ} − σ_max^{1/ρ}))^ρ`.
pub fn build_edm_schedule(steps: usize, sigma_min: f64, sigma_max: f64, rho: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::InvalidRange(format!("need steps >= 2, got {steps}")));
    }
    if !(sigma_min > 0.0 && sigma_min < sigma_max && sigma_max.is_finite()) {
        return Err(Error::InvalidRange(format!(
            "need 0 < sigma_min < sigma_max, got ({sigma_min}, {sigma_max})"
        )));
    }
    if !(rho >= 1.0 && rho.is_finite()) {
        return Err(Error::InvalidRange(format!("need rho >= 1, got {rho}")));
    }
    let hi = sigma_max.powf(1.0 / rho);
    let lo = sigma_min.powf(1.0 / rho);
    let mut sigmas: Vec<f64> = (0..steps)
        .map(|i| (hi + i as f64 / (steps - 1) as f64 * (lo - hi)).powf(rho))
        .collect();
    // Pin the endpoints against powf round-off.
    sigmas[0] = sigma_max;
    sigmas[steps - 1] = sigma_min;
    NoiseSchedule::new(sigmas, ScheduleFamily::EdmRho)
}
