use super::NoiseSchedule;
use crate::error::{Error, Result};

/// Log-SNR view of a schedule for the DPM-Solver family.
///
/// With the variance-preserving coefficients `α̃ = 1/√(1+σ²)` and
/// `σ̃ = σ/√(1+σ²)`, `λ = log(α̃/σ̃)`. Positions are continuous step indices
/// in sampling order; `t_λ` interpolates positions linearly in `λ`.
#[derive(Debug, Clone, PartialEq)]
pub struct DpmSchedule {
    base: NoiseSchedule,
    lambdas: Vec<f64>,
}

pub fn vp_coefficients(sigma: f64) -> (f64, f64) {
    let scale = 1.0 / (1.0 + sigma * sigma).sqrt();
    (scale, sigma * scale)
}

impl DpmSchedule {
    pub fn new(base: NoiseSchedule) -> Result<Self> {
        let lambdas: Vec<f64> = base
            .sigmas()
            .iter()
            .map(|&s| {
                let (a, sg) = vp_coefficients(s);
                (a / sg).ln()
            })
            .collect();
        if lambdas.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidRange("log-SNR must increase along the schedule".into()));
        }
        Ok(Self { base, lambdas })
    }

    pub fn base(&self) -> &NoiseSchedule {
        &self.base
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn lambda(&self, step: usize) -> f64 {
        self.lambdas[step]
    }

    /// Continuous position whose interpolated log-SNR equals `lambda`,
    /// clamped to the schedule's range.
    pub fn t_lambda(&self, lambda: f64) -> f64 {
        let l = &self.lambdas;
        if lambda <= l[0] {
            return 0.0;
        }
        let last = l.len() - 1;
        if lambda >= l[last] {
            return last as f64;
        }
        let hi = l.partition_point(|&v| v < lambda);
        let lo = hi - 1;
        lo as f64 + (lambda - l[lo]) / (l[hi] - l[lo])
    }

    /// Log-SNR at a continuous position.
    pub fn lambda_at(&self, position: f64) -> f64 {
        let last = self.lambdas.len() - 1;
        let p = position.clamp(0.0, last as f64);
        let lo = (p.floor() as usize).min(last);
        if lo == last {
            return self.lambdas[last];
        }
        let frac = p - lo as f64;
        self.lambdas[lo] + frac * (self.lambdas[lo + 1] - self.lambdas[lo])
    }

    /// Noise level at a continuous position (`σ = e^{−λ}`).
    pub fn sigma_at(&self, position: f64) -> f64 {
        (-self.lambda_at(position)).exp()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::default_train_schedule;

    #[test]
    fn lambda_is_negative_log_sigma() {
        let d = DpmSchedule::new(default_train_schedule().subsample(10).unwrap()).unwrap();
        for (l, s) in d.lambdas().iter().zip(d.base().sigmas()) {
            assert!((l + s.ln()).abs() < 1e-12);
        }
        assert!(d.lambdas().windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn t_lambda_round_trip() {
        let d = DpmSchedule::new(default_train_schedule()).unwrap();
        for t in [0usize, 1, 17, 500, 998, 999] {
            assert!((d.t_lambda(d.lambda(t)) - t as f64).abs() < 1e-9);
        }
        let mid = 0.5 * (d.lambda(10) + d.lambda(11));
        let p = d.t_lambda(mid);
        assert!(p > 10.0 && p < 11.0);
        assert!((d.lambda_at(p) - mid).abs() < 1e-12);
        let s = d.sigma_at(p);
        assert!((s - (d.base().sigma(10) * d.base().sigma(11)).sqrt()).abs() < 1e-12 * s);
    }
}
