use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::manifold::ManifoldSpec;
use crate::numeric::Vec64;

/// State of one sampling step. Record `k` holds the iterate entering step
/// `k`; the last record holds the returned sample with `sigma = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub sigma: f64,
    pub sigma_hat: f64,
    /// Residual actually used (after clamping); 0 when correction is off.
    pub r: f64,
    /// `‖ε_θ(x, σ̂)‖` before any normalisation.
    pub dir_norm: f64,
    /// `1 − σ_{t−1}/σ_t`; absent on the final record.
    pub beta_t: Option<f64>,
    pub dist: Option<f64>,
    pub bias: Option<f64>,
    /// `‖A x_{0|t} − y‖` for constrained samplers.
    pub consistency: Option<f64>,
    pub x: Vec64,
}

impl StepRecord {
    pub(crate) fn new(step: usize, sigma: f64, next_sigma: f64, x: Vec64) -> Self {
        Self {
            step,
            sigma,
            sigma_hat: sigma,
            r: 0.0,
            dir_norm: 0.0,
            beta_t: Some(1.0 - next_sigma / sigma),
            dist: None,
            bias: None,
            consistency: None,
            x,
        }
    }

    pub(crate) fn terminal(step: usize, x: Vec64) -> Self {
        Self {
            step,
            sigma: 0.0,
            sigma_hat: 0.0,
            r: 0.0,
            dir_norm: 0.0,
            beta_t: None,
            dist: None,
            bias: None,
            consistency: None,
            x,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Trajectory {
    pub records: Vec<StepRecord>,
}

/// `(dist − √n σ̂)/(√n σ)`; undefined at `σ = 0`.
pub fn relative_bias(dist: f64, sigma_hat: f64, sigma: f64, n: usize) -> Option<f64> {
    if sigma > 0.0 {
        let root_n = (n as f64).sqrt();
        Some((dist - root_n * sigma_hat) / (root_n * sigma))
    } else {
        None
    }
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn final_sample(&self) -> &Vec64 {
        &self.records[self.records.len() - 1].x
    }

    /// Fills `dist` and `bias` from the exact oracle.
    pub fn annotate(&mut self, spec: &ManifoldSpec) -> Result<()> {
        for rec in &mut self.records {
            let dist = spec.exact_distance(&rec.x)?;
            rec.dist = Some(dist);
            rec.bias = relative_bias(dist, rec.sigma_hat, rec.sigma, rec.x.len());
        }
        Ok(())
    }

    pub fn final_distance(&self) -> Option<f64> {
        self.records.last().and_then(|r| r.dist)
    }

    /// `(σ, r)` for every noisy step, the raw material of a lookup table.
    pub fn residual_records(&self) -> Vec<(f64, f64)> {
        self.records
            .iter()
            .filter(|r| r.sigma > 0.0)
            .map(|r| (r.sigma, r.r))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,sigma,sigma_hat,r,dir_norm,dist,bias,beta_t\n");
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:e}"));
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{:e},{:e},{:e},{:e},{},{},{}",
                r.step,
                r.sigma,
                r.sigma_hat,
                r.r,
                r.dir_norm,
                opt(r.dist),
                opt(r.bias),
                opt(r.beta_t)
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bias_formula_cases() {
        let n = 100;
        // σ̂ equal to dist/√n gives zero bias.
        assert_eq!(relative_bias(5.0, 0.5, 0.7, n), Some(0.0));
        // On the manifold with σ̂ = σ the bias is −1.
        assert_eq!(relative_bias(0.0, 0.3, 0.3, n), Some(-1.0));
        assert_eq!(relative_bias(1.0, 0.0, 0.0, n), None);
        // Doubling dist and σ̂ doubles the bias.
        let a = relative_bias(2.0, 0.1, 0.4, n).unwrap();
        let b = relative_bias(4.0, 0.2, 0.4, n).unwrap();
        assert!((b - 2.0 * a).abs() < 1e-15);
    }

    #[test]
    fn annotate_and_csv() {
        let spec = ManifoldSpec::axis_aligned(3, 1, 0.0).unwrap();
        let mut t = Trajectory {
            records: vec![
                StepRecord::new(0, 2.0, 1.0, Vec64::from(vec![2.0, 0.0, 1.0])),
                StepRecord::terminal(1, Vec64::from(vec![1.0, 0.0, 0.0])),
            ],
        };
        t.annotate(&spec).unwrap();
        assert!((t.records[0].dist.unwrap() - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(t.final_distance(), Some(0.0));
        assert_eq!(t.records[1].bias, None);
        assert_eq!(t.residual_records(), vec![(2.0, 0.0)]);
        let csv = t.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "step,sigma,sigma_hat,r,dir_norm,dist,bias,beta_t");
        assert!(lines[1].ends_with(",5e-1"));
        assert!(lines[2].ends_with(",,"));
    }
}
