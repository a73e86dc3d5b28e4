//! Noise-conditioned wrappers around [`MlpNet`].
//!
//! Both networks see the same `n + 1` features, `[c_in(σ) x, ln σ]`. The
//! denoiser additionally wraps its network `F` in a skip connection,
//!
//! ```text
//! ε_θ(x, σ) = c_skip(σ) x + c_out(σ) F(c_in(σ) x, ln σ)
//! c_in = 1/√(σ² + s²),  c_skip = σ/(σ² + s²),  c_out = s/√(σ² + s²)
//! ```
//!
//! where `s` is the per-coordinate RMS of the data. The skip term is the
//! exact noise prediction for isotropic data of that scale, so at large σ
//! the network only has to learn a small correction, and errors in `F`
//! are never amplified by the large steps at the top of the schedule.
//! For the unit-radius sphere manifolds `s = 1/√n`.

use super::{MlpNet, Role};
use crate::error::{Error, Result};
use crate::numeric::{Rng, Vec64};

pub const HIDDEN_WIDTH: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preconditioner {
    pub sigma_data: f64,
}

impl Preconditioner {
    /// Scaling for unit-radius manifolds in `R^n`.
    pub fn for_dim(n: usize) -> Self {
        Self {
            sigma_data: 1.0 / (n as f64).sqrt(),
        }
    }

    fn total_var(&self, sigma: f64) -> f64 {
        sigma * sigma + self.sigma_data * self.sigma_data
    }

    pub fn c_in(&self, sigma: f64) -> f64 {
        1.0 / self.total_var(sigma).sqrt()
    }

    pub fn c_skip(&self, sigma: f64) -> f64 {
        sigma / self.total_var(sigma)
    }

    pub fn c_out(&self, sigma: f64) -> f64 {
        self.sigma_data / self.total_var(sigma).sqrt()
    }

    /// Writes `[c_in x, ln σ]` into `out` (length `x.len() + 1`).
    pub fn features(&self, x: &[f64], sigma: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), x.len() + 1);
        let scale = self.c_in(sigma);
        for (o, v) in out.iter_mut().zip(x) {
            *o = v * scale;
        }
        out[x.len()] = sigma.ln();
    }

    fn feature_vec(&self, x: &[f64], sigma: f64) -> Vec<f64> {
        let mut f = vec![0.0; x.len() + 1];
        self.features(x, sigma, &mut f);
        f
    }
}

/// Noise predictor `ε(x, σ)`.
pub trait EpsilonModel: Sync {
    fn predict(&self, x: &[f64], sigma: f64) -> Result<Vec64>;
}

/// Noise-level residual `r(x, σ)`, already clamped.
pub trait ResidualModel: Sync {
    fn residual(&self, x: &[f64], sigma: f64) -> Result<f64>;
}

impl<F> EpsilonModel for F
where
    F: Fn(&[f64], f64) -> Vec64 + Sync,
{
    fn predict(&self, x: &[f64], sigma: f64) -> Result<Vec64> {
        Ok(self(x, sigma))
    }
}

impl<F> ResidualModel for F
where
    F: Fn(&[f64], f64) -> f64 + Sync,
{
    fn residual(&self, x: &[f64], sigma: f64) -> Result<f64> {
        Ok(self(x, sigma))
    }
}

fn check_input(net: &MlpNet, x: &[f64]) -> Result<()> {
    if x.len() + 1 != net.input_dim() {
        return Err(Error::DimMismatch {
            expected: net.input_dim() - 1,
            actual: x.len(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    net: MlpNet,
}

impl Denoiser {
    /// Five affine layers, four hidden layers of width 128.
    pub fn architecture(n: usize) -> Vec<usize> {
        vec![n + 1, HIDDEN_WIDTH, HIDDEN_WIDTH, HIDDEN_WIDTH, HIDDEN_WIDTH, n]
    }

    pub fn new(net: MlpNet) -> Result<Self> {
        if net.role() != Role::Denoiser {
            return Err(Error::ShapeMismatch("expected a denoiser network".into()));
        }
        Ok(Self { net })
    }

    pub fn init(n: usize, rng: &mut Rng) -> Result<Self> {
        Self::new(MlpNet::init(Role::Denoiser, &Self::architecture(n), rng)?)
    }

    pub fn dim(&self) -> usize {
        self.net.output_dim()
    }

    pub fn net(&self) -> &MlpNet {
        &self.net
    }

    pub fn into_net(self) -> MlpNet {
        self.net
    }
}

impl EpsilonModel for Denoiser {
    fn predict(&self, x: &[f64], sigma: f64) -> Result<Vec64> {
        check_input(&self.net, x)?;
        let pre = Preconditioner::for_dim(x.len());
        let mut out = self.net.forward(&pre.feature_vec(x, sigma))?;
        let (skip, scale) = (pre.c_skip(sigma), pre.c_out(sigma));
        for (o, xi) in out.iter_mut().zip(x) {
            *o = skip * xi + scale * *o;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corrector {
    net: MlpNet,
}

impl Corrector {
    /// Two affine layers with one hidden layer of width 128.
    pub fn architecture(n: usize) -> Vec<usize> {
        vec![n + 1, HIDDEN_WIDTH, 1]
    }

    pub fn new(net: MlpNet) -> Result<Self> {
        if net.role() != Role::Corrector {
            return Err(Error::ShapeMismatch("expected a corrector network".into()));
        }
        Ok(Self { net })
    }

    pub fn init(n: usize, rng: &mut Rng) -> Result<Self> {
        Self::new(MlpNet::init(Role::Corrector, &Self::architecture(n), rng)?)
    }

    pub fn net(&self) -> &MlpNet {
        &self.net
    }

    pub fn into_net(self) -> MlpNet {
        self.net
    }
}

impl ResidualModel for Corrector {
    fn residual(&self, x: &[f64], sigma: f64) -> Result<f64> {
        check_input(&self.net, x)?;
        let pre = Preconditioner::for_dim(x.len());
        Ok(self.net.forward(&pre.feature_vec(x, sigma))?[0])
    }
}
