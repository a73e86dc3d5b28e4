//! Training objectives and the optimisation loop.
//!
//! Both objectives draw, per batch element and in this order: the noise
//! level index `t` (uniform over the schedule), then `ε ~ N(0, I)`, then
//! (corrector only) the scale `λ ~ U(1 − δ, 1 + δ)`.
//!
//! The corrector objective needs no denoiser: its target is the true
//! perturbation magnitude `σ_t λ ‖ε‖`.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::Dataset;
use crate::neural::{
    adam_step, AdamState, EpsilonModel, Gradients, MlpNet, Preconditioner, Role,
    DEFAULT_LEARNING_RATE,
};
use crate::numeric::{norm, Mat64, Rng, Vec64};
use crate::schedule::NoiseSchedule;

pub const DEFAULT_BATCH_SIZE: usize = 128;
pub const DEFAULT_DELTA: f64 = 0.5;
pub const DEFAULT_DENOISER_ITERATIONS: usize = 50_000;
pub const DEFAULT_CORRECTOR_ITERATIONS: usize = 20_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub lr: f64,
    pub delta: f64,
    pub seed: u64,
    pub report_interval: usize,
}

impl TrainConfig {
    pub fn denoiser(seed: u64) -> Self {
        Self {
            batch_size: DEFAULT_BATCH_SIZE,
            iterations: DEFAULT_DENOISER_ITERATIONS,
            lr: DEFAULT_LEARNING_RATE,
            delta: DEFAULT_DELTA,
            seed,
            report_interval: 100,
        }
    }

    pub fn corrector(seed: u64) -> Self {
        Self {
            iterations: DEFAULT_CORRECTOR_ITERATIONS,
            ..Self::denoiser(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.iterations == 0 || self.report_interval == 0 {
            return Err(Error::InvalidRange(
                "batch size, iterations and report interval must be >= 1".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidRange(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.delta) {
            return Err(Error::InvalidRange(format!("delta must lie in [0, 1), got {}", self.delta)));
        }
        Ok(())
    }
}

/// Loss curve plus run identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub role: Role,
    pub config: TrainConfig,
    /// `(iteration, mean loss over the preceding interval)`.
    pub losses: Vec<(usize, f64)>,
    pub final_loss: f64,
    pub seed: u64,
    pub checkpoint: Option<String>,
    /// Kept out of the serialized report so reruns are byte-identical.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,loss\n");
        for (it, loss) in &self.losses {
            out.push_str(&format!("{it},{loss:e}\n"));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: MlpNet,
    pub adam: AdamState,
    pub report: TrainReport,
}

fn check_batch(net: &MlpNet, batch: &[Vec64], role: Role) -> Result<usize> {
    if net.role() != role {
        return Err(Error::ShapeMismatch(format!("expected a {role:?} network")));
    }
    let first = batch
        .first()
        .ok_or_else(|| Error::InvalidRange("batch must be non-empty".into()))?;
    let n = first.len();
    if n + 1 != net.input_dim() {
        return Err(Error::DimMismatch {
            expected: net.input_dim() - 1,
            actual: n,
        });
    }
    if let Some(bad) = batch.iter().find(|x| x.len() != n) {
        return Err(Error::DimMismatch {
            expected: n,
            actual: bad.len(),
        });
    }
    Ok(n)
}

/// Denoising objective `mean ‖ε_θ(x₀ + σ_t ε, σ_t) − ε‖²` and its exact
/// gradient for one stochastic draw. `ε_θ` includes the skip connection of
/// [`Preconditioner`], so the network gradient carries a `c_out` factor.
pub fn denoiser_loss_and_grads(
    net: &MlpNet,
    batch: &[Vec64],
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<(f64, Gradients)> {
    let n = check_batch(net, batch, Role::Denoiser)?;
    let pre = Preconditioner::for_dim(n);
    let b = batch.len();
    let mut input = Mat64::zeros(b, n + 1);
    // Per row: the skip part minus the true noise, and c_out.
    let mut offset = Mat64::zeros(b, n);
    let mut out_scale = Vec::with_capacity(b);
    let mut xt = vec![0.0; n];
    for (i, x0) in batch.iter().enumerate() {
        let sigma = schedule.sigma(rng.below(schedule.len()));
        let eps = rng.gaussian_vec(n);
        for j in 0..n {
            xt[j] = x0[j] + sigma * eps[j];
        }
        pre.features(&xt, sigma, input.row_mut(i));
        let skip = pre.c_skip(sigma);
        for ((o, x), e) in offset.row_mut(i).iter_mut().zip(&xt).zip(eps.iter()) {
            *o = skip * x - e;
        }
        out_scale.push(pre.c_out(sigma));
    }
    let (out, cache) = net.forward_cached(input)?;
    let mut upstream = out;
    let mut loss = 0.0;
    for i in 0..b {
        let scale = out_scale[i];
        for (o, off) in upstream.row_mut(i).iter_mut().zip(offset.row(i)) {
            let diff = scale * *o + off;
            loss += diff * diff;
            *o = 2.0 * diff * scale / b as f64;
        }
    }
    let grads = net.backward_cached(&cache, &upstream)?;
    Ok((loss / b as f64, grads))
}

/// Value of the denoising objective for an arbitrary noise predictor,
/// consuming the same draws as [`denoiser_loss_and_grads`].
pub fn denoiser_objective(
    model: &dyn EpsilonModel,
    batch: &[Vec64],
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<f64> {
    let mut loss = 0.0;
    let mut xt = Vec::new();
    for x0 in batch {
        let sigma = schedule.sigma(rng.below(schedule.len()));
        let eps = rng.gaussian_vec(x0.len());
        xt.clear();
        xt.extend(x0.iter().zip(eps.iter()).map(|(a, e)| a + sigma * e));
        let pred = model.predict(&xt, sigma)?;
        loss += pred.iter().zip(eps.iter()).map(|(p, e)| (p - e) * (p - e)).sum::<f64>();
    }
    Ok(loss / batch.len().max(1) as f64)
}

/// Noise-level objective
/// `mean (√n σ_t (1 + r_θ(x̂_t, σ_t)) − σ_t λ ‖ε‖)²` with
/// `x̂_t = x₀ + σ_t λ ε`, and its exact gradient for one stochastic draw.
pub fn nlc_loss_and_grads(
    corrector: &MlpNet,
    batch: &[Vec64],
    schedule: &NoiseSchedule,
    delta: f64,
    rng: &mut Rng,
) -> Result<(f64, Gradients)> {
    let n = check_batch(corrector, batch, Role::Corrector)?;
    let pre = Preconditioner::for_dim(n);
    if !(0.0..1.0).contains(&delta) {
        return Err(Error::InvalidRange(format!("delta must lie in [0, 1), got {delta}")));
    }
    let b = batch.len();
    let root_n = (n as f64).sqrt();
    let mut input = Mat64::zeros(b, n + 1);
    let mut sigmas = Vec::with_capacity(b);
    let mut targets = Vec::with_capacity(b);
    let mut xt = vec![0.0; n];
    for (i, x0) in batch.iter().enumerate() {
        let sigma = schedule.sigma(rng.below(schedule.len()));
        let eps = rng.gaussian_vec(n);
        let lambda = rng.uniform_range(1.0 - delta, 1.0 + delta);
        for j in 0..n {
            xt[j] = x0[j] + sigma * lambda * eps[j];
        }
        pre.features(&xt, sigma, input.row_mut(i));
        sigmas.push(sigma);
        targets.push(sigma * lambda * norm(&eps));
    }
    let (out, cache) = corrector.forward_cached(input)?;
    let mut upstream = out;
    let mut loss = 0.0;
    for (i, r) in upstream.as_mut_slice().iter_mut().enumerate() {
        let scale = root_n * sigmas[i];
        let resid = scale * (1.0 + *r) - targets[i];
        loss += resid * resid;
        *r = 2.0 * resid * scale / b as f64;
    }
    let grads = corrector.backward_cached(&cache, &upstream)?;
    Ok((loss / b as f64, grads))
}

/// Batch of `size` points drawn with replacement.
pub fn draw_batch(dataset: &Dataset, size: usize, rng: &mut Rng) -> Vec<Vec64> {
    (0..size)
        .map(|_| dataset.points[rng.below(dataset.points.len())].clone())
        .collect()
}

/// Fits a fresh network of the role's toy architecture.
///
/// The parameter initialisation uses `fork(0)` of the seed and all batch
/// and noise draws use `fork(1)`, so runs are reproducible from the seed.
pub fn train(role: Role, config: &TrainConfig, dataset: &Dataset, schedule: &NoiseSchedule) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.points.is_empty() {
        return Err(Error::InvalidRange("dataset is empty".into()));
    }
    let n = dataset.spec.n();
    let root = Rng::new(config.seed);
    let dims = match role {
        Role::Denoiser => crate::neural::Denoiser::architecture(n),
        Role::Corrector => crate::neural::Corrector::architecture(n),
    };
    let net = MlpNet::init(role, &dims, &mut root.fork(0))?;
    train_from(net, config, dataset, schedule)
}

/// Continues training `net` from its current parameters.
pub fn train_from(
    mut net: MlpNet,
    config: &TrainConfig,
    dataset: &Dataset,
    schedule: &NoiseSchedule,
) -> Result<TrainOutcome> {
    config.validate()?;
    let role = net.role();
    let mut rng = Rng::new(config.seed).fork(1);
    let mut adam = AdamState::new(&net, config.lr);
    let start = Instant::now();
    let mut losses = Vec::with_capacity(config.iterations / config.report_interval);
    let mut window = 0.0;
    let mut last = f64::NAN;
    for it in 1..=config.iterations {
        let batch = draw_batch(dataset, config.batch_size, &mut rng);
        let (loss, grads) = match role {
            Role::Denoiser => denoiser_loss_and_grads(&net, &batch, schedule, &mut rng)?,
            Role::Corrector => nlc_loss_and_grads(&net, &batch, schedule, config.delta, &mut rng)?,
        };
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: it });
        }
        adam_step(&mut adam, &mut net, &grads)?;
        window += loss;
        last = loss;
        if it % config.report_interval == 0 {
            let mean = window / config.report_interval as f64;
            log::info!("{role:?} iteration {it}: loss {mean:.6}");
            losses.push((it, mean));
            window = 0.0;
        }
    }
    let report = TrainReport {
        role,
        config: *config,
        final_loss: losses.last().map_or(last, |&(_, l)| l),
        losses,
        seed: config.seed,
        checkpoint: None,
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome { net, adam, report })
}
