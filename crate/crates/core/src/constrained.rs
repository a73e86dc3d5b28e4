//! Linear constraints `A x = y` and the two constrained samplers.
//!
//! The constraint projection is `A†y + (I − A†A) x̂`, evaluated as
//! `x̂ + A†(y − A x̂)` which is algebraically identical and loses less
//! precision when `x̂` is nearly feasible.
//!
//! Both samplers follow the same symbol conventions: `α` is the geometric
//! decay of the iterative schedule and `η` the noise-mixing weight. (One
//! prose description of the iterative method calls its decay factor `η`;
//! the algorithm listing uses `α`, and so does this module.)

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{sidecar_path, write_atomic, write_json_atomic, ByteReader, ByteWriter};
use crate::manifold::ManifoldSpec;
use crate::numeric::{distance, pseudo_inverse, Mat64, Rng, Vec64};
use crate::neural::EpsilonModel;
use crate::sampler::{
    corrected_sigma, direction, noise_split, one_step_estimate, Nlc, SamplerConfig, StepRecord, Trajectory,
};
use crate::schedule::NoiseSchedule;

const OPERATOR_MAGIC: &[u8; 4] = b"NLCA";
pub const OPERATOR_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OperatorKind {
    RandomRow,
    CoordinateMask,
    Custom,
}

/// Wide full-row-rank operator with its cached pseudo-inverse.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearOperator {
    a: Mat64,
    a_pinv: Mat64,
    kind: OperatorKind,
    seed: Option<u64>,
}

/// JSON manifest written next to a saved operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorManifest {
    pub magic: String,
    pub version: u32,
    pub kind: OperatorKind,
    pub rows: usize,
    pub cols: usize,
    pub seed: Option<u64>,
}

impl LinearOperator {
    pub fn new(a: Mat64, kind: OperatorKind) -> Result<Self> {
        let (rows, cols) = a.shape();
        if rows == 0 || rows > cols {
            return Err(Error::ShapeMismatch(format!(
                "constraint operator must be wide with at least one row, got {rows}x{cols}"
            )));
        }
        if !a.is_finite() {
            return Err(Error::InvalidRange("constraint operator has non-finite entries".into()));
        }
        let a_pinv = pseudo_inverse(&a)?;
        Ok(Self {
            a,
            a_pinv,
            kind,
            seed: None,
        })
    }

    /// Gaussian `rows × n` operator. Rank deficiency has probability zero;
    /// a numerically deficient draw is simply redrawn.
    pub fn random_rows(rows: usize, n: usize, rng: &mut Rng) -> Result<Self> {
        let seed = rng.seed();
        let mut last = None;
        for _ in 0..8 {
            match Self::new(Mat64::gaussian(rows, n, rng), OperatorKind::RandomRow) {
                Ok(mut op) => {
                    op.seed = Some(seed);
                    return Ok(op);
                }
                Err(e @ Error::RankDeficient { .. }) => last = Some(e),
                Err(e) => return Err(e),
            }
        }
        Err(last.expect("loop ran"))
    }

    /// Selects the listed coordinates, `(A x)_i = x[coords[i]]`.
    pub fn coordinate_mask(n: usize, coords: &[usize]) -> Result<Self> {
        let mut a = Mat64::zeros(coords.len(), n);
        for (i, &c) in coords.iter().enumerate() {
            if c >= n {
                return Err(Error::InvalidRange(format!("coordinate {c} outside 0..{n}")));
            }
            a[(i, c)] = 1.0;
        }
        Self::new(a, OperatorKind::CoordinateMask)
    }

    pub fn a(&self) -> &Mat64 {
        &self.a
    }

    pub fn a_pinv(&self) -> &Mat64 {
        &self.a_pinv
    }

    pub fn kind(&self) -> OperatorKind {
        self.kind
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn rows(&self) -> usize {
        self.a.rows()
    }

    pub fn cols(&self) -> usize {
        self.a.cols()
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec64> {
        self.a.matvec(x)
    }

    /// `‖A x − y‖`.
    pub fn consistency(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        if y.len() != self.rows() {
            return Err(Error::DimMismatch {
                expected: self.rows(),
                actual: y.len(),
            });
        }
        Ok(distance(&self.apply(x)?, y))
    }

    pub fn manifest(&self) -> OperatorManifest {
        OperatorManifest {
            magic: String::from_utf8_lossy(OPERATOR_MAGIC).into_owned(),
            version: OPERATOR_VERSION,
            kind: self.kind,
            rows: self.rows(),
            cols: self.cols(),
            seed: self.seed,
        }
    }

    /// `"NLCA" | version u32 | rows u32 | cols u32 | A row-major | A† row-major`,
    /// little-endian throughout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.bytes(OPERATOR_MAGIC);
        w.u32(OPERATOR_VERSION);
        w.u32(self.rows() as u32);
        w.u32(self.cols() as u32);
        w.f64s(self.a.as_slice());
        w.f64s(self.a_pinv.as_slice());
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8], manifest: Option<&OperatorManifest>) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != OPERATOR_MAGIC {
            return Err(Error::CorruptPayload("bad operator magic".into()));
        }
        let version = r.u32()?;
        if version != OPERATOR_VERSION {
            return Err(Error::VersionMismatch {
                expected: OPERATOR_VERSION,
                found: version,
            });
        }
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let a = Mat64::from_vec(rows, cols, r.f64s(rows * cols)?)?;
        let a_pinv = Mat64::from_vec(cols, rows, r.f64s(rows * cols)?)?;
        if !r.is_empty() {
            return Err(Error::CorruptPayload("trailing bytes after operator".into()));
        }
        if let Some(m) = manifest {
            if (m.rows, m.cols) != (rows, cols) {
                return Err(Error::ShapeMismatch(format!(
                    "manifest says {}x{}, payload is {rows}x{cols}",
                    m.rows, m.cols
                )));
            }
        }
        Ok(Self {
            a,
            a_pinv,
            kind: manifest.map_or(OperatorKind::Custom, |m| m.kind),
            seed: manifest.and_then(|m| m.seed),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        write_atomic(path, &self.to_bytes())?;
        write_json_atomic(sidecar_path(path), &self.manifest())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let side = sidecar_path(path);
        let manifest = if side.exists() {
            Some(serde_json::from_slice::<OperatorManifest>(&fs::read(side)?)?)
        } else {
            None
        };
        Self::from_bytes(&fs::read(path)?, manifest.as_ref())
    }
}

/// `A†y + (I − A†A) x̂`: the closest point to `x̂` with `A x = y`.
pub fn project_constraint(op: &LinearOperator, y: &[f64], x_hat: &[f64]) -> Result<Vec64> {
    if x_hat.len() != op.cols() {
        return Err(Error::DimMismatch {
            expected: op.cols(),
            actual: x_hat.len(),
        });
    }
    if y.len() != op.rows() {
        return Err(Error::DimMismatch {
            expected: op.rows(),
            actual: y.len(),
        });
    }
    let ax = op.apply(x_hat)?;
    let resid: Vec<f64> = y.iter().zip(ax.iter()).map(|(yi, ai)| yi - ai).collect();
    let fix = op.a_pinv.matvec(&resid)?;
    Ok(x_hat.iter().zip(fix.iter()).map(|(x, f)| x + f).collect::<Vec<_>>().into())
}

/// DDNM with noise-level correction. Each step corrects the level, takes
/// the one-step estimate, projects it onto the constraint, and re-noises:
/// `x_{t−1} = x_{0|t} + σ_signal ε̂_t + σ_noise ω_t`, starting from
/// `x_T = √(σ_T² + 1) z_T`. At the terminal level the unprojected estimate
/// `x_t − σ̂_t ε̂_t` is returned, as for the unconstrained samplers; each
/// record's `consistency` is `‖A x_{0|t} − y‖` of the projected estimate.
///
/// `config` supplies `η`, the normalisation flag and the correction mode;
/// its algorithm must be DDIM or DDPM.
pub fn sample_ddnm_nlc(
    model: &dyn EpsilonModel,
    nlc: &Nlc,
    schedule: &NoiseSchedule,
    op: &LinearOperator,
    y: &[f64],
    config: &SamplerConfig,
    rng: &mut Rng,
) -> Result<(Vec64, Trajectory)> {
    config.validate()?;
    if !config.algorithm.allows_normalization() {
        return Err(Error::Config("the constrained sampler runs on DDIM/DDPM steps".into()));
    }
    if nlc.mode() != config.nlc_mode {
        return Err(Error::Config(format!(
            "config asks for {:?} correction but {:?} was supplied",
            config.nlc_mode,
            nlc.mode()
        )));
    }
    if schedule.is_empty() {
        return Err(Error::ScheduleExhausted("empty schedule".into()));
    }
    let n = op.cols();
    let top = schedule.largest();
    let mut x = rng.gaussian_vec(n);
    x.iter_mut().for_each(|v| *v *= (top * top + 1.0).sqrt());
    let mut records = Vec::with_capacity(schedule.len() + 1);
    for k in 0..schedule.len() {
        let (sigma, next) = (schedule.sigma(k), schedule.next_sigma(k));
        let mut rec = StepRecord::new(k, sigma, next, x.clone());
        let (sigma_hat, r) = corrected_sigma(nlc, &x, sigma)?;
        let (eps, dir_norm) = direction(model, &x, sigma_hat, config.normalize_direction)?;
        let estimate = one_step_estimate(&x, sigma_hat, &eps);
        let projected = project_constraint(op, y, &estimate)?;
        rec.sigma_hat = sigma_hat;
        rec.r = r;
        rec.dir_norm = dir_norm;
        rec.consistency = Some(op.consistency(&projected, y)?);
        records.push(rec);
        if next == 0.0 {
            x = estimate;
            break;
        }
        let next_hat = sigma_hat * next / sigma;
        let (signal, noise) = noise_split(sigma_hat, next_hat, config.eta);
        x = projected;
        for (xi, ei) in x.iter_mut().zip(eps.iter()) {
            *xi += signal * ei;
        }
        if noise > 0.0 {
            let omega = rng.gaussian_vec(n);
            for (xi, wi) in x.iter_mut().zip(omega.iter()) {
                *xi += noise * wi;
            }
        }
    }
    records.push(StepRecord::terminal(schedule.len(), x.clone()));
    Ok((x, Trajectory { records }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterProjConfig {
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub sigma_restart: f64,
    pub alpha: f64,
    pub eta: f64,
    pub k_max: usize,
    pub stop_tol: f64,
    pub normalize_direction: bool,
}

impl IterProjConfig {
    pub const DEFAULT_SIGMA_MAX: f64 = 10.0;
    pub const DEFAULT_SIGMA_MIN: f64 = 0.01;

    /// Defaults for data in `R^n`: `α = 0.95`, `η = 0.2`,
    /// `σ_restart = 0.1 σ_max`, `K_max = 200`, `stop_tol = 1e-4 √n`.
    pub fn for_dim(n: usize) -> Self {
        let sigma_max = Self::DEFAULT_SIGMA_MAX;
        Self {
            sigma_max,
            sigma_min: Self::DEFAULT_SIGMA_MIN,
            sigma_restart: 0.1 * sigma_max,
            alpha: 0.95,
            eta: 0.2,
            k_max: 200,
            stop_tol: 1e-4 * (n as f64).sqrt(),
            normalize_direction: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.sigma_min > 0.0
            && self.sigma_min < self.sigma_restart
            && self.sigma_restart <= self.sigma_max
            && self.sigma_max.is_finite();
        if !ok {
            return Err(Error::InvalidRange(format!(
                "need 0 < sigma_min < sigma_restart <= sigma_max, got {} / {} / {}",
                self.sigma_min, self.sigma_restart, self.sigma_max
            )));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidRange(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::InvalidRange(format!("eta must lie in [0, 1], got {}", self.eta)));
        }
        if self.k_max == 0 {
            return Err(Error::InvalidRange("k_max must be positive".into()));
        }
        if !(self.stop_tol >= 0.0) {
            return Err(Error::InvalidRange("stop_tol must be non-negative".into()));
        }
        Ok(())
    }

    /// Level after `σ`: `α σ`, or `σ_restart` when that falls below `σ_min`.
    pub fn next_sigma(&self, sigma: f64) -> f64 {
        let next = self.alpha * sigma;
        if next < self.sigma_min {
            self.sigma_restart
        } else {
            next
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Converged,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iteration: usize,
    pub sigma: f64,
    pub sigma_hat: f64,
    pub r: f64,
    pub dir_norm: f64,
    /// `‖A x_{0|k} − y‖`.
    pub consistency: f64,
    /// `‖x_{0|k} − x_{0|k−1}‖`; absent on the first iteration.
    pub delta_x: Option<f64>,
    pub dist: Option<f64>,
    pub restarted: bool,
    /// The projected estimate `x_{0|k}`.
    pub x0: Vec64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterProjRun {
    pub sample: Vec64,
    pub stop: StopReason,
    pub records: Vec<IterRecord>,
}

impl IterProjRun {
    pub fn iterations(&self) -> usize {
        self.records.len()
    }

    pub fn restarts(&self) -> usize {
        self.records.iter().filter(|r| r.restarted).count()
    }

    /// Fills `dist` of every iterate from the exact oracle.
    pub fn annotate(&mut self, spec: &ManifoldSpec) -> Result<()> {
        for rec in &mut self.records {
            rec.dist = Some(spec.exact_distance(&rec.x0)?);
        }
        Ok(())
    }

    pub fn final_distance(&self) -> Option<f64> {
        self.records.last().and_then(|r| r.dist)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,sigma_k,sigma_hat,dist,consistency,delta_x\n");
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:e}"));
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{:e},{:e},{},{:e},{}",
                r.iteration,
                r.sigma,
                r.sigma_hat,
                opt(r.dist),
                r.consistency,
                opt(r.delta_x)
            );
        }
        out
    }
}

/// Iterative projection with noise-level correction. Starting from
/// `x_(0) = σ_max ε`, every iteration projects onto the data manifold with
/// the corrected one-step estimate, projects onto the constraint, decays
/// (or restarts) the level and re-noises with
/// `ε̃ = √(1 − η²) ε̂ + η ε`. The run stops after iteration `K_max` or once
/// `‖x_{0|k} − x_{0|k−1}‖ < stop_tol`; either way the latest `x_{0|k}` is
/// returned.
pub fn iterproj_nlc(
    model: &dyn EpsilonModel,
    nlc: &Nlc,
    op: &LinearOperator,
    y: &[f64],
    config: &IterProjConfig,
    rng: &mut Rng,
) -> Result<IterProjRun> {
    config.validate()?;
    let n = op.cols();
    let mut x = rng.gaussian_vec(n);
    x.iter_mut().for_each(|v| *v *= config.sigma_max);
    let mut sigma = config.sigma_max;
    let mut restarted = false;
    let mut prev: Option<Vec64> = None;
    let mut records = Vec::new();
    let mix = (1.0 - config.eta * config.eta).sqrt();
    for k in 0.. {
        let (sigma_hat, r) = corrected_sigma(nlc, &x, sigma)?;
        let (eps, dir_norm) = direction(model, &x, sigma_hat, config.normalize_direction)?;
        if eps.len() != n {
            return Err(Error::DimMismatch {
                expected: n,
                actual: eps.len(),
            });
        }
        let estimate = one_step_estimate(&x, sigma_hat, &eps);
        let x0 = project_constraint(op, y, &estimate)?;
        let delta_x = prev.as_ref().map(|p| distance(p, &x0));
        records.push(IterRecord {
            iteration: k,
            sigma,
            sigma_hat,
            r,
            dir_norm,
            consistency: op.consistency(&x0, y)?,
            delta_x,
            dist: None,
            restarted,
            x0: x0.clone(),
        });
        let converged = delta_x.is_some_and(|d| d < config.stop_tol);
        if converged || k >= config.k_max {
            let stop = if converged {
                StopReason::Converged
            } else {
                StopReason::MaxIterations
            };
            log::debug!("iterative projection stopped after {} iterations ({stop:?})", k + 1);
            return Ok(IterProjRun {
                sample: x0,
                stop,
                records,
            });
        }
        let next = config.next_sigma(sigma);
        restarted = next > sigma;
        sigma = next;
        let fresh = rng.gaussian_vec(n);
        x = x0.clone();
        for ((xi, ei), wi) in x.iter_mut().zip(eps.iter()).zip(fresh.iter()) {
            *xi += sigma * (mix * ei + config.eta * wi);
        }
        prev = Some(x0);
    }
    unreachable!("the iteration loop only exits by returning")
}
