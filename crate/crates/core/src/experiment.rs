//! Diagnostics over many sampling runs: distance and bias curves, the
//! initial-distance check and side-by-side comparisons.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::ManifoldSpec;
use crate::numeric::{derive_seed, Rng};
use crate::sampler::{relative_bias, Trajectory};

pub const DEFAULT_SEEDS: usize = 256;

/// Relative distance-estimation bias of every noisy step.
pub fn bias_series(trajectory: &Trajectory, spec: &ManifoldSpec) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(trajectory.len());
    for rec in &trajectory.records {
        if rec.sigma > 0.0 {
            let dist = spec.exact_distance(&rec.x)?;
            out.extend(relative_bias(dist, rec.sigma_hat, rec.sigma, rec.x.len()));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    /// Mean and sample standard deviation; needs at least two values.
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::ShapeMismatch(format!(
                "aggregates need at least 2 values, got {}",
                values.len()
            )));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Ok(Self { mean, std: var.sqrt() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialDistanceStats {
    pub sigma_t: f64,
    pub num_samples: usize,
    pub mean_dist_sq: f64,
    pub std_dist_sq: f64,
    /// `n σ_T²`.
    pub threshold: f64,
    pub exceeds: bool,
}

/// Mean squared distance of `x_T = √(σ_T² + 1) z_T` to the manifold,
/// against the noise-level prediction `n σ_T²`.
pub fn initial_distance_check(
    spec: &ManifoldSpec,
    sigma_t: f64,
    num_samples: usize,
    rng: &mut Rng,
) -> Result<InitialDistanceStats> {
    if num_samples < 100 {
        return Err(Error::InvalidRange(format!("need at least 100 samples, got {num_samples}")));
    }
    if !(sigma_t >= 0.0 && sigma_t.is_finite()) {
        return Err(Error::InvalidRange(format!("sigma_T must be finite and non-negative, got {sigma_t}")));
    }
    let n = spec.n();
    let scale = (sigma_t * sigma_t + 1.0).sqrt();
    let mut sq = Vec::with_capacity(num_samples);
    for _ in 0..num_samples {
        let mut x = rng.gaussian_vec(n);
        x.iter_mut().for_each(|v| *v *= scale);
        sq.push(spec.exact_distance(&x)?.powi(2));
    }
    let stat = Stat::of(&sq)?;
    let threshold = n as f64 * sigma_t * sigma_t;
    Ok(InitialDistanceStats {
        sigma_t,
        num_samples,
        mean_dist_sq: stat.mean,
        std_dist_sq: stat.std,
        threshold,
        exceeds: stat.mean > threshold,
    })
}

/// Seeds for `count` runs derived from `base`; the same base always gives
/// the same list.
pub fn run_seeds(base: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| derive_seed(base, i)).collect()
}

/// Runs `job` once per seed on a pool of `jobs` workers (0 = all cores).
/// Each call gets a fresh generator built from its seed, and results come
/// back in seed order, so the output never depends on the worker count.
pub fn par_map_seeds<T, F>(seeds: &[u64], jobs: usize, job: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64, &mut Rng) -> Result<T> + Sync,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| {
        seeds
            .par_iter()
            .map(|&s| job(s, &mut Rng::new(s)))
            .collect::<Result<Vec<T>>>()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub label: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub steps: usize,
    /// Scheduled level of each noisy step.
    pub sigma: Vec<f64>,
    pub sigma_hat: Vec<Stat>,
    pub dist: Vec<Stat>,
    pub bias: Vec<Stat>,
    pub abs_bias: Vec<Stat>,
    /// Present when the runs recorded constraint consistency.
    pub consistency: Option<Vec<Stat>>,
    pub final_distance: Stat,
    pub final_consistency: Option<Stat>,
}

impl RunReport {
    /// Aggregates annotated trajectories (one per seed, all of the same
    /// length). `final_consistency` holds `‖A x − y‖` of each final sample
    /// for constrained runs.
    pub fn from_trajectories(
        label: impl Into<String>,
        config: serde_json::Value,
        seeds: Vec<u64>,
        trajectories: &[Trajectory],
        final_consistency: Option<&[f64]>,
    ) -> Result<Self> {
        if trajectories.len() < 2 || trajectories.len() != seeds.len() {
            return Err(Error::ShapeMismatch(format!(
                "need one trajectory per seed and at least 2, got {} for {} seeds",
                trajectories.len(),
                seeds.len()
            )));
        }
        let len = trajectories[0].len();
        if len < 2 || trajectories.iter().any(|t| t.len() != len) {
            return Err(Error::ShapeMismatch("trajectories differ in length".into()));
        }
        let steps = len - 1;
        let column = |k: usize, f: &dyn Fn(&crate::sampler::StepRecord) -> Option<f64>| -> Result<Vec<f64>> {
            trajectories
                .iter()
                .map(|t| {
                    f(&t.records[k]).ok_or_else(|| Error::Config("trajectory is not annotated".into()))
                })
                .collect()
        };
        let mut sigma_hat = Vec::with_capacity(steps);
        let mut dist = Vec::with_capacity(steps);
        let mut bias = Vec::with_capacity(steps);
        let mut abs_bias = Vec::with_capacity(steps);
        for k in 0..steps {
            sigma_hat.push(Stat::of(&column(k, &|r| Some(r.sigma_hat))?)?);
            dist.push(Stat::of(&column(k, &|r| r.dist)?)?);
            let b = column(k, &|r| r.bias)?;
            bias.push(Stat::of(&b)?);
            abs_bias.push(Stat::of(&b.iter().map(|v| v.abs()).collect::<Vec<_>>())?);
        }
        let consistency = if trajectories[0].records[0].consistency.is_some() {
            Some(
                (0..steps)
                    .map(|k| Stat::of(&column(k, &|r| r.consistency)?))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        let final_distance = Stat::of(&column(steps, &|r| r.dist)?)?;
        let final_consistency = final_consistency.map(Stat::of).transpose()?;
        Ok(Self {
            label: label.into(),
            config,
            seeds,
            steps,
            sigma: trajectories[0].records[..steps].iter().map(|r| r.sigma).collect(),
            sigma_hat,
            dist,
            bias,
            abs_bias,
            consistency,
            final_distance,
            final_consistency,
        })
    }

    /// Report carrying only final-sample statistics, for runs whose length
    /// varies per seed (the iterative projection stops adaptively).
    pub fn from_finals(
        label: impl Into<String>,
        config: serde_json::Value,
        seeds: Vec<u64>,
        final_distances: &[f64],
        final_consistency: Option<&[f64]>,
    ) -> Result<Self> {
        if final_distances.len() != seeds.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} final distances for {} seeds",
                final_distances.len(),
                seeds.len()
            )));
        }
        Ok(Self {
            label: label.into(),
            config,
            seeds,
            steps: 0,
            sigma: vec![],
            sigma_hat: vec![],
            dist: vec![],
            bias: vec![],
            abs_bias: vec![],
            consistency: None,
            final_distance: Stat::of(final_distances)?,
            final_consistency: final_consistency.map(Stat::of).transpose()?,
        })
    }

    /// Plot-ready rows `method,step,metric,mean,std` (no header).
    pub fn long_rows(&self, out: &mut String) {
        let mut series: Vec<(&str, &[Stat])> = vec![
            ("sigma_hat", &self.sigma_hat),
            ("dist", &self.dist),
            ("bias", &self.bias),
            ("abs_bias", &self.abs_bias),
        ];
        if let Some(c) = &self.consistency {
            series.push(("consistency", c));
        }
        for (name, values) in series {
            for (k, s) in values.iter().enumerate() {
                let _ = writeln!(out, "{},{k},{name},{:e},{:e}", self.label, s.mean, s.std);
            }
        }
        let f = &self.final_distance;
        let _ = writeln!(out, "{},{},final_distance,{:e},{:e}", self.label, self.steps, f.mean, f.std);
        if let Some(c) = &self.final_consistency {
            let _ = writeln!(out, "{},{},final_consistency,{:e},{:e}", self.label, self.steps, c.mean, c.std);
        }
    }
}

/// Long-format CSV of several reports.
pub fn long_csv(reports: &[RunReport]) -> String {
    let mut out = String::from("method,step,metric,mean,std\n");
    for r in reports {
        r.long_rows(&mut out);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub means: Vec<f64>,
    /// Index of the lowest mean (first one on ties); lower is better for
    /// every metric compared.
    pub winner: usize,
    /// `(baseline − value)/baseline` against the first report.
    pub improvement: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub methods: Vec<String>,
    pub rows: Vec<MetricRow>,
}

impl ComparisonTable {
    pub fn row(&self, metric: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.metric == metric)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric");
        for m in &self.methods {
            let _ = write!(out, ",{m}");
        }
        out.push_str(",winner\n");
        for row in &self.rows {
            out.push_str(&row.metric);
            for v in &row.means {
                let _ = write!(out, ",{v:e}");
            }
            let _ = writeln!(out, ",{}", self.methods[row.winner]);
        }
        out
    }
}

fn metric_row(metric: &str, means: Vec<f64>) -> MetricRow {
    let winner = means
        .iter()
        .enumerate()
        .fold(0, |best, (i, v)| if *v < means[best] { i } else { best });
    let base = means[0];
    let improvement = means
        .iter()
        .map(|v| if base == *v { 0.0 } else { (base - v) / base })
        .collect();
    MetricRow {
        metric: metric.into(),
        means,
        winner,
        improvement,
    }
}

/// Side-by-side final distance, mean |bias| over all noisy steps, |bias|
/// over the last three steps and (when every report has it) final
/// consistency. The first report is the baseline for improvements.
///
/// Reports with per-step series must agree on the step count. Final-only
/// reports (`steps == 0`) may join any comparison; the bias rows are then
/// left out.
pub fn compare(reports: &[RunReport]) -> Result<ComparisonTable> {
    if reports.len() < 2 {
        return Err(Error::ShapeMismatch(format!(
            "comparison needs at least 2 reports, got {}",
            reports.len()
        )));
    }
    let stepped: Vec<usize> = reports.iter().map(|r| r.steps).filter(|&s| s > 0).collect();
    if stepped.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::ShapeMismatch("reports differ in step count".into()));
    }
    let mut rows = vec![metric_row(
        "final_distance",
        reports.iter().map(|r| r.final_distance.mean).collect(),
    )];
    if stepped.len() == reports.len() {
        let mean_of = |s: &[Stat]| s.iter().map(|v| v.mean).sum::<f64>() / s.len() as f64;
        let tail = stepped[0].saturating_sub(3);
        rows.push(metric_row("mean_abs_bias", reports.iter().map(|r| mean_of(&r.abs_bias)).collect()));
        rows.push(metric_row(
            "late_abs_bias",
            reports.iter().map(|r| mean_of(&r.abs_bias[tail..])).collect(),
        ));
    }
    if reports.iter().all(|r| r.final_consistency.is_some()) {
        rows.push(metric_row(
            "final_consistency",
            reports.iter().map(|r| r.final_consistency.unwrap().mean).collect(),
        ));
    }
    Ok(ComparisonTable {
        methods: reports.iter().map(|r| r.label.clone()).collect(),
        rows,
    })
}
