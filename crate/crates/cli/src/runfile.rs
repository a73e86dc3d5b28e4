//! On-disk result of `sample` and `restore`: one entry per seed, in seed
//! order, plus the resolved configuration that produced it.

use std::fs;
use std::path::Path;

use nlc_core::constrained::{IterProjRun, StopReason};
use nlc_core::io::write_atomic;
use nlc_core::numeric::Vec64;
use nlc_core::sampler::Trajectory;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const RUN_FORMAT: &str = "nlc-run";
pub const RUN_VERSION: u32 = 1;

/// One iteration of an iterative-projection run without its iterate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterStep {
    pub iteration: usize,
    pub sigma: f64,
    pub sigma_hat: f64,
    pub r: f64,
    pub consistency: f64,
    pub delta_x: Option<f64>,
    pub restarted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterSummary {
    pub sample: Vec64,
    pub stop: StopReason,
    pub restarts: usize,
    pub steps: Vec<IterStep>,
}

impl From<&IterProjRun> for IterSummary {
    fn from(run: &IterProjRun) -> Self {
        Self {
            sample: run.sample.clone(),
            stop: run.stop,
            restarts: run.restarts(),
            steps: run
                .records
                .iter()
                .map(|r| IterStep {
                    iteration: r.iteration,
                    sigma: r.sigma,
                    sigma_hat: r.sigma_hat,
                    r: r.r,
                    consistency: r.consistency,
                    delta_x: r.delta_x,
                    restarted: r.restarted,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "runs", rename_all = "kebab-case")]
pub enum Runs {
    Trajectories(Vec<Trajectory>),
    IterProj(Vec<IterSummary>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFile {
    pub format: String,
    pub version: u32,
    pub label: String,
    pub config: serde_json::Value,
    pub n: usize,
    pub seeds: Vec<u64>,
    #[serde(flatten)]
    pub runs: Runs,
    /// `‖A x − y‖` of each final sample, for constrained runs.
    pub final_consistency: Option<Vec<f64>>,
}

impl RunFile {
    pub fn new(label: String, config: serde_json::Value, n: usize, seeds: Vec<u64>, runs: Runs) -> Self {
        Self {
            format: RUN_FORMAT.into(),
            version: RUN_VERSION,
            label,
            config,
            n,
            seeds,
            runs,
            final_consistency: None,
        }
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        let mut bytes = serde_json::to_vec(self).map_err(|e| CliError::io(e.to_string()))?;
        bytes.push(b'\n');
        Ok(write_atomic(path, &bytes)?)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let run: RunFile = serde_json::from_slice(&fs::read(path)?)
            .map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
        if run.format != RUN_FORMAT || run.version != RUN_VERSION {
            return Err(CliError::io(format!(
                "{}: expected {RUN_FORMAT} v{RUN_VERSION}, found {} v{}",
                path.display(),
                run.format,
                run.version
            )));
        }
        let count = match &run.runs {
            Runs::Trajectories(t) => t.len(),
            Runs::IterProj(r) => r.len(),
        };
        if count != run.seeds.len() || run.final_consistency.as_ref().is_some_and(|c| c.len() != count) {
            return Err(CliError::io(format!("{}: run count does not match seed count", path.display())));
        }
        Ok(run)
    }

    /// Long CSV of every seed's per-step (or per-iteration) table.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        match &self.runs {
            Runs::Trajectories(trajs) => {
                for (i, (seed, t)) in self.seeds.iter().zip(trajs).enumerate() {
                    let csv = t.to_csv();
                    let mut lines = csv.lines();
                    let header = lines.next().unwrap_or_default();
                    if i == 0 {
                        out.push_str(&format!("seed,{header}\n"));
                    }
                    for line in lines {
                        out.push_str(&format!("{seed},{line}\n"));
                    }
                }
            }
            Runs::IterProj(runs) => {
                out.push_str("seed,iteration,sigma_k,sigma_hat,r,consistency,delta_x,restarted\n");
                for (seed, run) in self.seeds.iter().zip(runs) {
                    for s in &run.steps {
                        let dx = s.delta_x.map_or(String::new(), |v| format!("{v:e}"));
                        out.push_str(&format!(
                            "{seed},{},{:e},{:e},{:e},{:e},{dx},{}\n",
                            s.iteration, s.sigma, s.sigma_hat, s.r, s.consistency, s.restarted
                        ));
                    }
                }
            }
        }
        out
    }
}
