//! Command-line surface. Every struct doubles as the schema for its config
//! file section, so all fields are optional here and defaults are applied
//! when the command runs.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nlc_core::sampler::{Algorithm, NlcMode};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "nlc", version, about = "Noise-level-corrected diffusion sampling on toy manifolds")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a union-of-spheres manifold and a noisy dataset on it.
    GenData(GenDataArgs),
    /// Train the noise-prediction network.
    TrainDenoiser(TrainArgs),
    /// Train the noise-level corrector.
    TrainNlc(TrainArgs),
    /// Record corrector residuals over a sampling pass and bin them by σ.
    BuildLut(BuildLutArgs),
    /// Unconstrained sampling over many seeds.
    Sample(SampleArgs),
    /// Constrained sampling with a linear operator.
    Restore(RestoreArgs),
    /// Oracle distances and bias statistics for a run, or the initial-distance check.
    Eval(EvalArgs),
    /// Side-by-side comparison of evaluated runs.
    Report(ReportArgs),
}

/// Parses the kebab-case name of a serde enum (`ddim`, `edm-heun`, `lut`).
fn kebab<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_owned())).map_err(|_| format!("unknown value `{s}`"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    /// Linear-β DDPM training levels, subsampled.
    Ddpm,
    /// Karras ρ-schedule.
    Edm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Ddnm,
    Iterproj,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Target {
    /// `y = 0`.
    Zero,
    /// `y = A x` for a fresh clean manifold point per seed.
    Data,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct GenDataArgs {
    /// TOML file supplying defaults for any flag.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Ambient dimension [default: 100]
    #[arg(long)]
    pub n: Option<usize>,
    /// Sphere dimension [default: 1]
    #[arg(long)]
    pub d: Option<usize>,
    /// Number of spheres [default: 4]
    #[arg(long)]
    pub m: Option<usize>,
    /// Dataset size [default: 10000]
    #[arg(long)]
    pub count: Option<usize>,
    /// Per-coordinate jitter [default: 0.001]
    #[arg(long)]
    pub noise_std: Option<f64>,
    /// Spheres come from stream 0 of this seed, points from stream 1 [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dataset file; a `.json` sidecar is written next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct TrainArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Dataset file from gen-data.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// [default: 50000 for the denoiser, 20000 for the corrector]
    #[arg(long)]
    pub iterations: Option<usize>,
    /// [default: 128]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adam learning rate [default: 3e-4]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Corrector loss only: λ ~ U(1 − δ, 1 + δ) [default: 0.5]
    #[arg(long)]
    pub delta: Option<f64>,
    /// Iterations per loss-curve point [default: 100]
    #[arg(long)]
    pub report_interval: Option<usize>,
    /// Initialisation uses stream 0 of this seed, batches and noise stream 1 [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Training report (JSON).
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Loss curve (CSV).
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct BuildLutArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub denoiser: Option<PathBuf>,
    #[arg(long)]
    pub corrector: Option<PathBuf>,
    /// ddim | ddpm | edm-euler | edm-heun | dpm2 [default: ddim]
    #[arg(long, value_parser = kebab::<Algorithm>)]
    pub algo: Option<Algorithm>,
    /// [default: 10]
    #[arg(long)]
    pub steps: Option<usize>,
    /// [default: 1 for ddpm, 0 otherwise]
    #[arg(long)]
    pub eta: Option<f64>,
    /// Rescale the denoiser output to norm √n [default: false]
    #[arg(long)]
    pub normalize: Option<bool>,
    #[arg(long, value_enum)]
    pub schedule: Option<ScheduleKind>,
    /// EDM schedule only [default: 0.002]
    #[arg(long)]
    pub sigma_min: Option<f64>,
    /// EDM schedule only [default: 80]
    #[arg(long)]
    pub sigma_max: Option<f64>,
    /// EDM schedule only [default: 7]
    #[arg(long)]
    pub rho: Option<f64>,
    /// Number of sampling runs [default: 256]
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Run i uses the i-th seed derived from this one [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// [default: 64]
    #[arg(long)]
    pub bins: Option<usize>,
    /// Worker threads, 0 for all cores [default: 0]
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Lookup table (JSON).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct SampleArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub denoiser: Option<PathBuf>,
    #[arg(long)]
    pub corrector: Option<PathBuf>,
    #[arg(long)]
    pub lut: Option<PathBuf>,
    /// off | network | lut [default: network with --corrector, lut with --lut, else off]
    #[arg(long, value_parser = kebab::<NlcMode>)]
    pub nlc: Option<NlcMode>,
    /// ddim | ddpm | edm-euler | edm-heun | dpm2 [default: ddim]
    #[arg(long, value_parser = kebab::<Algorithm>)]
    pub algo: Option<Algorithm>,
    /// [default: 10]
    #[arg(long)]
    pub steps: Option<usize>,
    /// [default: 1 for ddpm, 0 otherwise]
    #[arg(long)]
    pub eta: Option<f64>,
    /// [default: true with the network corrector on ddim/ddpm, else false]
    #[arg(long)]
    pub normalize: Option<bool>,
    #[arg(long, value_enum)]
    pub schedule: Option<ScheduleKind>,
    #[arg(long)]
    pub sigma_min: Option<f64>,
    #[arg(long)]
    pub sigma_max: Option<f64>,
    #[arg(long)]
    pub rho: Option<f64>,
    /// [default: 256]
    #[arg(long)]
    pub seeds: Option<usize>,
    /// [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Dataset whose manifold annotates the trajectories with oracle distances.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Name used in reports [default: derived from the method]
    #[arg(long)]
    pub label: Option<String>,
    /// Run file (JSON).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-step trajectory table of every seed.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct RestoreArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub method: Option<Method>,
    #[arg(long)]
    pub denoiser: Option<PathBuf>,
    #[arg(long)]
    pub corrector: Option<PathBuf>,
    #[arg(long)]
    pub lut: Option<PathBuf>,
    #[arg(long, value_parser = kebab::<NlcMode>)]
    pub nlc: Option<NlcMode>,
    /// Operator file; without it a Gaussian operator with --rows rows is drawn.
    #[arg(long)]
    pub operator: Option<PathBuf>,
    /// [default: 1]
    #[arg(long)]
    pub rows: Option<usize>,
    /// Where to keep the operator that was used.
    #[arg(long)]
    pub save_operator: Option<PathBuf>,
    /// [default: zero]
    #[arg(long, value_enum)]
    pub target: Option<Target>,
    /// Dataset; needed for --target data and for annotation.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// ddnm only: ddim | ddpm [default: ddim]
    #[arg(long, value_parser = kebab::<Algorithm>)]
    pub algo: Option<Algorithm>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub normalize: Option<bool>,
    #[arg(long, value_enum)]
    pub schedule: Option<ScheduleKind>,
    /// EDM top level, or the iterproj starting level [default: 80 / 10]
    #[arg(long)]
    pub sigma_max: Option<f64>,
    /// EDM bottom level, or the iterproj restart floor [default: 0.002 / 0.01]
    #[arg(long)]
    pub sigma_min: Option<f64>,
    #[arg(long)]
    pub rho: Option<f64>,
    /// iterproj: restart level [default: 0.1 σ_max]
    #[arg(long)]
    pub sigma_restart: Option<f64>,
    /// iterproj: level decay per iteration [default: 0.95]
    #[arg(long)]
    pub alpha: Option<f64>,
    /// iterproj: iteration cap [default: 200]
    #[arg(long)]
    pub k_max: Option<usize>,
    /// iterproj: stop once successive estimates move less than this [default: 1e-4 √n]
    #[arg(long)]
    pub stop_tol: Option<f64>,
    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub label: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct EvalArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Run file from sample or restore.
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// Dataset carrying the manifold.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Replaces the run's label.
    #[arg(long)]
    pub label: Option<String>,
    /// Instead of a run, check E dist(x_T)² against n σ_T² at these levels.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub initial_check: Option<Vec<f64>>,
    /// Draws per level for the initial check [default: 500]
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run report or initial-check result (JSON).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Plot-ready long CSV of the report.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct ReportArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Run reports from eval; the first is the baseline.
    #[arg(long, num_args = 1..)]
    pub reports: Option<Vec<PathBuf>>,
    /// Comparison table (JSON).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comparison table (CSV).
    #[arg(long)]
    pub table_csv: Option<PathBuf>,
    /// Long CSV of every report's series.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}
