use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use nlc_core::constrained::{iterproj_nlc, sample_ddnm_nlc, IterProjConfig, LinearOperator};
use nlc_core::experiment::{compare, initial_distance_check, long_csv, par_map_seeds, run_seeds, RunReport, DEFAULT_SEEDS};
use nlc_core::io::{write_atomic, write_json_atomic};
use nlc_core::manifold::{generate_dataset, Dataset, ManifoldSpec, DEFAULT_NOISE_STD};
use nlc_core::neural::{load_checkpoint, save_checkpoint, Corrector, Denoiser, Role, RunMeta};
use nlc_core::numeric::{derive_seed, Rng, Vec64};
use nlc_core::sampler::{sample, Algorithm, Nlc, NlcMode, SamplerConfig, Trajectory};
use nlc_core::schedule::{
    build_edm_schedule, default_train_schedule, record_and_build_lut, LookupTable, NoiseSchedule, DEFAULT_LUT_BINS,
};
use nlc_core::training::{train, TrainConfig};
use serde_json::json;

use crate::args::*;
use crate::error::{CliError, CliResult};
use crate::runfile::{IterSummary, RunFile, Runs};

const DEFAULT_STEPS: usize = 10;
const EDM_SIGMA_MIN: f64 = 0.002;
const EDM_SIGMA_MAX: f64 = 80.0;
const EDM_RHO: f64 = 7.0;
/// Stream of the command seed that draws a random operator. Run `i` uses
/// stream `i`, so this stays clear of any realistic seed count.
const OPERATOR_STREAM: u64 = 1 << 32;

fn required<'a, T>(value: &'a Option<T>, flag: &str) -> CliResult<&'a T> {
    value.as_ref().ok_or_else(|| CliError::config(format!("--{flag} is required")))
}

fn input(value: &Option<PathBuf>, flag: &str) -> CliResult<PathBuf> {
    let path = required(value, flag)?;
    if !path.is_file() {
        return Err(CliError::config(format!("--{flag}: {} does not exist", path.display())));
    }
    Ok(path.clone())
}

fn optional_input(value: &Option<PathBuf>, flag: &str) -> CliResult<Option<PathBuf>> {
    value.as_ref().map(|_| input(value, flag)).transpose()
}

fn load_denoiser(path: &Path) -> CliResult<Denoiser> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.net.role() != Role::Denoiser {
        return Err(CliError::config(format!("{} is not a denoiser checkpoint", path.display())));
    }
    Ok(Denoiser::new(ckpt.net)?)
}

fn load_corrector(path: &Path) -> CliResult<Corrector> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.net.role() != Role::Corrector {
        return Err(CliError::config(format!("{} is not a corrector checkpoint", path.display())));
    }
    Ok(Corrector::new(ckpt.net)?)
}

fn load_lut(path: &Path) -> CliResult<LookupTable> {
    Ok(LookupTable::from_json(&fs::read_to_string(path)?)?)
}

fn build_schedule(
    kind: ScheduleKind,
    steps: usize,
    sigma_min: Option<f64>,
    sigma_max: Option<f64>,
    rho: Option<f64>,
) -> CliResult<NoiseSchedule> {
    Ok(match kind {
        ScheduleKind::Ddpm => default_train_schedule().subsample(steps)?,
        ScheduleKind::Edm => build_edm_schedule(
            steps,
            sigma_min.unwrap_or(EDM_SIGMA_MIN),
            sigma_max.unwrap_or(EDM_SIGMA_MAX),
            rho.unwrap_or(EDM_RHO),
        )?,
    })
}

fn sampler_config(algo: Algorithm, mode: NlcMode, eta: Option<f64>, normalize: Option<bool>) -> CliResult<SamplerConfig> {
    let mut cfg = SamplerConfig::new(algo, mode, 0);
    if let Some(eta) = eta {
        cfg.eta = eta;
    }
    if let Some(normalize) = normalize {
        cfg.normalize_direction = normalize;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Correction sources named on the command line.
struct Correction {
    mode: NlcMode,
    corrector: Option<Corrector>,
    lut: Option<LookupTable>,
}

impl Correction {
    fn load(mode: Option<NlcMode>, corrector: &Option<PathBuf>, lut: &Option<PathBuf>) -> CliResult<Self> {
        let corrector_path = optional_input(corrector, "corrector")?;
        let lut_path = optional_input(lut, "lut")?;
        let mode = mode.unwrap_or(match (&corrector_path, &lut_path) {
            (Some(_), _) => NlcMode::Network,
            (None, Some(_)) => NlcMode::Lut,
            (None, None) => NlcMode::Off,
        });
        match mode {
            NlcMode::Network if corrector_path.is_none() => {
                return Err(CliError::config("--nlc network needs --corrector"))
            }
            NlcMode::Lut if lut_path.is_none() => return Err(CliError::config("--nlc lut needs --lut")),
            _ => {}
        }
        let mut out = Self {
            mode,
            corrector: None,
            lut: None,
        };
        match mode {
            NlcMode::Network => out.corrector = Some(load_corrector(corrector_path.as_ref().unwrap())?),
            NlcMode::Lut => out.lut = Some(load_lut(lut_path.as_ref().unwrap())?),
            NlcMode::Off => {
                if corrector_path.is_some() || lut_path.is_some() {
                    warn!("correction is off; ignoring --corrector/--lut");
                }
            }
        }
        Ok(out)
    }

    fn nlc(&self) -> Nlc<'_> {
        match self.mode {
            NlcMode::Off => Nlc::Off,
            NlcMode::Network => Nlc::Network(self.corrector.as_ref().unwrap()),
            NlcMode::Lut => Nlc::Lut(self.lut.as_ref().unwrap()),
        }
    }
}

fn method_label(algo: Algorithm, mode: NlcMode) -> String {
    let base = serde_json::to_value(algo).unwrap();
    let base = base.as_str().unwrap();
    match mode {
        NlcMode::Off => base.to_owned(),
        NlcMode::Network => format!("{base}-nlc"),
        NlcMode::Lut => format!("{base}-lt-nlc"),
    }
}

fn annotate_all(trajectories: &mut [Trajectory], spec: &ManifoldSpec) -> CliResult<()> {
    for t in trajectories {
        t.annotate(spec)?;
    }
    Ok(())
}

pub fn gen_data(a: GenDataArgs) -> CliResult<()> {
    let out = required(&a.out, "out")?;
    let seed = a.seed.unwrap_or(0);
    let root = Rng::new(seed);
    let spec = ManifoldSpec::random(
        a.n.unwrap_or(100),
        a.d.unwrap_or(1),
        a.m.unwrap_or(4),
        a.noise_std.unwrap_or(DEFAULT_NOISE_STD),
        &mut root.fork(0),
    )?;
    let data = generate_dataset(&spec, a.count.unwrap_or(10_000), &mut root.fork(1))?;
    data.save(out)?;
    info!("wrote {} points in R^{} to {}", data.points.len(), spec.n(), out.display());
    Ok(())
}

pub fn train_model(role: Role, a: TrainArgs) -> CliResult<()> {
    let data_path = input(&a.data, "data")?;
    let out = required(&a.out, "out")?;
    let seed = a.seed.unwrap_or(0);
    let mut cfg = match role {
        Role::Denoiser => TrainConfig::denoiser(seed),
        Role::Corrector => TrainConfig::corrector(seed),
    };
    if role == Role::Denoiser && a.delta.is_some() {
        warn!("--delta only affects the corrector loss");
    }
    cfg.iterations = a.iterations.unwrap_or(cfg.iterations);
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    cfg.lr = a.lr.unwrap_or(cfg.lr);
    cfg.delta = a.delta.unwrap_or(cfg.delta);
    cfg.report_interval = a.report_interval.unwrap_or(cfg.report_interval);
    cfg.validate()?;
    let data = Dataset::load(&data_path)?;
    let mut outcome = train(role, &cfg, &data, &default_train_schedule())?;
    let meta = RunMeta {
        seed,
        iterations: cfg.iterations as u64,
        final_loss: outcome.report.final_loss,
    };
    save_checkpoint(&outcome.net, Some(&outcome.adam), meta, out)?;
    outcome.report.checkpoint = Some(out.display().to_string());
    if let Some(path) = &a.report {
        write_json_atomic(path, &outcome.report)?;
    }
    if let Some(path) = &a.loss_csv {
        write_atomic(path, outcome.report.to_csv().as_bytes())?;
    }
    info!(
        "{role:?}: {} iterations, final loss {:.6} ({:.1}s)",
        cfg.iterations, outcome.report.final_loss, outcome.report.wall_time_secs
    );
    Ok(())
}

pub fn build_lut(a: BuildLutArgs) -> CliResult<()> {
    let denoiser = load_denoiser(&input(&a.denoiser, "denoiser")?)?;
    let corrector = load_corrector(&input(&a.corrector, "corrector")?)?;
    let out = required(&a.out, "out")?;
    let algo = a.algo.unwrap_or(Algorithm::Ddim);
    // The table replays the residuals of this pass, so record them under the
    // settings a table-corrected run uses by default: no normalisation.
    let cfg = sampler_config(algo, NlcMode::Network, a.eta, Some(a.normalize.unwrap_or(false)))?;
    let steps = a.steps.unwrap_or(DEFAULT_STEPS);
    let schedule = build_schedule(a.schedule.unwrap_or(ScheduleKind::Ddpm), steps, a.sigma_min, a.sigma_max, a.rho)?;
    let bins = a.bins.unwrap_or(DEFAULT_LUT_BINS);
    let seeds = run_seeds(a.seed.unwrap_or(0), a.seeds.unwrap_or(DEFAULT_SEEDS));
    let n = denoiser.dim();
    let nlc = Nlc::Network(&corrector);
    let per_seed = par_map_seeds(&seeds, a.jobs.unwrap_or(0), |_, rng| {
        let (_, t) = sample(&denoiser, &nlc, &schedule, n, &cfg, rng)?;
        Ok(t.residual_records())
    })?;
    let records: Vec<(f64, f64)> = per_seed.into_iter().flatten().collect();
    let lut = record_and_build_lut(&records, bins)?;
    write_atomic(out, lut.to_json()?.as_bytes())?;
    info!("lookup table from {} records in {bins} bins -> {}", records.len(), out.display());
    Ok(())
}

pub fn sample_cmd(a: SampleArgs) -> CliResult<()> {
    let denoiser = load_denoiser(&input(&a.denoiser, "denoiser")?)?;
    let out = required(&a.out, "out")?;
    let spec = optional_input(&a.data, "data")?.map(Dataset::load).transpose()?.map(|d| d.spec);
    let correction = Correction::load(a.nlc, &a.corrector, &a.lut)?;
    let algo = a.algo.unwrap_or(Algorithm::Ddim);
    let cfg = sampler_config(algo, correction.mode, a.eta, a.normalize)?;
    let steps = a.steps.unwrap_or(DEFAULT_STEPS);
    let kind = a.schedule.unwrap_or(ScheduleKind::Ddpm);
    let schedule = build_schedule(kind, steps, a.sigma_min, a.sigma_max, a.rho)?;
    let seeds = run_seeds(a.seed.unwrap_or(0), a.seeds.unwrap_or(DEFAULT_SEEDS));
    let n = denoiser.dim();
    if let Some(spec) = &spec {
        if spec.n() != n {
            return Err(CliError::config(format!("dataset is in R^{} but the denoiser in R^{n}", spec.n())));
        }
    }
    let nlc = correction.nlc();
    let mut trajectories = par_map_seeds(&seeds, a.jobs.unwrap_or(0), |_, rng| {
        Ok(sample(&denoiser, &nlc, &schedule, n, &cfg, rng)?.1)
    })?;
    if let Some(spec) = &spec {
        annotate_all(&mut trajectories, spec)?;
    }
    let label = a.label.clone().unwrap_or_else(|| method_label(algo, correction.mode));
    let config = json!({
        "command": "sample",
        "sampler": cfg,
        "schedule": kind,
        "sigmas": schedule.sigmas(),
        "seed": a.seed.unwrap_or(0),
        "seeds": seeds.len(),
    });
    let run = RunFile::new(label, config, n, seeds, Runs::Trajectories(trajectories));
    write_run(&run, out, a.csv.as_deref())
}

fn write_run(run: &RunFile, out: &Path, csv: Option<&Path>) -> CliResult<()> {
    run.save(out)?;
    if let Some(csv) = csv {
        write_atomic(csv, run.to_csv().as_bytes())?;
    }
    info!("{}: {} runs -> {}", run.label, run.seeds.len(), out.display());
    Ok(())
}

pub fn restore(a: RestoreArgs) -> CliResult<()> {
    let denoiser = load_denoiser(&input(&a.denoiser, "denoiser")?)?;
    let out = required(&a.out, "out")?;
    let method = a.method.unwrap_or(Method::Ddnm);
    let target = a.target.unwrap_or(Target::Zero);
    let data_path = optional_input(&a.data, "data")?;
    if target == Target::Data && data_path.is_none() {
        return Err(CliError::config("--target data needs --data"));
    }
    let spec = data_path.map(Dataset::load).transpose()?.map(|d| d.spec);
    let n = denoiser.dim();
    if let Some(spec) = &spec {
        if spec.n() != n {
            return Err(CliError::config(format!("dataset is in R^{} but the denoiser in R^{n}", spec.n())));
        }
    }
    let correction = Correction::load(a.nlc, &a.corrector, &a.lut)?;
    let seed = a.seed.unwrap_or(0);
    let op = match optional_input(&a.operator, "operator")? {
        Some(path) => {
            if a.rows.is_some() {
                return Err(CliError::config("give either --operator or --rows"));
            }
            LinearOperator::load(path)?
        }
        None => LinearOperator::random_rows(a.rows.unwrap_or(1), n, &mut Rng::new(derive_seed(seed, OPERATOR_STREAM)))?,
    };
    if op.cols() != n {
        return Err(CliError::config(format!("operator acts on R^{} but the denoiser on R^{n}", op.cols())));
    }
    if let Some(path) = &a.save_operator {
        op.save(path)?;
    }
    let seeds = run_seeds(seed, a.seeds.unwrap_or(DEFAULT_SEEDS));
    let jobs = a.jobs.unwrap_or(0);
    let nlc = correction.nlc();
    // The clean point behind `y` comes from stream 0 of each run's seed;
    // the sampler itself draws from the run seed directly.
    let target_of = |rng: &Rng| -> nlc_core::Result<Vec64> {
        match (target, &spec) {
            (Target::Data, Some(spec)) => Ok(op.apply(&spec.sample_clean(&mut rng.fork(0)))?),
            _ => Ok(Vec64::zeros(op.rows())),
        }
    };
    let base = json!({
        "command": "restore",
        "method": method,
        "target": target,
        "operator": op.manifest(),
        "seed": seed,
        "seeds": seeds.len(),
    });
    let run = match method {
        Method::Ddnm => {
            let algo = a.algo.unwrap_or(Algorithm::Ddim);
            let cfg = sampler_config(algo, correction.mode, a.eta, a.normalize)?;
            let kind = a.schedule.unwrap_or(ScheduleKind::Ddpm);
            let schedule = build_schedule(kind, a.steps.unwrap_or(DEFAULT_STEPS), a.sigma_min, a.sigma_max, a.rho)?;
            let results = par_map_seeds(&seeds, jobs, |_, rng| {
                let y = target_of(rng)?;
                let (x, t) = sample_ddnm_nlc(&denoiser, &nlc, &schedule, &op, &y, &cfg, rng)?;
                Ok((t, op.consistency(&x, &y)?))
            })?;
            let (mut trajectories, consistency): (Vec<_>, Vec<_>) = results.into_iter().unzip();
            if let Some(spec) = &spec {
                annotate_all(&mut trajectories, spec)?;
            }
            let mut config = base;
            config["sampler"] = json!(cfg);
            config["schedule"] = json!(kind);
            config["sigmas"] = json!(schedule.sigmas());
            let label = a.label.clone().unwrap_or_else(|| match correction.mode {
                NlcMode::Off => "ddnm".to_owned(),
                NlcMode::Network => "ddnm-nlc".to_owned(),
                NlcMode::Lut => "ddnm-lt-nlc".to_owned(),
            });
            let mut run = RunFile::new(label, config, n, seeds, Runs::Trajectories(trajectories));
            run.final_consistency = Some(consistency);
            run
        }
        Method::Iterproj => {
            let mut cfg = IterProjConfig::for_dim(n);
            if let Some(v) = a.sigma_max {
                cfg.sigma_max = v;
                cfg.sigma_restart = 0.1 * v;
            }
            cfg.sigma_min = a.sigma_min.unwrap_or(cfg.sigma_min);
            cfg.sigma_restart = a.sigma_restart.unwrap_or(cfg.sigma_restart);
            cfg.alpha = a.alpha.unwrap_or(cfg.alpha);
            cfg.eta = a.eta.unwrap_or(cfg.eta);
            cfg.k_max = a.k_max.unwrap_or(cfg.k_max);
            cfg.stop_tol = a.stop_tol.unwrap_or(cfg.stop_tol);
            cfg.normalize_direction = a.normalize.unwrap_or(cfg.normalize_direction);
            cfg.validate()?;
            for (flag, given) in [("algo", a.algo.is_some()), ("steps", a.steps.is_some()), ("schedule", a.schedule.is_some())] {
                if given {
                    warn!("--{flag} does not apply to iterproj");
                }
            }
            let results = par_map_seeds(&seeds, jobs, |_, rng| {
                let y = target_of(rng)?;
                let run = iterproj_nlc(&denoiser, &nlc, &op, &y, &cfg, rng)?;
                Ok((IterSummary::from(&run), op.consistency(&run.sample, &y)?))
            })?;
            let (summaries, consistency): (Vec<_>, Vec<_>) = results.into_iter().unzip();
            let mut config = base;
            config["iterproj"] = json!(cfg);
            config["nlc"] = json!(correction.mode);
            let label = a.label.clone().unwrap_or_else(|| match correction.mode {
                NlcMode::Off => "iterproj".to_owned(),
                _ => "iterproj-nlc".to_owned(),
            });
            let mut run = RunFile::new(label, config, n, seeds, Runs::IterProj(summaries));
            run.final_consistency = Some(consistency);
            run
        }
    };
    write_run(&run, out, a.csv.as_deref())
}

pub fn eval(a: EvalArgs) -> CliResult<()> {
    let data = Dataset::load(input(&a.data, "data")?)?;
    let out = required(&a.out, "out")?;
    if let Some(levels) = &a.initial_check {
        if a.run.is_some() {
            return Err(CliError::config("give either --run or --initial-check"));
        }
        let samples = a.samples.unwrap_or(500);
        let rng = Rng::new(a.seed.unwrap_or(0));
        let checks = levels
            .iter()
            .enumerate()
            .map(|(i, &sigma)| initial_distance_check(&data.spec, sigma, samples, &mut rng.fork(i as u64)))
            .collect::<nlc_core::Result<Vec<_>>>()?;
        for c in &checks {
            info!(
                "sigma_T {}: E dist^2 = {:.2} vs n sigma_T^2 = {:.2} ({})",
                c.sigma_t,
                c.mean_dist_sq,
                c.threshold,
                if c.exceeds { "exceeds" } else { "below" }
            );
        }
        write_json_atomic(out, &checks)?;
        return Ok(());
    }
    let run = RunFile::load(&input(&a.run, "run")?)?;
    if run.n != data.spec.n() {
        return Err(CliError::config(format!("run is in R^{} but the dataset in R^{}", run.n, data.spec.n())));
    }
    let label = a.label.clone().unwrap_or(run.label.clone());
    let report = match run.runs {
        Runs::Trajectories(mut trajectories) => {
            annotate_all(&mut trajectories, &data.spec)?;
            RunReport::from_trajectories(label, run.config, run.seeds, &trajectories, run.final_consistency.as_deref())?
        }
        Runs::IterProj(summaries) => {
            let dists = summaries
                .iter()
                .map(|s| data.spec.exact_distance(&s.sample))
                .collect::<nlc_core::Result<Vec<_>>>()?;
            RunReport::from_finals(label, run.config, run.seeds, &dists, run.final_consistency.as_deref())?
        }
    };
    write_json_atomic(out, &report)?;
    if let Some(csv) = &a.csv {
        write_atomic(csv, long_csv(std::slice::from_ref(&report)).as_bytes())?;
    }
    info!(
        "{}: final distance {:.5} ± {:.5}",
        report.label, report.final_distance.mean, report.final_distance.std
    );
    Ok(())
}

pub fn report(a: ReportArgs) -> CliResult<()> {
    let paths = required(&a.reports, "reports")?;
    let out = required(&a.out, "out")?;
    let reports = paths
        .iter()
        .map(|p| {
            let path = input(&Some(p.clone()), "reports")?;
            serde_json::from_slice::<RunReport>(&fs::read(&path)?)
                .map_err(|e| CliError::io(format!("{}: {e}", path.display())))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let table = compare(&reports)?;
    write_json_atomic(out, &table)?;
    if let Some(path) = &a.table_csv {
        write_atomic(path, table.to_csv().as_bytes())?;
    }
    if let Some(path) = &a.csv {
        write_atomic(path, long_csv(&reports).as_bytes())?;
    }
    for row in &table.rows {
        info!("{}: winner {}", row.metric, table.methods[row.winner]);
    }
    Ok(())
}
