//! The Bayesian optimization loop, experiment configuration, result files and plots.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{ei_select, kg_select, mes_select, stableopt_select, ucb_select, BaselineConfig};
use crate::benchmarks::{compute_regret, default_reference_grid, true_robust_reference, HyperPolicy, Problem, ReferenceCache, NOISE_VARIANCE};
use crate::error::{Error, Result};
use crate::gp::{fit_hyperparameters, fit_posterior, Dataset, HyperOptions, KernelParams};
use crate::res::{maximize_acquisition, prepare_iteration, ResOptions};
use crate::robust::{report_optimum, SolverOptions};
use crate::{mix_seed, Stopwatch};

pub const RECORD_SCHEMA_VERSION: u32 = 1;

/// Environment variable holding the number of parallel repetitions.
pub const WORKERS_ENV: &str = "RES_WORKERS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AcquisitionKind {
    Res,
    StableOpt,
    Ucb,
    Ei,
    Mes,
    Kg,
    /// Uniform random selection, mainly for tests.
    Random,
}

impl AcquisitionKind {
    pub const ALL: [AcquisitionKind; 7] = [Self::Res, Self::StableOpt, Self::Ucb, Self::Ei, Self::Mes, Self::Kg, Self::Random];

    pub fn name(self) -> &'static str {
        match self {
            Self::Res => "res",
            Self::StableOpt => "stableopt",
            Self::Ucb => "ucb",
            Self::Ei => "ei",
            Self::Mes => "mes",
            Self::Kg => "kg",
            Self::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown acquisition '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase", tag = "policy")]
pub enum HyperSetting {
    /// Whatever the problem prescribes.
    #[default]
    Problem,
    Fit,
    Fixed {
        signal_variance: f64,
        lengthscales: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub problem: String,
    pub acquisition: AcquisitionKind,
    pub iterations: usize,
    /// Defaults to the problem's own initial design size.
    pub initial_design: Option<usize>,
    pub repetitions: usize,
    /// Base seed; repetition `r` uses `seed + r` unless `seeds` is given.
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub hyperparameters: HyperSetting,
    pub output_dir: PathBuf,
    /// Writes zeros instead of wall-clock times so output files are reproducible byte for byte.
    pub record_timings: bool,
    pub reference_grid: Option<usize>,
    pub reference_cache: Option<PathBuf>,
    pub res: ResOptions,
    pub baseline: BaselineConfig,
    pub solver: SolverOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            problem: "branin".into(),
            acquisition: AcquisitionKind::Res,
            iterations: 50,
            initial_design: None,
            repetitions: 1,
            seed: 0,
            seeds: Vec::new(),
            hyperparameters: HyperSetting::Problem,
            output_dir: PathBuf::from("results"),
            record_timings: true,
            reference_grid: None,
            reference_cache: None,
            res: ResOptions::default(),
            baseline: BaselineConfig::default(),
            solver: SolverOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be at least 1".into()));
        }
        if self.initial_design == Some(0) {
            return Err(Error::Config("initial_design must be at least 1".into()));
        }
        if !self.seeds.is_empty() && self.seeds.len() != self.repetitions {
            return Err(Error::Config(format!("{} seeds given for {} repetitions", self.seeds.len(), self.repetitions)));
        }
        if self.res.num_samples == 0 || self.res.num_features == 0 {
            return Err(Error::Config("res.num_samples and res.num_features must be at least 1".into()));
        }
        if let HyperSetting::Fixed { signal_variance, lengthscales } = &self.hyperparameters {
            KernelParams::new(*signal_variance, lengthscales.clone(), NOISE_VARIANCE).map_err(|e| Error::Config(e.to_string()))?;
        }
        self.baseline.validate()
    }

    pub fn resolved_seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            (0..self.repetitions as u64).map(|r| self.seed.wrapping_add(r)).collect()
        } else {
            self.seeds.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    /// 1-based.
    pub iteration: usize,
    pub z: Vec<f64>,
    pub y: f64,
    pub reported_x: Vec<f64>,
    pub reported_theta: Vec<f64>,
    pub robust_regret: f64,
    pub inference_regret: f64,
    pub t_fit_s: f64,
    pub t_sample_s: f64,
    pub t_ep_s: f64,
    pub t_acqopt_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub run_id: usize,
    pub seed: u64,
    pub dim_x: usize,
    pub dim_theta: usize,
    pub f_star: f64,
    pub iterations: Vec<IterationRecord>,
    /// Wall-clock of each loop body (fit to observation), not written to CSV.
    pub iteration_seconds: Vec<f64>,
}

/// Minimal loop state handed to the per-iteration policies.
struct Loop<'a> {
    cfg: &'a RunConfig,
    problem: &'a Problem,
    rng: ChaCha8Rng,
    data: Dataset,
    params: Option<KernelParams>,
}

/// Kernel used before enough data exists to fit one.
fn default_params(dim: usize) -> KernelParams {
    KernelParams::isotropic(1.0, 0.2, dim, NOISE_VARIANCE).expect("valid parameters")
}

impl Loop<'_> {
    fn hyperparameters(&mut self, seed: u64) -> Result<KernelParams> {
        let dim = self.problem.space.dim();
        let fixed = match (&self.cfg.hyperparameters, &self.problem.hyper) {
            (HyperSetting::Fixed { signal_variance, lengthscales }, _) => Some(KernelParams::new(*signal_variance, lengthscales.clone(), NOISE_VARIANCE)?),
            (HyperSetting::Problem, HyperPolicy::Fixed(p)) => Some(p.clone()),
            _ => None,
        };
        if let Some(p) = fixed {
            if p.dim() != dim {
                return Err(Error::Config(format!("fixed lengthscales have {} entries, problem has {dim} inputs", p.dim())));
            }
            return Ok(p);
        }
        if self.data.len() < 2 {
            return Ok(default_params(dim));
        }
        let bounds = match &self.problem.hyper {
            HyperPolicy::Fit(b) => *b,
            HyperPolicy::Fixed(_) => Default::default(),
        };
        let opts = HyperOptions { seed, ..Default::default() };
        let fit = fit_hyperparameters(&self.data, &bounds, NOISE_VARIANCE, self.params.as_ref(), &opts)?;
        if fit.fallback {
            log::warn!("hyperparameter fit fell back to bound midpoints");
        }
        Ok(fit.params)
    }
}

/// One repetition of the optimization loop. On failure the iterations
/// completed so far come back with the error.
pub fn run_bo(cfg: &RunConfig, run_id: usize, seed: u64, cache: Option<&std::sync::Mutex<ReferenceCache>>) -> std::result::Result<RunRecord, (RunRecord, Error)> {
    let problem = match Problem::by_name(&cfg.problem, seed) {
        Ok(p) => p,
        Err(e) => return Err((empty_record(run_id, seed, 0, 0, f64::NAN), e)),
    };
    let space = &problem.space;
    let grid = cfg.reference_grid.unwrap_or_else(|| default_reference_grid(&problem));
    let reference = match cache {
        Some(c) => {
            let cached = c.lock().expect("cache lock").get(&problem, grid).cloned();
            match cached {
                Some(r) => r,
                None => {
                    let r = true_robust_reference(&problem, grid);
                    c.lock().expect("cache lock").insert(&problem, grid, r.clone());
                    r
                }
            }
        }
        None => true_robust_reference(&problem, grid),
    };
    let mut record = empty_record(run_id, seed, space.dim_x(), space.dim_theta(), reference.f_star);

    let mut lp = Loop {
        cfg,
        problem: &problem,
        rng: ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xd5)),
        data: Dataset::empty(space.dim_x(), space.dim_theta()),
        params: None,
    };
    let m = cfg.initial_design.unwrap_or(problem.initial_design);
    for _ in 0..m {
        let z = space.sample(&mut lp.rng);
        let y = problem.observe(&z, &mut lp.rng);
        if let Err(e) = lp.data.push(z, y) {
            return Err((record, e));
        }
    }

    for t in 0..cfg.iterations {
        match step(&mut lp, t, seed, reference.f_star) {
            Ok((it, secs)) => {
                let it = if cfg.record_timings {
                    it
                } else {
                    IterationRecord {
                        t_fit_s: 0.0,
                        t_sample_s: 0.0,
                        t_ep_s: 0.0,
                        t_acqopt_s: 0.0,
                        ..it
                    }
                };
                record.iterations.push(it);
                record.iteration_seconds.push(secs);
            }
            Err(e) => return Err((record, e)),
        }
    }
    Ok(record)
}

fn empty_record(run_id: usize, seed: u64, dim_x: usize, dim_theta: usize, f_star: f64) -> RunRecord {
    RunRecord {
        run_id,
        seed,
        dim_x,
        dim_theta,
        f_star,
        iterations: Vec::new(),
        iteration_seconds: Vec::new(),
    }
}

fn step(lp: &mut Loop<'_>, t: usize, seed: u64, f_star: f64) -> Result<(IterationRecord, f64)> {
    let cfg = lp.cfg;
    let space = &lp.problem.space;
    let it_seed = mix_seed(seed, 1000 + t as u64);
    let total = Stopwatch::start();

    let clock = Stopwatch::start();
    let params = lp.hyperparameters(mix_seed(it_seed, 1))?;
    let post = Arc::new(fit_posterior(&lp.data, &params)?);
    let t_fit = clock.seconds();
    lp.params = Some(params.clone());

    let solver = cfg.solver.with_seed(mix_seed(it_seed, 2));
    let acq_seed = mix_seed(it_seed, 3);
    let (mut t_sample, mut t_ep) = (0.0, 0.0);
    let clock = Stopwatch::start();
    let z = match cfg.acquisition {
        AcquisitionKind::Res => {
            let state = prepare_iteration(post.clone(), space, &cfg.res, acq_seed)?;
            t_sample = state.sample_seconds;
            t_ep = state.ep_seconds;
            maximize_acquisition(&state, &solver)
        }
        AcquisitionKind::StableOpt => stableopt_select(&post, space, cfg.baseline.beta_sqrt, &solver),
        AcquisitionKind::Ucb => ucb_select(&post, space, cfg.baseline.beta_sqrt, &solver),
        AcquisitionKind::Ei => ei_select(&post, space, None, &solver)?,
        AcquisitionKind::Mes => mes_select(&post, space, &cfg.baseline, acq_seed, &solver)?,
        AcquisitionKind::Kg => kg_select(&post, space, &cfg.baseline, acq_seed)?,
        AcquisitionKind::Random => space.sample(&mut lp.rng),
    };
    let t_acq = (clock.seconds() - t_sample - t_ep).max(0.0);

    let y = lp.problem.observe(&z, &mut lp.rng);
    lp.data.push(z.clone(), y)?;
    let secs = total.seconds();

    // RES reports the robust optimum of the updated posterior mean, baselines their query
    let (rx, rt) = match cfg.acquisition {
        AcquisitionKind::Res => {
            let updated = fit_posterior(&lp.data, &params)?;
            let r = report_optimum(&updated, space, &solver);
            (r.x, r.theta)
        }
        _ => {
            let (x, th) = space.split(&z);
            (x.to_vec(), th.to_vec())
        }
    };
    let regret = compute_regret(lp.problem, &rx, &rt, f_star);
    Ok((
        IterationRecord {
            iteration: t + 1,
            z,
            y,
            reported_x: rx,
            reported_theta: rt,
            robust_regret: regret.robust,
            inference_regret: regret.inference,
            t_fit_s: t_fit,
            t_sample_s: t_sample,
            t_ep_s: t_ep,
            t_acqopt_s: t_acq,
        },
        secs,
    ))
}

/// Outcome of a full experiment: every record (partial ones included) and the first error.
#[derive(Debug)]
pub struct Experiment {
    pub records: Vec<RunRecord>,
    pub error: Option<Error>,
}

fn worker_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        let n: usize = v.trim().parse().map_err(|_| Error::Config(format!("{WORKERS_ENV} must be a positive integer, got '{v}'")))?;
        if n == 0 {
            return Err(Error::Config(format!("{WORKERS_ENV} must be at least 1")));
        }
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::Config(e.to_string()))
}

/// Runs all repetitions in parallel, then writes results into `cfg.output_dir`.
pub fn run_experiment(cfg: &RunConfig) -> Result<Experiment> {
    cfg.validate()?;
    Problem::by_name(&cfg.problem, 0).map_err(|e| Error::Config(e.to_string()))?;
    let cache = match &cfg.reference_cache {
        Some(p) => Some(std::sync::Mutex::new(ReferenceCache::load(p)?)),
        None => None,
    };
    let seeds = cfg.resolved_seeds();
    let pool = worker_pool()?;
    let outcomes: Vec<_> = pool.install(|| seeds.par_iter().enumerate().map(|(i, s)| run_bo(cfg, i, *s, cache.as_ref())).collect());
    let mut records = Vec::with_capacity(outcomes.len());
    let mut error = None;
    for o in outcomes {
        match o {
            Ok(r) => records.push(r),
            Err((r, e)) => {
                log::error!("run {} (seed {}) failed after {} iterations: {e}", r.run_id, r.seed, r.iterations.len());
                records.push(r);
                error.get_or_insert(e);
            }
        }
    }
    if let (Some(c), Some(p)) = (cache, &cfg.reference_cache) {
        c.into_inner().expect("cache lock").save(p)?;
    }
    write_outputs(cfg, &records)?;
    Ok(Experiment { records, error })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub problem: String,
    pub acquisition: AcquisitionKind,
    pub seeds: Vec<u64>,
    pub f_star: Vec<f64>,
    pub completed_iterations: Vec<usize>,
    pub config: RunConfig,
}

pub const RUNS_CSV: &str = "runs.csv";
pub const AGGREGATE_CSV: &str = "aggregate.csv";
pub const MANIFEST_JSON: &str = "manifest.json";
pub const PLOT_SVG: &str = "regret.svg";

pub fn write_outputs(cfg: &RunConfig, records: &[RunRecord]) -> Result<()> {
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(RUNS_CSV), write_runs_csv(records)?)?;
    let manifest = Manifest {
        schema_version: RECORD_SCHEMA_VERSION,
        problem: cfg.problem.clone(),
        acquisition: cfg.acquisition,
        seeds: records.iter().map(|r| r.seed).collect(),
        f_star: records.iter().map(|r| r.f_star).collect(),
        completed_iterations: records.iter().map(|r| r.iterations.len()).collect(),
        config: cfg.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Serde(e.to_string()))?;
    std::fs::write(dir.join(MANIFEST_JSON), json + "\n")?;
    if records.iter().any(|r| !r.iterations.is_empty()) {
        let agg = aggregate(records)?;
        std::fs::write(dir.join(AGGREGATE_CSV), write_aggregate_csv(&agg))?;
        let series = [Series {
            label: cfg.acquisition.name().into(),
            rows: agg,
        }];
        std::fs::write(dir.join(PLOT_SVG), plot_svg(&series, primary_metric(&cfg.problem)))?;
    }
    Ok(())
}

/// Robust regret for finite θ sets, inference regret otherwise.
pub fn primary_metric(problem: &str) -> Metric {
    match Problem::by_name(problem, 0) {
        Ok(p) if !p.theta_is_discrete() => Metric::Inference,
        _ => Metric::Robust,
    }
}

fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.16e}")
    }
}

fn parse_num(s: &str) -> Result<f64> {
    s.parse::<f64>().map_err(|_| Error::Serde(format!("bad number '{s}'")))
}

pub fn runs_csv_header(dim_x: usize, dim_theta: usize) -> String {
    let mut cols = vec!["run_id".to_string(), "iteration".into()];
    cols.extend((0..dim_x).map(|i| format!("x_{i}")));
    cols.extend((0..dim_theta).map(|i| format!("theta_{i}")));
    cols.push("y".into());
    cols.extend((0..dim_x).map(|i| format!("xstar_{i}")));
    cols.extend((0..dim_theta).map(|i| format!("thetastar_{i}")));
    for c in ["robust_regret", "inference_regret", "t_fit_s", "t_sample_s", "t_ep_s", "t_acqopt_s"] {
        cols.push(c.into());
    }
    cols.join(",")
}

/// Per-iteration rows of every run; numbers carry 17 significant digits.
pub fn write_runs_csv(records: &[RunRecord]) -> Result<String> {
    let first = records.first().ok_or_else(|| Error::InvalidArgument("no records".into()))?;
    let (dx, dt) = records.iter().find(|r| r.dim_x + r.dim_theta > 0).map_or((first.dim_x, first.dim_theta), |r| (r.dim_x, r.dim_theta));
    let mut out = runs_csv_header(dx, dt);
    out.push('\n');
    for r in records {
        for it in &r.iterations {
            if it.z.len() != dx + dt || it.reported_x.len() != dx || it.reported_theta.len() != dt {
                return Err(Error::DimensionMismatch {
                    expected: dx + dt,
                    got: it.z.len(),
                });
            }
            let mut fields = vec![r.run_id.to_string(), it.iteration.to_string()];
            fields.extend(it.z.iter().map(|v| fmt_num(*v)));
            fields.push(fmt_num(it.y));
            fields.extend(it.reported_x.iter().chain(&it.reported_theta).map(|v| fmt_num(*v)));
            for v in [it.robust_regret, it.inference_regret, it.t_fit_s, it.t_sample_s, it.t_ep_s, it.t_acqopt_s] {
                fields.push(fmt_num(v));
            }
            out.push_str(&fields.join(","));
            out.push('\n');
        }
    }
    Ok(out)
}

/// Inverse of [`write_runs_csv`]. Seeds and `f*` are not part of the CSV and come back as zero and NaN.
pub fn parse_runs_csv(text: &str) -> Result<Vec<RunRecord>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Serde("empty CSV".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    let dx = cols.iter().filter(|c| c.starts_with("x_")).count();
    let dt = cols.iter().filter(|c| c.starts_with("theta_")).count();
    if header != runs_csv_header(dx, dt) {
        return Err(Error::Serde(format!("unexpected CSV header '{header}'")));
    }
    let mut records: Vec<RunRecord> = Vec::new();
    for (n, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != cols.len() {
            return Err(Error::Serde(format!("row {} has {} fields, expected {}", n + 2, f.len(), cols.len())));
        }
        let run_id: usize = f[0].parse().map_err(|_| Error::Serde(format!("bad run_id '{}'", f[0])))?;
        let iteration: usize = f[1].parse().map_err(|_| Error::Serde(format!("bad iteration '{}'", f[1])))?;
        let nums = f[2..].iter().map(|s| parse_num(s)).collect::<Result<Vec<f64>>>()?;
        let d = dx + dt;
        let it = IterationRecord {
            iteration,
            z: nums[..d].to_vec(),
            y: nums[d],
            reported_x: nums[d + 1..d + 1 + dx].to_vec(),
            reported_theta: nums[d + 1 + dx..2 * d + 1].to_vec(),
            robust_regret: nums[2 * d + 1],
            inference_regret: nums[2 * d + 2],
            t_fit_s: nums[2 * d + 3],
            t_sample_s: nums[2 * d + 4],
            t_ep_s: nums[2 * d + 5],
            t_acqopt_s: nums[2 * d + 6],
        };
        match records.last_mut() {
            Some(r) if r.run_id == run_id => r.iterations.push(it),
            _ => {
                let mut r = empty_record(run_id, 0, dx, dt, f64::NAN);
                r.iterations.push(it);
                records.push(r);
            }
        }
    }
    Ok(records)
}

/// Loads a result directory written by [`write_outputs`].
pub fn load_results(dir: &Path) -> Result<(Manifest, Vec<RunRecord>)> {
    let text = std::fs::read_to_string(dir.join(MANIFEST_JSON))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Serde(e.to_string()))?;
    if manifest.schema_version != RECORD_SCHEMA_VERSION {
        return Err(Error::Serde(format!(
            "record schema {} is not supported (expected {RECORD_SCHEMA_VERSION})",
            manifest.schema_version
        )));
    }
    let mut records = parse_runs_csv(&std::fs::read_to_string(dir.join(RUNS_CSV))?)?;
    for r in records.iter_mut() {
        if let Some(s) = manifest.seeds.get(r.run_id) {
            r.seed = *s;
        }
        if let Some(f) = manifest.f_star.get(r.run_id) {
            r.f_star = *f;
        }
    }
    Ok((manifest, records))
}

/// Linear-interpolation quantile of sorted data (R type 7).
pub fn quantile_type7(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quartiles {
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
}

impl Quartiles {
    pub fn of(values: &[f64]) -> Self {
        let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
        v.sort_by(f64::total_cmp);
        Self {
            q25: quantile_type7(&v, 0.25),
            median: quantile_type7(&v, 0.5),
            q75: quantile_type7(&v, 0.75),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub iteration: usize,
    pub runs: usize,
    pub robust: Quartiles,
    pub inference: Quartiles,
}

/// Median and quartiles of each regret per iteration over the runs that reached it.
pub fn aggregate(records: &[RunRecord]) -> Result<Vec<AggregateRow>> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("nothing to aggregate".into()));
    }
    let t = records.iter().map(|r| r.iterations.len()).max().unwrap_or(0);
    Ok((0..t)
        .map(|i| {
            let its: Vec<&IterationRecord> = records.iter().filter_map(|r| r.iterations.get(i)).collect();
            AggregateRow {
                iteration: i + 1,
                runs: its.len(),
                robust: Quartiles::of(&its.iter().map(|it| it.robust_regret).collect::<Vec<_>>()),
                inference: Quartiles::of(&its.iter().map(|it| it.inference_regret).collect::<Vec<_>>()),
            }
        })
        .collect())
}

pub fn write_aggregate_csv(rows: &[AggregateRow]) -> String {
    let mut out = String::from("iteration,runs,robust_q25,robust_median,robust_q75,inference_q25,inference_median,inference_q75\n");
    for r in rows {
        let nums = [r.robust.q25, r.robust.median, r.robust.q75, r.inference.q25, r.inference.median, r.inference.q75].map(fmt_num);
        let _ = writeln!(out, "{},{},{}", r.iteration, r.runs, nums.join(","));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Robust,
    Inference,
}

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub rows: Vec<AggregateRow>,
}

const PALETTE: [&str; 7] = ["#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#7f7f7f"];

/// Median regret curves with interquartile bands on a log axis.
pub fn plot_svg(series: &[Series], metric: Metric) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (70.0, 20.0, 20.0, 50.0);
    let pick = |r: &AggregateRow| match metric {
        Metric::Robust => r.robust,
        Metric::Inference => r.inference,
    };
    let floor = 1e-12;
    let vals: Vec<f64> = series
        .iter()
        .flat_map(|s| s.rows.iter().flat_map(move |r| [pick(r).q25, pick(r).q75]))
        .filter(|v| v.is_finite())
        .map(|v| v.max(floor))
        .collect();
    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min).log10().floor();
    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max).log10().ceil();
    let (lo, hi) = if lo.is_finite() && hi.is_finite() { (lo, hi.max(lo + 1.0)) } else { (-3.0, 1.0) };
    let t_max = series.iter().flat_map(|s| s.rows.last().map(|r| r.iteration)).max().unwrap_or(1).max(2) as f64;
    let px = |it: f64| left + (it - 1.0) / (t_max - 1.0) * (w - left - right);
    let py = |v: f64| top + (hi - v.max(floor).log10()) / (hi - lo) * (h - top - bottom);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    for e in (lo as i32)..=(hi as i32) {
        let y = py(10f64.powi(e));
        let _ = writeln!(s, r##"<line x1="{left}" x2="{}" y1="{y:.1}" y2="{y:.1}" stroke="#ddd"/>"##, w - right);
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">1e{e}</text>"#, left - 6.0, y + 4.0);
    }
    let _ = writeln!(s, r#"<rect x="{left}" y="{top}" width="{}" height="{}" fill="none" stroke="black"/>"#, w - left - right, h - top - bottom);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">iteration</text>"#, (left + w - right) / 2.0, h - 12.0);
    let ylabel = match metric {
        Metric::Robust => "robust regret",
        Metric::Inference => "inference regret",
    };
    let _ = writeln!(s, r#"<text transform="translate(16 {}) rotate(-90)" text-anchor="middle">{ylabel}</text>"#, (top + h - bottom) / 2.0);
    for (k, ser) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let rows: Vec<&AggregateRow> = ser.rows.iter().filter(|r| pick(r).median.is_finite()).collect();
        if rows.is_empty() {
            continue;
        }
        let upper: Vec<String> = rows.iter().map(|r| format!("{:.1},{:.1}", px(r.iteration as f64), py(pick(r).q75))).collect();
        let lower: Vec<String> = rows.iter().rev().map(|r| format!("{:.1},{:.1}", px(r.iteration as f64), py(pick(r).q25))).collect();
        let _ = writeln!(s, r#"<polygon points="{} {}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#, upper.join(" "), lower.join(" "));
        let line: Vec<String> = rows.iter().map(|r| format!("{:.1},{:.1}", px(r.iteration as f64), py(pick(r).median))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, line.join(" "));
        let ly = top + 16.0 + 16.0 * k as f64;
        let _ = writeln!(s, r#"<line x1="{}" x2="{}" y1="{ly}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, w - right - 110.0, w - right - 90.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, w - right - 85.0, ly + 4.0, xml_escape(&ser.label));
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
