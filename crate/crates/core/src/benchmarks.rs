//! Robust variants of standard test functions, the within-model problem,
//! reference robust optima and regret metrics.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DVector;
use rayon::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{cholesky_with_jitter, fit_hyperparameters, fit_posterior, Dataset, GpPosterior, HyperBounds, HyperOptions, KernelParams};
use crate::mix_seed;
use crate::optim::{nelder_mead, NelderMeadOptions};
use crate::robust::{inner_max, CombineMode, Domain, Objective, SolverOptions, SpaceSpec};

/// Fixed model noise variance used by every problem.
pub const NOISE_VARIANCE: f64 = 1e-3;

pub fn branin(x: f64, theta: f64) -> f64 {
    let (a, b, c, r, s, t) = (1.0, 5.1 / (4.0 * PI * PI), 5.0 / PI, 6.0, 10.0, 1.0 / (8.0 * PI));
    a * (theta - b * x * x + c * x - r).powi(2) + s * (1.0 - t) * x.cos() + s
}

pub fn sinus_linear(z: f64) -> f64 {
    (5.0 * z * z * PI).sin() + 0.5 * z
}

pub fn eggholder(x: f64, theta: f64) -> f64 {
    -(theta + 47.0) * (theta + x / 2.0 + 47.0).abs().sqrt().sin() - x * (x - (theta + 47.0)).abs().sqrt().sin()
}

const HARTMANN_ALPHA: [f64; 4] = [1.0, 1.2, 3.0, 3.2];
const HARTMANN_A: [[f64; 3]; 4] = [[3.0, 10.0, 30.0], [0.1, 10.0, 35.0], [3.0, 10.0, 30.0], [0.1, 10.0, 35.0]];
const HARTMANN_P: [[f64; 3]; 4] = [
    [0.3689, 0.1170, 0.2673],
    [0.4699, 0.4387, 0.7470],
    [0.1091, 0.8732, 0.5547],
    [0.0381, 0.5743, 0.8828],
];

/// Three-dimensional Hartmann sum, with the sign as printed (no leading minus).
pub fn hartmann3(z: &[f64]) -> f64 {
    (0..4)
        .map(|i| {
            let e: f64 = (0..3).map(|j| HARTMANN_A[i][j] * (z[j] - HARTMANN_P[i][j]).powi(2)).sum();
            HARTMANN_ALPHA[i] * (-e).exp()
        })
        .sum()
}

pub fn synthetic_polynomial(z1: f64, z2: f64) -> f64 {
    2.0 * z1.powi(6) - 12.2 * z1.powi(5) + 21.2 * z1.powi(4) + 6.2 * z1 - 6.4 * z1.powi(3) - 4.7 * z1.powi(2) + z2.powi(6) - 11.0 * z2.powi(5)
        + 43.3 * z2.powi(4)
        - 10.0 * z2
        - 74.8 * z2.powi(3)
        + 56.9 * z2.powi(2)
        - 4.1 * z1 * z2
        - 0.1 * z2.powi(2) * z1.powi(2)
        + 0.4 * z2.powi(2) * z1
        + 0.4 * z1.powi(2) * z2
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// User-supplied `f(x, θ)`.
pub type CustomFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum ProblemKind {
    Branin,
    SinusLinear,
    Eggholder,
    Hartmann3,
    SyntheticPolynomial,
    /// Posterior mean of a GP fitted to one random draw.
    WithinModel(Arc<GpPosterior>),
    Custom(CustomFn),
}

impl std::fmt::Debug for ProblemKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::Branin => "Branin",
            Self::SinusLinear => "SinusLinear",
            Self::Eggholder => "Eggholder",
            Self::Hartmann3 => "Hartmann3",
            Self::SyntheticPolynomial => "SyntheticPolynomial",
            Self::WithinModel(_) => "WithinModel",
            Self::Custom(_) => "Custom",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum HyperPolicy {
    /// Maximum likelihood in every iteration.
    Fit(HyperBounds),
    Fixed(KernelParams),
}

#[derive(Debug, Clone)]
pub struct Problem {
    pub name: String,
    pub kind: ProblemKind,
    pub space: SpaceSpec,
    /// Outputs are `(raw - shift) / scale`.
    pub shift: f64,
    pub scale: f64,
    pub noise_std: f64,
    pub hyper: HyperPolicy,
    pub initial_design: usize,
    /// Seed the problem was built with (matters only for random problems).
    pub seed: u64,
}

pub const PROBLEM_NAMES: [&str; 6] = ["branin", "sinus_linear", "eggholder", "hartmann3", "synthetic_polynomial", "within_model"];

impl Problem {
    /// Builds a problem by name; `seed` only affects the within-model problem.
    pub fn by_name(name: &str, seed: u64) -> Result<Self> {
        match name {
            "branin" => Ok(make_branin()),
            "sinus_linear" => Ok(make_sinus_linear()),
            "eggholder" => Ok(make_eggholder()),
            "hartmann3" => Ok(make_hartmann3d()),
            "synthetic_polynomial" => Ok(make_synthetic_polynomial()),
            "within_model" => make_within_model_problem(seed),
            _ => Err(Error::Config(format!("unknown problem '{name}' (known: {})", PROBLEM_NAMES.join(", ")))),
        }
    }

    /// Objective before standardization, in the search-space coordinates.
    pub fn raw(&self, x: &[f64], theta: &[f64]) -> f64 {
        match &self.kind {
            ProblemKind::Branin => branin(-5.0 + 15.0 * x[0], 15.0 * theta[0]),
            ProblemKind::SinusLinear => sinus_linear(x[0] + theta[0]),
            ProblemKind::Eggholder => eggholder(-512.0 + 1024.0 * x[0], -512.0 + 1024.0 * theta[0]),
            ProblemKind::Hartmann3 => hartmann3(&[x[0], x[1], theta[0]]),
            ProblemKind::SyntheticPolynomial => synthetic_polynomial(x[0] + theta[0], x[1] + theta[1]),
            ProblemKind::WithinModel(gp) => gp.mean_with_gradient(&[x[0], theta[0]]).map_or(f64::NAN, |r| r.0),
            ProblemKind::Custom(f) => f(x, theta),
        }
    }

    pub fn value(&self, x: &[f64], theta: &[f64]) -> f64 {
        (self.raw(x, theta) - self.shift) / self.scale
    }

    pub fn value_z(&self, z: &[f64]) -> f64 {
        let (x, t) = self.space.split(z);
        self.value(x, t)
    }

    /// Noisy evaluation.
    pub fn observe<R: Rng>(&self, z: &[f64], rng: &mut R) -> f64 {
        let e: f64 = rng.sample(StandardNormal);
        self.value_z(z) + self.noise_std * e
    }

    /// Unstandardized, noise-free problem around an arbitrary function.
    pub fn custom(name: &str, space: SpaceSpec, f: CustomFn) -> Self {
        Problem {
            name: name.into(),
            kind: ProblemKind::Custom(f),
            space,
            shift: 0.0,
            scale: 1.0,
            noise_std: 0.0,
            hyper: fit_policy(),
            initial_design: 1,
            seed: 0,
        }
    }

    pub fn theta_is_discrete(&self) -> bool {
        self.space.uncontrollable.is_discrete()
    }
}

impl Objective for Problem {
    fn value(&self, x: &[f64], theta: &[f64]) -> f64 {
        Problem::value(self, x, theta)
    }
}

fn standardization(space: &SpaceSpec, raw: impl Fn(&[f64], &[f64]) -> f64, probes: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vals: Vec<f64> = (0..probes)
        .map(|_| {
            let z = space.sample(&mut rng);
            let (x, t) = space.split(&z);
            raw(x, t)
        })
        .collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

const STANDARDIZE_PROBES: usize = 100_000;
const STANDARDIZE_SEED: u64 = 20_240_601;

fn fit_policy() -> HyperPolicy {
    HyperPolicy::Fit(HyperBounds::default())
}

fn finalize(mut p: Problem, standardize: bool) -> Problem {
    if standardize {
        let q = p.clone();
        let (shift, scale) = standardization(&p.space, |x, t| q.raw(x, t), STANDARDIZE_PROBES, STANDARDIZE_SEED);
        p.shift = shift;
        p.scale = scale;
    }
    p
}

fn scalar_set(values: &[f64]) -> Domain {
    Domain::Discrete(values.iter().map(|v| vec![*v]).collect())
}

/// Branin on `[0,1]²`; θ takes 20 equally spaced values in `[0.75, 14.25]`.
pub fn make_branin() -> Problem {
    let thetas: Vec<f64> = linspace(0.75, 14.25, 20).iter().map(|t| t / 15.0).collect();
    let space = SpaceSpec::new(Domain::unit_box(1), scalar_set(&thetas), CombineMode::Concatenate).expect("valid space");
    finalize(
        Problem {
            name: "branin".into(),
            kind: ProblemKind::Branin,
            space,
            shift: 0.0,
            scale: 1.0,
            noise_std: NOISE_VARIANCE.sqrt(),
            hyper: fit_policy(),
            initial_design: 1,
            seed: 0,
        },
        true,
    )
}

pub fn make_sinus_linear() -> Problem {
    let space = SpaceSpec::new(Domain::unit_box(1), scalar_set(&[0.1, 0.05]), CombineMode::Additive).expect("valid space");
    Problem {
        name: "sinus_linear".into(),
        kind: ProblemKind::SinusLinear,
        space,
        shift: 0.0,
        scale: 1.0,
        noise_std: NOISE_VARIANCE.sqrt(),
        hyper: fit_policy(),
        initial_design: 1,
        seed: 0,
    }
}

/// Eggholder on `[0,1]²`; θ ∈ {-512, 0, 185} in original units.
pub fn make_eggholder() -> Problem {
    let thetas: Vec<f64> = [-512.0, 0.0, 185.0].iter().map(|t| (t + 512.0) / 1024.0).collect();
    let space = SpaceSpec::new(Domain::unit_box(1), scalar_set(&thetas), CombineMode::Concatenate).expect("valid space");
    finalize(
        Problem {
            name: "eggholder".into(),
            kind: ProblemKind::Eggholder,
            space,
            shift: 0.0,
            scale: 1.0,
            noise_std: NOISE_VARIANCE.sqrt(),
            hyper: fit_policy(),
            initial_design: 1,
            seed: 0,
        },
        true,
    )
}

/// Hartmann 3D with a 50×50 grid over the first two coordinates and 11 θ values.
pub fn make_hartmann3d() -> Problem {
    let g = linspace(0.0, 1.0, 50);
    let xs: Vec<Vec<f64>> = g.iter().flat_map(|a| g.iter().map(move |b| vec![*a, *b])).collect();
    let thetas = linspace(0.25, 0.75, 11);
    let space = SpaceSpec::new(Domain::Discrete(xs), scalar_set(&thetas), CombineMode::Concatenate).expect("valid space");
    Problem {
        name: "hartmann3".into(),
        kind: ProblemKind::Hartmann3,
        space,
        shift: 0.0,
        scale: 1.0,
        noise_std: NOISE_VARIANCE.sqrt(),
        hyper: fit_policy(),
        initial_design: 1,
        seed: 0,
    }
}

/// Perturbations on circles of radius 0 and 0.5 at six angles (12 entries, duplicates kept).
pub fn polynomial_thetas() -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for r in [0.0, 0.5] {
        for k in 0..6 {
            let a = 0.4 * PI * k as f64;
            out.push(vec![r * a.cos(), r * a.sin()]);
        }
    }
    out
}

pub const POLYNOMIAL_X_BOUNDS: [(f64, f64); 2] = [(-0.95, 3.2), (-0.45, 4.4)];

fn polynomial_space() -> SpaceSpec {
    SpaceSpec::new(Domain::Continuous(POLYNOMIAL_X_BOUNDS.to_vec()), Domain::Discrete(polynomial_thetas()), CombineMode::Additive).expect("valid space")
}

/// Maximum-likelihood hyperparameters from 500 random points with values below 15.
pub fn polynomial_hyperparameters(seed: u64) -> Result<KernelParams> {
    let space = polynomial_space();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d = Dataset::empty(2, 2);
    while d.len() < 500 {
        let z = space.sample(&mut rng);
        let y = synthetic_polynomial(z[0] + z[2], z[1] + z[3]);
        if y < 15.0 {
            d.push(z, y)?;
        }
    }
    let fit = fit_hyperparameters(&d, &HyperBounds::default(), NOISE_VARIANCE, None, &HyperOptions { seed, ..Default::default() })?;
    Ok(fit.params)
}

/// Result of [`polynomial_hyperparameters`] with seed 0, frozen to avoid a 500-point fit per construction.
pub const POLYNOMIAL_PARAMS: (f64, [f64; 4]) = (100.0, [0.38907514797067944, 0.40900409429590523, 0.6063902999828134, 0.343236704047815]);

pub fn make_synthetic_polynomial() -> Problem {
    let (sv, ls) = POLYNOMIAL_PARAMS;
    let params = KernelParams::new(sv, ls.to_vec(), NOISE_VARIANCE).expect("valid parameters");
    Problem {
        name: "synthetic_polynomial".into(),
        kind: ProblemKind::SyntheticPolynomial,
        space: polynomial_space(),
        shift: 0.0,
        scale: 1.0,
        noise_std: NOISE_VARIANCE.sqrt(),
        hyper: HyperPolicy::Fixed(params),
        initial_design: 10,
        seed: 0,
    }
}

pub const WITHIN_MODEL_POINTS: usize = 1000;
pub const WITHIN_MODEL_LENGTHSCALE: f64 = 0.1;

pub fn within_model_params() -> KernelParams {
    KernelParams::isotropic(1.0, WITHIN_MODEL_LENGTHSCALE, 2, NOISE_VARIANCE).expect("valid parameters")
}

/// GP draw at 1000 uniform points; its posterior mean is the objective, `θ` is the second input.
pub fn make_within_model_problem(seed: u64) -> Result<Problem> {
    let params = within_model_params();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x57_1d));
    let xs: Vec<Vec<f64>> = (0..WITHIN_MODEL_POINTS).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect();
    let n = xs.len();
    let mut k = nalgebra::DMatrix::from_fn(n, n, |i, j| params.k(&xs[i], &xs[j]));
    for i in 0..n {
        k[(i, i)] += params.noise_variance;
    }
    let (l, _) = cholesky_with_jitter(k, params.signal_variance)?;
    let e = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let y = l * e;
    let data = Dataset::new(xs, y.iter().copied().collect(), 1, 1)?;
    let gp = fit_posterior(&data, &params)?;
    let space = SpaceSpec::new(Domain::unit_box(1), Domain::unit_box(1), CombineMode::Concatenate)?;
    Ok(Problem {
        name: "within_model".into(),
        kind: ProblemKind::WithinModel(Arc::new(gp)),
        space,
        shift: 0.0,
        scale: 1.0,
        noise_std: NOISE_VARIANCE.sqrt(),
        hyper: HyperPolicy::Fixed(params),
        initial_design: 1,
        seed,
    })
}

/// Brute-force robust optimum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub f_star: f64,
    pub x: Vec<f64>,
    pub theta: Vec<f64>,
}

/// Dense θ grid used for continuous uncontrollable spaces.
pub const THETA_GRID: usize = 201;

/// `g(x) = max_θ f(x, θ)` of the true objective: enumeration for finite θ,
/// dense grid plus local refinement for boxes.
pub fn true_max(problem: &Problem, x: &[f64]) -> (Vec<f64>, f64) {
    let coarse = coarse_max(problem, x);
    match &problem.space.uncontrollable {
        Domain::Discrete(_) => coarse,
        Domain::Continuous(b) => {
            let width = b.iter().map(|(lo, hi)| hi - lo).fold(0.0, f64::max);
            let opts = NelderMeadOptions {
                initial_step: 2.0 / (THETA_GRID - 1) as f64,
                tol: 1e-12 * width.max(1.0),
                max_evaluations: 200,
            };
            let m = nelder_mead(|t| -problem.value(x, t), &coarse.0, b, &opts);
            if -m.value > coarse.1 {
                (m.x, -m.value)
            } else {
                coarse
            }
        }
    }
}

/// Grid-only version of [`true_max`]; a lower bound on `g(x)` for continuous θ.
fn coarse_max(problem: &Problem, x: &[f64]) -> (Vec<f64>, f64) {
    let grid = match &problem.space.uncontrollable {
        Domain::Discrete(_) => return inner_max(problem, x, &problem.space, &SolverOptions::default()),
        Domain::Continuous(b) => grid_points(b, THETA_GRID),
    };
    let mut best = (grid[0].clone(), f64::NEG_INFINITY);
    for t in grid {
        let v = problem.value(x, &t);
        if v > best.1 {
            best = (t, v);
        }
    }
    best
}

/// Full tensor grid with `n` points per dimension.
pub fn grid_points(bounds: &[(f64, f64)], n: usize) -> Vec<Vec<f64>> {
    let axes: Vec<Vec<f64>> = bounds.iter().map(|(lo, hi)| linspace(*lo, *hi, n)).collect();
    let mut out: Vec<Vec<f64>> = vec![vec![]];
    for axis in axes {
        out = out
            .into_iter()
            .flat_map(|p| {
                axis.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push(*v);
                    q
                })
            })
            .collect();
    }
    out
}

/// Brute-force `min_x g(x)` over a grid (or the finite set), refined by Nelder-Mead
/// from the best grid cells when `x` is continuous.
pub fn true_robust_reference(problem: &Problem, grid_per_dim: usize) -> Reference {
    let candidates = match &problem.space.controllable {
        Domain::Discrete(xs) => xs.clone(),
        Domain::Continuous(b) => grid_points(b, grid_per_dim),
    };
    let mut scored: Vec<(f64, usize)> = candidates.par_iter().enumerate().map(|(i, x)| (coarse_max(problem, x).1, i)).collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut best_x = candidates[scored[0].1].clone();
    let mut best = true_max(problem, &best_x).1;
    if let Domain::Continuous(b) = &problem.space.controllable {
        let step = 1.0 / (grid_per_dim.max(2) - 1) as f64;
        let opts = NelderMeadOptions {
            initial_step: step,
            tol: 1e-9,
            max_evaluations: 400,
        };
        for &(_, i) in scored.iter().take(5) {
            let m = nelder_mead(|x| true_max(problem, x).1, &candidates[i], b, &opts);
            if m.value < best {
                best = m.value;
                best_x = m.x;
            }
        }
    }
    let (theta, f_star) = true_max(problem, &best_x);
    Reference {
        f_star,
        x: best_x,
        theta,
    }
}

/// Regrets of a reported optimum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegretRecord {
    /// `|g(x*) - f*|`.
    pub robust: f64,
    /// `|f(x*, θ*) - f*|`.
    pub inference: f64,
}

pub fn compute_regret(problem: &Problem, x: &[f64], theta: &[f64], f_star: f64) -> RegretRecord {
    let (_, g) = true_max(problem, x);
    RegretRecord {
        robust: (g - f_star).abs(),
        inference: (problem.value(x, theta) - f_star).abs(),
    }
}

pub const REFERENCE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct CacheFile {
    schema_version: u32,
    entries: BTreeMap<String, Reference>,
}

/// Reference optima persisted as JSON, keyed by problem, seed and grid resolution.
#[derive(Debug, Default)]
pub struct ReferenceCache {
    entries: BTreeMap<String, Reference>,
}

impl ReferenceCache {
    fn key(problem: &Problem, grid: usize) -> String {
        format!("{}/seed={}/grid={}", problem.name, problem.seed, grid)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = std::fs::read_to_string(path)?;
        let file: CacheFile = serde_json::from_str(&text).map_err(|e| Error::Serde(e.to_string()))?;
        if file.schema_version != REFERENCE_SCHEMA_VERSION {
            return Err(Error::Serde(format!(
                "reference cache schema {} is not supported (expected {REFERENCE_SCHEMA_VERSION})",
                file.schema_version
            )));
        }
        Ok(Self { entries: file.entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = CacheFile {
            schema_version: REFERENCE_SCHEMA_VERSION,
            entries: self.entries.clone(),
        };
        let text = serde_json::to_string_pretty(&file).map_err(|e| Error::Serde(e.to_string()))?;
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn get(&self, problem: &Problem, grid: usize) -> Option<&Reference> {
        self.entries.get(&Self::key(problem, grid))
    }

    pub fn insert(&mut self, problem: &Problem, grid: usize, reference: Reference) {
        self.entries.insert(Self::key(problem, grid), reference);
    }

    pub fn get_or_compute(&mut self, problem: &Problem, grid: usize) -> Reference {
        self.entries
            .entry(Self::key(problem, grid))
            .or_insert_with(|| true_robust_reference(problem, grid))
            .clone()
    }
}

/// Default reference grid: 2000 points for one controllable dimension, 400 per dimension otherwise.
pub fn default_reference_grid(problem: &Problem) -> usize {
    match problem.space.dim_x() {
        1 => 2000,
        _ => 400,
    }
}
