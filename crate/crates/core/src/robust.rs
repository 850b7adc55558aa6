//! Search spaces and the min-max solver.
//!
//! A point of the search space is `z = (x, θ)`: `x` is controllable, `θ` is
//! chosen by an adversary. The robust optimum is `min_x max_θ f(x, θ)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::GpPosterior;
use crate::optim::{central_gradient, lbfgs_box, nelder_mead, LbfgsOptions, NelderMeadOptions};
use crate::ssgp::SpectralSample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Continuous(Vec<(f64, f64)>),
    Discrete(Vec<Vec<f64>>),
}

impl Domain {
    pub fn unit_box(dim: usize) -> Self {
        Domain::Continuous(vec![(0.0, 1.0); dim])
    }

    pub fn dim(&self) -> usize {
        match self {
            Domain::Continuous(b) => b.len(),
            Domain::Discrete(p) => p.first().map_or(0, Vec::len),
        }
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, Domain::Discrete(_))
    }

    /// Per-dimension bounds; for finite sets the coordinate-wise hull.
    pub fn bounds(&self) -> Vec<(f64, f64)> {
        match self {
            Domain::Continuous(b) => b.clone(),
            Domain::Discrete(pts) => (0..self.dim())
                .map(|j| {
                    pts.iter()
                        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p[j]), hi.max(p[j])))
                })
                .collect(),
        }
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        match self {
            Domain::Continuous(b) => p.len() == b.len() && p.iter().zip(b).all(|(v, (lo, hi))| *v >= *lo && *v <= *hi),
            Domain::Discrete(pts) => pts.iter().any(|q| q.as_slice() == p),
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            Domain::Continuous(b) => b
                .iter()
                .map(|&(lo, hi)| if hi > lo { rng.random_range(lo..=hi) } else { lo })
                .collect(),
            Domain::Discrete(pts) => pts[rng.random_range(0..pts.len())].clone(),
        }
    }

    fn validate(&self, what: &str) -> Result<()> {
        match self {
            Domain::Continuous(b) => {
                if b.is_empty() || b.iter().any(|(lo, hi)| !(lo <= hi) || !lo.is_finite() || !hi.is_finite()) {
                    return Err(Error::InvalidArgument(format!("{what} box must be non-empty with finite ordered bounds")));
                }
            }
            Domain::Discrete(pts) => {
                let d = self.dim();
                if pts.is_empty() || d == 0 || pts.iter().any(|p| p.len() != d) {
                    return Err(Error::InvalidArgument(format!("{what} set must be non-empty with equal-length points")));
                }
            }
        }
        Ok(())
    }
}

/// How the objective sees `(x, θ)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineMode {
    #[default]
    Concatenate,
    /// The objective is evaluated at `x + θ`.
    Additive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceSpec {
    pub controllable: Domain,
    pub uncontrollable: Domain,
    pub combine: CombineMode,
}

impl SpaceSpec {
    pub fn new(controllable: Domain, uncontrollable: Domain, combine: CombineMode) -> Result<Self> {
        controllable.validate("controllable")?;
        uncontrollable.validate("uncontrollable")?;
        if combine == CombineMode::Additive && controllable.dim() != uncontrollable.dim() {
            return Err(Error::InvalidArgument("additive perturbation needs equal x and θ dimensions".into()));
        }
        Ok(Self {
            controllable,
            uncontrollable,
            combine,
        })
    }

    pub fn dim_x(&self) -> usize {
        self.controllable.dim()
    }

    pub fn dim_theta(&self) -> usize {
        self.uncontrollable.dim()
    }

    pub fn dim(&self) -> usize {
        self.dim_x() + self.dim_theta()
    }

    pub fn join(&self, x: &[f64], theta: &[f64]) -> Vec<f64> {
        let mut z = Vec::with_capacity(x.len() + theta.len());
        z.extend_from_slice(x);
        z.extend_from_slice(theta);
        z
    }

    pub fn split<'a>(&self, z: &'a [f64]) -> (&'a [f64], &'a [f64]) {
        z.split_at(self.dim_x())
    }

    pub fn contains(&self, z: &[f64]) -> bool {
        if z.len() != self.dim() {
            return false;
        }
        let (x, t) = self.split(z);
        self.controllable.contains(x) && self.uncontrollable.contains(t)
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let x = self.controllable.sample(rng);
        let t = self.uncontrollable.sample(rng);
        self.join(&x, &t)
    }

    /// Input seen by the underlying function under the combine mode.
    pub fn perturbed(&self, x: &[f64], theta: &[f64]) -> Vec<f64> {
        match self.combine {
            CombineMode::Concatenate => self.join(x, theta),
            CombineMode::Additive => x.iter().zip(theta).map(|(a, b)| a + b).collect(),
        }
    }
}

/// A function of `(x, θ)` for the min-max solver.
pub trait Objective: Sync {
    fn value(&self, x: &[f64], theta: &[f64]) -> f64;

    /// Gradient with respect to `θ`; `None` falls back to finite differences.
    fn grad_theta(&self, _x: &[f64], _theta: &[f64]) -> Option<Vec<f64>> {
        None
    }
}

impl<F> Objective for F
where
    F: Fn(&[f64], &[f64]) -> f64 + Sync,
{
    fn value(&self, x: &[f64], theta: &[f64]) -> f64 {
        self(x, theta)
    }
}

fn concat(x: &[f64], theta: &[f64]) -> Vec<f64> {
    let mut z = x.to_vec();
    z.extend_from_slice(theta);
    z
}

impl Objective for SpectralSample {
    fn value(&self, x: &[f64], theta: &[f64]) -> f64 {
        SpectralSample::value(self, &concat(x, theta))
    }

    fn grad_theta(&self, x: &[f64], theta: &[f64]) -> Option<Vec<f64>> {
        Some(self.gradient(&concat(x, theta)).split_off(x.len()))
    }
}

/// The posterior mean `m_t(x, θ)`.
pub struct PosteriorMean<'a>(pub &'a GpPosterior);

impl Objective for PosteriorMean<'_> {
    fn value(&self, x: &[f64], theta: &[f64]) -> f64 {
        self.0.mean_with_gradient(&concat(x, theta)).map_or(f64::NAN, |r| r.0)
    }

    fn grad_theta(&self, x: &[f64], theta: &[f64]) -> Option<Vec<f64>> {
        self.0.mean_with_gradient(&concat(x, theta)).ok().map(|(_, mut g)| g.split_off(x.len()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    /// Nelder-Mead restarts for continuous outer searches.
    pub outer_restarts: usize,
    /// Quasi-Newton restarts for continuous inner maximization.
    pub inner_restarts: usize,
    /// Uniform probe points ranking the outer restart locations.
    pub probe_points: usize,
    pub inner_max_iter: usize,
    pub outer_max_evals: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            outer_restarts: 10,
            inner_restarts: 5,
            probe_points: 100,
            inner_max_iter: 100,
            outer_max_evals: 400,
            tol: 1e-6,
            seed: 0,
        }
    }
}

impl SolverOptions {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn nelder_mead(&self) -> NelderMeadOptions {
        NelderMeadOptions {
            tol: self.tol,
            max_evaluations: self.outer_max_evals,
            ..Default::default()
        }
    }
}

const INNER_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

/// Fixed inner start points, shared by every `x` so that `g` is a function of `x` alone.
fn inner_starts(bounds: &[(f64, f64)], opts: &SolverOptions) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ INNER_STREAM);
    let mut starts = vec![bounds.iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect::<Vec<_>>()];
    for _ in 1..opts.inner_restarts.max(1) {
        starts.push(Domain::Continuous(bounds.to_vec()).sample(&mut rng));
    }
    starts
}

/// `h(x)` and `g(x) = f(x, h(x))`. Discrete θ is enumerated (lowest index wins ties);
/// continuous θ uses multistart projected L-BFGS.
pub fn inner_max<O: Objective + ?Sized>(obj: &O, x: &[f64], space: &SpaceSpec, opts: &SolverOptions) -> (Vec<f64>, f64) {
    match &space.uncontrollable {
        Domain::Discrete(thetas) => {
            let mut best = (0, f64::NEG_INFINITY);
            for (i, t) in thetas.iter().enumerate() {
                let v = obj.value(x, t);
                if v > best.1 {
                    best = (i, v);
                }
            }
            (thetas[best.0].clone(), best.1)
        }
        Domain::Continuous(bounds) => {
            let lbfgs = LbfgsOptions {
                max_iterations: opts.inner_max_iter,
                grad_tol: opts.tol,
                ..Default::default()
            };
            let mut best: Option<(Vec<f64>, f64)> = None;
            for start in inner_starts(bounds, opts) {
                let m = lbfgs_box(
                    |t: &[f64]| {
                        let v = obj.value(x, t);
                        let g = match obj.grad_theta(x, t) {
                            Some(g) => g,
                            None => central_gradient(&mut |s: &[f64]| obj.value(x, s), t, bounds, 1e-6),
                        };
                        (-v, g.into_iter().map(|v| -v).collect())
                    },
                    &start,
                    bounds,
                    &lbfgs,
                );
                if best.as_ref().is_none_or(|b| -m.value > b.1) {
                    best = Some((m.x, -m.value));
                }
            }
            let (theta, _) = best.expect("at least one start");
            // re-evaluate so that g(x) = f(x, h(x)) along the same path
            let v = obj.value(x, &theta);
            (theta, v)
        }
    }
}

/// Minimizes `f` over a domain: enumeration for finite sets, probe-ranked
/// multistart Nelder-Mead for boxes. Returns the best point and value.
pub fn minimize_over<F>(f: F, domain: &Domain, opts: &SolverOptions) -> (Vec<f64>, f64)
where
    F: Fn(&[f64]) -> f64,
{
    let safe = |p: &[f64]| {
        let v = f(p);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    match domain {
        Domain::Discrete(pts) => {
            let mut best = (0, f64::INFINITY);
            for (i, p) in pts.iter().enumerate() {
                let v = safe(p);
                if v < best.1 {
                    best = (i, v);
                }
            }
            (pts[best.0].clone(), best.1)
        }
        Domain::Continuous(bounds) => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut probes: Vec<(Vec<f64>, f64)> = (0..opts.probe_points.max(1))
                .map(|_| {
                    let p = domain.sample(&mut rng);
                    let v = safe(&p);
                    (p, v)
                })
                .collect();
            probes.sort_by(|a, b| a.1.total_cmp(&b.1));
            let mut best = probes[0].clone();
            for (start, _) in probes.iter().take(opts.outer_restarts) {
                let m = nelder_mead(safe, start, bounds, &opts.nelder_mead());
                if m.value < best.1 {
                    best = (m.x, m.value);
                }
            }
            best
        }
    }
}

/// Robust optimum `(x*, θ*)` and value `f* = g(x*)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustSolution {
    pub x: Vec<f64>,
    pub theta: Vec<f64>,
    pub value: f64,
}

/// `min_x max_θ f(x, θ)` by nesting [`inner_max`] inside [`minimize_over`].
pub fn robust_optimum<O: Objective + ?Sized>(obj: &O, space: &SpaceSpec, opts: &SolverOptions) -> RobustSolution {
    let (x, _) = minimize_over(|x| inner_max(obj, x, space, opts).1, &space.controllable, opts);
    let (theta, value) = inner_max(obj, &x, space, opts);
    RobustSolution { x, theta, value }
}

/// Robust optimum of the posterior mean.
pub fn report_optimum(posterior: &GpPosterior, space: &SpaceSpec, opts: &SolverOptions) -> RobustSolution {
    robust_optimum(&PosteriorMean(posterior), space, opts)
}

/// Maximizes `f(x, θ)` jointly over the space. Discrete parts are enumerated;
/// with a finite θ set the enumeration runs inside the search over `x`.
pub fn maximize_joint<F>(f: F, space: &SpaceSpec, opts: &SolverOptions) -> (Vec<f64>, Vec<f64>, f64)
where
    F: Fn(&[f64], &[f64]) -> f64,
{
    let neg = |x: &[f64], t: &[f64]| {
        let v = f(x, t);
        if v.is_nan() {
            f64::INFINITY
        } else {
            -v
        }
    };
    match (&space.controllable, &space.uncontrollable) {
        (_, Domain::Discrete(thetas)) => {
            let best_theta = |x: &[f64]| {
                let mut best = (0, f64::INFINITY);
                for (i, t) in thetas.iter().enumerate() {
                    let v = neg(x, t);
                    if v < best.1 {
                        best = (i, v);
                    }
                }
                best
            };
            let (x, v) = minimize_over(|x| best_theta(x).1, &space.controllable, opts);
            let (i, _) = best_theta(&x);
            (x, thetas[i].clone(), -v)
        }
        (Domain::Discrete(xs), Domain::Continuous(_)) => {
            let mut best: Option<(Vec<f64>, Vec<f64>, f64)> = None;
            for x in xs {
                let (t, v) = minimize_over(|t| neg(x, t), &space.uncontrollable, opts);
                if best.as_ref().is_none_or(|b| v < b.2) {
                    best = Some((x.clone(), t, v));
                }
            }
            let (x, t, v) = best.expect("non-empty set");
            (x, t, -v)
        }
        (Domain::Continuous(bx), Domain::Continuous(bt)) => {
            let mut bounds = bx.clone();
            bounds.extend_from_slice(bt);
            let dx = bx.len();
            let (z, v) = minimize_over(|z| neg(&z[..dx], &z[dx..]), &Domain::Continuous(bounds), opts);
            (z[..dx].to_vec(), z[dx..].to_vec(), -v)
        }
    }
}
