//! Browser demo: truncation explorer and an interactive RES loop on Branin.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use robust_es::benchmarks::{make_branin, Problem, NOISE_VARIANCE};
use robust_es::ep::{ep_box_condition, EpOptions};
use robust_es::gp::{fit_hyperparameters, fit_posterior, Dataset, HyperOptions, KernelParams};
use robust_es::res::{maximize_acquisition, prepare_iteration, res_values_at, ResOptions};
use robust_es::robust::{inner_max, report_optimum, Domain, SolverOptions};
use robust_es::trunc_gauss::{truncated_moments_2d, BoxBounds};
use robust_es::{mix_seed, Error};
use wasm_bindgen::prelude::*;

fn js_err(e: Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// Exact and EP moments of a 2-D Gaussian truncated to a box.
///
/// Returns `[mass, m1, m2, c11, c12, c22]` for the exact moments followed by
/// `[m1, m2, c11, c12, c22]` from EP.
pub fn truncation(mean: [f64; 2], sd: [f64; 2], rho: f64, lower: [f64; 2], upper: [f64; 2]) -> Result<Vec<f64>, Error> {
    let cov = [[sd[0] * sd[0], rho * sd[0] * sd[1]], [rho * sd[0] * sd[1], sd[1] * sd[1]]];
    let b = BoxBounds::new(lower.to_vec(), upper.to_vec())?;
    let t = truncated_moments_2d(mean, cov, &b)?;
    let ep = ep_box_condition(&DVector::from_row_slice(&mean), &DMatrix::from_fn(2, 2, |i, j| cov[i][j]), &b, &EpOptions::default())?;
    let c = &ep.covariance;
    Ok(vec![
        t.mass,
        t.mean[0],
        t.mean[1],
        t.cov[0][0],
        t.cov[0][1],
        t.cov[1][1],
        ep.mean[0],
        ep.mean[1],
        c[(0, 0)],
        c[(0, 1)],
        c[(1, 1)],
    ])
}

#[wasm_bindgen(js_name = truncation)]
#[allow(clippy::too_many_arguments)]
pub fn truncation_js(m1: f64, m2: f64, s1: f64, s2: f64, rho: f64, lo1: f64, hi1: f64, lo2: f64, hi2: f64) -> Result<Vec<f64>, JsValue> {
    truncation([m1, m2], [s1, s2], rho, [lo1, lo2], [hi1, hi2]).map_err(js_err)
}

/// Grids over `x` (columns) and the discrete `θ` set (rows), row-major.
#[derive(Default)]
struct View {
    nx: usize,
    mean: Vec<f64>,
    sd: Vec<f64>,
    acquisition: Vec<f64>,
    truth: Vec<f64>,
    robust_mean: Vec<f64>,
    robust_truth: Vec<f64>,
}

/// A Bayesian optimization session on the standardized Branin problem.
#[wasm_bindgen]
pub struct Session {
    problem: Problem,
    thetas: Vec<Vec<f64>>,
    data: Dataset,
    params: KernelParams,
    rng: ChaCha8Rng,
    seed: u64,
    step: u64,
    num_samples: usize,
    view: View,
    reported: Vec<f64>,
}

impl Session {
    pub fn create(seed: u64, initial: usize) -> Result<Self, Error> {
        let problem = make_branin();
        let thetas = match &problem.space.uncontrollable {
            Domain::Discrete(t) => t.clone(),
            _ => unreachable!("branin has a finite θ set"),
        };
        let mut s = Self {
            data: Dataset::empty(1, 1),
            params: KernelParams::isotropic(1.0, 0.2, 2, NOISE_VARIANCE)?,
            rng: ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xde)),
            problem,
            thetas,
            seed,
            step: 0,
            num_samples: 3,
            view: View::default(),
            reported: vec![],
        };
        for _ in 0..initial {
            let z = s.problem.space.sample(&mut s.rng);
            s.observe(z)?;
        }
        Ok(s)
    }

    fn observe(&mut self, z: Vec<f64>) -> Result<f64, Error> {
        let y = self.problem.observe(&z, &mut self.rng);
        self.data.push(z, y)?;
        if self.data.len() >= 2 {
            let opts = HyperOptions { restarts: 2, seed: mix_seed(self.seed, self.data.len() as u64), ..Default::default() };
            self.params = fit_hyperparameters(&self.data, &Default::default(), NOISE_VARIANCE, Some(&self.params), &opts)?.params;
        }
        Ok(y)
    }

    fn solver(&self) -> SolverOptions {
        SolverOptions { outer_restarts: 4, ..Default::default() }.with_seed(mix_seed(self.seed, 7_000 + self.step))
    }

    fn res_options(&self) -> ResOptions {
        ResOptions { num_samples: self.num_samples, num_features: 300, solver: self.solver(), ..Default::default() }
    }

    /// Evaluates the objective at `x` and the `theta_index`-th θ value.
    pub fn evaluate_at(&mut self, x: f64, theta_index: usize) -> Result<f64, Error> {
        let t = self.thetas.get(theta_index).ok_or_else(|| Error::InvalidArgument(format!("θ index {theta_index} out of range")))?.clone();
        self.observe(self.problem.space.join(&[x.clamp(0.0, 1.0)], &t))
    }

    /// One RES iteration: maximize the acquisition, evaluate there. Returns the chosen `(x, θ)`.
    pub fn res_step(&mut self) -> Result<Vec<f64>, Error> {
        let post = Arc::new(fit_posterior(&self.data, &self.params)?);
        let state = prepare_iteration(post, &self.problem.space, &self.res_options(), mix_seed(self.seed, self.step))?;
        let z = maximize_acquisition(&state, &self.solver());
        self.step += 1;
        self.observe(z.clone())?;
        Ok(z)
    }

    /// Recomputes every grid shown on the page at `nx` x-values.
    pub fn refresh(&mut self, nx: usize) -> Result<(), Error> {
        let nx = nx.max(2);
        let post = Arc::new(fit_posterior(&self.data, &self.params)?);
        let state = prepare_iteration(post.clone(), &self.problem.space, &self.res_options(), mix_seed(self.seed, self.step))?;
        let xs: Vec<f64> = (0..nx).map(|i| i as f64 / (nx - 1) as f64).collect();
        let nt = self.thetas.len();
        let mut v = View { nx, ..Default::default() };
        v.mean.resize(nx * nt, 0.0);
        v.sd.resize(nx * nt, 0.0);
        v.acquisition.resize(nx * nt, 0.0);
        v.truth.resize(nx * nt, 0.0);
        for (i, &x) in xs.iter().enumerate() {
            let acq = res_values_at(&state, &[x], &self.thetas);
            for (j, t) in self.thetas.iter().enumerate() {
                let z = self.problem.space.join(&[x], t);
                let (m, var) = post.predict_one(&z)?;
                let k = j * nx + i;
                v.mean[k] = m;
                v.sd[k] = var.max(0.0).sqrt();
                v.acquisition[k] = acq[j];
                v.truth[k] = self.problem.value(&[x], t);
            }
            v.robust_mean.push((0..nt).map(|j| v.mean[j * nx + i]).fold(f64::NEG_INFINITY, f64::max));
            v.robust_truth.push(inner_max(&self.problem, &[x], &self.problem.space, &SolverOptions::default()).1);
        }
        let r = report_optimum(&post, &self.problem.space, &self.solver());
        self.reported = vec![r.x[0], r.theta[0], r.value];
        self.view = v;
        Ok(())
    }
}

#[wasm_bindgen]
impl Session {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, initial: u32) -> Result<Session, JsValue> {
        Session::create(seed as u64, initial as usize).map_err(js_err)
    }

    pub fn evaluate(&mut self, x: f64, theta_index: u32) -> Result<f64, JsValue> {
        self.evaluate_at(x, theta_index as usize).map_err(js_err)
    }

    pub fn step(&mut self) -> Result<Vec<f64>, JsValue> {
        self.res_step().map_err(js_err)
    }

    pub fn update(&mut self, nx: u32) -> Result<(), JsValue> {
        self.refresh(nx as usize).map_err(js_err)
    }

    #[wasm_bindgen(js_name = setSamples)]
    pub fn set_samples(&mut self, c: u32) {
        self.num_samples = c.clamp(1, 20) as usize;
    }

    #[wasm_bindgen(getter)]
    pub fn thetas(&self) -> Vec<f64> {
        self.thetas.iter().map(|t| t[0]).collect()
    }

    /// Flattened `(x, θ, y)` triples.
    #[wasm_bindgen(getter)]
    pub fn observations(&self) -> Vec<f64> {
        self.data.inputs.iter().zip(&self.data.observations).flat_map(|(z, y)| [z[0], z[1], *y]).collect()
    }

    #[wasm_bindgen(getter)]
    pub fn nx(&self) -> usize {
        self.view.nx
    }

    pub fn mean(&self) -> Vec<f64> {
        self.view.mean.clone()
    }

    pub fn sd(&self) -> Vec<f64> {
        self.view.sd.clone()
    }

    pub fn acquisition(&self) -> Vec<f64> {
        self.view.acquisition.clone()
    }

    pub fn truth(&self) -> Vec<f64> {
        self.view.truth.clone()
    }

    #[wasm_bindgen(js_name = robustMean)]
    pub fn robust_mean(&self) -> Vec<f64> {
        self.view.robust_mean.clone()
    }

    #[wasm_bindgen(js_name = robustTruth)]
    pub fn robust_truth(&self) -> Vec<f64> {
        self.view.robust_truth.clone()
    }

    /// `[x*, θ*, g*]` of the posterior mean.
    pub fn reported(&self) -> Vec<f64> {
        self.reported.clone()
    }
}
