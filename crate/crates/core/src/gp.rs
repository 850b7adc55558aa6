//! Exact GP regression with a zero-mean ARD squared-exponential prior.
//!
//! The prior is `k(z, z') = σ_v² exp(-½ Σ_d (z_d - z'_d)² / l_d²)` plus
//! independent Gaussian observation noise. Posteriors are immutable once
//! fitted and can be shared across threads.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::optim::{lbfgs_box, LbfgsOptions};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-4;
/// Negative predictive variances above this are clamped to zero.
pub const VARIANCE_CLAMP_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub signal_variance: f64,
    pub lengthscales: Vec<f64>,
    pub noise_variance: f64,
}

impl KernelParams {
    pub fn new(signal_variance: f64, lengthscales: Vec<f64>, noise_variance: f64) -> Result<Self> {
        if !(signal_variance > 0.0) || !signal_variance.is_finite() {
            return Err(Error::InvalidArgument(format!("signal variance {signal_variance} must be positive")));
        }
        if lengthscales.is_empty() || lengthscales.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
            return Err(Error::InvalidArgument("lengthscales must be positive and finite".into()));
        }
        if !(noise_variance >= 0.0) || !noise_variance.is_finite() {
            return Err(Error::InvalidArgument(format!("noise variance {noise_variance} must be nonnegative")));
        }
        Ok(Self {
            signal_variance,
            lengthscales,
            noise_variance,
        })
    }

    /// Same lengthscale in every dimension.
    pub fn isotropic(signal_variance: f64, lengthscale: f64, dim: usize, noise_variance: f64) -> Result<Self> {
        Self::new(signal_variance, vec![lengthscale; dim], noise_variance)
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    /// Unchecked kernel evaluation; callers guarantee matching dimensions.
    #[inline]
    pub fn k(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut r2 = 0.0;
        for ((x, y), l) in a.iter().zip(b).zip(&self.lengthscales) {
            let d = (x - y) / l;
            r2 += d * d;
        }
        self.signal_variance * (-0.5 * r2).exp()
    }
}

/// Checked kernel evaluation.
pub fn kernel_eval(p1: &[f64], p2: &[f64], params: &KernelParams) -> Result<f64> {
    check_dim(params.dim(), p1.len())?;
    check_dim(params.dim(), p2.len())?;
    Ok(params.k(p1, p2))
}

/// Derivative of the kernel with respect to each lengthscale.
pub fn kernel_grad_lengthscales(p1: &[f64], p2: &[f64], params: &KernelParams) -> Result<Vec<f64>> {
    let k = kernel_eval(p1, p2, params)?;
    Ok(p1
        .iter()
        .zip(p2)
        .zip(&params.lengthscales)
        .map(|((a, b), l)| k * (a - b).powi(2) / l.powi(3))
        .collect())
}

/// Evaluated inputs with their noisy observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub observations: Vec<f64>,
    pub dim_controllable: usize,
    pub dim_uncontrollable: usize,
}

impl Dataset {
    pub fn empty(dim_controllable: usize, dim_uncontrollable: usize) -> Self {
        Self {
            inputs: Vec::new(),
            observations: Vec::new(),
            dim_controllable,
            dim_uncontrollable,
        }
    }

    pub fn new(inputs: Vec<Vec<f64>>, observations: Vec<f64>, dim_controllable: usize, dim_uncontrollable: usize) -> Result<Self> {
        check_dim(inputs.len(), observations.len())?;
        let mut d = Self::empty(dim_controllable, dim_uncontrollable);
        for (z, y) in inputs.into_iter().zip(observations) {
            d.push(z, y)?;
        }
        Ok(d)
    }

    pub fn dim(&self) -> usize {
        self.dim_controllable + self.dim_uncontrollable
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn push(&mut self, z: Vec<f64>, y: f64) -> Result<()> {
        check_dim(self.dim(), z.len())?;
        if !y.is_finite() || z.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("dataset entries must be finite".into()));
        }
        self.inputs.push(z);
        self.observations.push(y);
        Ok(())
    }

    /// Checks every input against per-dimension bounds.
    pub fn check_within(&self, bounds: &[(f64, f64)]) -> Result<()> {
        check_dim(self.dim(), bounds.len())?;
        for (i, z) in self.inputs.iter().enumerate() {
            if z.iter().zip(bounds).any(|(v, (lo, hi))| v < lo || v > hi) {
                return Err(Error::InvalidArgument(format!("input {i} lies outside the domain")));
            }
        }
        Ok(())
    }

    pub fn controllable<'a>(&self, z: &'a [f64]) -> &'a [f64] {
        &z[..self.dim_controllable]
    }
}

/// Fitted posterior: Cholesky factor of `K + σ_n² I` and `alpha = (K + σ_n² I)⁻¹ y`.
#[derive(Debug, Clone)]
pub struct GpPosterior {
    pub params: KernelParams,
    pub dataset: Dataset,
    chol: DMatrix<f64>,
    alpha: DVector<f64>,
    jitter: f64,
}

pub(crate) fn cholesky_with_jitter(mut m: DMatrix<f64>, scale: f64) -> Result<(DMatrix<f64>, f64)> {
    let n = m.nrows();
    if n == 0 {
        return Ok((m, 0.0));
    }
    let mut jitter = JITTER_START * scale;
    for i in 0..n {
        m[(i, i)] += jitter;
    }
    loop {
        if let Some(c) = m.clone().cholesky() {
            return Ok((c.unpack(), jitter));
        }
        if jitter >= JITTER_MAX * scale * (1.0 - 1e-12) {
            return Err(Error::NotPositiveDefinite { jitter, size: n });
        }
        let next = (jitter * 10.0).min(JITTER_MAX * scale);
        for i in 0..n {
            m[(i, i)] += next - jitter;
        }
        jitter = next;
    }
}

fn kernel_matrix(params: &KernelParams, a: &[Vec<f64>], b: &[Vec<f64>]) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), b.len(), |i, j| params.k(&a[i], &b[j]))
}

/// Factorizes `K + σ_n² I` (with jitter escalation) and solves for `alpha`.
pub fn fit_posterior(dataset: &Dataset, params: &KernelParams) -> Result<GpPosterior> {
    check_dim(dataset.dim(), params.dim())?;
    let n = dataset.len();
    let mut k = kernel_matrix(params, &dataset.inputs, &dataset.inputs);
    for i in 0..n {
        k[(i, i)] += params.noise_variance;
    }
    let (chol, jitter) = cholesky_with_jitter(k, params.signal_variance)?;
    let y = DVector::from_column_slice(&dataset.observations);
    let alpha = if n == 0 {
        DVector::zeros(0)
    } else {
        let w = chol.solve_lower_triangular(&y).expect("triangular factor");
        chol.tr_solve_lower_triangular(&w).expect("triangular factor")
    };
    Ok(GpPosterior {
        params: params.clone(),
        dataset: dataset.clone(),
        chol,
        alpha,
        jitter,
    })
}

impl GpPosterior {
    pub fn dim(&self) -> usize {
        self.params.dim()
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    /// Lower-triangular factor of `K + (σ_n² + jitter) I`.
    pub fn cholesky_factor(&self) -> &DMatrix<f64> {
        &self.chol
    }

    fn check_points(&self, points: &[Vec<f64>]) -> Result<()> {
        for p in points {
            check_dim(self.dim(), p.len())?;
        }
        Ok(())
    }

    /// `k(X, points)` (n × m).
    pub fn train_cross_kernel(&self, points: &[Vec<f64>]) -> DMatrix<f64> {
        kernel_matrix(&self.params, &self.dataset.inputs, points)
    }

    /// `L⁻¹ k(X, points)`; the posterior covariance is `k(P, P') - Vᵀ V'`.
    pub fn whitened_cross(&self, points: &[Vec<f64>]) -> DMatrix<f64> {
        if self.dataset.is_empty() {
            return DMatrix::zeros(0, points.len());
        }
        let ks = self.train_cross_kernel(points);
        self.chol.solve_lower_triangular(&ks).expect("triangular factor")
    }

    /// Posterior mean at each point.
    pub fn mean(&self, points: &[Vec<f64>]) -> Result<DVector<f64>> {
        self.check_points(points)?;
        if self.dataset.is_empty() {
            return Ok(DVector::zeros(points.len()));
        }
        Ok(self.train_cross_kernel(points).transpose() * &self.alpha)
    }

    /// Joint posterior mean and covariance at `points`.
    pub fn predict(&self, points: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        self.check_points(points)?;
        if points.is_empty() {
            return Err(Error::InvalidArgument("predict needs at least one point".into()));
        }
        let mean = self.mean(points)?;
        let v = self.whitened_cross(points);
        let mut cov = kernel_matrix(&self.params, points, points);
        if v.nrows() > 0 {
            cov -= v.transpose() * &v;
        }
        let m = cov.nrows();
        for i in 0..m {
            for j in (i + 1)..m {
                let s = 0.5 * (cov[(i, j)] + cov[(j, i)]);
                cov[(i, j)] = s;
                cov[(j, i)] = s;
            }
            cov[(i, i)] = clamp_variance(cov[(i, i)])?;
        }
        Ok((mean, cov))
    }

    /// Posterior covariance between two point sets, without clamping.
    pub fn cross_covariance(&self, a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<DMatrix<f64>> {
        self.check_points(a)?;
        self.check_points(b)?;
        let mut c = kernel_matrix(&self.params, a, b);
        if !self.dataset.is_empty() {
            c -= self.whitened_cross(a).transpose() * self.whitened_cross(b);
        }
        Ok(c)
    }

    /// Marginal mean and variance at one point.
    pub fn predict_one(&self, z: &[f64]) -> Result<(f64, f64)> {
        check_dim(self.dim(), z.len())?;
        let n = self.dataset.len();
        if n == 0 {
            return Ok((0.0, self.params.signal_variance));
        }
        let ks = DVector::from_fn(n, |i, _| self.params.k(&self.dataset.inputs[i], z));
        let mean = ks.dot(&self.alpha);
        let v = self.chol.solve_lower_triangular(&ks).expect("triangular factor");
        let var = clamp_variance(self.params.signal_variance - v.norm_squared())?;
        Ok((mean, var))
    }

    /// Mean and its gradient with respect to the input.
    pub fn mean_with_gradient(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        check_dim(self.dim(), z.len())?;
        let d = self.dim();
        let mut m = 0.0;
        let mut g = vec![0.0; d];
        for (x, a) in self.dataset.inputs.iter().zip(self.alpha.iter()) {
            let k = self.params.k(x, z) * a;
            m += k;
            for j in 0..d {
                let l = self.params.lengthscales[j];
                g[j] -= k * (z[j] - x[j]) / (l * l);
            }
        }
        Ok((m, g))
    }

    /// Mean, variance and their gradients with respect to the input.
    pub fn predict_with_gradient(&self, z: &[f64]) -> Result<(f64, f64, Vec<f64>, Vec<f64>)> {
        check_dim(self.dim(), z.len())?;
        let n = self.dataset.len();
        let d = self.dim();
        if n == 0 {
            return Ok((0.0, self.params.signal_variance, vec![0.0; d], vec![0.0; d]));
        }
        let ks = DVector::from_fn(n, |i, _| self.params.k(&self.dataset.inputs[i], z));
        // dk(z, z_i)/dz_j = -k (z_j - z_ij) / l_j²
        let dks = DMatrix::from_fn(n, d, |i, j| {
            let l = self.params.lengthscales[j];
            -ks[i] * (z[j] - self.dataset.inputs[i][j]) / (l * l)
        });
        let mean = ks.dot(&self.alpha);
        let dmean: Vec<f64> = (0..d).map(|j| dks.column(j).dot(&self.alpha)).collect();
        let v = self.chol.solve_lower_triangular(&ks).expect("triangular factor");
        let dv = self.chol.solve_lower_triangular(&dks).expect("triangular factor");
        let var = clamp_variance(self.params.signal_variance - v.norm_squared())?;
        let dvar: Vec<f64> = (0..d).map(|j| -2.0 * v.dot(&dv.column(j))).collect();
        Ok((mean, var, dmean, dvar))
    }

    /// Log marginal likelihood of the observations.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.dataset.len();
        if n == 0 {
            return 0.0;
        }
        let y = DVector::from_column_slice(&self.dataset.observations);
        let logdet: f64 = (0..n).map(|i| self.chol[(i, i)].ln()).sum();
        -0.5 * y.dot(&self.alpha) - logdet - 0.5 * n as f64 * LN_2PI
    }

    /// Gradient of the log marginal likelihood with respect to
    /// `(ln σ_v, ln l_1, …, ln l_d)`; the noise is held fixed.
    pub fn log_marginal_likelihood_grad(&self) -> Vec<f64> {
        let n = self.dataset.len();
        let d = self.dim();
        if n == 0 {
            return vec![0.0; d + 1];
        }
        let eye = DMatrix::identity(n, n);
        let w = self.chol.solve_lower_triangular(&eye).expect("triangular factor");
        let kinv = w.transpose() * &w;
        let inner = &self.alpha * self.alpha.transpose() - kinv;
        let xs = &self.dataset.inputs;
        let kf = kernel_matrix(&self.params, xs, xs);
        let mut grad = vec![0.0; d + 1];
        for i in 0..n {
            for j in 0..n {
                let w_ij = 0.5 * inner[(i, j)] * kf[(i, j)];
                // d k / d ln σ_v = 2 k
                grad[0] += 2.0 * w_ij;
                for (dd, l) in self.params.lengthscales.iter().enumerate() {
                    let r = (xs[i][dd] - xs[j][dd]) / l;
                    grad[dd + 1] += w_ij * r * r;
                }
            }
        }
        grad
    }
}

fn clamp_variance(v: f64) -> Result<f64> {
    if v >= 0.0 {
        Ok(v)
    } else if v >= -VARIANCE_CLAMP_TOL {
        Ok(0.0)
    } else {
        Err(Error::NegativeVariance(v))
    }
}

/// Box for hyperparameter search, in natural (not log) units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperBounds {
    /// Bounds on `σ_v` (the signal standard deviation).
    pub signal_std: (f64, f64),
    pub lengthscale: (f64, f64),
}

impl Default for HyperBounds {
    fn default() -> Self {
        Self {
            signal_std: (1e-5, 10.0),
            lengthscale: (1e-5, 10.0),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HyperOptions {
    pub restarts: usize,
    pub seed: u64,
    pub lbfgs: LbfgsOptions,
}

impl Default for HyperOptions {
    fn default() -> Self {
        Self {
            restarts: 5,
            seed: 0,
            lbfgs: LbfgsOptions {
                max_iterations: 200,
                grad_tol: 1e-5,
                ..Default::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperFit {
    pub params: KernelParams,
    pub log_marginal_likelihood: f64,
    /// Every restart failed; `params` holds the bound midpoints.
    pub fallback: bool,
}

/// Multi-restart maximum-likelihood fit of `σ_v` and the lengthscales.
///
/// The first restart starts from `init` (clamped into the box) when given;
/// the rest are drawn log-uniformly from the box.
pub fn fit_hyperparameters(
    dataset: &Dataset,
    bounds: &HyperBounds,
    fixed_noise: f64,
    init: Option<&KernelParams>,
    opts: &HyperOptions,
) -> Result<HyperFit> {
    if dataset.len() < 2 {
        return Err(Error::InvalidArgument("hyperparameter fitting needs at least two points".into()));
    }
    let (s_lo, s_hi) = bounds.signal_std;
    let (l_lo, l_hi) = bounds.lengthscale;
    if !(0.0 < s_lo && s_lo <= s_hi && 0.0 < l_lo && l_lo <= l_hi) {
        return Err(Error::InvalidArgument("hyperparameter bounds must be positive and ordered".into()));
    }
    let d = dataset.dim();
    let mut log_box = vec![(s_lo.ln(), s_hi.ln())];
    log_box.extend(std::iter::repeat_n((l_lo.ln(), l_hi.ln()), d));

    let to_params = |u: &[f64]| -> KernelParams {
        let sd = u[0].exp().clamp(s_lo, s_hi);
        let ls = u[1..].iter().map(|v| v.exp().clamp(l_lo, l_hi)).collect();
        KernelParams {
            signal_variance: sd * sd,
            lengthscales: ls,
            noise_variance: fixed_noise,
        }
    };
    let objective = |u: &[f64]| -> (f64, Vec<f64>) {
        match fit_posterior(dataset, &to_params(u)) {
            Ok(post) => {
                let g = post.log_marginal_likelihood_grad();
                (-post.log_marginal_likelihood(), g.iter().map(|v| -v).collect())
            }
            Err(_) => (f64::INFINITY, vec![0.0; d + 1]),
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<(f64, Vec<f64>)> = None;
    for r in 0..opts.restarts.max(1) {
        let start: Vec<f64> = match (r, init) {
            (0, Some(p)) => {
                let mut u = vec![p.signal_variance.sqrt().ln()];
                u.extend(p.lengthscales.iter().map(|l| l.ln()));
                u.iter().zip(&log_box).map(|(v, (lo, hi))| v.clamp(*lo, *hi)).collect()
            }
            _ => log_box
                .iter()
                .map(|&(lo, hi)| if hi > lo { rng.random_range(lo..hi) } else { lo })
                .collect(),
        };
        let m = lbfgs_box(objective, &start, &log_box, &opts.lbfgs);
        if m.value.is_finite() && best.as_ref().is_none_or(|(v, _)| m.value < *v) {
            best = Some((m.value, m.x));
        }
    }

    let pin = |v: f64, lo: f64, hi: f64| if lo == hi { lo } else { v.clamp(lo, hi) };
    match best {
        Some((nll, u)) => {
            let mut params = to_params(&u);
            let sd = pin(params.signal_variance.sqrt(), s_lo, s_hi);
            params.signal_variance = sd * sd;
            for l in params.lengthscales.iter_mut() {
                *l = pin(*l, l_lo, l_hi);
            }
            Ok(HyperFit {
                params,
                log_marginal_likelihood: -nll,
                fallback: false,
            })
        }
        None => {
            log::warn!("hyperparameter fit failed on every restart, using bound midpoints");
            let sd = 0.5 * (s_lo + s_hi);
            Ok(HyperFit {
                params: KernelParams {
                    signal_variance: sd * sd,
                    lengthscales: vec![0.5 * (l_lo + l_hi); d],
                    noise_variance: fixed_noise,
                },
                log_marginal_likelihood: f64::NEG_INFINITY,
                fallback: true,
            })
        }
    }
}
