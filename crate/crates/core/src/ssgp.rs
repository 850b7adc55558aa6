//! Sparse-spectrum (random Fourier feature) approximation of the SE-ARD GP.
//!
//! Posterior samples are linear in a fixed cosine basis, so each sample is a
//! cheap closed-form function with an analytic gradient.

use std::f64::consts::TAU;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, Error, Result};
use crate::gp::{Dataset, KernelParams};

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralBasis {
    /// Row-major `F × d` frequency matrix.
    frequencies: Vec<f64>,
    phases: Vec<f64>,
    dim: usize,
    pub signal_variance: f64,
}

impl SpectralBasis {
    /// Builds a basis from explicit frequencies (row-major `F × d`) and phases.
    pub fn from_parts(frequencies: Vec<f64>, phases: Vec<f64>, dim: usize, signal_variance: f64) -> Result<Self> {
        if phases.is_empty() || dim == 0 {
            return Err(Error::InvalidArgument("basis needs at least one feature and dimension".into()));
        }
        check_dim(phases.len() * dim, frequencies.len())?;
        Ok(Self {
            frequencies,
            phases,
            dim,
            signal_variance,
        })
    }

    pub fn num_features(&self) -> usize {
        self.phases.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frequency(&self, i: usize) -> &[f64] {
        &self.frequencies[i * self.dim..(i + 1) * self.dim]
    }

    pub fn phases(&self) -> &[f64] {
        &self.phases
    }

    pub fn amplitude(&self) -> f64 {
        (2.0 * self.signal_variance / self.num_features() as f64).sqrt()
    }

    #[inline]
    fn arg(&self, i: usize, z: &[f64]) -> f64 {
        let w = self.frequency(i);
        let mut s = self.phases[i];
        for (a, b) in w.iter().zip(z) {
            s += a * b;
        }
        s
    }

    /// Feature vector `φ(z)`.
    pub fn features(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim, z.len())?;
        let amp = self.amplitude();
        Ok((0..self.num_features()).map(|i| amp * self.arg(i, z).cos()).collect())
    }

    /// `φ(z)ᵀ φ(z')`, the kernel approximation.
    pub fn approx_kernel(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        let fa = self.features(a)?;
        let fb = self.features(b)?;
        Ok(fa.iter().zip(&fb).map(|(x, y)| x * y).sum())
    }
}

/// Draws frequencies from the SE-ARD spectral density and uniform phases.
pub fn build_basis(params: &KernelParams, num_features: usize, seed: u64) -> Result<SpectralBasis> {
    if num_features == 0 {
        return Err(Error::InvalidArgument("number of features must be at least 1".into()));
    }
    let d = params.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frequencies = Vec::with_capacity(num_features * d);
    for _ in 0..num_features {
        for l in &params.lengthscales {
            let e: f64 = rng.sample(StandardNormal);
            frequencies.push(e / l);
        }
    }
    let phases = (0..num_features).map(|_| rng.random_range(0.0..TAU)).collect();
    SpectralBasis::from_parts(frequencies, phases, d, params.signal_variance)
}

/// One analytic function sample `f(z) = aᵀ φ(z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralSample {
    pub basis: Arc<SpectralBasis>,
    pub weights: Vec<f64>,
}

impl SpectralSample {
    pub fn new(basis: Arc<SpectralBasis>, weights: Vec<f64>) -> Result<Self> {
        check_dim(basis.num_features(), weights.len())?;
        Ok(Self { basis, weights })
    }

    pub fn dim(&self) -> usize {
        self.basis.dim
    }

    /// Unchecked evaluation.
    #[inline]
    pub fn value(&self, z: &[f64]) -> f64 {
        let b = &*self.basis;
        let mut s = 0.0;
        for (i, a) in self.weights.iter().enumerate() {
            s += a * b.arg(i, z).cos();
        }
        b.amplitude() * s
    }

    /// Unchecked gradient `-Σ a_i amp sin(w_iᵀz + b_i) w_i`.
    pub fn gradient(&self, z: &[f64]) -> Vec<f64> {
        let b = &*self.basis;
        let amp = b.amplitude();
        let mut g = vec![0.0; b.dim];
        for (i, a) in self.weights.iter().enumerate() {
            let c = -a * amp * b.arg(i, z).sin();
            for (gj, wj) in g.iter_mut().zip(b.frequency(i)) {
                *gj += c * wj;
            }
        }
        g
    }
}

pub fn eval_sample(sample: &SpectralSample, z: &[f64]) -> Result<f64> {
    check_dim(sample.dim(), z.len())?;
    Ok(sample.value(z))
}

pub fn eval_sample_grad(sample: &SpectralSample, z: &[f64]) -> Result<Vec<f64>> {
    check_dim(sample.dim(), z.len())?;
    Ok(sample.gradient(z))
}

/// Draws `count` weight vectors from the Bayesian linear-regression posterior
/// `N(A⁻¹Φᵀy, σ_n² A⁻¹)`, `A = ΦᵀΦ + σ_n² I`, all sharing `basis`.
pub fn draw_samples(
    basis: &Arc<SpectralBasis>,
    dataset: &Dataset,
    noise_variance: f64,
    count: usize,
    seed: u64,
) -> Result<Vec<SpectralSample>> {
    if count == 0 {
        return Err(Error::InvalidArgument("sample count must be at least 1".into()));
    }
    check_dim(basis.dim, dataset.dim())?;
    let f = basis.num_features();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = |n: usize| DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));

    if dataset.is_empty() {
        return (0..count).map(|_| SpectralSample::new(basis.clone(), normal(f).as_slice().to_vec())).collect();
    }
    if !(noise_variance > 0.0) {
        return Err(Error::InvalidArgument("weight posterior needs positive noise variance".into()));
    }
    let t = dataset.len();
    let mut phi = DMatrix::zeros(t, f);
    for (r, z) in dataset.inputs.iter().enumerate() {
        for (c, v) in basis.features(z)?.into_iter().enumerate() {
            phi[(r, c)] = v;
        }
    }
    let mut a = phi.transpose() * &phi;
    for i in 0..f {
        a[(i, i)] += noise_variance;
    }
    let chol = a.cholesky().ok_or(Error::NotPositiveDefinite { jitter: 0.0, size: f })?;
    let y = DVector::from_column_slice(&dataset.observations);
    let mean = chol.solve(&(phi.transpose() * y));
    let l = chol.l();
    let sd = noise_variance.sqrt();
    (0..count)
        .map(|_| {
            // L⁻ᵀ e has covariance A⁻¹.
            let e = normal(f);
            let dev = l.tr_solve_lower_triangular(&e).expect("triangular factor");
            let w = &mean + dev * sd;
            SpectralSample::new(basis.clone(), w.as_slice().to_vec())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(l: f64, d: usize) -> KernelParams {
        KernelParams::isotropic(1.0, l, d, 1e-3).unwrap()
    }

    #[test]
    fn single_feature_basis() {
        let b = build_basis(&params(0.3, 2), 1, 1).unwrap();
        assert_eq!(b.num_features(), 1);
        assert!((b.amplitude() - 2f64.sqrt()).abs() < 1e-15);
        assert!(build_basis(&params(0.3, 2), 0, 1).is_err());
    }

    #[test]
    fn basis_is_deterministic_and_phases_in_range() {
        let a = build_basis(&params(0.3, 2), 100, 9).unwrap();
        let b = build_basis(&params(0.3, 2), 100, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.phases().iter().all(|p| (0.0..TAU).contains(p)));
    }

    #[test]
    fn zero_and_unit_weights() {
        let b = Arc::new(build_basis(&params(0.3, 2), 5, 2).unwrap());
        let zero = SpectralSample::new(b.clone(), vec![0.0; 5]).unwrap();
        assert_eq!(eval_sample(&zero, &[0.2, 0.9]).unwrap(), 0.0);
        let unit = SpectralSample::new(b.clone(), vec![1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let z = [0.4, 0.1];
        assert!((eval_sample(&unit, &z).unwrap() - b.features(&z).unwrap()[0]).abs() < 1e-15);
    }

    #[test]
    fn hand_computed_one_feature_derivative() {
        let b = Arc::new(SpectralBasis::from_parts(vec![3.0], vec![0.5], 1, 2.0).unwrap());
        let s = SpectralSample::new(b, vec![1.5]).unwrap();
        // f(z) = 1.5 · 2 cos(3z + 0.5), f'(z) = -9 sin(3z + 0.5)
        let z = 0.7;
        assert!((s.value(&[z]) - 3.0 * (3.0 * z + 0.5).cos()).abs() < 1e-14);
        assert!((s.gradient(&[z])[0] + 9.0 * (3.0 * z + 0.5).sin()).abs() < 1e-14);
    }

    #[test]
    fn constant_sample_has_zero_gradient() {
        let b = Arc::new(SpectralBasis::from_parts(vec![0.0; 6], vec![0.1, 0.2, 0.3], 2, 1.0).unwrap());
        let s = SpectralSample::new(b, vec![1.0, -2.0, 0.5]).unwrap();
        assert_eq!(s.gradient(&[0.3, 0.8]), vec![0.0, 0.0]);
    }

    #[test]
    fn three_samples_share_one_basis() {
        let b = Arc::new(build_basis(&params(0.3, 2), 50, 3).unwrap());
        let d = Dataset::new(vec![vec![0.1, 0.1], vec![0.5, 0.9]], vec![1.0, -1.0], 1, 1).unwrap();
        let s = draw_samples(&b, &d, 1e-3, 3, 4).unwrap();
        assert_eq!(s.len(), 3);
        assert!(Arc::ptr_eq(&s[0].basis, &s[2].basis));
        assert_ne!(s[0].weights, s[1].weights);
        assert_ne!(s[1].weights, s[2].weights);
    }

    #[test]
    fn huge_noise_ignores_data() {
        let b = Arc::new(build_basis(&params(0.3, 1), 200, 5).unwrap());
        let d = Dataset::new(vec![vec![0.2], vec![0.6]], vec![5.0, 5.0], 1, 0).unwrap();
        let low: f64 = draw_samples(&b, &d, 1e-3, 200, 6).unwrap().iter().map(|s| s.value(&[0.2])).sum::<f64>() / 200.0;
        let high: f64 = draw_samples(&b, &d, 1e6, 200, 6).unwrap().iter().map(|s| s.value(&[0.2])).sum::<f64>() / 200.0;
        assert!((low - 5.0).abs() < 0.1, "{low}");
        assert!(high.abs() < 0.5, "{high}");
    }
}
