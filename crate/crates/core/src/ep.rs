//! Expectation propagation for a Gaussian restricted to an axis-aligned box.
//!
//! Each finite coordinate constraint is replaced by a univariate Gaussian
//! site `exp(-½ τ̃ f_i² + ν̃ f_i)`. Sites are refined by sequential damped
//! moment matching, and the approximate posterior is rebuilt from the
//! prior after each sweep through `B = I + S̃^½ Σ₀ S̃^½`, which never needs
//! `Σ₀⁻¹` and so tolerates singular priors.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::gp::cholesky_with_jitter;
use crate::trunc_gauss::{truncated_moments_1d, BoxBounds};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpOptions {
    /// Weight of the freshly matched site in each damped update.
    pub damping: f64,
    /// Convergence threshold on the relative change of site parameters.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for EpOptions {
    fn default() -> Self {
        Self {
            damping: 0.8,
            tol: 1e-6,
            max_iter: 100,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpResult {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Approximate log-probability of the box under the prior.
    pub log_mass: f64,
    /// Site precisions `τ̃`.
    pub site_precision: DVector<f64>,
    /// Site natural means `ν̃`.
    pub site_shift: DVector<f64>,
    /// Lower Cholesky factor of `B = I + S̃^½ Σ₀ S̃^½`.
    b_factor: DMatrix<f64>,
    /// `α` with `mean = μ₀ + Σ₀ α`.
    alpha: DVector<f64>,
}

impl EpResult {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Propagates the site approximation to jointly Gaussian outputs `g`
    /// with prior mean `m_g`, covariance `c_gg`, and cross-covariance `c_fg`
    /// (constrained × new) against the constrained vector.
    pub fn propagate(&self, m_g: &DVector<f64>, c_gg: &DMatrix<f64>, c_fg: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        check_dim(self.dim(), c_fg.nrows())?;
        check_dim(m_g.len(), c_fg.ncols())?;
        let mean = m_g + c_fg.transpose() * &self.alpha;
        let mut scaled = c_fg.clone();
        for (i, mut row) in scaled.row_iter_mut().enumerate() {
            row *= self.site_precision[i].sqrt();
        }
        let w = self.b_factor.solve_lower_triangular(&scaled).expect("triangular factor");
        let cov = c_gg - w.transpose() * w;
        Ok((mean, cov))
    }
}

/// Sites with precision `τ̃` and shift `ν̃`, combined with the prior.
struct Posterior {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    b_factor: DMatrix<f64>,
    alpha: DVector<f64>,
    log_det_b: f64,
}

fn rebuild(mu0: &DVector<f64>, sigma0: &DMatrix<f64>, tau: &DVector<f64>, nu: &DVector<f64>) -> Result<Posterior> {
    let n = mu0.len();
    let s = tau.map(|t| t.max(0.0).sqrt());
    let mut b = DMatrix::from_fn(n, n, |i, j| s[i] * sigma0[(i, j)] * s[j]);
    for i in 0..n {
        b[(i, i)] += 1.0;
    }
    // exact arithmetic gives B ⪰ I; large sites can expose rounding in Σ₀
    let l = match b.clone().cholesky() {
        Some(c) => c.unpack(),
        None => {
            let scale = (0..n).map(|i| b[(i, i)]).fold(1.0, f64::max);
            cholesky_with_jitter(b, scale)?.0
        }
    };
    let log_det_b = 2.0 * (0..n).map(|i| l[(i, i)].ln()).sum::<f64>();
    // V = L⁻¹ S Σ₀
    let mut s_sigma = sigma0.clone();
    for (i, mut row) in s_sigma.row_iter_mut().enumerate() {
        row *= s[i];
    }
    let v = l.solve_lower_triangular(&s_sigma).expect("triangular factor");
    let mut cov = sigma0 - v.transpose() * &v;
    symmetrize(&mut cov);
    let u = nu - tau.component_mul(mu0);
    let su = (sigma0 * &u).component_mul(&s);
    let inner = l.tr_solve_lower_triangular(&l.solve_lower_triangular(&su).expect("triangular factor")).expect("triangular factor");
    let alpha = &u - inner.component_mul(&s);
    let mean = mu0 + sigma0 * &alpha;
    Ok(Posterior {
        mean,
        cov,
        b_factor: l,
        alpha,
        log_det_b,
    })
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

fn constrained(bounds: &BoxBounds, i: usize) -> bool {
    bounds.lower[i].is_finite() || bounds.upper[i].is_finite()
}

/// Gaussian approximation to `N(prior_mean, prior_cov)` restricted to `bounds`.
pub fn ep_box_condition(prior_mean: &DVector<f64>, prior_cov: &DMatrix<f64>, bounds: &BoxBounds, opts: &EpOptions) -> Result<EpResult> {
    let n = prior_mean.len();
    check_dim(n, prior_cov.nrows())?;
    check_dim(n, prior_cov.ncols())?;
    check_dim(n, bounds.dim())?;
    if !(opts.damping > 0.0 && opts.damping <= 1.0) {
        return Err(Error::InvalidArgument("damping must lie in (0, 1]".into()));
    }
    let mut tau: DVector<f64> = DVector::zeros(n);
    let mut nu: DVector<f64> = DVector::zeros(n);
    let mut mu = prior_mean.clone();
    let mut sigma = prior_cov.clone();
    symmetrize(&mut sigma);
    let sigma0 = sigma.clone();

    let mut converged = false;
    // one undamped sweep after the residual drops below tol
    let mut polish = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        let mut max_change = 0.0f64;
        let mut damped = false;
        let mut stalled = false;
        for i in 0..n {
            if !constrained(bounds, i) {
                continue;
            }
            let sii = sigma[(i, i)];
            let tau_c = 1.0 / sii - tau[i];
            if !(sii > 0.0) || !(tau_c > 0.0) {
                stalled = true;
                continue;
            }
            let nu_c = mu[i] / sii - nu[i];
            let t = truncated_moments_1d(nu_c / tau_c, 1.0 / tau_c, bounds.lower[i], bounds.upper[i])?;
            let tau_new = (1.0 / t.var - tau_c).max(0.0);
            let nu_new = t.mean / t.var - nu_c;

            let residual = ((tau_new - tau[i]).abs() / tau[i].abs().max(1.0)).max((nu_new - nu[i]).abs() / nu[i].abs().max(1.0));
            let mut step = if polish { 1.0 } else { opts.damping };
            let mut applied = false;
            for _ in 0..10 {
                let d_tau = step * (tau_new - tau[i]);
                let d_nu = step * (nu_new - nu[i]);
                let denom = 1.0 + d_tau * sii;
                if denom > 0.0 && (tau[i] + d_tau) >= 0.0 {
                    let col = sigma.column(i).clone_owned();
                    let c = d_tau / denom;
                    sigma -= &col * col.transpose() * c;
                    mu += &col * ((d_nu - d_tau * mu[i]) / denom);
                    tau[i] += d_tau;
                    nu[i] += d_nu;
                    max_change = max_change.max(residual);
                    damped |= step < 1.0;
                    applied = true;
                    break;
                }
                step *= 0.5;
            }
            stalled |= !applied;
        }
        let post = rebuild(prior_mean, &sigma0, &tau, &nu)?;
        mu = post.mean;
        sigma = post.cov;
        if polish || (max_change < opts.tol && !stalled && !damped) {
            converged = max_change < opts.tol && !stalled;
            break;
        }
        polish = max_change < opts.tol && !stalled;
    }
    if !converged {
        log::debug!("EP stopped after {iterations} sweeps without converging");
    }

    let post = rebuild(prior_mean, &sigma0, &tau, &nu)?;
    let log_mass = log_mass(prior_mean, &post, &tau, &nu, bounds)?;
    let mut covariance = post.cov;
    for i in 0..n {
        if covariance[(i, i)] < 0.0 && covariance[(i, i)] > -1e-8 {
            covariance[(i, i)] = 0.0;
        }
    }
    Ok(EpResult {
        mean: post.mean,
        covariance,
        converged,
        iterations,
        log_mass,
        site_precision: tau,
        site_shift: nu,
        b_factor: post.b_factor,
        alpha: post.alpha,
    })
}

fn log_mass(mu0: &DVector<f64>, post: &Posterior, tau: &DVector<f64>, nu: &DVector<f64>, bounds: &BoxBounds) -> Result<f64> {
    let mut total = -0.5 * post.log_det_b + 0.5 * (mu0.dot(&post.alpha) + nu.dot(&post.mean));
    for i in 0..mu0.len() {
        if !constrained(bounds, i) {
            continue;
        }
        let sii = post.cov[(i, i)];
        let tau_c = 1.0 / sii - tau[i];
        if !(sii > 0.0 && tau_c > 0.0) {
            return Ok(f64::NAN);
        }
        let v = 1.0 / tau_c;
        let m = (post.mean[i] / sii - nu[i]) * v;
        let t = truncated_moments_1d(m, v, bounds.lower[i], bounds.upper[i])?;
        let a = m / v + nu[i];
        let b = 1.0 / v + tau[i];
        total += t.ln_mass + 0.5 * (tau[i] * v).ln_1p() - 0.5 * (a * a / b - m * m / v);
    }
    Ok(total)
}

/// Box for the stacked vector `[f(z_1..z_t), f(x_1, h(x_1))..f(x_t, h(x_t))]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FirstBlockLower {
    /// No lower bound on the observed-location block.
    #[default]
    Unbounded,
    /// Literal zero lower bound on the observed-location block.
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResBounds {
    pub bounds: BoxBounds,
    /// Coordinates whose lower bound had to be dropped to keep the box non-empty.
    pub relaxed: usize,
}

/// First `t` coordinates lie below `g(x_i)`; the last `t` lie in `[f*, g(x_i)]`.
pub fn build_res_bounds(g_values: &[f64], f_star: f64, first_lower: FirstBlockLower) -> Result<ResBounds> {
    let t = g_values.len();
    if t == 0 {
        return Err(Error::InvalidArgument("need at least one training point".into()));
    }
    let mut lower = Vec::with_capacity(2 * t);
    let mut upper = Vec::with_capacity(2 * t);
    let mut relaxed = 0;
    let first = match first_lower {
        FirstBlockLower::Unbounded => f64::NEG_INFINITY,
        FirstBlockLower::Zero => 0.0,
    };
    for block_lower in [first, f_star] {
        for &g in g_values {
            if block_lower < g {
                lower.push(block_lower);
            } else {
                lower.push(f64::NEG_INFINITY);
                relaxed += 1;
            }
            upper.push(g);
        }
    }
    Ok(ResBounds {
        bounds: BoxBounds::new(lower, upper)?,
        relaxed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trunc_gauss::truncated_moments_2d;

    const INF: f64 = f64::INFINITY;

    #[test]
    fn unconstrained_returns_prior_after_one_sweep() {
        let mu = DVector::from_vec(vec![0.3, -1.0]);
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 2.0]);
        let r = ep_box_condition(&mu, &cov, &BoxBounds::unbounded(2), &EpOptions::default()).unwrap();
        assert!(r.converged);
        assert_eq!(r.iterations, 1);
        assert!((r.mean - mu).norm() < 1e-14);
        assert!((r.covariance - cov).norm() < 1e-14);
        assert!(r.log_mass.abs() < 1e-14);
    }

    #[test]
    fn half_normal_in_one_dimension() {
        let r = ep_box_condition(
            &DVector::from_vec(vec![0.0]),
            &DMatrix::from_vec(1, 1, vec![1.0]),
            &BoxBounds::new(vec![0.0], vec![INF]).unwrap(),
            &EpOptions::default(),
        )
        .unwrap();
        assert!(r.converged);
        assert!((r.mean[0] - (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-6);
        assert!((r.covariance[(0, 0)] - (1.0 - 2.0 / std::f64::consts::PI)).abs() < 1e-6);
        assert!((r.log_mass - 0.5f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn correlated_pair_close_to_exact() {
        let mu = DVector::zeros(2);
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let b = BoxBounds::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        let r = ep_box_condition(&mu, &cov, &b, &EpOptions::default()).unwrap();
        let exact = truncated_moments_2d([0.0, 0.0], [[1.0, 0.5], [0.5, 1.0]], &b).unwrap();
        for i in 0..2 {
            assert!((r.mean[i] - exact.mean[i]).abs() < 5e-3);
            for j in 0..2 {
                assert!((r.covariance[(i, j)] - exact.cov[i][j]).abs() < 5e-3);
            }
        }
        assert!((r.log_mass.exp() - exact.mass).abs() < 5e-3);
    }

    #[test]
    fn propagate_matches_joint_conditioning() {
        // treating the third coordinate as a passenger must reproduce a direct EP on all three
        let mu = DVector::from_vec(vec![0.1, -0.2, 0.4]);
        let cov = DMatrix::from_row_slice(3, 3, &[1.0, 0.3, 0.5, 0.3, 1.2, -0.2, 0.5, -0.2, 0.9]);
        let b3 = BoxBounds::new(vec![0.0, -INF, -INF], vec![INF, 0.5, INF]).unwrap();
        let full = ep_box_condition(&mu, &cov, &b3, &EpOptions::default()).unwrap();
        let b2 = BoxBounds::new(vec![0.0, -INF], vec![INF, 0.5]).unwrap();
        let sub = ep_box_condition(&mu.rows(0, 2).into(), &cov.view((0, 0), (2, 2)).into(), &b2, &EpOptions::default()).unwrap();
        let (m, c) = sub
            .propagate(&DVector::from_vec(vec![mu[2]]), &DMatrix::from_vec(1, 1, vec![cov[(2, 2)]]), &cov.view((0, 2), (2, 1)).into())
            .unwrap();
        assert!((m[0] - full.mean[2]).abs() < 1e-8);
        assert!((c[(0, 0)] - full.covariance[(2, 2)]).abs() < 1e-8);
    }

    #[test]
    fn singular_prior_is_accepted() {
        // duplicated coordinate: rank-one prior
        let mu = DVector::from_vec(vec![0.0, 0.0]);
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let b = BoxBounds::new(vec![-INF, 0.0], vec![1.0, 1.0]).unwrap();
        let r = ep_box_condition(&mu, &cov, &b, &EpOptions::default()).unwrap();
        let exact = truncated_moments_1d(0.0, 1.0, 0.0, 1.0).unwrap();
        // two sites act on one variable, so EP is only approximate here
        assert!((r.mean[0] - exact.mean).abs() < 0.05, "{} vs {}", r.mean[0], exact.mean);
        assert!((r.mean[0] - r.mean[1]).abs() < 1e-8);
        assert!(r.covariance[(0, 0)] < 1.0);
    }

    #[test]
    fn res_bounds_structure() {
        let r = build_res_bounds(&[2.0], 1.0, FirstBlockLower::Unbounded).unwrap();
        assert_eq!(r.bounds.lower, vec![-INF, 1.0]);
        assert_eq!(r.bounds.upper, vec![2.0, 2.0]);
        assert_eq!(r.relaxed, 0);

        let r = build_res_bounds(&[2.0, 3.0], -INF, FirstBlockLower::Unbounded).unwrap();
        assert!(r.bounds.lower.iter().all(|v| *v == -INF));

        let r = build_res_bounds(&[1.0, 0.5], 1.0, FirstBlockLower::Unbounded).unwrap();
        assert_eq!(r.bounds.lower, vec![-INF, -INF, -INF, -INF]);
        assert_eq!(r.relaxed, 2);

        let r = build_res_bounds(&[2.0, -1.0], 1.0, FirstBlockLower::Zero).unwrap();
        assert_eq!(r.bounds.lower, vec![0.0, -INF, 1.0, -INF]);
        assert_eq!(r.relaxed, 2);
        assert!(build_res_bounds(&[], 0.0, FirstBlockLower::Unbounded).is_err());
    }
}
