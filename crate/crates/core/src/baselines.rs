//! Baseline acquisition rules for minimization: UCB, StableOpt, EI, MES and KG.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::GpPosterior;
use crate::mix_seed;
use crate::robust::{inner_max, maximize_joint, robust_optimum, Domain, Objective, SolverOptions, SpaceSpec};
use crate::ssgp::{build_basis, draw_samples};
use crate::trunc_gauss::{ln_std_normal_cdf, std_normal_cdf, std_normal_pdf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    StableOpt,
    Ucb,
    Ei,
    Mes,
    Kg,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub beta_sqrt: f64,
    pub mes_num_mins: usize,
    pub mes_num_features: usize,
    pub kg_grid_per_dim: usize,
    /// Upper limit on the KG grid size.
    pub kg_max_grid: usize,
    pub kg_num_samples: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            beta_sqrt: 2.0,
            mes_num_mins: 100,
            mes_num_features: 500,
            kg_grid_per_dim: 50,
            kg_max_grid: 2500,
            kg_num_samples: 32,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_sqrt >= 0.0) {
            return Err(Error::Config("beta_sqrt must be nonnegative".into()));
        }
        if self.mes_num_mins == 0 || self.kg_grid_per_dim == 0 || self.kg_num_samples == 0 || self.kg_max_grid == 0 {
            return Err(Error::Config("baseline counts must be at least 1".into()));
        }
        Ok(())
    }
}

/// `m(z) + sign·√β·s(z)` as a function of `(x, θ)`.
pub struct ConfidenceBound<'a> {
    pub posterior: &'a GpPosterior,
    pub beta_sqrt: f64,
    /// `-1` for the lower bound, `+1` for the upper bound.
    pub sign: f64,
}

impl ConfidenceBound<'_> {
    fn z(x: &[f64], theta: &[f64]) -> Vec<f64> {
        let mut z = x.to_vec();
        z.extend_from_slice(theta);
        z
    }
}

impl Objective for ConfidenceBound<'_> {
    fn value(&self, x: &[f64], theta: &[f64]) -> f64 {
        match self.posterior.predict_one(&Self::z(x, theta)) {
            Ok((m, v)) => m + self.sign * self.beta_sqrt * v.sqrt(),
            Err(_) => f64::NAN,
        }
    }

    fn grad_theta(&self, x: &[f64], theta: &[f64]) -> Option<Vec<f64>> {
        let (_, v, dm, dv) = self.posterior.predict_with_gradient(&Self::z(x, theta)).ok()?;
        let s = v.sqrt().max(1e-12);
        Some(
            dm.iter()
                .zip(&dv)
                .skip(x.len())
                .map(|(a, b)| a + self.sign * self.beta_sqrt * b / (2.0 * s))
                .collect(),
        )
    }
}

/// `argmin_z m(z) - √β s(z)`.
pub fn ucb_select(posterior: &GpPosterior, space: &SpaceSpec, beta_sqrt: f64, opts: &SolverOptions) -> Vec<f64> {
    let lcb = ConfidenceBound {
        posterior,
        beta_sqrt,
        sign: -1.0,
    };
    let (x, t, _) = maximize_joint(|x, t| -lcb.value(x, t), space, opts);
    space.join(&x, &t)
}

/// `x = argmin_x max_θ LCB(x, θ)`, then `θ = argmax_θ UCB(x, θ)`.
pub fn stableopt_select(posterior: &GpPosterior, space: &SpaceSpec, beta_sqrt: f64, opts: &SolverOptions) -> Vec<f64> {
    let lcb = ConfidenceBound {
        posterior,
        beta_sqrt,
        sign: -1.0,
    };
    let ucb = ConfidenceBound {
        posterior,
        beta_sqrt,
        sign: 1.0,
    };
    let x = robust_optimum(&lcb, space, opts).x;
    let (theta, _) = inner_max(&ucb, &x, space, opts);
    space.join(&x, &theta)
}

/// Closed-form expected improvement below `incumbent`.
pub fn expected_improvement(mean: f64, var: f64, incumbent: f64) -> f64 {
    let s = var.max(0.0).sqrt();
    let diff = incumbent - mean;
    if s <= 0.0 || !s.is_finite() {
        return diff.max(0.0);
    }
    let g = diff / s;
    (diff * std_normal_cdf(g) + s * std_normal_pdf(g)).max(0.0)
}

/// Maximizes EI; the incumbent defaults to the best observation.
pub fn ei_select(posterior: &GpPosterior, space: &SpaceSpec, incumbent: Option<f64>, opts: &SolverOptions) -> Result<Vec<f64>> {
    let best = match incumbent {
        Some(v) => v,
        None => posterior
            .dataset
            .observations
            .iter()
            .copied()
            .reduce(f64::min)
            .ok_or_else(|| Error::InvalidArgument("EI needs at least one observation".into()))?,
    };
    let (x, t, _) = maximize_joint(
        |x, t| {
            posterior
                .predict_one(&space.join(x, t))
                .map_or(f64::NEG_INFINITY, |(m, v)| expected_improvement(m, v, best))
        },
        space,
        opts,
    );
    Ok(space.join(&x, &t))
}

/// Max-value entropy search term for minimization, averaged over sampled minima.
pub fn mes_value(mean: f64, var: f64, minima: &[f64]) -> f64 {
    let s = var.max(0.0).sqrt();
    if s <= 0.0 || minima.is_empty() {
        return 0.0;
    }
    let total: f64 = minima
        .iter()
        .map(|y| {
            let g = (mean - y) / s;
            let ln_cdf = ln_std_normal_cdf(g);
            let ratio = (-0.5 * g * g - 0.5 * (2.0 * std::f64::consts::PI).ln() - ln_cdf).exp();
            g * ratio / 2.0 - ln_cdf
        })
        .sum();
    (total / minima.len() as f64).max(0.0)
}

/// Global minima of posterior function samples.
pub fn sample_minima(posterior: &GpPosterior, space: &SpaceSpec, count: usize, num_features: usize, seed: u64, opts: &SolverOptions) -> Result<Vec<f64>> {
    let basis = Arc::new(build_basis(&posterior.params, num_features, mix_seed(seed, 1))?);
    let samples = draw_samples(&basis, &posterior.dataset, posterior.params.noise_variance, count, mix_seed(seed, 2))?;
    Ok(samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let o = opts.with_seed(mix_seed(seed, 3 + i as u64));
            -maximize_joint(|x, t| -s.value(&space.join(x, t)), space, &o).2
        })
        .collect())
}

pub fn mes_select(posterior: &GpPosterior, space: &SpaceSpec, cfg: &BaselineConfig, seed: u64, opts: &SolverOptions) -> Result<Vec<f64>> {
    let minima = sample_minima(posterior, space, cfg.mes_num_mins, cfg.mes_num_features, seed, opts)?;
    let (x, t, _) = maximize_joint(
        |x, t| {
            posterior
                .predict_one(&space.join(x, t))
                .map_or(f64::NEG_INFINITY, |(m, v)| mes_value(m, v, &minima))
        },
        space,
        opts,
    );
    Ok(space.join(&x, &t))
}

/// Uniformly random candidate grid; finite sets contribute random members.
pub fn kg_grid(space: &SpaceSpec, grid_per_dim: usize, max_grid: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let table = match (&space.controllable, &space.uncontrollable) {
        (Domain::Discrete(xs), Domain::Discrete(ts)) => Some(xs.len() * ts.len()),
        _ => None,
    };
    let size = (grid_per_dim as f64).powi(space.dim() as i32).min(max_grid as f64) as usize;
    match (table, &space.controllable, &space.uncontrollable) {
        (Some(n), Domain::Discrete(xs), Domain::Discrete(ts)) if n <= size => {
            xs.iter().flat_map(|x| ts.iter().map(move |t| space.join(x, t))).collect()
        }
        _ => (0..size.max(1)).map(|_| space.sample(&mut rng)).collect(),
    }
}

/// Knowledge gradient of every grid point, with common fantasy draws.
pub fn kg_values(posterior: &GpPosterior, grid: &[Vec<f64>], num_samples: usize, seed: u64) -> Result<Vec<f64>> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("KG grid is empty".into()));
    }
    let n = grid.len();
    let means = posterior.mean(grid)?;
    let w = posterior.whitened_cross(grid);
    let noise = posterior.params.noise_variance;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<f64> = (0..num_samples).map(|_| StandardNormal.sample(&mut rng)).collect();
    let best_now = means.iter().copied().fold(f64::INFINITY, f64::min);
    let mut out = Vec::with_capacity(n);
    let mut b = vec![0.0; n];
    for c in 0..n {
        // posterior covariance between every grid point and candidate c
        for (g, bg) in b.iter_mut().enumerate() {
            let mut k = posterior.params.k(&grid[g], &grid[c]);
            if w.nrows() > 0 {
                k -= w.column(g).dot(&w.column(c));
            }
            *bg = k;
        }
        let scale = (b[c].max(0.0) + noise).sqrt();
        let mut expected = 0.0;
        for e in &draws {
            let mut lo = f64::INFINITY;
            for g in 0..n {
                lo = lo.min(means[g] + b[g] / scale * e);
            }
            expected += lo;
        }
        out.push((best_now - expected / num_samples as f64).max(0.0));
    }
    Ok(out)
}

/// Argmax of the knowledge gradient over a fresh random grid.
pub fn kg_select(posterior: &GpPosterior, space: &SpaceSpec, cfg: &BaselineConfig, seed: u64) -> Result<Vec<f64>> {
    let grid = kg_grid(space, cfg.kg_grid_per_dim, cfg.kg_max_grid, mix_seed(seed, 1));
    let values = kg_values(posterior, &grid, cfg.kg_num_samples, mix_seed(seed, 2))?;
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    Ok(grid[best].clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::{fit_posterior, Dataset, KernelParams};
    use crate::robust::CombineMode;

    fn table_space(xs: &[f64], ts: &[f64]) -> SpaceSpec {
        SpaceSpec::new(
            Domain::Discrete(xs.iter().map(|v| vec![*v]).collect()),
            Domain::Discrete(ts.iter().map(|v| vec![*v]).collect()),
            CombineMode::Concatenate,
        )
        .unwrap()
    }

    fn post(points: &[(f64, f64, f64)], noise: f64) -> GpPosterior {
        let d = Dataset::new(points.iter().map(|p| vec![p.0, p.1]).collect(), points.iter().map(|p| p.2).collect(), 1, 1).unwrap();
        fit_posterior(&d, &KernelParams::new(1.0, vec![0.3, 0.3], noise).unwrap()).unwrap()
    }

    #[test]
    fn stableopt_matches_hand_enumeration() {
        let p = post(&[(0.0, 0.0, 0.5), (1.0, 1.0, -0.2), (0.5, 0.0, 0.1)], 1e-3);
        let space = table_space(&[0.0, 0.5, 1.0], &[0.0, 1.0]);
        let beta = 1.0;
        let z = stableopt_select(&p, &space, beta, &SolverOptions::default());
        let cb = |x: f64, t: f64, s: f64| {
            let (m, v) = p.predict_one(&[x, t]).unwrap();
            m + s * beta * v.sqrt()
        };
        let mut best_x = (0.0, f64::INFINITY);
        for x in [0.0, 0.5, 1.0] {
            let g = cb(x, 0.0, -1.0).max(cb(x, 1.0, -1.0));
            if g < best_x.1 {
                best_x = (x, g);
            }
        }
        let t = if cb(best_x.0, 1.0, 1.0) > cb(best_x.0, 0.0, 1.0) { 1.0 } else { 0.0 };
        assert_eq!(z, vec![best_x.0, t]);
    }

    #[test]
    fn stableopt_without_exploration_is_mean_min_max() {
        let p = post(&[(0.0, 0.0, 0.5), (1.0, 1.0, -0.2), (0.5, 0.0, 0.1), (0.5, 1.0, 0.9)], 1e-3);
        let space = table_space(&[0.0, 0.25, 0.5, 0.75, 1.0], &[0.0, 0.5, 1.0]);
        let z = stableopt_select(&p, &space, 0.0, &SolverOptions::default());
        let r = crate::robust::report_optimum(&p, &space, &SolverOptions::default());
        assert_eq!(z, space.join(&r.x, &r.theta));
    }

    #[test]
    fn ucb_limits() {
        let p = post(&[(0.2, 0.2, -1.0), (0.8, 0.8, 1.0)], 1e-3);
        let space = table_space(&[0.0, 0.2, 0.5, 0.8, 1.0], &[0.2, 0.8]);
        let z = ucb_select(&p, &space, 0.0, &SolverOptions::default());
        let mut best = (vec![], f64::INFINITY);
        for x in [0.0, 0.2, 0.5, 0.8, 1.0] {
            for t in [0.2, 0.8] {
                let m = p.predict_one(&[x, t]).unwrap().0;
                if m < best.1 {
                    best = (vec![x, t], m);
                }
            }
        }
        assert_eq!(z, best.0);
        // a flat mean with one unexplored cell
        let flat = post(&[(0.0, 0.2, 0.0), (0.5, 0.2, 0.0), (0.5, 0.8, 0.0), (0.0, 0.8, 0.0)], 1e-3);
        let far = table_space(&[0.0, 0.5, 3.0], &[0.2, 0.8]);
        assert_eq!(ucb_select(&flat, &far, 2.0, &SolverOptions::default())[0], 3.0);
    }

    #[test]
    fn ei_closed_form_and_grid_oracle() {
        assert_eq!(expected_improvement(1.0, 0.0, 0.5), 0.0);
        assert_eq!(expected_improvement(0.2, 0.0, 0.5), 0.3);
        assert!((expected_improvement(0.0, 1.0, 0.0) - std_normal_pdf(0.0)).abs() < 1e-15);
        let pts: Vec<(f64, f64, f64)> = [0.0, 0.3, 0.6, 0.9].iter().map(|x| (*x, 0.5, (x - 0.45f64).powi(2))).collect();
        let p = post(&pts, 1e-3);
        let space = SpaceSpec::new(Domain::unit_box(1), Domain::Discrete(vec![vec![0.5]]), CombineMode::Concatenate).unwrap();
        let z = ei_select(&p, &space, None, &SolverOptions::default()).unwrap();
        let best_y = pts.iter().map(|p| p.2).fold(f64::INFINITY, f64::min);
        let ei = |x: f64| {
            let (m, v) = p.predict_one(&[x, 0.5]).unwrap();
            expected_improvement(m, v, best_y)
        };
        let grid_best = (0..=2000).map(|i| i as f64 / 2000.0).fold((0.0, -1.0), |b, x| if ei(x) > b.1 { (x, ei(x)) } else { b });
        assert!(ei(z[0]) >= grid_best.1 - 1e-8, "{} vs {}", ei(z[0]), grid_best.1);
        assert!((z[0] - 0.45).abs() < 0.2);
    }

    #[test]
    fn ei_zero_variance_picks_first_cell() {
        let p = post(&[(0.0, 0.0, 0.0)], 1e-3);
        let space = table_space(&[5.0, 6.0], &[5.0]);
        // far from data the mean is 0 and the incumbent is far below it
        let z = ei_select(&p, &space, Some(-100.0), &SolverOptions::default()).unwrap();
        assert_eq!(z, vec![5.0, 5.0]);
    }

    #[test]
    fn mes_formula() {
        assert_eq!(mes_value(0.0, 0.0, &[-1.0]), 0.0);
        // a minimum far below the mean carries almost no information; more variance, more gain
        let small = mes_value(0.0, 0.5, &[-1.0]);
        let large = mes_value(0.0, 1.0, &[-1.0]);
        assert!(large > small && small > 0.0);
        // hand value at γ = 1
        let g: f64 = 1.0;
        let hand = g * std_normal_pdf(g) / (2.0 * std_normal_cdf(g)) - std_normal_cdf(g).ln();
        assert!((mes_value(0.0, 1.0, &[-1.0]) - hand).abs() < 1e-12);
    }

    #[test]
    fn mes_is_deterministic() {
        let p = post(&[(0.1, 0.1, 0.3), (0.9, 0.4, -0.2)], 1e-3);
        let space = SpaceSpec::new(Domain::unit_box(1), Domain::unit_box(1), CombineMode::Concatenate).unwrap();
        let cfg = BaselineConfig {
            mes_num_mins: 3,
            mes_num_features: 100,
            ..Default::default()
        };
        let opts = SolverOptions {
            outer_restarts: 2,
            probe_points: 20,
            ..Default::default()
        };
        let a = mes_select(&p, &space, &cfg, 4, &opts).unwrap();
        assert_eq!(a, mes_select(&p, &space, &cfg, 4, &opts).unwrap());
        assert!(space.contains(&a));
    }

    #[test]
    fn kg_trivial_cases() {
        let p = post(&[(0.0, 0.0, 0.0), (1.0, 1.0, 1.0)], 1e-10);
        let one = kg_values(&p, &[vec![0.5, 0.5]], 8, 1).unwrap();
        assert_eq!(one.len(), 1);
        // re-measuring a known point with no noise teaches nothing
        let grid = vec![vec![0.0, 0.0], vec![1.0, 1.0]];
        let v = kg_values(&p, &grid, 32, 2).unwrap();
        assert!(v[0].abs() < 1e-6 && v[1].abs() < 1e-6, "{v:?}");
        let space = table_space(&[0.3], &[0.7]);
        let cfg = BaselineConfig::default();
        assert_eq!(kg_select(&p, &space, &cfg, 3).unwrap(), vec![0.3, 0.7]);
        let cont = SpaceSpec::new(Domain::unit_box(1), Domain::unit_box(1), CombineMode::Concatenate).unwrap();
        let small = BaselineConfig {
            kg_grid_per_dim: 10,
            ..cfg
        };
        assert_eq!(kg_select(&p, &cont, &small, 9).unwrap(), kg_select(&p, &cont, &small, 9).unwrap());
    }
}
