//! Robust entropy search acquisition.
//!
//! Each iteration draws analytic posterior samples, solves their min-max
//! problems, and conditions the GP on the sampled robust characteristics at
//! the training inputs with EP. The acquisition at `z = (x, θ)` is the
//! expected entropy reduction of `f(z)` once the sampled worst case at `x`
//! and the sampled robust value are known.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::ep::{build_res_bounds, ep_box_condition, EpOptions, EpResult, FirstBlockLower};
use crate::error::{check_dim, Error, Result};
use crate::gp::GpPosterior;
use crate::{mix_seed, Stopwatch};
use crate::robust::{inner_max, maximize_joint, minimize_over, robust_optimum, Domain, RobustSolution, SolverOptions, SpaceSpec};
use crate::ssgp::{build_basis, draw_samples, SpectralSample};
use crate::trunc_gauss::{truncated_moments_1d, truncated_moments_2d, BoxBounds, RHO_DEGENERATE};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResOptions {
    pub num_samples: usize,
    pub num_features: usize,
    pub ep: EpOptions,
    pub first_lower: FirstBlockLower,
    pub solver: SolverOptions,
    /// When false, EP and truncation are skipped, so the acquisition is zero.
    pub truncation: bool,
}

impl Default for ResOptions {
    fn default() -> Self {
        Self {
            num_samples: 1,
            num_features: 500,
            ep: EpOptions::default(),
            first_lower: FirstBlockLower::Unbounded,
            solver: SolverOptions::default(),
            truncation: true,
        }
    }
}

/// One posterior sample with its robust characteristics and the EP
/// conditioning of the GP on them at the training inputs.
#[derive(Debug, Clone)]
pub struct SampleState {
    pub sample: SpectralSample,
    pub robust: RobustSolution,
    /// `(x_i, h(x_i))` for every training input.
    pub train_argmax_points: Vec<Vec<f64>>,
    pub train_max_values: Vec<f64>,
    /// `None` when there is nothing to condition on.
    pub ep: Option<EpResult>,
    /// Box coordinates relaxed because `g(x_i) ≤ f*`.
    pub relaxed: usize,
    /// Inner solver settings; query-time `h(x)` must reuse the training-time starts.
    pub solver: SolverOptions,
    stack_whitened: DMatrix<f64>,
    stack: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct ResState {
    pub posterior: Arc<GpPosterior>,
    pub space: SpaceSpec,
    pub samples: Vec<SampleState>,
    pub noise_variance: f64,
    /// Samples requested; `samples.len()` may be smaller after drops.
    pub num_samples: usize,
    pub dropped: usize,
    pub options: ResOptions,
    /// Wall-clock seconds spent sampling and solving the sampled min-max problems.
    pub sample_seconds: f64,
    pub ep_seconds: f64,
}

/// Prediction at `z` before and after conditioning on one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionedPrediction {
    pub m0: f64,
    pub v0: f64,
    pub m_q: f64,
    pub v_q: f64,
    /// Truncation box had negligible mass; `v_q` fell back to `v0`.
    pub infeasible: bool,
}

/// Samples functions, solves their min-max problems and runs EP at the training data.
pub fn prepare_iteration(posterior: Arc<GpPosterior>, space: &SpaceSpec, opts: &ResOptions, seed: u64) -> Result<ResState> {
    if opts.num_samples == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    if posterior.dim() != space.dim() {
        return Err(Error::DimensionMismatch {
            expected: space.dim(),
            got: posterior.dim(),
        });
    }
    let params = &posterior.params;
    let start = Stopwatch::start();
    let mut ep_seconds = 0.0;
    let basis = Arc::new(build_basis(params, opts.num_features, mix_seed(seed, 1))?);
    let draws = draw_samples(&basis, &posterior.dataset, params.noise_variance, opts.num_samples, mix_seed(seed, 2))?;
    let mut samples = Vec::with_capacity(draws.len());
    let mut dropped = 0;
    for (c, sample) in draws.into_iter().enumerate() {
        let solver = opts.solver.with_seed(mix_seed(seed, 3 + c as u64));
        match condition_sample(&posterior, space, sample, opts, &solver, &mut ep_seconds) {
            Ok(s) => samples.push(s),
            Err(e) if e.is_numerical() => {
                log::warn!("dropping sample {c}: {e}");
                dropped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    if samples.is_empty() {
        log::warn!("every sample was dropped, acquisition falls back to maximum variance");
    }
    Ok(ResState {
        noise_variance: params.noise_variance,
        posterior,
        space: space.clone(),
        samples,
        num_samples: opts.num_samples,
        dropped,
        options: *opts,
        sample_seconds: (start.seconds() - ep_seconds).max(0.0),
        ep_seconds,
    })
}

fn condition_sample(
    posterior: &GpPosterior,
    space: &SpaceSpec,
    sample: SpectralSample,
    opts: &ResOptions,
    solver: &SolverOptions,
    ep_seconds: &mut f64,
) -> Result<SampleState> {
    let robust = robust_optimum(&sample, space, solver);
    let inputs = &posterior.dataset.inputs;
    let mut argmax_points = Vec::with_capacity(inputs.len());
    let mut g_values = Vec::with_capacity(inputs.len());
    for z in inputs {
        let (x, _) = space.split(z);
        let (h, g) = inner_max(&sample, x, space, solver);
        argmax_points.push(space.join(x, &h));
        g_values.push(g);
    }
    let mut stack: Vec<Vec<f64>> = inputs.clone();
    stack.extend(argmax_points.iter().cloned());

    let (ep, relaxed) = if inputs.is_empty() || !opts.truncation {
        (None, 0)
    } else {
        let t = Stopwatch::start();
        let (mu0, sigma0) = posterior.predict(&stack)?;
        let bounds = build_res_bounds(&g_values, robust.value, opts.first_lower)?;
        let ep = ep_box_condition(&mu0, &sigma0, &bounds.bounds, &opts.ep)?;
        if !ep.converged {
            log::debug!("EP did not converge in {} sweeps", ep.iterations);
        }
        *ep_seconds += t.seconds();
        (Some(ep), bounds.relaxed)
    };
    Ok(SampleState {
        sample,
        robust,
        train_argmax_points: argmax_points,
        train_max_values: g_values,
        ep,
        relaxed,
        solver: *solver,
        stack_whitened: posterior.whitened_cross(&stack),
        stack,
    })
}

impl ResState {
    pub fn surviving_samples(&self) -> usize {
        self.samples.len()
    }
}

/// Predictive moments of `f(z)` after conditioning on sample `idx`.
pub fn conditioned_variance(state: &ResState, idx: usize, z: &[f64]) -> Result<ConditionedPrediction> {
    let space = &state.space;
    if z.len() != space.dim() {
        return Err(Error::DimensionMismatch {
            expected: space.dim(),
            got: z.len(),
        });
    }
    let (x, theta) = space.split(z);
    Ok(conditioned_batch(state, idx, x, &[theta.to_vec()])?.remove(0))
}

/// [`conditioned_variance`] at `(x, θ)` for several `θ`, sharing the work that depends on `x` only.
pub fn conditioned_batch(state: &ResState, idx: usize, x: &[f64], thetas: &[Vec<f64>]) -> Result<Vec<ConditionedPrediction>> {
    let s = state
        .samples
        .get(idx)
        .ok_or_else(|| Error::InvalidArgument(format!("sample index {idx} out of range")))?;
    let space = &state.space;
    let post = &*state.posterior;
    check_dim(space.dim_x(), x.len())?;
    for t in thetas {
        check_dim(space.dim_theta(), t.len())?;
    }
    let (h, g) = inner_max(&s.sample, x, space, &s.solver);
    let k = thetas.len();
    let mut pts: Vec<Vec<f64>> = thetas.iter().map(|t| space.join(x, t)).collect();
    pts.push(space.join(x, &h));

    let (m, c) = post.predict(&pts)?;
    let (m0, cov0) = match &s.ep {
        Some(ep) => {
            let w = post.whitened_cross(&pts);
            let mut cross = DMatrix::from_fn(s.stack.len(), k + 1, |i, j| post.params.k(&s.stack[i], &pts[j]));
            if w.nrows() > 0 {
                cross -= s.stack_whitened.transpose() * w;
            }
            ep.propagate(&m, &c, &cross)?
        }
        None => (m, c),
    };
    let f_star = s.robust.value;
    let lower1 = if f_star < g { f_star } else { f64::NEG_INFINITY };
    let v1 = cov0[(k, k)].max(0.0);
    thetas
        .iter()
        .enumerate()
        .map(|(i, theta)| {
            let v0 = cov0[(i, i)].max(0.0);
            let unchanged = ConditionedPrediction {
                m0: m0[i],
                v0,
                m_q: m0[i],
                v_q: v0,
                infeasible: false,
            };
            if !state.options.truncation || v0 <= 0.0 {
                return Ok(unchanged);
            }
            let c01 = cov0[(i, k)];
            let rho = if v1 > 0.0 { c01 / (v0 * v1).sqrt() } else { 0.0 };
            let truncated = if *theta == h || rho.abs() >= RHO_DEGENERATE {
                // both coordinates are the same variable: one interval [f*, g]
                let lo = if rho >= 0.0 { lower1 } else { f64::NEG_INFINITY };
                truncated_moments_1d(m0[i], v0, lo, g).map(|t| (t.mean, t.var, t.underflow))
            } else if v1 <= 1e-14 * v0.max(1e-300) {
                truncated_moments_1d(m0[i], v0, f64::NEG_INFINITY, g).map(|t| (t.mean, t.var, t.underflow))
            } else {
                let bounds = BoxBounds::new(vec![f64::NEG_INFINITY, lower1], vec![g, g])?;
                let cov = [[v0, c01], [c01, v1]];
                truncated_moments_2d([m0[i], m0[k]], cov, &bounds).map(|t| (t.mean[0], t.cov[0][0], false))
            };
            match truncated {
                Ok((mq, vq, false)) => Ok(ConditionedPrediction {
                    m_q: mq,
                    v_q: vq.max(0.0),
                    ..unchanged
                }),
                Ok((_, _, true)) | Err(Error::InfeasibleBox { .. }) => Ok(ConditionedPrediction {
                    infeasible: true,
                    ..unchanged
                }),
                Err(e) => Err(e),
            }
        })
        .collect()
}

/// Acquisition values at `(x, θ)` for each `θ`.
pub fn res_values_at(state: &ResState, x: &[f64], thetas: &[Vec<f64>]) -> Vec<f64> {
    let space = &state.space;
    if state.samples.is_empty() {
        return vec![0.0; thetas.len()];
    }
    let per_sample: Vec<Option<Vec<ConditionedPrediction>>> = (0..state.samples.len()).map(|c| conditioned_batch(state, c, x, thetas).ok()).collect();
    thetas
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let Ok((_, vt)) = state.posterior.predict_one(&space.join(x, t)) else {
                return 0.0;
            };
            let vqs: Vec<f64> = per_sample.iter().map(|p| p.as_ref().map_or(vt, |p| p[i].v_q)).collect();
            entropy_reduction(vt, &vqs, state.noise_variance)
        })
        .collect()
}

pub fn res_value(state: &ResState, z: &[f64]) -> f64 {
    if state.samples.is_empty() {
        return 0.0;
    }
    let Ok((_, vt)) = state.posterior.predict_one(z) else {
        return 0.0;
    };
    let vqs: Vec<f64> = (0..state.samples.len())
        .map(|c| conditioned_variance(state, c, z).map_or(vt, |p| p.v_q))
        .collect();
    entropy_reduction(vt, &vqs, state.noise_variance)
}

/// `½ ln(v_t + σ_n²) - mean_c ½ ln(v_q,c + σ_n²)`, clamped at zero.
pub fn entropy_reduction(vt: f64, vqs: &[f64], noise_variance: f64) -> f64 {
    if vqs.is_empty() {
        return 0.0;
    }
    let sum: f64 = vqs.iter().map(|v| (v + noise_variance).ln()).sum();
    let a = 0.5 * (vt + noise_variance).ln() - sum / (2.0 * vqs.len() as f64);
    if a.is_finite() {
        a.max(0.0)
    } else {
        0.0
    }
}

/// Next evaluation point; maximum posterior variance when no sample survived.
pub fn maximize_acquisition(state: &ResState, opts: &SolverOptions) -> Vec<f64> {
    let space = &state.space;
    if state.samples.is_empty() {
        let post = &state.posterior;
        let (x, t, _) = maximize_joint(|x, t| post.predict_one(&space.join(x, t)).map_or(f64::NEG_INFINITY, |r| r.1), space, opts);
        return space.join(&x, &t);
    }
    if let Domain::Discrete(thetas) = &space.uncontrollable {
        // h(x) is shared by every θ, so score all of them together
        let best = |x: &[f64]| {
            res_values_at(state, x, thetas)
                .into_iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (i, v)| if v > b.1 { (i, v) } else { b })
        };
        let (x, _) = minimize_over(|x| -best(x).1, &space.controllable, opts);
        let (i, _) = best(&x);
        return space.join(&x, &thetas[i]);
    }
    let (x, t, _) = maximize_joint(|x, t| res_value(state, &space.join(x, t)), space, opts);
    space.join(&x, &t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::{fit_posterior, Dataset, KernelParams};
    use crate::robust::{CombineMode, Domain};

    fn toy(thetas: Option<&[f64]>) -> (Arc<GpPosterior>, SpaceSpec) {
        let f = |x: f64, t: f64| (6.0 * x).sin() * (1.0 + t) + 0.5 * (x - t).powi(2);
        let unc = match thetas {
            Some(ts) => Domain::Discrete(ts.iter().map(|t| vec![*t]).collect()),
            None => Domain::unit_box(1),
        };
        let space = SpaceSpec::new(Domain::unit_box(1), unc, CombineMode::Concatenate).unwrap();
        let pts = [(0.1, 0.0), (0.4, 1.0), (0.7, 0.5), (0.9, 0.0), (0.25, 0.5), (0.55, 1.0)];
        let d = Dataset::new(
            pts.iter().map(|(x, t)| vec![*x, *t]).collect(),
            pts.iter().map(|(x, t)| f(*x, *t)).collect(),
            1,
            1,
        )
        .unwrap();
        let p = KernelParams::new(1.0, vec![0.25, 0.5], 1e-3).unwrap();
        (Arc::new(fit_posterior(&d, &p).unwrap()), space)
    }

    fn fast_opts() -> ResOptions {
        ResOptions {
            num_features: 200,
            solver: SolverOptions {
                outer_restarts: 3,
                probe_points: 30,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn entropy_formula() {
        assert_eq!(entropy_reduction(1.0, &[1.0, 1.0], 1e-3), 0.0);
        assert!((entropy_reduction(2.0, &[1.0], 0.0) - 0.5 * 2f64.ln()).abs() < 1e-15);
        assert!((entropy_reduction(2.0, &[1.0], 0.0) - 0.3466).abs() < 1e-4);
        assert_eq!(entropy_reduction(1.0, &[2.0], 0.0), 0.0);
    }

    #[test]
    fn state_shapes() {
        let (post, space) = toy(Some(&[0.0, 0.5, 1.0]));
        let st = prepare_iteration(post.clone(), &space, &fast_opts(), 3).unwrap();
        assert_eq!(st.samples.len(), 1);
        let ep = st.samples[0].ep.as_ref().unwrap();
        assert_eq!(ep.dim(), 2 * post.dataset.len());
        assert_eq!(st.samples[0].train_argmax_points.len(), post.dataset.len());
    }

    #[test]
    fn variance_chain_and_bounds() {
        for thetas in [Some(&[0.0, 0.5, 1.0][..]), None] {
            let (post, space) = toy(thetas);
            let st = prepare_iteration(post.clone(), &space, &fast_opts(), 5).unwrap();
            let noise = st.noise_variance;
            for i in 0..40 {
                let x = i as f64 / 39.0;
                for t in [0.0, 0.5, 1.0] {
                    let z = [x, t];
                    let (_, vt) = post.predict_one(&z).unwrap();
                    let p = conditioned_variance(&st, 0, &z).unwrap();
                    assert!(p.v0 <= vt + 1e-6, "{} > {vt}", p.v0);
                    assert!(p.v_q <= p.v0 + 1e-6 && p.v_q >= 0.0);
                    let a = res_value(&st, &z);
                    assert!(a >= 0.0 && a <= 0.5 * ((vt + noise) / noise).ln() + 1e-9);
                }
            }
        }
    }

    #[test]
    fn argmax_row_collapses_to_one_dimension() {
        let (post, space) = toy(Some(&[0.0, 0.5, 1.0]));
        let st = prepare_iteration(post, &space, &fast_opts(), 7).unwrap();
        let s = &st.samples[0];
        let x = [0.33];
        let (h, _) = inner_max(&s.sample, &x, &space, &s.solver);
        let p = conditioned_variance(&st, 0, &space.join(&x, &h)).unwrap();
        assert!(p.v_q.is_finite() && p.v_q <= p.v0);
    }

    #[test]
    fn without_truncation_acquisition_vanishes() {
        let (post, space) = toy(None);
        let opts = ResOptions {
            truncation: false,
            ..fast_opts()
        };
        let st = prepare_iteration(post, &space, &opts, 1).unwrap();
        for i in 0..20 {
            let z = [i as f64 / 19.0, (i % 7) as f64 / 6.0];
            let p = conditioned_variance(&st, 0, &z).unwrap();
            assert!((p.v_q - p.v0).abs() < 1e-10 && (p.m_q - p.m0).abs() < 1e-10);
            assert!(res_value(&st, &z) <= 1e-8);
        }
    }

    #[test]
    fn acquisition_is_deterministic() {
        let (post, space) = toy(Some(&[0.0, 0.5, 1.0]));
        let pick = || {
            let st = prepare_iteration(post.clone(), &space, &fast_opts(), 11).unwrap();
            (0..200)
                .map(|i| res_value(&st, &[i as f64 / 199.0, 0.5]))
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (i, v)| if v > b.1 { (i, v) } else { b })
        };
        let a = pick();
        assert_eq!(a, pick());
        assert_eq!(a, pick());
    }

    #[test]
    fn discrete_table_is_enumerated() {
        let (post, _) = toy(None);
        let space = SpaceSpec::new(
            Domain::Discrete((0..10).map(|i| vec![i as f64 / 9.0]).collect()),
            Domain::Discrete((0..5).map(|i| vec![i as f64 / 4.0]).collect()),
            CombineMode::Concatenate,
        )
        .unwrap();
        let st = prepare_iteration(post, &space, &fast_opts(), 2).unwrap();
        let z = maximize_acquisition(&st, &st.options.solver);
        let mut best = (vec![], f64::NEG_INFINITY);
        for i in 0..10 {
            for j in 0..5 {
                let c = vec![i as f64 / 9.0, j as f64 / 4.0];
                let v = res_value(&st, &c);
                if v > best.1 {
                    best = (c, v);
                }
            }
        }
        assert_eq!(z, best.0);
    }

    #[test]
    fn empty_state_falls_back_to_variance() {
        let (post, space) = toy(Some(&[0.0, 0.5, 1.0]));
        let mut st = prepare_iteration(post.clone(), &space, &fast_opts(), 2).unwrap();
        st.samples.clear();
        let z = maximize_acquisition(&st, &st.options.solver);
        assert!(space.contains(&z));
        let (_, v) = post.predict_one(&z).unwrap();
        for i in 0..50 {
            for t in [0.0, 0.5, 1.0] {
                assert!(post.predict_one(&[i as f64 / 49.0, t]).unwrap().1 <= v + 1e-6);
            }
        }
    }
}
