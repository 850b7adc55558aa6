//! Bounded local optimizers: Nelder-Mead on a box and a projected L-BFGS.
//!
//! Both minimize. Callers maximizing an objective negate it.

/// Result of a local search.
#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct NelderMeadOptions {
    /// Initial simplex edge as a fraction of each bound's width.
    pub initial_step: f64,
    /// Stop once every vertex is within `tol` (relative to the box width) of the best one.
    pub tol: f64,
    pub max_evaluations: usize,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            initial_step: 0.1,
            tol: 1e-6,
            max_evaluations: 400,
        }
    }
}

fn project(x: &mut [f64], bounds: &[(f64, f64)]) {
    for (v, &(lo, hi)) in x.iter_mut().zip(bounds) {
        *v = v.clamp(lo, hi);
    }
}

/// Nelder-Mead with every trial point clipped onto the box.
pub fn nelder_mead<F>(mut f: F, x0: &[f64], bounds: &[(f64, f64)], opts: &NelderMeadOptions) -> Minimum
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    assert_eq!(n, bounds.len(), "start point and bounds differ in dimension");
    let widths: Vec<f64> = bounds.iter().map(|(lo, hi)| (hi - lo).max(f64::MIN_POSITIVE)).collect();
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };

    let mut start = x0.to_vec();
    project(&mut start, bounds);
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let v0 = eval(&start, &mut evals);
    simplex.push((start.clone(), v0));
    for i in 0..n {
        let mut p = start.clone();
        let step = opts.initial_step * widths[i];
        // step inwards when the start sits on the upper bound
        p[i] = if p[i] + step <= bounds[i].1 { p[i] + step } else { p[i] - step };
        project(&mut p, bounds);
        let v = eval(&p, &mut evals);
        simplex.push((p, v));
    }

    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    let mut converged = false;
    while evals < opts.max_evaluations {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = &simplex[0].0;
        let spread = simplex[1..]
            .iter()
            .flat_map(|(p, _)| p.iter().zip(best).zip(&widths).map(|((a, b), w)| (a - b).abs() / w))
            .fold(0.0f64, f64::max);
        if spread < opts.tol {
            converged = true;
            break;
        }
        let mut centroid = vec![0.0; n];
        for (p, _) in &simplex[..n] {
            for (c, v) in centroid.iter_mut().zip(p) {
                *c += v / n as f64;
            }
        }
        let worst = simplex[n].clone();
        let along = |t: f64| -> Vec<f64> {
            let mut p: Vec<f64> = centroid.iter().zip(&worst.0).map(|(c, w)| c + t * (c - w)).collect();
            project(&mut p, bounds);
            p
        };
        let xr = along(alpha);
        let fr = eval(&xr, &mut evals);
        if fr < simplex[0].1 {
            let xe = along(gamma);
            let fe = eval(&xe, &mut evals);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
            continue;
        }
        let (xc, fc) = if fr < worst.1 {
            let xc = along(rho * alpha);
            let fc = eval(&xc, &mut evals);
            (xc, fc)
        } else {
            let xc = along(-rho);
            let fc = eval(&xc, &mut evals);
            (xc, fc)
        };
        if fc < worst.1.min(fr) {
            simplex[n] = (xc, fc);
            continue;
        }
        // shrink towards the best vertex
        let best = simplex[0].0.clone();
        for vertex in simplex.iter_mut().skip(1) {
            let mut p: Vec<f64> = best.iter().zip(&vertex.0).map(|(b, v)| b + sigma * (v - b)).collect();
            project(&mut p, bounds);
            let v = eval(&p, &mut evals);
            *vertex = (p, v);
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, value) = simplex.swap_remove(0);
    Minimum {
        x,
        value,
        evaluations: evals,
        converged,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LbfgsOptions {
    pub memory: usize,
    pub max_iterations: usize,
    /// Stop when the projected gradient's infinity norm falls below this.
    pub grad_tol: f64,
    /// Stop when the relative decrease of the objective falls below this.
    pub f_tol: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            memory: 8,
            max_iterations: 100,
            grad_tol: 1e-6,
            f_tol: 1e-12,
        }
    }
}

/// Projected-gradient L-BFGS on a box. `f` returns value and gradient.
pub fn lbfgs_box<F>(mut f: F, x0: &[f64], bounds: &[(f64, f64)], opts: &LbfgsOptions) -> Minimum
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let n = x0.len();
    assert_eq!(n, bounds.len(), "start point and bounds differ in dimension");
    let mut x = x0.to_vec();
    project(&mut x, bounds);
    let mut evals = 1usize;
    let (mut fx, mut g) = f(&x);
    if !fx.is_finite() {
        return Minimum {
            x,
            value: fx,
            evaluations: evals,
            converged: false,
        };
    }
    let mut history: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::with_capacity(opts.memory);
    let mut converged = false;

    for _ in 0..opts.max_iterations {
        // free variables: not pinned at a bound by the gradient
        let free: Vec<bool> = (0..n)
            .map(|i| {
                let (lo, hi) = bounds[i];
                !((x[i] <= lo && g[i] > 0.0) || (x[i] >= hi && g[i] < 0.0))
            })
            .collect();
        let pg_norm = (0..n).filter(|&i| free[i]).map(|i| g[i].abs()).fold(0.0f64, f64::max);
        if pg_norm < opts.grad_tol {
            converged = true;
            break;
        }

        // two-loop recursion on the free subspace
        let mut q: Vec<f64> = (0..n).map(|i| if free[i] { g[i] } else { 0.0 }).collect();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot_masked(s, &q, &free);
            for i in 0..n {
                if free[i] {
                    q[i] -= a * y[i];
                }
            }
            alphas.push(a);
        }
        let gamma = history
            .last()
            .map(|(s, y, _)| dot_masked(s, y, &free) / dot_masked(y, y, &free).max(f64::MIN_POSITIVE))
            .filter(|v| v.is_finite() && *v > 0.0)
            .unwrap_or_else(|| 1.0 / pg_norm.max(1.0));
        for v in q.iter_mut() {
            *v *= gamma;
        }
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot_masked(y, &q, &free);
            for i in 0..n {
                if free[i] {
                    q[i] += s[i] * (a - b);
                }
            }
        }
        let mut d: Vec<f64> = q.iter().map(|v| -v).collect();
        if dot_masked(&d, &g, &free) >= 0.0 {
            d = (0..n).map(|i| if free[i] { -g[i] * gamma } else { 0.0 }).collect();
            history.clear();
        }

        // backtracking along the projected path
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let mut xn: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + step * b).collect();
            project(&mut xn, bounds);
            let decrease: f64 = g.iter().zip(xn.iter().zip(&x)).map(|(gi, (a, b))| gi * (a - b)).sum();
            evals += 1;
            let (fn_, gn) = f(&xn);
            if fn_.is_finite() && fn_ <= fx + 1e-4 * decrease {
                accepted = Some((xn, fn_, gn));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fn_, gn)) = accepted else {
            break;
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rel = (fx - fn_).abs() / fx.abs().max(fn_.abs()).max(1.0);
        x = xn;
        fx = fn_;
        g = gn;
        if sy > 1e-12 * norm(&s) * norm(&y) {
            if history.len() == opts.memory {
                history.remove(0);
            }
            history.push((s, y, 1.0 / sy));
        }
        if rel < opts.f_tol {
            converged = true;
            break;
        }
    }
    Minimum {
        x,
        value: fx,
        evaluations: evals,
        converged,
    }
}

fn dot_masked(a: &[f64], b: &[f64], mask: &[bool]) -> f64 {
    a.iter().zip(b).zip(mask).filter(|(_, m)| **m).map(|((x, y), _)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Central finite-difference gradient, stepping inwards at bounds.
pub fn central_gradient<F>(f: &mut F, x: &[f64], bounds: &[(f64, f64)], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = Vec::with_capacity(x.len());
    let mut p = x.to_vec();
    for i in 0..x.len() {
        let (lo, hi) = bounds[i];
        let up = (x[i] + h).min(hi);
        let down = (x[i] - h).max(lo);
        if up <= down {
            grad.push(0.0);
            continue;
        }
        p[i] = up;
        let fu = f(&p);
        p[i] = down;
        let fd = f(&p);
        p[i] = x[i];
        grad.push((fu - fd) / (up - down));
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> (f64, Vec<f64>) {
        let (a, b) = (x[0], x[1]);
        let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
        (v, g)
    }

    #[test]
    fn nelder_mead_finds_interior_minimum() {
        let m = nelder_mead(
            |x| (x[0] - 0.3).powi(2) + 2.0 * (x[1] + 0.2).powi(2),
            &[0.9, 0.9],
            &[(-1.0, 1.0), (-1.0, 1.0)],
            &NelderMeadOptions { max_evaluations: 2000, ..Default::default() },
        );
        assert!((m.x[0] - 0.3).abs() < 1e-4 && (m.x[1] + 0.2).abs() < 1e-4, "{m:?}");
    }

    #[test]
    fn nelder_mead_respects_bounds() {
        let m = nelder_mead(|x| x[0], &[0.5], &[(0.2, 1.0)], &NelderMeadOptions::default());
        assert!((m.x[0] - 0.2).abs() < 1e-5);
        assert!(m.x[0] >= 0.2);
    }

    #[test]
    fn lbfgs_solves_rosenbrock() {
        let m = lbfgs_box(
            rosenbrock,
            &[-1.2, 1.0],
            &[(-2.0, 2.0), (-2.0, 2.0)],
            &LbfgsOptions { max_iterations: 500, ..Default::default() },
        );
        assert!((m.x[0] - 1.0).abs() < 1e-4 && (m.x[1] - 1.0).abs() < 1e-4, "{m:?}");
    }

    #[test]
    fn lbfgs_stops_on_active_bound() {
        let m = lbfgs_box(
            |x| ((x[0] - 3.0).powi(2) + x[1] * x[1], vec![2.0 * (x[0] - 3.0), 2.0 * x[1]]),
            &[0.0, 0.5],
            &[(-1.0, 1.0), (-1.0, 1.0)],
            &LbfgsOptions::default(),
        );
        assert!((m.x[0] - 1.0).abs() < 1e-12 && m.x[1].abs() < 1e-5, "{m:?}");
    }

    #[test]
    fn central_gradient_of_quadratic() {
        let mut f = |x: &[f64]| x[0] * x[0] + 3.0 * x[1];
        let g = central_gradient(&mut f, &[0.5, 0.0], &[(0.0, 1.0), (0.0, 1.0)], 1e-6);
        assert!((g[0] - 1.0).abs() < 1e-6 && (g[1] - 3.0).abs() < 1e-6);
    }
}
