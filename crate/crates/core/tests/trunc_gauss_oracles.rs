//! Independent oracles for the truncated-Gaussian moments: nested adaptive
//! quadrature for box probabilities and rejection sampling for the moments.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use robust_es::trunc_gauss::{
    bivariate_normal_mass, std_normal_pdf, truncated_moments_1d, truncated_moments_2d, BoxBounds,
};

const INF: f64 = f64::INFINITY;

fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    fn rec<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            return left + right + (left + right - whole) / 15.0;
        }
        rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    rec(f, a, b, fa, fm, fb, (b - a) / 6.0 * (fa + 4.0 * fm + fb), tol, 40)
}

/// Box mass by 2-D adaptive quadrature of the bivariate density; infinite
/// limits are cut at ±12.
fn quadrature_mass(lo: [f64; 2], hi: [f64; 2], rho: f64) -> f64 {
    let cut = |v: f64| v.clamp(-12.0, 12.0);
    let s2 = 1.0 - rho * rho;
    let norm = 1.0 / (2.0 * std::f64::consts::PI * s2.sqrt());
    let inner = |x: f64| {
        let g = |y: f64| norm * (-(x * x - 2.0 * rho * x * y + y * y) / (2.0 * s2)).exp();
        // split at the conditional mean so the peak is resolved
        let (a, b) = (cut(lo[1]), cut(hi[1]));
        let c = (rho * x).clamp(a, b);
        adaptive_simpson(&g, a, c, 1e-14) + adaptive_simpson(&g, c, b, 1e-14)
    };
    let (a, b) = (cut(lo[0]), cut(hi[0]));
    let c = 0.0f64.clamp(a, b);
    adaptive_simpson(&inner, a, c, 1e-13) + adaptive_simpson(&inner, c, b, 1e-13)
}

#[test]
fn bivariate_mass_matches_quadrature() {
    let cases = [
        ([-1.0, -1.0], [1.0, 1.0], 0.5),
        ([-0.5, 0.0], [1.5, 2.0], 0.7),
        ([-INF, 0.3], [0.2, INF], -0.8),
        ([1.0, -2.0], [3.0, -0.5], -0.3),
        ([-2.0, -2.0], [INF, 0.0], 0.95),
        ([-0.4, -INF], [0.9, 1.1], -0.96),
    ];
    for (lo, hi, rho) in cases {
        let b = BoxBounds::new(lo.to_vec(), hi.to_vec()).unwrap();
        let fast = bivariate_normal_mass(&b, rho).unwrap();
        let slow = quadrature_mass(lo, hi, rho);
        assert!((fast - slow).abs() < 1e-8, "{lo:?} {hi:?} {rho}: {fast} vs {slow}");
    }
}

struct McMoments {
    mean: [f64; 2],
    m2: [f64; 2],
    m11: f64,
    se_mean: [f64; 2],
    se_m2: [f64; 2],
    se_m11: f64,
}

/// Raw moments E[X1], E[X2], E[X1²], E[X2²], E[X1 X2] with standard errors.
fn mc_moments(mean: [f64; 2], cov: [[f64; 2]; 2], lo: [f64; 2], hi: [f64; 2], accepted: usize, seed: u64) -> McMoments {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l11 = cov[0][0].sqrt();
    let l21 = cov[0][1] / l11;
    let l22 = (cov[1][1] - l21 * l21).sqrt();
    let mut sums = [0.0f64; 5];
    let mut sq = [0.0f64; 5];
    let mut n = 0usize;
    while n < accepted {
        let e1: f64 = StandardNormal.sample(&mut rng);
        let e2: f64 = StandardNormal.sample(&mut rng);
        let x1 = mean[0] + l11 * e1;
        let x2 = mean[1] + l21 * e1 + l22 * e2;
        if x1 < lo[0] || x1 > hi[0] || x2 < lo[1] || x2 > hi[1] {
            continue;
        }
        n += 1;
        let v = [x1, x2, x1 * x1, x2 * x2, x1 * x2];
        for k in 0..5 {
            sums[k] += v[k];
            sq[k] += v[k] * v[k];
        }
    }
    let nf = n as f64;
    let m: Vec<f64> = sums.iter().map(|s| s / nf).collect();
    let se: Vec<f64> = (0..5).map(|k| ((sq[k] / nf - m[k] * m[k]) / nf).sqrt()).collect();
    McMoments {
        mean: [m[0], m[1]],
        m2: [m[2], m[3]],
        m11: m[4],
        se_mean: [se[0], se[1]],
        se_m2: [se[2], se[3]],
        se_m11: se[4],
    }
}

fn assert_moments_match(mean: [f64; 2], cov: [[f64; 2]; 2], lo: [f64; 2], hi: [f64; 2], accepted: usize, seed: u64) {
    let b = BoxBounds::new(lo.to_vec(), hi.to_vec()).unwrap();
    let t = truncated_moments_2d(mean, cov, &b).unwrap();
    let mc = mc_moments(mean, cov, lo, hi, accepted, seed);
    let raw = [
        t.mean[0],
        t.mean[1],
        t.cov[0][0] + t.mean[0] * t.mean[0],
        t.cov[1][1] + t.mean[1] * t.mean[1],
        t.cov[0][1] + t.mean[0] * t.mean[1],
    ];
    let mcv = [mc.mean[0], mc.mean[1], mc.m2[0], mc.m2[1], mc.m11];
    let se = [mc.se_mean[0], mc.se_mean[1], mc.se_m2[0], mc.se_m2[1], mc.se_m11];
    for k in 0..5 {
        assert!(
            (raw[k] - mcv[k]).abs() <= 3.0 * se[k] + 1e-12,
            "moment {k}: analytic {} vs mc {} (se {}) for {mean:?} {cov:?} {lo:?} {hi:?}",
            raw[k],
            mcv[k],
            se[k]
        );
    }
}

#[test]
fn bivariate_moments_match_rejection_sampling() {
    assert_moments_match([0.0, 0.0], [[1.0, 0.7], [0.7, 1.0]], [-0.5, 0.0], [1.5, 2.0], 2_000_000, 11);
    assert_moments_match([0.3, -0.2], [[2.0, -0.9], [-0.9, 0.8]], [-INF, -0.5], [1.0, INF], 1_000_000, 12);
}

#[test]
fn one_sided_limit_reproduces_single_truncation() {
    let cov = [[1.0, 0.6], [0.6, 1.0]];
    let one_sided = BoxBounds::new(vec![-INF, 0.2], vec![INF, INF]).unwrap();
    let far = BoxBounds::new(vec![-INF, 0.2], vec![INF, 40.0]).unwrap();
    let a = truncated_moments_2d([0.0, 0.0], cov, &one_sided).unwrap();
    let b = truncated_moments_2d([0.0, 0.0], cov, &far).unwrap();
    for i in 0..2 {
        assert!((a.mean[i] - b.mean[i]).abs() < 1e-8);
        for j in 0..2 {
            assert!((a.cov[i][j] - b.cov[i][j]).abs() < 1e-8);
        }
    }
    // the truncated coordinate's marginal is the 1-D truncation
    let u = truncated_moments_1d(0.0, 1.0, 0.2, INF).unwrap();
    assert!((a.mean[1] - u.mean).abs() < 1e-9);
    assert!((a.cov[1][1] - u.var).abs() < 1e-9);
    // the free coordinate regresses on it
    assert!((a.mean[0] - 0.6 * u.mean).abs() < 1e-9);
    let _ = std_normal_pdf(0.0);
}
