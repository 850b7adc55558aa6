//! Benchmark formulas against independent re-implementations, plus reference optima checks.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use robust_es::benchmarks::*;
use robust_es::robust::{CombineMode, Domain, SpaceSpec};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// Expanded forms written independently of the library.
fn branin_ref(x1: f64, x2: f64) -> f64 {
    let b = 5.1 / (4.0 * PI.powi(2));
    let inner = x2 - b * x1.powi(2) + (5.0 / PI) * x1 - 6.0;
    inner * inner + 10.0 * (1.0 - 1.0 / (8.0 * PI)) * x1.cos() + 10.0
}

fn eggholder_ref(x: f64, t: f64) -> f64 {
    let a = t + 47.0;
    -a * (x / 2.0 + a).abs().sqrt().sin() - x * (x - a).abs().sqrt().sin()
}

fn hartmann_ref(z: [f64; 3]) -> f64 {
    let alpha = [1.0, 1.2, 3.0, 3.2];
    let a = [[3.0, 10.0, 30.0], [0.1, 10.0, 35.0], [3.0, 10.0, 30.0], [0.1, 10.0, 35.0]];
    let p = [[3689.0, 1170.0, 2673.0], [4699.0, 4387.0, 7470.0], [1091.0, 8732.0, 5547.0], [381.0, 5743.0, 8828.0]];
    let mut s = 0.0;
    for i in 0..4 {
        let mut e = 0.0;
        for j in 0..3 {
            e += a[i][j] * (z[j] - 1e-4 * p[i][j]).powi(2);
        }
        s += alpha[i] * (-e).exp();
    }
    s
}

fn poly_ref(x: f64, y: f64) -> f64 {
    // Horner in each variable plus the cross terms
    let px = x * (6.2 + x * (-4.7 + x * (-6.4 + x * (21.2 + x * (-12.2 + x * 2.0)))));
    let py = y * (-10.0 + y * (56.9 + y * (-74.8 + y * (43.3 + y * (-11.0 + y)))));
    px + py - 4.1 * x * y - 0.1 * x * x * y * y + 0.4 * y * y * x + 0.4 * x * x * y
}

#[test]
fn branin_known_minimum() {
    assert!((branin(PI, 2.275) - 0.397887).abs() < 1e-4);
    assert!((branin_ref(PI, 2.275) - 0.397887).abs() < 1e-4);
}

#[test]
fn formulas_match_independent_implementations() {
    let mut r = rng(1);
    let br = make_branin();
    let eg = make_eggholder();
    let hm = make_hartmann3d();
    let sl = make_sinus_linear();
    let po = make_synthetic_polynomial();
    for _ in 0..5 {
        let (u, v, w): (f64, f64, f64) = (r.random(), r.random(), r.random());
        assert!((br.raw(&[u], &[v]) - branin_ref(-5.0 + 15.0 * u, 15.0 * v)).abs() < 1e-10);
        assert!((eg.raw(&[u], &[v]) - eggholder_ref(-512.0 + 1024.0 * u, -512.0 + 1024.0 * v)).abs() < 1e-10);
        assert!((hm.raw(&[u, v], &[w]) - hartmann_ref([u, v, w])).abs() < 1e-10);
        let z = u + 0.1 * v;
        assert!((sl.raw(&[u], &[0.1 * v]) - ((5.0 * z * z * PI).sin() + 0.5 * z)).abs() < 1e-10);
        let (x1, x2) = (-0.95 + 4.15 * u, -0.45 + 4.85 * v);
        let (t1, t2) = (0.3 * w, -0.2 * w);
        assert!((po.raw(&[x1, x2], &[t1, t2]) - poly_ref(x1 + t1, x2 + t2)).abs() < 1e-9 * poly_ref(x1 + t1, x2 + t2).abs().max(1.0));
    }
}

#[test]
fn discretizations_and_bounds() {
    let hm = make_hartmann3d();
    match (&hm.space.controllable, &hm.space.uncontrollable) {
        (Domain::Discrete(xs), Domain::Discrete(ts)) => {
            assert_eq!(xs.len(), 2500);
            assert_eq!(ts.len(), 11);
            assert!((ts[1][0] - 0.30).abs() < 1e-12);
        }
        _ => panic!("hartmann must be discrete"),
    }
    let po = make_synthetic_polynomial();
    assert_eq!(po.space.controllable.bounds(), vec![(-0.95, 3.2), (-0.45, 4.4)]);
    assert_eq!(polynomial_thetas().len(), 12);
    assert!(polynomial_thetas().iter().all(|t| (t[0].hypot(t[1]) - 0.5).abs() < 1e-12 || t[0].hypot(t[1]) < 1e-12));
    let br = make_branin();
    match &br.space.uncontrollable {
        Domain::Discrete(ts) => {
            assert_eq!(ts.len(), 20);
            assert!((ts[0][0] * 15.0 - 0.75).abs() < 1e-12 && (ts[19][0] * 15.0 - 14.25).abs() < 1e-12);
        }
        _ => panic!(),
    }
    let eg = make_eggholder();
    assert_eq!(eg.space.uncontrollable.dim(), 1);
    for name in PROBLEM_NAMES {
        assert_eq!(Problem::by_name(name, 0).unwrap().name, name);
    }
    assert!(Problem::by_name("rosenbrock", 0).is_err());
}

#[test]
fn standardized_outputs_are_unit_normal_on_a_probe() {
    for p in [make_branin(), make_eggholder()] {
        let mut r = rng(99);
        let vals: Vec<f64> = (0..10_000).map(|_| p.value_z(&p.space.sample(&mut r))).collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!(mean.abs() < 0.1 && (std - 1.0).abs() < 0.1, "{}: {mean} {std}", p.name);
        assert!(p.scale > 0.0);
    }
}

#[test]
fn within_model_objective() {
    let a = make_within_model_problem(5).unwrap();
    let b = make_within_model_problem(5).unwrap();
    let c = make_within_model_problem(6).unwrap();
    let mut r = rng(3);
    let mut differs = false;
    for _ in 0..10 {
        let z = a.space.sample(&mut r);
        assert_eq!(a.value_z(&z).to_bits(), b.value_z(&z).to_bits());
        differs |= a.value_z(&z) != c.value_z(&z);
    }
    assert!(differs);

    let vals: Vec<f64> = (0..10_000).map(|_| a.value_z(&a.space.sample(&mut r))).collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((0.5..=1.5).contains(&std), "std {std}");

    let range = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let bound = 10.0 * range / WITHIN_MODEL_LENGTHSCALE;
    let h = 1e-6;
    for _ in 0..50 {
        let z = a.space.sample(&mut r);
        let gx = (a.value(&[z[0] + h], &[z[1]]) - a.value(&[z[0] - h], &[z[1]])) / (2.0 * h);
        let gt = (a.value(&[z[0]], &[z[1] + h]) - a.value(&[z[0]], &[z[1] - h])) / (2.0 * h);
        assert!(gx.hypot(gt) < bound);
    }
}

fn quadratic_problem() -> Problem {
    let space = SpaceSpec::new(Domain::unit_box(1), Domain::Discrete(vec![vec![0.0], vec![1.0]]), CombineMode::Concatenate).unwrap();
    Problem::custom("quad", space, Arc::new(|x: &[f64], t: &[f64]| (x[0] - t[0]).powi(2)))
}

#[test]
fn quadratic_min_max_reference() {
    let r = true_robust_reference(&quadratic_problem(), 101);
    assert!((r.f_star - 0.25).abs() < 1e-8);
    assert!((r.x[0] - 0.5).abs() < 1e-6);
}

#[test]
fn theta_independent_reference_is_grid_min() {
    let space = SpaceSpec::new(Domain::unit_box(1), Domain::unit_box(1), CombineMode::Concatenate).unwrap();
    let f = |x: f64| (7.0 * x).sin() + x;
    let p = Problem::custom("flat", space, Arc::new(move |x: &[f64], _t: &[f64]| f(x[0])));
    let r = true_robust_reference(&p, 501);
    let grid_min = linspace(0.0, 1.0, 501).into_iter().map(f).fold(f64::INFINITY, f64::min);
    assert!(r.f_star <= grid_min + 1e-12);
    assert!(grid_min - r.f_star < 1e-4);
}

#[test]
fn branin_reference_converges_under_grid_doubling() {
    let p = make_branin();
    let a = true_robust_reference(&p, 2000);
    let b = true_robust_reference(&p, 4000);
    assert!((a.f_star - b.f_star).abs() < 1e-4, "{} vs {}", a.f_star, b.f_star);
}

#[test]
fn all_references_converge_under_grid_doubling() {
    for name in ["sinus_linear", "eggholder", "hartmann3", "synthetic_polynomial", "within_model"] {
        let p = Problem::by_name(name, 0).unwrap();
        let n = match name {
            "synthetic_polynomial" => 200,
            "within_model" => 500,
            _ => 1000,
        };
        let a = true_robust_reference(&p, n);
        let b = true_robust_reference(&p, 2 * n);
        assert!((a.f_star - b.f_star).abs() < 1e-3, "{name}: {} vs {}", a.f_star, b.f_star);
    }
}

#[test]
fn regret_of_reference_is_zero() {
    let p = make_branin();
    let r = true_robust_reference(&p, 2000);
    let rec = compute_regret(&p, &r.x, &r.theta, r.f_star);
    assert!(rec.robust < 1e-12);
    assert!(rec.inference < 1e-12);
    let other = compute_regret(&p, &r.x, &[0.05], r.f_star);
    assert_eq!(rec.robust, other.robust);
}

#[test]
fn regret_at_nominal_minimum_is_worst_case_gap() {
    let p = make_branin();
    let r = true_robust_reference(&p, 2000);
    let thetas = match &p.space.uncontrollable {
        Domain::Discrete(ts) => ts.clone(),
        _ => unreachable!(),
    };
    // nominal minimum over the grid and the finite θ set
    let xs = linspace(0.0, 1.0, 2000);
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for &x in &xs {
        for t in &thetas {
            let v = p.value(&[x], t);
            if v < best.0 {
                best = (v, x, t[0]);
            }
        }
    }
    let g = thetas.iter().map(|t| p.value(&[best.1], t)).fold(f64::NEG_INFINITY, f64::max);
    let rec = compute_regret(&p, &[best.1], &[best.2], r.f_star);
    assert!((rec.robust - (g - r.f_star)).abs() < 1e-12);
    assert!(rec.robust > 0.5);
}

#[test]
fn reference_cache_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("refs.json");
    let p = quadratic_problem();
    let mut cache = ReferenceCache::load(&path).unwrap();
    let r = cache.get_or_compute(&p, 101);
    cache.save(&path).unwrap();
    let again = ReferenceCache::load(&path).unwrap();
    assert_eq!(again.get(&p, 101), Some(&r));
    assert!(again.get(&p, 102).is_none());

    std::fs::write(&path, r#"{"schema_version": 99, "entries": {}}"#).unwrap();
    assert!(ReferenceCache::load(&path).is_err());
}
