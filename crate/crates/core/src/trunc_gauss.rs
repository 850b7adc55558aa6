//! Moments of box-truncated Gaussians.
//!
//! Univariate closed forms are evaluated in log space so that boxes deep in a
//! tail still produce usable moments. The bivariate moments come from the
//! integration-by-parts identities of the standard bivariate normal density,
//! with the box probability evaluated by Genz's Gauss-Legendre scheme for
//! orthant probabilities.
#![allow(clippy::excessive_precision)]

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_677_94;
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_741_78;
const FRAC_1_2PI: f64 = 0.159_154_943_091_895_335_77;

/// Correlations at least this close to ±1 are treated as perfectly correlated.
pub const RHO_DEGENERATE: f64 = 1.0 - 1e-9;
/// Univariate boxes below this probability are reported as underflowing.
pub const MASS_UNDERFLOW_1D: f64 = 1e-300;
/// Bivariate boxes below this probability are rejected.
pub const MASS_INFEASIBLE_2D: f64 = 1e-12;

pub fn std_normal_pdf(x: f64) -> f64 {
    if x.is_infinite() {
        return 0.0;
    }
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn std_normal_cdf(x: f64) -> f64 {
    if x == f64::INFINITY {
        return 1.0;
    }
    if x == f64::NEG_INFINITY {
        return 0.0;
    }
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

fn ln_std_normal_pdf(x: f64) -> f64 {
    -0.5 * x * x - LN_SQRT_2PI
}

/// `ln Φ(x)`, accurate far into the lower tail.
pub fn ln_std_normal_cdf(x: f64) -> f64 {
    if x == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if x > 0.0 {
        return (-std_normal_cdf(-x)).ln_1p();
    }
    if x > -36.0 {
        return std_normal_cdf(x).ln();
    }
    // asymptotic expansion of the Mills ratio
    let z2 = 1.0 / (x * x);
    let series = 1.0 - z2 * (1.0 - 3.0 * z2 * (1.0 - 5.0 * z2 * (1.0 - 7.0 * z2)));
    ln_std_normal_pdf(x) - (-x).ln() + series.ln()
}

/// Box `[lower, upper]` in any dimension. Entries may be infinite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxBounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        crate::error::check_dim(lower.len(), upper.len())?;
        for (i, (l, u)) in lower.iter().zip(&upper).enumerate() {
            if l.is_nan() || u.is_nan() || !(l < u) {
                return Err(Error::InvalidArgument(format!(
                    "box coordinate {i}: lower {l} must be strictly below upper {u}"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn unbounded(dim: usize) -> Self {
        Self {
            lower: vec![f64::NEG_INFINITY; dim],
            upper: vec![f64::INFINITY; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn is_unbounded(&self) -> bool {
        self.lower.iter().all(|l| *l == f64::NEG_INFINITY)
            && self.upper.iter().all(|u| *u == f64::INFINITY)
    }
}

// Gauss-Legendre half-rules (weight, abscissa) from Genz's BVND.
const GL6: [(f64, f64); 3] = [
    (0.1713244923791705e+00, -0.9324695142031522e+00),
    (0.3607615730481384e+00, -0.6612093864662647e+00),
    (0.4679139345726904e+00, -0.2386191860831970e+00),
];
const GL12: [(f64, f64); 6] = [
    (0.4717533638651177e-01, -0.9815606342467191e+00),
    (0.1069393259953183e+00, -0.9041172563704750e+00),
    (0.1600783285433464e+00, -0.7699026741943050e+00),
    (0.2031674267230659e+00, -0.5873179542866171e+00),
    (0.2334925365383547e+00, -0.3678314989981802e+00),
    (0.2491470458134029e+00, -0.1252334085114692e+00),
];
const GL20: [(f64, f64); 10] = [
    (0.1761400713915212e-01, -0.9931285991850949e+00),
    (0.4060142980038694e-01, -0.9639719272779138e+00),
    (0.6267204833410906e-01, -0.9122344282513259e+00),
    (0.8327674157670475e-01, -0.8391169718222188e+00),
    (0.1019301198172404e+00, -0.7463319064601508e+00),
    (0.1181945319615184e+00, -0.6360536807265150e+00),
    (0.1316886384491766e+00, -0.5108670019508271e+00),
    (0.1420961093183821e+00, -0.3737060887154196e+00),
    (0.1491729864726037e+00, -0.2277858511416451e+00),
    (0.1527533871307259e+00, -0.7652652113349733e-01),
];

/// Upper orthant probability `P(X > h, Y > k)` for a standard bivariate
/// normal with correlation `r`, `0 <= r < 1`.
fn bvnd_nonneg(h: f64, k: f64, r: f64) -> f64 {
    let quad: &[(f64, f64)] = if r < 0.3 {
        &GL6
    } else if r < 0.75 {
        &GL12
    } else {
        &GL20
    };
    let hk = h * k;
    let mut bvn = 0.0;
    if r < 0.925 {
        if r > 0.0 {
            let hs = (h * h + k * k) / 2.0;
            let asr = r.asin();
            for &(w, x) in quad {
                for is in [-1.0, 1.0] {
                    let sn = (asr * (is * x + 1.0) / 2.0).sin();
                    bvn += w * ((sn * hk - hs) / (1.0 - sn * sn)).exp();
                }
            }
            bvn *= asr / (4.0 * PI);
        }
        bvn + std_normal_cdf(-h) * std_normal_cdf(-k)
    } else {
        if r < 1.0 {
            let a_s = (1.0 - r) * (1.0 + r);
            let mut a = a_s.sqrt();
            let b_s = (h - k) * (h - k);
            let c = (4.0 - hk) / 8.0;
            let d = (12.0 - hk) / 16.0;
            let asr = -(b_s / a_s + hk) / 2.0;
            if asr > -100.0 {
                bvn = a
                    * asr.exp()
                    * (1.0 - c * (b_s - a_s) * (1.0 - d * b_s / 5.0) / 3.0
                        + c * d * a_s * a_s / 5.0);
            }
            if -hk < 100.0 {
                let b = b_s.sqrt();
                bvn -= (-hk / 2.0).exp()
                    * (2.0 * PI).sqrt()
                    * std_normal_cdf(-b / a)
                    * b
                    * (1.0 - c * b_s * (1.0 - d * b_s / 5.0) / 3.0);
            }
            a /= 2.0;
            for &(w, x) in quad {
                for is in [-1.0, 1.0] {
                    let xs = (a * (is * x + 1.0)).powi(2);
                    let rs = (1.0 - xs).sqrt();
                    let asr = -(b_s / xs + hk) / 2.0;
                    if asr > -100.0 {
                        bvn += a
                            * w
                            * asr.exp()
                            * ((-hk * (1.0 - rs) / (2.0 * (1.0 + rs))).exp() / rs
                                - (1.0 + c * xs * (1.0 + d * xs)));
                    }
                }
            }
            bvn *= -FRAC_1_2PI;
        }
        bvn + std_normal_cdf(-h.max(k))
    }
}

/// `P(X > h, Y > k)` for a standard bivariate normal with correlation `r`.
pub fn upper_orthant(h: f64, k: f64, r: f64) -> f64 {
    if h == f64::INFINITY || k == f64::INFINITY {
        return 0.0;
    }
    if h == f64::NEG_INFINITY {
        return std_normal_cdf(-k);
    }
    if k == f64::NEG_INFINITY {
        return std_normal_cdf(-h);
    }
    let p = if r >= 0.0 {
        bvnd_nonneg(h, k, r)
    } else {
        // P(X > h, Y > k; r) = P(X > h) - P(X > h, -Y > -k; -r)
        std_normal_cdf(-h) - bvnd_nonneg(h, -k, -r)
    };
    p.clamp(0.0, 1.0)
}

fn interval_mass(lo: f64, hi: f64) -> f64 {
    if lo >= hi {
        return 0.0;
    }
    if lo > 0.0 {
        std_normal_cdf(-lo) - std_normal_cdf(-hi)
    } else {
        std_normal_cdf(hi) - std_normal_cdf(lo)
    }
}

/// Probability of `bounds` under a standard bivariate normal with correlation `rho`.
///
/// Correlations with `|rho| >= 1 - 1e-9` collapse onto the diagonal.
pub fn bivariate_normal_mass(bounds: &BoxBounds, rho: f64) -> Result<f64> {
    crate::error::check_dim(2, bounds.dim())?;
    if !rho.is_finite() || rho.abs() > 1.0 {
        return Err(Error::InvalidArgument(format!("correlation {rho} outside [-1, 1]")));
    }
    let (mut a1, mut b1) = (bounds.lower[0], bounds.upper[0]);
    let (mut a2, mut b2) = (bounds.lower[1], bounds.upper[1]);
    if rho.abs() >= RHO_DEGENERATE {
        let (l2, u2) = if rho > 0.0 { (a2, b2) } else { (-b2, -a2) };
        return Ok(interval_mass(a1.max(l2), b1.min(u2)));
    }
    let mut r = rho;
    // Orient the box towards the upper orthant so the differences below stay small.
    if a1 + b1 < 0.0 || (a1 == f64::NEG_INFINITY && b1 < f64::INFINITY) {
        (a1, b1) = (-b1, -a1);
        r = -r;
    }
    if a2 + b2 < 0.0 || (a2 == f64::NEG_INFINITY && b2 < f64::INFINITY) {
        (a2, b2) = (-b2, -a2);
        r = -r;
    }
    let p = upper_orthant(a1, a2, r) - upper_orthant(b1, a2, r) - upper_orthant(a1, b2, r)
        + upper_orthant(b1, b2, r);
    Ok(p.clamp(0.0, 1.0))
}

/// Result of a univariate truncation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Truncated1d {
    pub mean: f64,
    pub var: f64,
    pub mass: f64,
    pub ln_mass: f64,
    /// Box probability fell below [`MASS_UNDERFLOW_1D`]; moments are a placeholder.
    pub underflow: bool,
}

/// Mean and variance of `N(mean, var)` restricted to `[lower, upper]`.
pub fn truncated_moments_1d(mean: f64, var: f64, lower: f64, upper: f64) -> Result<Truncated1d> {
    if !(var > 0.0) || !var.is_finite() {
        return Err(Error::InvalidArgument(format!("variance {var} must be positive")));
    }
    if !(lower < upper) {
        return Err(Error::InvalidArgument(format!(
            "lower bound {lower} must be below upper bound {upper}"
        )));
    }
    let sd = var.sqrt();
    let a = (lower - mean) / sd;
    let b = (upper - mean) / sd;
    let (shift, scale, ln_mass, underflow) = standard_truncation(a, b);
    if underflow {
        let m = match (lower.is_finite(), upper.is_finite()) {
            (true, true) => 0.5 * (lower + upper),
            (true, false) => lower,
            (false, true) => upper,
            (false, false) => mean,
        };
        return Ok(Truncated1d {
            mean: m,
            var: var * 1e-12,
            mass: ln_mass.exp(),
            ln_mass,
            underflow: true,
        });
    }
    let m = (mean + sd * shift).clamp(lower, upper);
    Ok(Truncated1d {
        mean: m,
        var: var * scale,
        mass: ln_mass.exp(),
        ln_mass,
        underflow: false,
    })
}

/// Standardized truncation to `[a, b]`: returns (mean, variance, ln mass, underflow).
fn standard_truncation(a: f64, b: f64) -> (f64, f64, f64, bool) {
    // reflect so that the box sits in the lower tail, where ln Φ is accurate
    let (a, b, sign) = if a > 0.0 { (-b, -a, -1.0) } else { (a, b, 1.0) };
    let ln_cdf_b = ln_std_normal_cdf(b);
    let ln_cdf_a = ln_std_normal_cdf(a);
    let ratio = (ln_cdf_a - ln_cdf_b).exp();
    let ln_mass = ln_cdf_b + (-ratio).ln_1p();
    if !(ln_mass > MASS_UNDERFLOW_1D.ln()) {
        return (0.0, 0.0, ln_mass, true);
    }
    let pa = if a.is_finite() { (ln_std_normal_pdf(a) - ln_mass).exp() } else { 0.0 };
    let pb = if b.is_finite() { (ln_std_normal_pdf(b) - ln_mass).exp() } else { 0.0 };
    let delta = pa - pb;
    let ta = if a.is_finite() { a * pa } else { 0.0 };
    let tb = if b.is_finite() { b * pb } else { 0.0 };
    let mut scale = 1.0 + ta - tb - delta * delta;
    if b - a < 1e-4 || !(scale > 0.0) {
        // narrow interval: cancellation above; the uniform limit is accurate here
        scale = ((b - a) * (b - a) / 12.0).min(1.0);
    }
    let mean = (sign * delta).clamp(if sign > 0.0 { a } else { -b }, if sign > 0.0 { b } else { -a });
    (mean, scale.min(1.0), ln_mass, false)
}

/// Matched moments of a bivariate box-truncated Gaussian.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncatedMoments {
    pub mean: [f64; 2],
    pub cov: [[f64; 2]; 2],
    pub mass: f64,
}

/// Uncorrelated-coordinate edge helper: `φ(c) [Φ((hi - ρc)/s) - Φ((lo - ρc)/s)]`.
fn edge_density(c: f64, lo: f64, hi: f64, rho: f64, s: f64) -> f64 {
    if !c.is_finite() {
        return 0.0;
    }
    std_normal_pdf(c) * interval_mass((lo - rho * c) / s, (hi - rho * c) / s)
}

fn times_finite(c: f64, v: f64) -> f64 {
    if c.is_finite() {
        c * v
    } else {
        0.0
    }
}

/// `φ(sqrt(c² - 2ρcd + d²) / s)`, symmetric in `c` and `d`.
fn corner_density(c: f64, d: f64, rho: f64, s: f64) -> f64 {
    if !c.is_finite() || !d.is_finite() {
        return 0.0;
    }
    let q = (c * c + d * d) - 2.0 * rho * (c * d);
    std_normal_pdf(q.max(0.0).sqrt() / s)
}

/// Unnormalised first and second moment of coordinate 1: (L·E[X1], L·E[X1²]).
fn marginal_moments(a1: f64, b1: f64, a2: f64, b2: f64, rho: f64, s: f64, mass: f64) -> (f64, f64) {
    let g1a = edge_density(a1, a2, b2, rho, s);
    let g1b = edge_density(b1, a2, b2, rho, s);
    let g2a = edge_density(a2, a1, b1, rho, s);
    let g2b = edge_density(b2, a1, b1, rho, s);
    let first = (g1a - g1b) + rho * (g2a - g2b);
    let corners = corner_density(a1, a2, rho, s) - corner_density(b1, a2, rho, s)
        - corner_density(a1, b2, rho, s)
        + corner_density(b1, b2, rho, s);
    let second = mass
        + (times_finite(a1, g1a) - times_finite(b1, g1b))
        + rho * rho * (times_finite(a2, g2a) - times_finite(b2, g2b))
        + rho * s * FRAC_1_SQRT_2PI * corners;
    (first, second)
}

/// Unnormalised cross moment L·E[X1 X2].
fn cross_moment(a1: f64, b1: f64, a2: f64, b2: f64, rho: f64, s: f64, mass: f64) -> f64 {
    let t1 = times_finite(a1, edge_density(a1, a2, b2, rho, s))
        - times_finite(b1, edge_density(b1, a2, b2, rho, s));
    let t2 = times_finite(a2, edge_density(a2, a1, b1, rho, s))
        - times_finite(b2, edge_density(b2, a1, b1, rho, s));
    let corners = corner_density(a1, a2, rho, s) - corner_density(a1, b2, rho, s)
        - corner_density(b1, a2, rho, s)
        + corner_density(b1, b2, rho, s);
    rho * mass + rho * (t1 + t2) + s * FRAC_1_SQRT_2PI * corners
}

/// Matched mean and covariance of `N(mean, cov)` restricted to a 2-D box.
///
/// Fails with [`Error::InfeasibleBox`] when the box probability is below
/// [`MASS_INFEASIBLE_2D`].
pub fn truncated_moments_2d(mean: [f64; 2], cov: [[f64; 2]; 2], bounds: &BoxBounds) -> Result<TruncatedMoments> {
    crate::error::check_dim(2, bounds.dim())?;
    let (v1, v2, c12) = (cov[0][0], cov[1][1], 0.5 * (cov[0][1] + cov[1][0]));
    if !(v1 > 0.0 && v2 > 0.0) {
        return Err(Error::InvalidArgument("covariance diagonal must be positive".into()));
    }
    let (s1, s2) = (v1.sqrt(), v2.sqrt());
    let rho = (c12 / (s1 * s2)).clamp(-1.0, 1.0);
    let a1 = (bounds.lower[0] - mean[0]) / s1;
    let b1 = (bounds.upper[0] - mean[0]) / s1;
    let a2 = (bounds.lower[1] - mean[1]) / s2;
    let b2 = (bounds.upper[1] - mean[1]) / s2;

    let (m, e) = if rho.abs() >= RHO_DEGENERATE {
        degenerate_moments(a1, b1, a2, b2, rho)?
    } else {
        let std_box = BoxBounds { lower: vec![a1, a2], upper: vec![b1, b2] };
        let mass = bivariate_normal_mass(&std_box, rho)?;
        if !(mass >= MASS_INFEASIBLE_2D) {
            return Err(Error::InfeasibleBox { mass });
        }
        let s = ((1.0 - rho) * (1.0 + rho)).sqrt();
        let (f1, q1) = marginal_moments(a1, b1, a2, b2, rho, s, mass);
        let (f2, q2) = marginal_moments(a2, b2, a1, b1, rho, s, mass);
        let x12 = cross_moment(a1, b1, a2, b2, rho, s, mass);
        let m10 = (f1 / mass).clamp(a1, b1);
        let m01 = (f2 / mass).clamp(a2, b2);
        let var1 = (q1 / mass - m10 * m10).clamp(0.0, 1.0);
        let var2 = (q2 / mass - m01 * m01).clamp(0.0, 1.0);
        let lim = (var1 * var2).sqrt();
        let c = (x12 / mass - m10 * m01).clamp(-lim, lim);
        ([m10, m01, mass], [var1, var2, c])
    };
    Ok(TruncatedMoments {
        mean: [mean[0] + s1 * m[0], mean[1] + s2 * m[1]],
        cov: [[v1 * e[0], s1 * s2 * e[2]], [s1 * s2 * e[2], v2 * e[1]]],
        mass: m[2],
    })
}

/// Perfectly correlated limit: `X2 = sign(ρ) X1`.
fn degenerate_moments(a1: f64, b1: f64, a2: f64, b2: f64, rho: f64) -> Result<([f64; 3], [f64; 3])> {
    let sign = rho.signum();
    let (l2, u2) = if sign > 0.0 { (a2, b2) } else { (-b2, -a2) };
    let (lo, hi) = (a1.max(l2), b1.min(u2));
    if !(lo < hi) {
        return Err(Error::InfeasibleBox { mass: 0.0 });
    }
    let t = truncated_moments_1d(0.0, 1.0, lo, hi)?;
    if t.underflow || t.mass < MASS_INFEASIBLE_2D {
        return Err(Error::InfeasibleBox { mass: t.mass });
    }
    Ok(([t.mean, sign * t.mean, t.mass], [t.var, t.var, sign * t.var]))
}
