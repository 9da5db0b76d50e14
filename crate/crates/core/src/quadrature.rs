//! Fixed-degree quadrature on the reference triangle, reference edge [0,1],
//! and reference time interval [0,1].
//!
//! Everything is built from Gauss-Legendre points: the 1D rules directly, the
//! triangle rule as a conical (Duffy) product over the collapsed square. Rules
//! are immutable once constructed and freely shareable across threads.

use crate::error::{Error, Result};

/// Quadrature rule on the reference triangle {(x, y) : x ≥ 0, y ≥ 0, x + y ≤ 1}.
#[derive(Debug, Clone)]
pub struct TriRule {
    /// Points in reference coordinates (x, y).
    pub points: Vec<[f64; 2]>,
    /// Weights summing to 1/2 (the reference area).
    pub weights: Vec<f64>,
    /// Exact for total degree ≤ this.
    pub exact_degree: usize,
}

/// Quadrature rule on [0,1]; used for edges and for time intervals.
#[derive(Debug, Clone)]
pub struct LineRule {
    pub points: Vec<f64>,
    /// Weights summing to 1.
    pub weights: Vec<f64>,
    pub exact_degree: usize,
}

/// Legendre polynomial P_n and its derivative at x, by the three-term recurrence.
fn legendre_with_deriv(n: usize, x: f64) -> (f64, f64) {
    if n == 0 {
        return (1.0, 0.0);
    }
    let mut p_prev = 1.0;
    let mut p = x;
    for k in 1..n {
        let kf = k as f64;
        let p_next = ((2.0 * kf + 1.0) * x * p - kf * p_prev) / (kf + 1.0);
        p_prev = p;
        p = p_next;
    }
    // P'_n(x) = n (x P_n − P_{n−1}) / (x² − 1)
    let dp = n as f64 * (x * p - p_prev) / (x * x - 1.0);
    (p, dp)
}

/// n-point Gauss-Legendre rule on [0,1], exact through degree 2n−1.
///
/// Nodes are found by Newton iteration from the Chebyshev-like initial guess;
/// the rule is symmetrized explicitly so that node[i] + node[n−1−i] = 1 holds
/// to the last bit.
pub fn gauss_legendre(n: usize) -> LineRule {
    assert!(n >= 1, "need at least one Gauss point");
    let mut points = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        // root of P_n in (−1, 1), descending
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        for _ in 0..60 {
            let (p, dp) = legendre_with_deriv(n, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, dp) = legendre_with_deriv(n, x);
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        // map [−1,1] → [0,1]
        let t = 0.5 * (1.0 + x);
        points[n - 1 - i] = t;
        points[i] = 1.0 - t;
        weights[i] = 0.5 * w;
        weights[n - 1 - i] = 0.5 * w;
    }
    if n % 2 == 1 {
        points[n / 2] = 0.5;
    }
    LineRule {
        points,
        weights,
        exact_degree: 2 * n - 1,
    }
}

/// Rule on the reference triangle exact for total degree ≤ `degree`.
///
/// Conical product: with x = u, y = v(1−u) the integral becomes
/// ∫₀¹∫₀¹ f(u, v(1−u)) (1−u) du dv, and the two factors are handled by
/// Gauss-Legendre rules sized for the extra (1−u) weight.
pub fn triangle_rule(degree: usize) -> Result<TriRule> {
    if !(1..=20).contains(&degree) {
        return Err(Error::InvalidArgument(format!(
            "triangle rule degree {degree} outside 1..=20"
        )));
    }
    let gu = gauss_legendre((degree + 2).div_ceil(2));
    let gv = gauss_legendre((degree + 1).div_ceil(2));
    let mut points = Vec::with_capacity(gu.points.len() * gv.points.len());
    let mut weights = Vec::with_capacity(points.capacity());
    for (&u, &wu) in gu.points.iter().zip(&gu.weights) {
        for (&v, &wv) in gv.points.iter().zip(&gv.weights) {
            points.push([u, v * (1.0 - u)]);
            weights.push(wu * wv * (1.0 - u));
        }
    }
    Ok(TriRule {
        points,
        weights,
        exact_degree: degree,
    })
}

/// Gauss-Legendre rule on [0,1] for edge integrals, exact for degree ≤ `degree`.
pub fn edge_rule(degree: usize) -> Result<LineRule> {
    if degree < 1 {
        return Err(Error::InvalidArgument(
            "edge rule degree must be ≥ 1".into(),
        ));
    }
    // n Gauss points are exact through 2n−1, so even degrees need the bump
    Ok(gauss_legendre(degree / 2 + 1))
}

/// Gauss rule on a reference time interval; `points` Gauss points, exactness 2·points−1.
pub fn time_rule(points: usize) -> Result<LineRule> {
    if !(1..=5).contains(&points) {
        return Err(Error::InvalidArgument(format!(
            "time rule wants 1..=5 Gauss points, got {points}"
        )));
    }
    Ok(gauss_legendre(points))
}

/// Default volume rule degree for assembling with polynomial degree r and
/// smooth (non-polynomial) data: over-integrate by four degrees.
pub fn default_volume_degree(r: usize) -> usize {
    2 * r + 4
}
