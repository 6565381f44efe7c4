//! Quadrature rules on the reference triangle.
//!
//! The rules are conical-product rules: a Gauss-Jacobi rule (weight `1-x`)
//! in the collapsed coordinate combined with a Gauss-Legendre rule. All
//! weights are positive and a rule of requested polynomial degree `d` uses
//! `ceil((d+1)/2)^2` points.

use crate::error::{Result, RteError};

/// Largest polynomial degree for which rules are generated.
pub const MAX_DEGREE: usize = 50;

/// A quadrature rule on the reference triangle
/// `{(u,v): u >= 0, v >= 0, u + v <= 1}` with measure 1/2.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    /// barycentric coordinates (l0, l1, l2) with l0 = 1 - u - v
    pub points: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
    /// polynomial exactness
    pub degree: usize,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Gauss-Legendre nodes/weights on [0, 1].
fn gauss_legendre_unit(m: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; m];
    let mut weights = vec![0.0; m];
    let n = m as f64;
    for i in 0..m {
        // initial guess (Chebyshev-like), Newton on P_m
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre_and_derivative(m, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (_, dp) = legendre_and_derivative(m, x);
        nodes[i] = 0.5 * (1.0 - x); // descending cos order -> ascending on [0,1]
        weights[i] = 1.0 / ((1.0 - x * x) * dp * dp);
    }
    nodes.reverse();
    weights.reverse();
    (nodes, weights)
}

fn legendre_and_derivative(m: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if m == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=m {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let dp = m as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

/// Gauss-Jacobi nodes/weights on [0, 1] with weight function (1 - x),
/// computed by Golub-Welsch on the Jacobi(1,0) recurrence.
fn gauss_jacobi_unit(m: usize) -> (Vec<f64>, Vec<f64>) {
    use nalgebra::DMatrix;
    // symmetric tridiagonal Jacobi matrix for the (1,0) Jacobi weight on [-1,1]
    let mut j = DMatrix::<f64>::zeros(m, m);
    for k in 0..m {
        let kf = k as f64;
        let diag = -1.0 / ((2.0 * kf + 1.0) * (2.0 * kf + 3.0));
        j[(k, k)] = diag;
        if k + 1 < m {
            let kf1 = kf + 1.0;
            let off = (kf1 * (kf1 + 1.0)).sqrt() / (2.0 * kf1 + 1.0);
            j[(k, k + 1)] = off;
            j[(k + 1, k)] = off;
        }
    }
    let eig = nalgebra::SymmetricEigen::new(j);
    let mu0 = 2.0; // integral of (1-x) over [-1,1]
    let mut pairs: Vec<(f64, f64)> = (0..m)
        .map(|i| {
            let x = eig.eigenvalues[i];
            let q0 = eig.eigenvectors[(0, i)];
            (x, mu0 * q0 * q0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    // map to [0,1]: integral of (1-y) f(y) dy = 1/4 * integral of (1-x) f((1+x)/2) dx
    let nodes = pairs.iter().map(|&(x, _)| 0.5 * (1.0 + x)).collect();
    let weights = pairs.iter().map(|&(_, w)| 0.25 * w).collect();
    (nodes, weights)
}

/// A rule of the requested polynomial exactness degree on the reference triangle.
pub fn triangle_rule(degree: usize) -> Result<QuadratureRule> {
    if degree < 1 || degree > MAX_DEGREE {
        return Err(RteError::UnsupportedDegree {
            degree,
            supported: format!("1..={MAX_DEGREE}"),
        });
    }
    let m = (degree + 1).div_ceil(2);
    let (xi, wi) = gauss_jacobi_unit(m);
    let (eta, wj) = gauss_legendre_unit(m);
    let mut points = Vec::with_capacity(m * m);
    let mut weights = Vec::with_capacity(m * m);
    for i in 0..m {
        for j in 0..m {
            let u = xi[i];
            let v = eta[j] * (1.0 - xi[i]);
            points.push([1.0 - u - v, u, v]);
            weights.push(wi[i] * wj[j]);
        }
    }
    Ok(QuadratureRule {
        points,
        weights,
        degree,
    })
}
