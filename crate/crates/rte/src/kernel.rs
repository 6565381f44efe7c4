//! Henyey-Greenstein phase function, its radial extension into space, and
//! real spherical harmonics used as analytic reference solutions.

use std::f64::consts::PI;

use nalgebra::Vector3;

use crate::error::{Result, RteError};

/// Tolerated quadrature overshoot of the scattering cosine beyond [-1, 1].
const COSINE_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy)]
pub struct PhaseFunction {
    g: f64,
}

impl PhaseFunction {
    pub fn new(g: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&g) {
            return Err(RteError::Domain(format!(
                "anisotropy factor must satisfy 0 <= g < 1, got {g}"
            )));
        }
        Ok(PhaseFunction { g })
    }

    pub fn g(&self) -> f64 {
        self.g
    }
}

/// k(t) = (1/4pi) (1-g^2) / (1 - 2gt + g^2)^{3/2} for t = cos of the
/// scattering angle.
pub fn hg_eval(phase: PhaseFunction, t: f64) -> Result<f64> {
    if t.abs() > 1.0 + COSINE_SLACK {
        return Err(RteError::Domain(format!(
            "scattering cosine {t} outside [-1, 1]"
        )));
    }
    let t = t.clamp(-1.0, 1.0);
    let g = phase.g;
    let d = 1.0 - 2.0 * g * t + g * g;
    Ok((1.0 - g * g) / (4.0 * PI * d * d.sqrt()))
}

/// Radially constant extension of the phase function to nonzero vectors.
pub fn hg_extended(phase: PhaseFunction, x: &Vector3<f64>, y: &Vector3<f64>) -> Result<f64> {
    let (nx, ny) = (x.norm(), y.norm());
    if nx == 0.0 || ny == 0.0 {
        return Err(RteError::Domain(
            "phase function extension undefined at the origin".into(),
        ));
    }
    hg_eval(phase, x.dot(y) / (nx * ny))
}

/// Fully normalized associated Legendre values N_l^m(x) for fixed m and
/// degrees m..=l, including the factor sqrt((2l+1)/(4pi) (l-m)!/(l+m)!).
fn normalized_legendre(l: usize, m: usize, x: f64) -> f64 {
    debug_assert!(m <= l);
    let s = (1.0 - x * x).max(0.0).sqrt();
    // N_m^m by the diagonal recurrence
    let mut pmm = (1.0 / (4.0 * PI)).sqrt();
    for k in 1..=m {
        let kf = k as f64;
        pmm *= -((2.0 * kf + 1.0) / (2.0 * kf)).sqrt() * s;
    }
    if l == m {
        return pmm;
    }
    let mf = m as f64;
    let mut pm1 = pmm; // N_{l-1}^m
    let mut p = (2.0 * mf + 3.0).sqrt() * x * pmm; // N_{m+1}^m
    for ll in (m + 2)..=l {
        let lf = ll as f64;
        let a = ((4.0 * lf * lf - 1.0) / (lf * lf - mf * mf)).sqrt();
        let b = (((lf - 1.0) * (lf - 1.0) - mf * mf) / (4.0 * (lf - 1.0) * (lf - 1.0) - 1.0))
            .sqrt();
        let next = a * (x * p - b * pm1);
        pm1 = p;
        p = next;
    }
    p
}

/// Real spherical harmonic H_l^m with unit L^2(S) norm.
pub fn sph_harmonic(l: usize, m: i64, s: &Vector3<f64>) -> Result<f64> {
    if m.unsigned_abs() as usize > l {
        return Err(RteError::Domain(format!(
            "invalid spherical harmonic order (l={l}, m={m})"
        )));
    }
    if (s.norm() - 1.0).abs() > 1e-10 {
        return Err(RteError::Domain("direction must be a unit vector".into()));
    }
    let ma = m.unsigned_abs() as usize;
    let nlm = normalized_legendre(l, ma, s.z);
    if m == 0 {
        return Ok(nlm);
    }
    let phi = s.y.atan2(s.x);
    let angular = if m > 0 {
        (ma as f64 * phi).cos()
    } else {
        (ma as f64 * phi).sin()
    };
    Ok(std::f64::consts::SQRT_2 * nlm * angular)
}
