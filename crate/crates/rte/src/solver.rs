//! Outer preconditioned Richardson iteration with Galerkin subspace
//! correction, odd-part recovery and contraction diagnostics.

use std::collections::BTreeMap;

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::{Llt, SymbolicLlt};
use faer::sparse::{SparseColMat, Triplet};
use faer::Side;
use nalgebra::{DMatrix, DVector, Dyn};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::assembly::AssembledSystem;
use crate::eigen::{truncated_eig, EigenTruncation, MassMatrix};
use crate::error::{Result, RteError};
use crate::operators::{harmonic_count, OperatorConfig, Operators};
use crate::sparse::CsrMatrix;

/// Controls for the outer Richardson iteration.
#[derive(Debug, Clone, Copy)]
pub struct SolverConfig {
    /// inner steps of the transport preconditioner P1
    pub l: usize,
    /// correction order N (even, or -1 to disable the subspace correction)
    pub n_corr: i64,
    /// odd truncation order of the inner preconditioner (odd, or -1)
    pub n_pre: i64,
    /// relative energy-norm increment tolerance of the outer iteration
    pub outer_tol: f64,
    /// relative tolerance of the inner conjugate gradient solves
    pub inner_tol: f64,
    pub max_outer: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            l: 4,
            n_corr: 4,
            n_pre: 5,
            outer_tol: 1e-8,
            inner_tol: 1e-13,
            max_outer: 200,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.l < 1 {
            return Err(RteError::Validation(
                "at least one inner preconditioner step is required".into(),
            ));
        }
        if self.n_corr != -1 && (self.n_corr < 0 || self.n_corr % 2 != 0) {
            return Err(RteError::Validation(format!(
                "correction order must be even and >= 0, or -1 to disable, got {}",
                self.n_corr
            )));
        }
        if self.outer_tol <= 0.0 {
            return Err(RteError::Validation("outer tolerance must be positive".into()));
        }
        Ok(())
    }

    /// dimension of the angular correction basis
    pub fn d_corr(&self) -> usize {
        harmonic_count(self.n_corr)
    }
}

/// Convergence record of one outer solve.
#[derive(Debug, Clone)]
pub struct IterationReport {
    /// energy-norm increments ||u_n - u_{n-1}||
    pub increments: Vec<f64>,
    /// inner conjugate gradient iterations spent per outer step
    pub inner_iterations: Vec<usize>,
    /// cumulative wall time after each outer step, in seconds
    pub wall_times: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

/// Leading even eigenpairs spanning the angular part of the correction space.
pub fn build_correction_space(sys: &AssembledSystem, n_corr: i64) -> Result<EigenTruncation> {
    if n_corr < 0 || n_corr % 2 != 0 {
        return Err(RteError::Validation(format!(
            "correction order must be even and >= 0, got {n_corr}"
        )));
    }
    let d = harmonic_count(n_corr).min(sys.n_sp());
    truncated_eig(
        &sys.angular.s_plus,
        &MassMatrix::Diagonal(&sys.angular.m_plus),
        d,
    )
}

fn to_mat(x: &DVector<f64>, nr: usize, nc: usize) -> DMatrix<f64> {
    x.clone().reshape_generic(Dyn(nr), Dyn(nc))
}

fn to_vec(x: DMatrix<f64>) -> DVector<f64> {
    let n = x.nrows() * x.ncols();
    x.reshape_generic(Dyn(n), Dyn(1)).column(0).clone_owned()
}

/// Reduced matrix E_c = W^T (E - K+) W of the corrected system, with
/// W = W_N (x) I on the even space. The Schur-complement term is expanded in
/// the full odd eigenbasis, where the spatial factors become diagonal; cells
/// sharing coefficients reuse one angular coupling matrix.
pub fn assemble_ec(sys: &AssembledSystem, space: &EigenTruncation) -> Result<CsrMatrix> {
    let d = space.count();
    let n = sys.n_rp();
    let dim = d * n;
    let w = &space.w;
    let mut trip: Vec<(usize, usize, f64)> = Vec::new();

    // mass and scattering: I (x) Mt+ - Lambda (x) Ms+
    for l in 0..d {
        let off = l * n;
        for (r, c, v) in sys.spatial.mt_plus.triplets() {
            trip.push((off + r, off + c, v));
        }
        for (r, c, v) in sys.spatial.ms_plus.triplets() {
            trip.push((off + r, off + c, -space.lambda[l] * v));
        }
    }

    // boundary: block (l,l') = sum_k W[k,l] W[k,l'] R_k
    let mut bnd: BTreeMap<(usize, usize), DMatrix<f64>> = BTreeMap::new();
    for k in 0..sys.n_sp() {
        let wk = w.row(k).transpose().clone_owned();
        for (r, c, v) in sys.boundary.r_blocks[k].triplets() {
            bnd.entry((r, c))
                .or_insert_with(|| DMatrix::zeros(d, d))
                .ger(v, &wk, &wk, 1.0);
        }
    }

    // Schur term: sum over odd eigendirections m of
    //   (w_m^T A_a W_N)^T (w_m^T A_b W_N) * D_a^T (Mt- - lambda_m Ms-)^{-1} D_b
    let n_sm = sys.n_sm();
    let odd = truncated_eig(
        &sys.angular.s_minus,
        &MassMatrix::BlockDiag3(&sys.angular.m_minus),
        n_sm,
    )?;
    let c_fac: Vec<DMatrix<f64>> = (0..2)
        .map(|a| odd.w.transpose() * sys.angular.a[a].matmul(w))
        .collect();
    let mut groups: BTreeMap<(u64, u64), Vec<usize>> = BTreeMap::new();
    for t in 0..sys.n_rm() {
        let key = (
            sys.spatial.mt_minus[t].to_bits(),
            sys.spatial.ms_minus[t].to_bits(),
        );
        groups.entry(key).or_default().push(t);
    }
    let mut amap: BTreeMap<(usize, usize), DMatrix<f64>> = BTreeMap::new();
    for (&(mtb, msb), tris) in &groups {
        let (mt, ms) = (f64::from_bits(mtb), f64::from_bits(msb));
        let mut scaled = c_fac.clone();
        for m in 0..n_sm {
            let den = mt - odd.lambda[m] * ms;
            if den <= 0.0 {
                return Err(RteError::Validation(format!(
                    "spatial factor singular: sigma_t - lambda sigma_s = {den}"
                )));
            }
            for s in scaled.iter_mut() {
                s.row_mut(m).scale_mut(1.0 / den);
            }
        }
        let h: Vec<Vec<DMatrix<f64>>> = (0..2)
            .map(|a| (0..2).map(|b| scaled[a].transpose() * &c_fac[b]).collect())
            .collect();
        for &t in tris {
            for a in 0..2 {
                let (ca, va) = sys.spatial.d[a].row(t);
                for b in 0..2 {
                    let (cb, vb) = sys.spatial.d[b].row(t);
                    for (&i, &vi) in ca.iter().zip(va) {
                        for (&j, &vj) in cb.iter().zip(vb) {
                            let weight = vi * vj;
                            amap.entry((i, j))
                                .or_insert_with(|| DMatrix::zeros(d, d))
                                .zip_apply(&h[a][b], |x, hv| *x += weight * hv);
                        }
                    }
                }
            }
        }
    }

    for (map, _) in [(&bnd, 0), (&amap, 1)] {
        for (&(r, c), block) in map {
            for l in 0..d {
                for lp in 0..d {
                    let v = block[(l, lp)];
                    if v != 0.0 {
                        trip.push((l * n + r, lp * n + c, v));
                    }
                }
            }
        }
    }
    Ok(CsrMatrix::from_triplets(dim, dim, &trip))
}

fn factor_csr(m: &CsrMatrix) -> Result<Llt<usize, f64>> {
    let dim = m.nrows();
    let faer_trip: Vec<Triplet<usize, usize, f64>> = m
        .triplets()
        .into_iter()
        .map(|(r, c, v)| Triplet::new(r, c, v))
        .collect();
    let mat = SparseColMat::<usize, f64>::try_new_from_triplets(dim, dim, &faer_trip).map_err(
        |e| RteError::Factorization {
            block: 0,
            reason: format!("sparse conversion failed: {e:?}"),
        },
    )?;
    let sym = SymbolicLlt::try_new(mat.symbolic(), Side::Lower).map_err(|e| {
        RteError::Factorization {
            block: 0,
            reason: format!("symbolic factorization failed: {e:?}"),
        }
    })?;
    Llt::try_new_with_symbolic(sym, mat.as_ref(), Side::Lower).map_err(|e| {
        RteError::Factorization {
            block: 0,
            reason: format!("numeric factorization failed: {e:?}"),
        }
    })
}

/// Correction space with the factorized reduced matrix.
pub struct Correction {
    pub space: EigenTruncation,
    pub ec: CsrMatrix,
    llt: Llt<usize, f64>,
}

impl Correction {
    pub fn new(sys: &AssembledSystem, n_corr: i64) -> Result<Self> {
        let space = build_correction_space(sys, n_corr)?;
        let ec = assemble_ec(sys, &space)?;
        let llt = factor_csr(&ec)?;
        Ok(Correction { space, ec, llt })
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut col = faer::Mat::<f64>::zeros(b.len(), 1);
        for i in 0..b.len() {
            col[(i, 0)] = b[i];
        }
        self.llt.solve_in_place(col.as_mut());
        DVector::from_fn(b.len(), |i, _| col[(i, 0)])
    }
}

/// Contraction estimators for the full iteration step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContractionMode {
    /// energy-norm contraction factor eta
    Norm,
    /// spectral radius of the iteration matrix
    SpectralRadius,
}

/// The outer solver bound to an assembled system.
pub struct Solver<'a> {
    pub ops: Operators<'a>,
    pub cfg: SolverConfig,
    pub correction: Option<Correction>,
}

impl<'a> Solver<'a> {
    pub fn new(sys: &'a AssembledSystem, cfg: SolverConfig) -> Result<Self> {
        cfg.validate()?;
        let ops = Operators::new(
            sys,
            OperatorConfig {
                inner_tol: cfg.inner_tol,
                inner_max: 500,
                n_pre: cfg.n_pre,
            },
        )?;
        let correction = if cfg.n_corr >= 0 {
            Some(Correction::new(sys, cfg.n_corr)?)
        } else {
            None
        };
        Ok(Solver {
            ops,
            cfg,
            correction,
        })
    }

    /// right-hand side of the even-parity system: q+ + A^T (M- - K-)^{-1} q-
    pub fn even_rhs(&self) -> Result<DVector<f64>> {
        let sys = self.ops.sys;
        if sys.q_minus.amax() == 0.0 {
            return Ok(sys.q_plus.clone());
        }
        let (z, _) = self.ops.solve_mmk(&sys.q_minus)?;
        Ok(&sys.q_plus + self.ops.apply_at(&z)?)
    }

    /// W^T x, mapping an even vector into the correction space
    fn reduce(&self, corr: &Correction, x: &DVector<f64>) -> DVector<f64> {
        let sys = self.ops.sys;
        to_vec(to_mat(x, sys.n_rp(), sys.n_sp()) * &corr.space.w)
    }

    /// W x_c, prolongating a correction-space vector
    fn expand(&self, corr: &Correction, x: &DVector<f64>) -> DVector<f64> {
        let d = corr.space.count();
        to_vec(to_mat(x, self.ops.sys.n_rp(), d) * corr.space.w.transpose())
    }

    pub fn richardson_solve(&self) -> Result<(DVector<f64>, IterationReport)> {
        let q = self.even_rhs()?;
        let u0 = DVector::zeros(q.len());
        self.richardson_from(&u0, &q)
    }

    /// Richardson iteration from an arbitrary starting iterate.
    pub fn richardson_from(
        &self,
        u0: &DVector<f64>,
        q: &DVector<f64>,
    ) -> Result<(DVector<f64>, IterationReport)> {
        let c = self.ops.sys.field.scattering_ratio();
        if c >= 1.0 {
            return Err(RteError::Validation(format!(
                "scattering ratio c = {c} must be strictly less than one"
            )));
        }
        self.ops.take_inner_count();
        let start = std::time::Instant::now();
        let mut u = u0.clone();
        let mut increments = Vec::new();
        let mut inner = Vec::new();
        let mut walls = Vec::new();
        let mut ref_norm = None;
        for n in 1..=self.cfg.max_outer {
            let r = self.ops.apply_e_mk(&u)? - q;
            let s = self.ops.apply_p1(self.cfg.l, &r)?;
            let mut u_next = &u - &s;
            if let Some(corr) = &self.correction {
                let rhs = self.ops.apply_e_mk(&s)? - &r;
                let uc = corr.solve(&self.reduce(corr, &rhs));
                u_next += self.expand(corr, &uc);
            }
            let inc = self.energy_norm(&(&u_next - &u))?;
            u = u_next;
            if ref_norm.is_none() {
                ref_norm = Some(self.energy_norm(&u)?);
            }
            increments.push(inc);
            inner.push(self.ops.take_inner_count());
            walls.push(start.elapsed().as_secs_f64());
            if inc < self.cfg.outer_tol * ref_norm.unwrap() {
                let report = IterationReport {
                    increments,
                    inner_iterations: inner,
                    wall_times: walls,
                    converged: true,
                    iterations: n,
                };
                return Ok((u, report));
            }
        }
        Err(RteError::MaxIterations {
            max_iter: self.cfg.max_outer,
            residual: *increments.last().unwrap(),
            history: increments,
        })
    }

    /// u- = (M- - K-)^{-1} (q- - A u+)
    pub fn recover_odd(&self, u_plus: &DVector<f64>) -> Result<DVector<f64>> {
        let b = &self.ops.sys.q_minus - self.ops.apply_a(u_plus)?;
        Ok(self.ops.solve_mmk(&b)?.0)
    }

    /// sqrt(x^T (E - K+) x)
    pub fn energy_norm(&self, x: &DVector<f64>) -> Result<f64> {
        if x.amax() == 0.0 {
            return Ok(0.0);
        }
        let quad = x.dot(&self.ops.apply_e_mk(x)?);
        if quad < -1e-12 * x.norm_squared() {
            return Err(RteError::Validation(format!(
                "energy quadratic form is negative ({quad:.3e}); operator lost definiteness"
            )));
        }
        Ok(quad.max(0.0).sqrt())
    }

    /// (I - P1 (E - K+)) e, the error propagation of the half step
    fn half_step_map(&self, e: &DVector<f64>) -> Result<DVector<f64>> {
        let be = self.ops.apply_e_mk(e)?;
        Ok(e - self.ops.apply_p1(self.cfg.l, &be)?)
    }

    /// (I - P_G) e with the energy-orthogonal correction projection
    fn project_out(&self, e: &DVector<f64>) -> Result<DVector<f64>> {
        match &self.correction {
            None => Ok(e.clone()),
            Some(corr) => {
                let be = self.ops.apply_e_mk(e)?;
                let uc = corr.solve(&self.reduce(corr, &be));
                Ok(e - self.expand(corr, &uc))
            }
        }
    }

    /// Power-iteration estimate of the contraction factor of one full step.
    pub fn estimate_contraction(&self, mode: ContractionMode) -> Result<f64> {
        let n = self.ops.sys.n_even();
        let max_iter = 300;
        let mut rng = StdRng::seed_from_u64(1234);
        let mut v = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let mut last = f64::INFINITY;
        match mode {
            ContractionMode::SpectralRadius => {
                v /= v.norm();
                for _ in 0..max_iter {
                    let w = self.project_out(&self.half_step_map(&v)?)?;
                    let rho = w.norm();
                    if rho == 0.0 {
                        return Ok(0.0);
                    }
                    v = w / rho;
                    if (rho - last).abs() <= 1e-5 * rho {
                        return Ok(rho);
                    }
                    last = rho;
                }
            }
            ContractionMode::Norm => {
                // the half-step map is self-adjoint and the projection is
                // idempotent in the energy inner product, so eta^2 is the top
                // eigenvalue of half o project o half
                for _ in 0..max_iter {
                    let nv = self.energy_norm(&v)?;
                    if nv == 0.0 {
                        return Ok(0.0);
                    }
                    v /= nv;
                    let w = self.half_step_map(&self.project_out(&self.half_step_map(&v)?)?)?;
                    let lam = v.dot(&self.ops.apply_e_mk(&w)?).max(0.0);
                    v = w;
                    if (lam - last).abs() <= 1e-5 * lam.max(f64::MIN_POSITIVE) {
                        return Ok(lam.sqrt());
                    }
                    last = lam;
                }
            }
        }
        Err(RteError::PowerIterationFailure { max_iter, last })
    }
}
