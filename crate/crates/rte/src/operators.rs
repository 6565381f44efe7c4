//! Matrix-free application of the Kronecker-structured system operators and
//! the composite operators E, E0^{-1} and (M- - K-)^{-1}.
//!
//! Coefficient vectors use the layout vec(X) where X has one column per
//! angular basis function and one row per spatial basis function; the global
//! index of (spatial i, angular k) is k * n_spatial + i.

use std::cell::Cell;

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::{Llt, SymbolicLlt};
use faer::sparse::{SparseColMat, Triplet};
use faer::Side;
use nalgebra::{DMatrix, DVector, Dyn, Matrix3};

use crate::assembly::AssembledSystem;
use crate::eigen::{truncated_eig, EigenTruncation, MassMatrix};
use crate::error::{Result, RteError};
use crate::sparse::CsrMatrix;

/// Controls for the inner conjugate gradient solver and its preconditioner.
#[derive(Debug, Clone, Copy)]
pub struct OperatorConfig {
    /// relative tolerance of the inner conjugate gradient iteration
    pub inner_tol: f64,
    pub inner_max: usize,
    /// odd truncation order N of the inner preconditioner (odd, or -1)
    pub n_pre: i64,
}

impl Default for OperatorConfig {
    fn default() -> Self {
        OperatorConfig {
            inner_tol: 1e-13,
            inner_max: 500,
            n_pre: 5,
        }
    }
}

/// d_N = (N+1)(N+2)/2, the number of spherical harmonics of degree <= N
pub fn harmonic_count(n: i64) -> usize {
    if n < 0 {
        0
    } else {
        ((n + 1) * (n + 2) / 2) as usize
    }
}

fn to_mat(x: &DVector<f64>, nr: usize, nc: usize) -> DMatrix<f64> {
    x.clone().reshape_generic(Dyn(nr), Dyn(nc))
}

fn to_vec(x: DMatrix<f64>) -> DVector<f64> {
    let n = x.nrows() * x.ncols();
    x.reshape_generic(Dyn(n), Dyn(1)).column(0).clone_owned()
}

/// y = (B (x) C) x computed as vec(C mat(x) B^T) without forming the product.
pub fn kron_matvec(b: &DMatrix<f64>, c: &CsrMatrix, x: &DVector<f64>) -> Result<DVector<f64>> {
    if x.len() != b.ncols() * c.ncols() {
        return Err(RteError::dim(b.ncols() * c.ncols(), x.len(), "kron_matvec"));
    }
    let xm = to_mat(x, c.ncols(), b.ncols());
    let z = c.matmul(&xm);
    Ok(to_vec(z * b.transpose()))
}

/// Matrix-free operators bound to an assembled system.
pub struct Operators<'a> {
    pub sys: &'a AssembledSystem,
    pub cfg: OperatorConfig,
    /// truncated odd eigenpairs for the inner preconditioner
    odd: EigenTruncation,
    /// M- W, cached for K_N application
    odd_mw: DMatrix<f64>,
    m_minus_inv: Vec<Matrix3<f64>>,
    e0: Vec<Llt<usize, f64>>,
    inner_count: Cell<usize>,
}

impl<'a> Operators<'a> {
    pub fn new(sys: &'a AssembledSystem, cfg: OperatorConfig) -> Result<Self> {
        if cfg.n_pre >= 0 && cfg.n_pre % 2 == 0 {
            return Err(RteError::Validation(format!(
                "preconditioner order must be odd or -1, got {}",
                cfg.n_pre
            )));
        }
        let n_sm = sys.n_sm();
        let d = harmonic_count(cfg.n_pre).min(n_sm);
        let mass = MassMatrix::BlockDiag3(&sys.angular.m_minus);
        let odd = if d > 0 {
            truncated_eig(&sys.angular.s_minus, &mass, d)?
        } else {
            EigenTruncation {
                w: DMatrix::zeros(n_sm, 0),
                lambda: DVector::zeros(0),
            }
        };
        let mut odd_mw = DMatrix::zeros(n_sm, odd.count());
        for j in 0..odd.count() {
            odd_mw.set_column(j, &mass.mul_vec(&odd.w.column(j).clone_owned()));
        }
        let m_minus_inv: Vec<Matrix3<f64>> = sys
            .angular
            .m_minus
            .iter()
            .enumerate()
            .map(|(k, b)| {
                b.try_inverse().ok_or(RteError::Factorization {
                    block: k,
                    reason: "odd angular Gramian block is singular".into(),
                })
            })
            .collect::<Result<_>>()?;
        let e0 = build_e0_factors(sys)?;
        Ok(Operators {
            sys,
            cfg,
            odd,
            odd_mw,
            m_minus_inv,
            e0,
            inner_count: Cell::new(0),
        })
    }

    /// total inner iterations since the last call, then resets the counter
    pub fn take_inner_count(&self) -> usize {
        self.inner_count.replace(0)
    }

    fn check_even(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.sys.n_even() {
            return Err(RteError::dim(self.sys.n_even(), x.len(), "even vector"));
        }
        Ok(())
    }

    fn check_odd(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.sys.n_odd() {
            return Err(RteError::dim(self.sys.n_odd(), x.len(), "odd vector"));
        }
        Ok(())
    }

    /// A x for even x
    pub fn apply_a(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_even(x)?;
        let sys = self.sys;
        let xm = to_mat(x, sys.n_rp(), sys.n_sp());
        let mut y = DMatrix::zeros(sys.n_rm(), sys.n_sm());
        for i in 0..2 {
            let z = sys.spatial.d[i].matmul(&xm);
            let a = &sys.angular.a[i];
            for l in 0..sys.n_sm() {
                let (cols, vals) = a.row(l);
                for (&k, &v) in cols.iter().zip(vals) {
                    y.column_mut(l).axpy(v, &z.column(k), 1.0);
                }
            }
        }
        Ok(to_vec(y))
    }

    /// A^T x for odd x
    pub fn apply_at(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_odd(x)?;
        let sys = self.sys;
        let xm = to_mat(x, sys.n_rm(), sys.n_sm());
        let mut y = DMatrix::zeros(sys.n_rp(), sys.n_sp());
        for i in 0..2 {
            let a = &sys.angular.a[i];
            let mut w = DMatrix::zeros(sys.n_rm(), sys.n_sp());
            for l in 0..sys.n_sm() {
                let (cols, vals) = a.row(l);
                for (&k, &v) in cols.iter().zip(vals) {
                    w.column_mut(k).axpy(v, &xm.column(l), 1.0);
                }
            }
            y += sys.spatial.d[i].matmul_transpose(&w);
        }
        Ok(to_vec(y))
    }

    /// M+ x
    pub fn apply_m_plus(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_even(x)?;
        let sys = self.sys;
        let xm = to_mat(x, sys.n_rp(), sys.n_sp());
        let mut z = sys.spatial.mt_plus.matmul(&xm);
        for k in 0..sys.n_sp() {
            z.column_mut(k).scale_mut(sys.angular.m_plus[k]);
        }
        Ok(to_vec(z))
    }

    /// K+ x
    pub fn apply_k_plus(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_even(x)?;
        let sys = self.sys;
        let xm = to_mat(x, sys.n_rp(), sys.n_sp());
        let z = sys.spatial.ms_plus.matmul(&xm);
        Ok(to_vec(z * &sys.angular.s_plus))
    }

    /// R x
    pub fn apply_r(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_even(x)?;
        let sys = self.sys;
        let n = sys.n_rp();
        let mut y = DVector::zeros(x.len());
        for k in 0..sys.n_sp() {
            let xk = x.rows(k * n, n).clone_owned();
            y.rows_mut(k * n, n)
                .copy_from(&sys.boundary.r_blocks[k].matvec(&xk));
        }
        Ok(y)
    }

    /// M- x
    pub fn apply_m_minus(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_odd(x)?;
        let sys = self.sys;
        let mut xm = to_mat(x, sys.n_rm(), sys.n_sm());
        for (j, &mt) in sys.spatial.mt_minus.iter().enumerate() {
            xm.row_mut(j).scale_mut(mt);
        }
        let mut y = DMatrix::zeros(sys.n_rm(), sys.n_sm());
        for (k, g) in sys.angular.m_minus.iter().enumerate() {
            for i in 0..3 {
                for j in 0..3 {
                    y.column_mut(3 * k + i)
                        .axpy(g[(i, j)], &xm.column(3 * k + j), 1.0);
                }
            }
        }
        Ok(to_vec(y))
    }

    /// K- x (dense angular scattering factor)
    pub fn apply_k_minus(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_odd(x)?;
        let sys = self.sys;
        let mut xm = to_mat(x, sys.n_rm(), sys.n_sm());
        for (j, &ms) in sys.spatial.ms_minus.iter().enumerate() {
            xm.row_mut(j).scale_mut(ms);
        }
        Ok(to_vec(xm * &sys.angular.s_minus))
    }

    /// (M- - K-) x
    pub fn apply_mmk(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.apply_m_minus(x)? - self.apply_k_minus(x)?)
    }

    /// (M- - K-_N) x with the truncated scattering operator
    pub fn apply_mmk_truncated(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_odd(x)?;
        let sys = self.sys;
        let mut xm = to_mat(x, sys.n_rm(), sys.n_sm());
        let m = self.apply_m_minus(x)?;
        for (j, &ms) in sys.spatial.ms_minus.iter().enumerate() {
            xm.row_mut(j).scale_mut(ms);
        }
        // K_N = (M- W Lambda W^T M-) (x) Ms-
        let t = &xm * &self.odd_mw;
        let t = t * DMatrix::from_diagonal(&self.odd.lambda);
        let k = t * self.odd_mw.transpose();
        Ok(m - to_vec(k))
    }

    /// closed-form (M- - K-_N)^{-1} b from the truncated eigendecomposition
    pub fn apply_mmk_inv_precond(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_odd(b)?;
        odd_closed_form_apply(
            self.sys,
            &self.odd.w,
            &self.odd.lambda,
            &self.m_minus_inv,
            b,
        )
    }

    /// preconditioned conjugate gradients on (M- - K-) x = b
    pub fn solve_mmk(&self, b: &DVector<f64>) -> Result<(DVector<f64>, usize)> {
        self.check_odd(b)?;
        if b.amax() == 0.0 {
            return Ok((DVector::zeros(b.len()), 0));
        }
        let mut x = DVector::zeros(b.len());
        let mut r = b.clone();
        let mut z = self.apply_mmk_inv_precond(&r)?;
        let mut rz = r.dot(&z);
        let norm0 = rz.max(0.0).sqrt();
        let mut p = z.clone();
        let mut history = Vec::new();
        for iter in 1..=self.cfg.inner_max {
            let q = self.apply_mmk(&p)?;
            let alpha = rz / p.dot(&q);
            x.axpy(alpha, &p, 1.0);
            r.axpy(-alpha, &q, 1.0);
            z = self.apply_mmk_inv_precond(&r)?;
            let rz_new = r.dot(&z);
            let rel = rz_new.max(0.0).sqrt() / norm0;
            history.push(rel);
            if rel <= self.cfg.inner_tol {
                return Ok((x, iter));
            }
            let beta = rz_new / rz;
            rz = rz_new;
            p = z + beta * &p;
        }
        Err(RteError::MaxIterations {
            max_iter: self.cfg.inner_max,
            residual: *history.last().unwrap(),
            history,
        })
    }

    /// E x = A^T (M- - K-)^{-1} A x + M+ x + R x
    pub fn apply_e(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let ax = self.apply_a(x)?;
        let (z, iters) = self.solve_mmk(&ax)?;
        self.inner_count.set(self.inner_count.get() + iters);
        Ok(self.apply_at(&z)? + self.apply_m_plus(x)? + self.apply_r(x)?)
    }

    /// (E - K+) x
    pub fn apply_e_mk(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.apply_e(x)? - self.apply_k_plus(x)?)
    }

    /// E0 x with E0 = (1-cg)^{-1} A^T (M-)^{-1} A + M+ + R
    pub fn apply_e0(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let scale = self.e0_scale();
        let ax = self.apply_a(x)?;
        let minv_ax = odd_closed_form_apply(
            self.sys,
            &DMatrix::zeros(self.sys.n_sm(), 0),
            &DVector::zeros(0),
            &self.m_minus_inv,
            &ax,
        )?;
        Ok(scale * self.apply_at(&minv_ax)? + self.apply_m_plus(x)? + self.apply_r(x)?)
    }

    fn e0_scale(&self) -> f64 {
        let c = self.sys.field.scattering_ratio();
        1.0 / (1.0 - c * self.sys.field.phase.g())
    }

    /// E0^{-1} x via the per-angular-block sparse factorizations
    pub fn apply_e0_inv(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_even(x)?;
        let n = self.sys.n_rp();
        let mut y = x.clone();
        for k in 0..self.sys.n_sp() {
            let mut col = faer::Mat::<f64>::zeros(n, 1);
            for i in 0..n {
                col[(i, 0)] = y[k * n + i];
            }
            self.e0[k].solve_in_place(col.as_mut());
            for i in 0..n {
                y[k * n + i] = col[(i, 0)];
            }
        }
        Ok(y)
    }

    /// l steps of the E0-preconditioned inner Richardson iteration for E z = b
    pub fn apply_p1(&self, l: usize, b: &DVector<f64>) -> Result<DVector<f64>> {
        if l < 1 {
            return Err(RteError::Validation("P1 requires at least one step".into()));
        }
        self.check_even(b)?;
        let mut z = self.apply_e0_inv(b)?;
        for _ in 1..l {
            let resid = b - self.apply_e(&z)?;
            z += self.apply_e0_inv(&resid)?;
        }
        Ok(z)
    }
}

/// Two-term closed form of (M- - K-_N)^{-1} b given d_N M-orthonormal odd
/// eigenpairs; with the full decomposition this is the exact inverse of
/// M- - K-.
pub fn odd_closed_form_apply(
    sys: &AssembledSystem,
    w: &DMatrix<f64>,
    lambda: &DVector<f64>,
    m_minus_inv: &[Matrix3<f64>],
    b: &DVector<f64>,
) -> Result<DVector<f64>> {
    let (nrm, nsm) = (sys.n_rm(), sys.n_sm());
    let bm = to_mat(b, nrm, nsm);
    // eigen-subspace term with diagonal spatial solves
    let mut t = &bm * w;
    for l in 0..lambda.len() {
        for j in 0..nrm {
            let d = sys.spatial.mt_minus[j] - lambda[l] * sys.spatial.ms_minus[j];
            if d <= 0.0 {
                return Err(RteError::Validation(format!(
                    "spatial factor singular in cell {j}: sigma_t - lambda sigma_s = {d}"
                )));
            }
            t[(j, l)] /= d;
        }
    }
    let mut y = t * w.transpose();
    // complement term ((M-)^{-1} - W W^T) (x) (Mt-)^{-1}
    let mut c = bm;
    for (j, &mt) in sys.spatial.mt_minus.iter().enumerate() {
        c.row_mut(j).scale_mut(1.0 / mt);
    }
    let cw = &c * w;
    y -= cw * w.transpose();
    for (k, ginv) in m_minus_inv.iter().enumerate() {
        let block = c.columns(3 * k, 3).clone_owned();
        y.columns_mut(3 * k, 3).zip_apply(&(block * ginv.transpose()), |a, b| *a += b);
    }
    Ok(to_vec(y))
}

/// Per-angular-block sparse Cholesky factorizations of E0.
fn build_e0_factors(sys: &AssembledSystem) -> Result<Vec<Llt<usize, f64>>> {
    let (nrp, nrm, nsp) = (sys.n_rp(), sys.n_rm(), sys.n_sp());
    let c = sys.field.scattering_ratio();
    let scale = 1.0 / (1.0 - c * sys.field.phase.g());
    // spatial couplings P_ij = D_i^T (Mt-)^{-1} D_j
    let mut p: Vec<Vec<(usize, usize, f64)>> = vec![Vec::new(); 4];
    for t in 0..nrm {
        let inv = 1.0 / sys.spatial.mt_minus[t];
        for i in 0..2 {
            let (ci, vi) = sys.spatial.d[i].row(t);
            for j in 0..2 {
                let (cj, vj) = sys.spatial.d[j].row(t);
                for (&ri, &wi) in ci.iter().zip(vi) {
                    for (&rj, &wj) in cj.iter().zip(vj) {
                        p[2 * i + j].push((ri, rj, wi * wj * inv));
                    }
                }
            }
        }
    }
    let mt_plus_trip = sys.spatial.mt_plus.triplets();

    let mut factors = Vec::with_capacity(nsp);
    let mut symbolic: Option<SymbolicLlt<usize>> = None;
    for k in 0..nsp {
        // angular weights t_k^{ij} = a_i^T G_k^{-1} a_j
        let mut av = [[0.0; 3]; 2];
        for i in 0..2 {
            for j in 0..3 {
                let (cols, vals) = sys.angular.a[i].row(3 * k + j);
                for (&col, &v) in cols.iter().zip(vals) {
                    if col == k {
                        av[i][j] = v;
                    }
                }
            }
        }
        let ginv = sys.angular.m_minus[k]
            .try_inverse()
            .ok_or(RteError::Factorization {
                block: k,
                reason: "odd angular Gramian block is singular".into(),
            })?;
        let mut tk = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                for a in 0..3 {
                    for b in 0..3 {
                        tk[i][j] += av[i][a] * ginv[(a, b)] * av[j][b];
                    }
                }
            }
        }
        let mut trip: Vec<(usize, usize, f64)> = Vec::new();
        for i in 0..2 {
            for j in 0..2 {
                let w = scale * tk[i][j];
                trip.extend(p[2 * i + j].iter().map(|&(r, c2, v)| (r, c2, w * v)));
            }
        }
        trip.extend(
            mt_plus_trip
                .iter()
                .map(|&(r, c2, v)| (r, c2, sys.angular.m_plus[k] * v)),
        );
        trip.extend(sys.boundary.r_blocks[k].triplets());
        let csr = CsrMatrix::from_triplets(nrp, nrp, &trip);
        let faer_trip: Vec<Triplet<usize, usize, f64>> = csr
            .triplets()
            .into_iter()
            .map(|(r, c2, v)| Triplet::new(r, c2, v))
            .collect();
        let mat = SparseColMat::<usize, f64>::try_new_from_triplets(nrp, nrp, &faer_trip)
            .map_err(|e| RteError::Factorization {
                block: k,
                reason: format!("sparse conversion failed: {e:?}"),
            })?;
        if symbolic.is_none() {
            symbolic = Some(SymbolicLlt::try_new(mat.symbolic(), Side::Lower).map_err(|e| {
                RteError::Factorization {
                    block: k,
                    reason: format!("symbolic factorization failed: {e:?}"),
                }
            })?);
        }
        let llt = Llt::try_new_with_symbolic(symbolic.clone().unwrap(), mat.as_ref(), Side::Lower)
            .or_else(|_| {
                // sparsity pattern differs from block 0: refactor from scratch
                let sym = SymbolicLlt::try_new(mat.symbolic(), Side::Lower).map_err(|e| {
                    RteError::Factorization {
                        block: k,
                        reason: format!("symbolic factorization failed: {e:?}"),
                    }
                })?;
                Llt::try_new_with_symbolic(sym, mat.as_ref(), Side::Lower).map_err(|e| {
                    RteError::Factorization {
                        block: k,
                        reason: format!("numeric factorization failed: {e:?}"),
                    }
                })
            })?;
        factors.push(llt);
    }
    Ok(factors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::{assemble_system, AngularQuadConfig, OpticalField};
    use crate::dense;
    use crate::kernel::PhaseFunction;
    use crate::spatial::build_square_mesh;
    use crate::sphere::build_sphere_mesh;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn tiny_system(g: f64, sigma_s: f64) -> AssembledSystem {
        let smesh = build_square_mesh(2, 1.0);
        let amesh = build_sphere_mesh(1);
        let n = smesh.n_triangles();
        let field = OpticalField::new(
            vec![0.3; n],
            vec![sigma_s; n],
            vec![1.0; n],
            PhaseFunction::new(g).unwrap(),
        )
        .unwrap();
        assemble_system(smesh, amesh, field, &AngularQuadConfig::default()).unwrap()
    }

    fn rand_vec(rng: &mut StdRng, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn kron_matvec_matches_brute_force() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..10 {
            let b = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
            let c_dense = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
            let trip: Vec<(usize, usize, f64)> = (0..3)
                .flat_map(|i| (0..3).map(move |j| (i, j)))
                .map(|(i, j)| (i, j, c_dense[(i, j)]))
                .collect();
            let c = CsrMatrix::from_triplets(3, 3, &trip);
            let x = rand_vec(&mut rng, 6);
            let got = kron_matvec(&b, &c, &x).unwrap();
            let want = b.kronecker(&c_dense) * &x;
            assert!((got - want).amax() < 1e-13);
        }
    }

    #[test]
    fn kron_identity_and_mixed_product() {
        let eye2 = DMatrix::identity(2, 2);
        let eye3_trip: Vec<(usize, usize, f64)> = (0..3).map(|i| (i, i, 1.0)).collect();
        let eye3 = CsrMatrix::from_triplets(3, 3, &eye3_trip);
        let x = DVector::from_fn(6, |i, _| i as f64 + 1.0);
        assert_eq!(kron_matvec(&eye2, &eye3, &x).unwrap(), x);

        let mut rng = StdRng::seed_from_u64(8);
        let b = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
        let c_dense = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
        let trip: Vec<(usize, usize, f64)> = (0..3)
            .flat_map(|i| (0..3).map(move |j| (i, j)))
            .map(|(i, j)| (i, j, c_dense[(i, j)]))
            .collect();
        let c = CsrMatrix::from_triplets(3, 3, &trip);
        let u = rand_vec(&mut rng, 2);
        let v = rand_vec(&mut rng, 3);
        // (B (x) C)(u (x) v) = (B u) (x) (C v)
        let uv = to_vec(&v * u.transpose());
        let got = kron_matvec(&b, &c, &uv).unwrap();
        let want = to_vec(&(c.matvec(&v)) * (&b * u).transpose());
        assert!((got - want).amax() < 1e-13);
        // dimension mismatch
        assert!(kron_matvec(&b, &c, &rand_vec(&mut rng, 5)).is_err());
    }

    #[test]
    fn apply_a_matches_dense_and_transpose() {
        let sys = tiny_system(0.5, 0.5);
        let ops = Operators::new(&sys, OperatorConfig::default()).unwrap();
        let a = dense::dense_a(&sys);
        let mut rng = StdRng::seed_from_u64(9);
        let x = rand_vec(&mut rng, sys.n_even());
        let y = rand_vec(&mut rng, sys.n_odd());
        let ax = ops.apply_a(&x).unwrap();
        assert!((&ax - &a * &x).amax() < 1e-13);
        let aty = ops.apply_at(&y).unwrap();
        assert!((&aty - a.transpose() * &y).amax() < 1e-13);
        // transpose identity
        assert!((y.dot(&ax) - aty.dot(&x)).abs() < 1e-12 * ax.norm() * y.norm());
        // spatially constant even function is annihilated
        let mut xc = DVector::zeros(sys.n_even());
        for k in 0..sys.n_sp() {
            for i in 0..sys.n_rp() {
                xc[k * sys.n_rp() + i] = (k + 1) as f64;
            }
        }
        assert!(ops.apply_a(&xc).unwrap().amax() < 1e-13);
    }

    #[test]
    fn block_operators_match_dense() {
        let sys = tiny_system(0.4, 0.5);
        let ops = Operators::new(&sys, OperatorConfig::default()).unwrap();
        let mut rng = StdRng::seed_from_u64(10);
        let xe = rand_vec(&mut rng, sys.n_even());
        let xo = rand_vec(&mut rng, sys.n_odd());
        let cases: Vec<(DVector<f64>, DVector<f64>)> = vec![
            (ops.apply_m_plus(&xe).unwrap(), dense::dense_m_plus(&sys) * &xe),
            (ops.apply_k_plus(&xe).unwrap(), dense::dense_k_plus(&sys) * &xe),
            (ops.apply_r(&xe).unwrap(), dense::dense_r(&sys) * &xe),
            (ops.apply_m_minus(&xo).unwrap(), dense::dense_m_minus(&sys) * &xo),
            (ops.apply_k_minus(&xo).unwrap(), dense::dense_k_minus(&sys) * &xo),
        ];
        for (i, (got, want)) in cases.iter().enumerate() {
            let scale = want.amax().max(1.0);
            assert!((got - want).amax() < 1e-12 * scale, "case {i}");
        }
    }

    #[test]
    fn closed_form_inverse_is_exact() {
        let sys = tiny_system(0.6, 0.5);
        let ops = Operators::new(
            &sys,
            OperatorConfig {
                n_pre: 3,
                ..OperatorConfig::default()
            },
        )
        .unwrap();
        let mut rng = StdRng::seed_from_u64(11);
        let b = rand_vec(&mut rng, sys.n_odd());
        let x = ops.apply_mmk_inv_precond(&b).unwrap();
        let back = ops.apply_mmk_truncated(&x).unwrap();
        let rel = (&back - &b).norm() / b.norm();
        assert!(rel < 1e-10, "round-trip residual {rel}");
    }

    #[test]
    fn empty_truncation_reduces_to_mass_inverse() {
        let sys = tiny_system(0.5, 0.5);
        let ops = Operators::new(
            &sys,
            OperatorConfig {
                n_pre: -1,
                ..OperatorConfig::default()
            },
        )
        .unwrap();
        let mut rng = StdRng::seed_from_u64(12);
        let b = rand_vec(&mut rng, sys.n_odd());
        let x = ops.apply_mmk_inv_precond(&b).unwrap();
        let back = ops.apply_m_minus(&x).unwrap();
        assert!((&back - &b).norm() / b.norm() < 1e-12);
    }

    #[test]
    fn even_precond_order_rejected() {
        let sys = tiny_system(0.5, 0.5);
        assert!(Operators::new(
            &sys,
            OperatorConfig {
                n_pre: 2,
                ..OperatorConfig::default()
            }
        )
        .is_err());
    }

    #[test]
    fn cg_isotropic_converges_in_one_iteration() {
        let sys = tiny_system(0.0, 0.5);
        let ops = Operators::new(&sys, OperatorConfig::default()).unwrap();
        let mut rng = StdRng::seed_from_u64(13);
        let b = rand_vec(&mut rng, sys.n_odd());
        let (x, iters) = ops.solve_mmk(&b).unwrap();
        assert_eq!(iters, 1);
        let back = ops.apply_mmk(&x).unwrap();
        assert!((&back - &b).norm() / b.norm() < 1e-12);
    }

    #[test]
    fn cg_solves_anisotropic_system() {
        let sys = tiny_system(0.8, 0.5);
        let ops = Operators::new(&sys, OperatorConfig::default()).unwrap();
        let mut rng = StdRng::seed_from_u64(14);
        let b = rand_vec(&mut rng, sys.n_odd());
        let (x, iters) = ops.solve_mmk(&b).unwrap();
        assert!(iters >= 1);
        let back = ops.apply_mmk(&x).unwrap();
        assert!((&back - &b).norm() / b.norm() < 1e-10);
    }

    #[test]
    fn spectral_sandwich_for_truncation() {
        let sys = tiny_system(0.7, 0.5);
        let n_pre = 3i64;
        let ops = Operators::new(
            &sys,
            OperatorConfig {
                n_pre,
                ..OperatorConfig::default()
            },
        )
        .unwrap();
        let c = sys.field.scattering_ratio();
        let g = sys.field.phase.g();
        let lower = 1.0 - c * g.powi(n_pre as i32 + 1);
        let mut rng = StdRng::seed_from_u64(15);
        for _ in 0..10 {
            let v = rand_vec(&mut rng, sys.n_odd());
            let full = v.dot(&ops.apply_mmk(&v).unwrap());
            let trunc = v.dot(&ops.apply_mmk_truncated(&v).unwrap());
            let eps = 1e-3 * trunc.abs();
            assert!(lower * trunc <= full + eps, "{full} vs {trunc}");
            assert!(full <= trunc + eps, "{full} vs {trunc}");
        }
    }

    #[test]
    fn e_is_symmetric_and_matches_dense() {
        let sys = tiny_system(0.5, 0.5);
        let ops = Operators::new(&sys, OperatorConfig::default()).unwrap();
        let e_dense = dense::dense_e(&sys);
        let mut rng = StdRng::seed_from_u64(16);
        let x = rand_vec(&mut rng, sys.n_even());
        let y = rand_vec(&mut rng, sys.n_even());
        let ex = ops.apply_e(&x).unwrap();
        let ey = ops.apply_e(&y).unwrap();
        assert!((&ex - &e_dense * &x).amax() < 1e-9 * ex.amax());
        let sym = (y.dot(&ex) - x.dot(&ey)).abs() / ex.norm() / y.norm();
        assert!(sym < 1e-10, "symmetry defect {sym}");
        assert!(x.dot(&ex) > 0.0);
    }

    #[test]
    fn e0_inverse_round_trip_and_rayleigh_bounds() {
        let sys = tiny_system(0.5, 0.5);
        let ops = Operators::new(&sys, OperatorConfig::default()).unwrap();
        let mut rng = StdRng::seed_from_u64(17);
        let x = rand_vec(&mut rng, sys.n_even());
        let back = ops.apply_e0(&ops.apply_e0_inv(&x).unwrap()).unwrap();
        assert!((&back - &x).norm() / x.norm() < 1e-11);
        let c = sys.field.scattering_ratio();
        let g = sys.field.phase.g();
        for _ in 0..10 {
            let v = rand_vec(&mut rng, sys.n_even());
            let q = v.dot(&ops.apply_e(&v).unwrap()) / v.dot(&ops.apply_e0(&v).unwrap());
            assert!(q >= 1.0 - c * g - 1e-6 && q <= 1.0 + 1e-6, "quotient {q}");
        }
    }

    #[test]
    fn e0_blocks_are_independent() {
        let sys = tiny_system(0.5, 0.5);
        let ops = Operators::new(&sys, OperatorConfig::default()).unwrap();
        let n = sys.n_rp();
        let mut rng = StdRng::seed_from_u64(18);
        let mut x = rand_vec(&mut rng, sys.n_even());
        let y0 = ops.apply_e0_inv(&x).unwrap();
        // permute a different block's input; block 0 output must not change
        let other = rand_vec(&mut rng, n);
        x.rows_mut(n, n).copy_from(&other);
        let y1 = ops.apply_e0_inv(&x).unwrap();
        assert!((y0.rows(0, n) - y1.rows(0, n)).amax() == 0.0);
    }

    #[test]
    fn p1_properties() {
        let sys = tiny_system(0.5, 0.5);
        let ops = Operators::new(&sys, OperatorConfig::default()).unwrap();
        let mut rng = StdRng::seed_from_u64(19);
        let b = rand_vec(&mut rng, sys.n_even());
        // l=1 equals a single E0 solve
        let z1 = ops.apply_p1(1, &b).unwrap();
        assert!((&z1 - ops.apply_e0_inv(&b).unwrap()).amax() == 0.0);
        // zero input
        let z0 = ops.apply_p1(3, &DVector::zeros(sys.n_even())).unwrap();
        assert!(z0.amax() == 0.0);
        // Neumann-series convergence to E^{-1} b
        let z = ops.apply_p1(40, &b).unwrap();
        let resid = (&b - ops.apply_e(&z).unwrap()).norm() / b.norm();
        assert!(resid < 1e-6, "residual {resid}");
        // symmetry and positivity of P1
        let b2 = rand_vec(&mut rng, sys.n_even());
        let p_b = ops.apply_p1(4, &b).unwrap();
        let p_b2 = ops.apply_p1(4, &b2).unwrap();
        let sym = (b2.dot(&p_b) - b.dot(&p_b2)).abs() / p_b.norm() / b2.norm();
        assert!(sym < 1e-10);
        assert!(b.dot(&p_b) > 0.0);
        // monotone in l, bounded by b^T E^{-1} b
        let vals: Vec<f64> = [1usize, 2, 4, 8]
            .iter()
            .map(|&l| b.dot(&ops.apply_p1(l, &b).unwrap()))
            .collect();
        for w in vals.windows(2) {
            assert!(w[1] >= w[0] - 1e-9 * w[0].abs());
        }
        let e_dense = dense::dense_e(&sys);
        let exact = b.dot(&e_dense.lu().solve(&b).unwrap());
        assert!(vals.iter().all(|&v| v <= exact + 1e-8 * exact.abs()));
    }
}
