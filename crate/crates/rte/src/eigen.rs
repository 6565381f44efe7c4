//! Truncated generalized symmetric eigendecompositions S W = M W Lambda used
//! by the scattering preconditioner and the correction space.

use nalgebra::{DMatrix, DVector, Matrix3};

use crate::error::{Result, RteError};

/// Largest dimension handled by the dense congruence path; beyond it a
/// Lanczos iteration with M-inner products is used.
const DENSE_EIG_MAX: usize = 4096;

/// Structured symmetric positive definite Gramian.
#[derive(Debug, Clone)]
pub enum MassMatrix<'a> {
    Diagonal(&'a [f64]),
    BlockDiag3(&'a [Matrix3<f64>]),
}

impl MassMatrix<'_> {
    pub fn dim(&self) -> usize {
        match self {
            MassMatrix::Diagonal(d) => d.len(),
            MassMatrix::BlockDiag3(b) => 3 * b.len(),
        }
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.dim());
        match self {
            MassMatrix::Diagonal(d) => {
                DVector::from_iterator(d.len(), d.iter().zip(x.iter()).map(|(&m, &v)| m * v))
            }
            MassMatrix::BlockDiag3(blocks) => {
                let mut y = DVector::zeros(x.len());
                for (k, b) in blocks.iter().enumerate() {
                    let xs = x.fixed_rows::<3>(3 * k);
                    y.fixed_rows_mut::<3>(3 * k).copy_from(&(b * xs));
                }
                y
            }
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut m = DMatrix::zeros(n, n);
        match self {
            MassMatrix::Diagonal(d) => {
                for (i, &v) in d.iter().enumerate() {
                    m[(i, i)] = v;
                }
            }
            MassMatrix::BlockDiag3(blocks) => {
                for (k, b) in blocks.iter().enumerate() {
                    m.fixed_view_mut::<3, 3>(3 * k, 3 * k).copy_from(b);
                }
            }
        }
        m
    }

    /// lower Cholesky factors, exploiting the block structure
    fn cholesky_blocks(&self) -> Result<CholFactor> {
        match self {
            MassMatrix::Diagonal(d) => {
                if d.iter().any(|&v| v <= 0.0) {
                    return Err(RteError::Factorization {
                        block: 0,
                        reason: "mass matrix not positive definite".into(),
                    });
                }
                Ok(CholFactor::Diagonal(d.iter().map(|v| v.sqrt()).collect()))
            }
            MassMatrix::BlockDiag3(blocks) => {
                let mut ls = Vec::with_capacity(blocks.len());
                for (k, b) in blocks.iter().enumerate() {
                    let chol = b.cholesky().ok_or(RteError::Factorization {
                        block: k,
                        reason: "mass block not positive definite".into(),
                    })?;
                    ls.push(chol.l());
                }
                Ok(CholFactor::BlockDiag3(ls))
            }
        }
    }
}

enum CholFactor {
    Diagonal(Vec<f64>),
    BlockDiag3(Vec<Matrix3<f64>>),
}

impl CholFactor {
    /// X <- L^{-1} X
    fn solve_l_mat(&self, x: &mut DMatrix<f64>) {
        match self {
            CholFactor::Diagonal(d) => {
                for (i, &l) in d.iter().enumerate() {
                    x.row_mut(i).scale_mut(1.0 / l);
                }
            }
            CholFactor::BlockDiag3(blocks) => {
                for (k, l) in blocks.iter().enumerate() {
                    for j in 0..x.ncols() {
                        let mut v = x.fixed_view_mut::<3, 1>(3 * k, j);
                        let solved = l.solve_lower_triangular(&v.clone_owned()).unwrap();
                        v.copy_from(&solved);
                    }
                }
            }
        }
    }

    /// X <- L^{-T} X
    fn solve_lt_mat(&self, x: &mut DMatrix<f64>) {
        match self {
            CholFactor::Diagonal(d) => {
                for (i, &l) in d.iter().enumerate() {
                    x.row_mut(i).scale_mut(1.0 / l);
                }
            }
            CholFactor::BlockDiag3(blocks) => {
                for (k, l) in blocks.iter().enumerate() {
                    let lt = l.transpose();
                    for j in 0..x.ncols() {
                        let mut v = x.fixed_view_mut::<3, 1>(3 * k, j);
                        let solved = lt.solve_upper_triangular(&v.clone_owned()).unwrap();
                        v.copy_from(&solved);
                    }
                }
            }
        }
    }
}

/// Leading generalized eigenpairs, M-orthonormal, eigenvalues non-increasing.
#[derive(Debug, Clone)]
pub struct EigenTruncation {
    pub w: DMatrix<f64>,
    pub lambda: DVector<f64>,
}

impl EigenTruncation {
    pub fn dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn count(&self) -> usize {
        self.w.ncols()
    }
}

/// Leading `d_n` eigenpairs of S w = lambda M w for symmetric PSD S and SPD M.
pub fn truncated_eig(s: &DMatrix<f64>, m: &MassMatrix, d_n: usize) -> Result<EigenTruncation> {
    let n = m.dim();
    if s.nrows() != n || s.ncols() != n {
        return Err(RteError::dim(n, s.nrows(), "eigenproblem matrix"));
    }
    if d_n < 1 || d_n > n {
        return Err(RteError::Validation(format!(
            "eigenpair count {d_n} outside 1..={n}"
        )));
    }
    if n <= DENSE_EIG_MAX {
        dense_eig(s, m, d_n)
    } else {
        lanczos_eig(s, m, d_n)
    }
}

fn dense_eig(s: &DMatrix<f64>, m: &MassMatrix, d_n: usize) -> Result<EigenTruncation> {
    let chol = m.cholesky_blocks()?;
    // congruence to a standard symmetric problem: C = L^{-1} S L^{-T}
    let mut c = s.clone();
    chol.solve_l_mat(&mut c);
    c.transpose_mut();
    chol.solve_l_mat(&mut c);
    c = 0.5 * (&c + c.transpose());
    let eig = c.symmetric_eigen();
    let mut order: Vec<usize> = (0..m.dim()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let mut w = DMatrix::zeros(m.dim(), d_n);
    let mut lambda = DVector::zeros(d_n);
    for (j, &i) in order.iter().take(d_n).enumerate() {
        w.set_column(j, &eig.eigenvectors.column(i));
        lambda[j] = eig.eigenvalues[i];
    }
    chol.solve_lt_mat(&mut w);
    Ok(EigenTruncation { w, lambda })
}

/// Lanczos with full reorthogonalization on L^{-1} S L^{-T}.
fn lanczos_eig(s: &DMatrix<f64>, m: &MassMatrix, d_n: usize) -> Result<EigenTruncation> {
    let n = m.dim();
    let chol = m.cholesky_blocks()?;
    let steps = (4 * d_n + 40).min(n);
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(steps);
    let mut tri = DMatrix::<f64>::zeros(steps, steps);
    // deterministic pseudo-random start
    let mut v = DVector::from_fn(n, |i, _| ((i as f64 * 0.7548776662 + 0.1).fract()) - 0.5);
    v /= v.norm();
    let mut beta = 0.0;
    let mut prev: Option<DVector<f64>> = None;
    for j in 0..steps {
        basis.push(v.clone());
        // w = L^{-1} S L^{-T} v
        let mut x = DMatrix::from_column_slice(n, 1, v.as_slice());
        chol.solve_lt_mat(&mut x);
        let mut y = s * x.column(0).clone_owned();
        let mut ym = DMatrix::from_column_slice(n, 1, y.as_slice());
        chol.solve_l_mat(&mut ym);
        y = ym.column(0).clone_owned();
        if let Some(p) = &prev {
            y -= beta * p;
        }
        let alpha = y.dot(&v);
        y -= alpha * &v;
        // full reorthogonalization
        for b in &basis {
            let c = y.dot(b);
            y -= c * b;
        }
        tri[(j, j)] = alpha;
        beta = y.norm();
        if j + 1 < steps {
            tri[(j, j + 1)] = beta;
            tri[(j + 1, j)] = beta;
        }
        if beta < 1e-14 {
            tri = tri.view((0, 0), (j + 1, j + 1)).clone_owned();
            basis.truncate(j + 1);
            break;
        }
        prev = Some(v);
        v = y / beta;
    }
    let k = basis.len();
    if k < d_n {
        return Err(RteError::EigenFailure(format!(
            "Krylov space exhausted at dimension {k} < {d_n}"
        )));
    }
    let eig = tri.view((0, 0), (k, k)).clone_owned().symmetric_eigen();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let mut w = DMatrix::zeros(n, d_n);
    let mut lambda = DVector::zeros(d_n);
    for (j, &i) in order.iter().take(d_n).enumerate() {
        let mut col = DVector::zeros(n);
        for (b, q) in basis.iter().zip(eig.eigenvectors.column(i).iter()) {
            col += *q * b;
        }
        w.set_column(j, &col);
        lambda[j] = eig.eigenvalues[i];
    }
    chol.solve_lt_mat(&mut w);
    Ok(EigenTruncation { w, lambda })
}
