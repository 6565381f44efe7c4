//! Dense assembly of all system operators for small problems.
//!
//! Forms the full Kronecker-product matrices explicitly. Only feasible on
//! tiny meshes; used for cross-checking the matrix-free operators and for
//! reference solves.

use nalgebra::DMatrix;

use crate::assembly::AssembledSystem;
use crate::eigen::MassMatrix;

fn diag(values: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(values))
}

/// A = sum_i Aang_i (x) D_i
pub fn dense_a(sys: &AssembledSystem) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(sys.n_odd(), sys.n_even());
    for i in 0..2 {
        a += sys.angular.a[i]
            .to_dense()
            .kronecker(&sys.spatial.d[i].to_dense());
    }
    a
}

pub fn dense_m_plus(sys: &AssembledSystem) -> DMatrix<f64> {
    diag(&sys.angular.m_plus).kronecker(&sys.spatial.mt_plus.to_dense())
}

pub fn dense_k_plus(sys: &AssembledSystem) -> DMatrix<f64> {
    sys.angular
        .s_plus
        .kronecker(&sys.spatial.ms_plus.to_dense())
}

pub fn dense_m_minus(sys: &AssembledSystem) -> DMatrix<f64> {
    MassMatrix::BlockDiag3(&sys.angular.m_minus)
        .to_dense()
        .kronecker(&diag(&sys.spatial.mt_minus))
}

pub fn dense_k_minus(sys: &AssembledSystem) -> DMatrix<f64> {
    sys.angular
        .s_minus
        .kronecker(&diag(&sys.spatial.ms_minus))
}

pub fn dense_r(sys: &AssembledSystem) -> DMatrix<f64> {
    let n = sys.n_rp();
    let mut r = DMatrix::zeros(sys.n_even(), sys.n_even());
    for (k, block) in sys.boundary.r_blocks.iter().enumerate() {
        r.view_mut((k * n, k * n), (n, n))
            .copy_from(&block.to_dense());
    }
    r
}

/// Schur complement E = A^T (M- - K-)^{-1} A + M+ + R
pub fn dense_e(sys: &AssembledSystem) -> DMatrix<f64> {
    let a = dense_a(sys);
    let mmk = dense_m_minus(sys) - dense_k_minus(sys);
    let inv = mmk.try_inverse().expect("M- - K- is invertible");
    a.transpose() * inv * a + dense_m_plus(sys) + dense_r(sys)
}

/// E - K+, the even-parity system matrix
pub fn dense_e_mk(sys: &AssembledSystem) -> DMatrix<f64> {
    dense_e(sys) - dense_k_plus(sys)
}

/// q = q+ + A^T (M- - K-)^{-1} q-
pub fn dense_rhs(sys: &AssembledSystem) -> nalgebra::DVector<f64> {
    let a = dense_a(sys);
    let mmk = dense_m_minus(sys) - dense_k_minus(sys);
    let inv = mmk.try_inverse().expect("M- - K- is invertible");
    &sys.q_plus + a.transpose() * inv * &sys.q_minus
}
