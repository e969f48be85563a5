//! Small dense linear-algebra helpers shared by the solvers.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::{Error, Result};

/// `(m + mᵀ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn is_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    SymmetricEigen::new(symmetrize(m)).eigenvalues.min()
}

/// Positive definiteness test: Cholesky of the symmetric part must succeed
/// and every eigenvalue must exceed `tol`.
pub fn is_spd(m: &DMatrix<f64>, tol: f64) -> bool {
    if !m.is_square() || !is_finite(m) {
        return false;
    }
    let s = symmetrize(m);
    s.clone().cholesky().is_some() && min_eigenvalue(&s) > tol
}

/// Positive semi-definiteness up to a tolerance scaled by the matrix norm.
pub fn is_psd(m: &DMatrix<f64>, tol: f64) -> bool {
    if !m.is_square() || !is_finite(m) {
        return false;
    }
    min_eigenvalue(m) >= -tol * (1.0 + m.norm())
}

/// Eigenvalue clamp of a symmetric matrix onto the PSD cone.
pub fn clamp_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    map_eigenvalues(m, |l| l.max(0.0))
}

/// Principal square root of a symmetric PSD matrix (negative eigenvalues clamped).
pub fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    map_eigenvalues(m, |l| l.max(0.0).sqrt())
}

pub fn map_eigenvalues(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let vals = eig.eigenvalues.map(f);
    let v = &eig.eigenvectors;
    symmetrize(&(v * DMatrix::from_diagonal(&vals) * v.transpose()))
}

/// Inverse of an SPD matrix through its Cholesky factor.
pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    symmetrize(m)
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Infeasible(format!("{what} is not positive definite")))
}

/// Solve `a x = b`, reporting a singular system instead of returning garbage.
///
/// Singularity is judged on the reciprocal condition number from the SVD.
pub fn solve_checked(a: &DMatrix<f64>, b: &DMatrix<f64>, rcond: f64) -> Option<DMatrix<f64>> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smax > 0.0) || smin / smax < rcond {
        return None;
    }
    a.clone().lu().solve(b)
}

/// Number of free parameters of an `n×n` symmetric matrix.
pub fn sym_dim(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Upper-triangular half-vectorisation. Off-diagonal entries are scaled by
/// `√2` so that the Euclidean norm equals the Frobenius norm of `m`.
pub fn vech(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows();
    let mut out = DVector::zeros(sym_dim(n));
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            out[k] = if i == j {
                m[(i, i)]
            } else {
                0.5 * (m[(i, j)] + m[(j, i)]) * std::f64::consts::SQRT_2
            };
            k += 1;
        }
    }
    out
}

/// Inverse of [`vech`].
pub fn unvech(v: &DVector<f64>, n: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            if i == j {
                m[(i, i)] = v[k];
            } else {
                let x = v[k] / std::f64::consts::SQRT_2;
                m[(i, j)] = x;
                m[(j, i)] = x;
            }
            k += 1;
        }
    }
    m
}

/// Relative Frobenius distance `‖a − b‖ / ‖b‖`.
pub fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

/// Least-squares left pseudo-inverse `(BᵀB)⁻¹Bᵀ` of a full column rank matrix.
pub fn left_pinv(b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let btb = b.transpose() * b;
    let inv = btb
        .try_inverse()
        .ok_or_else(|| Error::InvalidParameter("input matrix is not full column rank".into()))?;
    Ok(inv * b.transpose())
}
