//! Small dense linear-algebra helpers on top of `nalgebra`.
//!
//! Everything here works on dynamically sized `f64` matrices; the systems in
//! this crate are a handful of states, so clarity wins over raw speed.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Inverses of matrices whose condition number exceeds this are refused.
pub const MAX_CONDITION: f64 = 1e12;

/// Minimum Cholesky pivot, relative to the matrix norm, for a matrix to count
/// as positive definite.
pub const PD_PIVOT_TOL: f64 = 1e-12;

/// Negative eigenvalues down to `-SQRT_CLAMP_TOL * max(1, |λ|max)` are clamped
/// to zero before taking a symmetric square root.
pub const SQRT_CLAMP_TOL: f64 = 1e-14;

/// Asymmetry (relative) above which a PCM update is logged as anomalous.
pub const ASYMMETRY_WARN: f64 = 1e-10;

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

/// `‖M − Mᵀ‖_F / max(1, ‖M‖_F)`.
pub fn asymmetry(m: &Mat) -> f64 {
    (m - m.transpose()).norm() / m.norm().max(1.0)
}

/// Symmetrizes a freshly computed covariance-like matrix, logging when the
/// drift was larger than expected.
pub fn resymmetrize(m: Mat, what: &str) -> Mat {
    let a = asymmetry(&m);
    if a > ASYMMETRY_WARN {
        log::debug!("{what}: asymmetry {a:.3e} before re-symmetrization");
    }
    symmetrize(&m)
}

pub fn relative_frobenius(a: &Mat, b: &Mat) -> f64 {
    (a - b).norm() / a.norm().max(b.norm()).max(f64::MIN_POSITIVE)
}

/// Cholesky factor of a symmetric matrix, failing when the smallest pivot is
/// at or below `PD_PIVOT_TOL · ‖M‖`.
pub fn cholesky(m: &Mat, name: &str) -> Result<Cholesky<f64, Dyn>> {
    let not_pd = || Error::NotPositiveDefinite { name: name.to_string() };
    if !m.is_square() || m.iter().any(|v| !v.is_finite()) {
        return Err(not_pd());
    }
    let scale = m.norm();
    if scale == 0.0 {
        return Err(not_pd());
    }
    let chol = Cholesky::new(symmetrize(m)).ok_or_else(not_pd)?;
    let min_pivot = chol
        .l_dirty()
        .diagonal()
        .iter()
        .map(|d| d * d)
        .fold(f64::INFINITY, f64::min);
    if min_pivot <= PD_PIVOT_TOL * scale {
        return Err(not_pd());
    }
    Ok(chol)
}

/// Eigenvalues of a symmetric matrix in ascending order.
pub fn sym_eigenvalues(m: &Mat) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(symmetrize(m)).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

pub fn min_eigenvalue(m: &Mat) -> f64 {
    sym_eigenvalues(m).first().copied().unwrap_or(f64::NAN)
}

/// 2-norm condition number of a symmetric positive definite matrix.
pub fn spd_condition(m: &Mat) -> f64 {
    let ev = sym_eigenvalues(m);
    match (ev.first(), ev.last()) {
        (Some(&lo), Some(&hi)) if lo > 0.0 => hi / lo,
        _ => f64::INFINITY,
    }
}

/// 2-norm condition number of a general square matrix.
pub fn condition(m: &Mat) -> f64 {
    let sv = m.clone().singular_values();
    let hi = sv.max();
    let lo = sv.min();
    if lo > 0.0 {
        hi / lo
    } else {
        f64::INFINITY
    }
}

/// Inverse of a symmetric positive definite matrix through its Cholesky factor.
pub fn spd_inverse(m: &Mat, name: &str) -> Result<Mat> {
    let chol = cholesky(m, name)?;
    let cond = spd_condition(m);
    if cond > MAX_CONDITION {
        return Err(Error::Singular { name: name.to_string(), cond });
    }
    Ok(symmetrize(&chol.inverse()))
}

/// Solves `M X = B` for SPD `M`.
pub fn spd_solve(m: &Mat, b: &Mat, name: &str) -> Result<Mat> {
    let chol = cholesky(m, name)?;
    let cond = spd_condition(m);
    if cond > MAX_CONDITION {
        return Err(Error::Singular { name: name.to_string(), cond });
    }
    Ok(chol.solve(b))
}

/// Inverse of a general square matrix, refusing ill-conditioned input.
pub fn inverse(m: &Mat, name: &str) -> Result<Mat> {
    let cond = condition(m);
    if !cond.is_finite() || cond > MAX_CONDITION {
        return Err(Error::Singular { name: name.to_string(), cond });
    }
    m.clone()
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::Singular { name: name.to_string(), cond })
}

/// Symmetric positive semidefinite square root via eigendecomposition.
pub fn sym_sqrt(m: &Mat, name: &str) -> Result<Mat> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let scale = eig.eigenvalues.amax().max(1.0);
    let mut roots = eig.eigenvalues.clone();
    for v in roots.iter_mut() {
        if *v < 0.0 {
            if *v < -SQRT_CLAMP_TOL * scale {
                return Err(Error::NotPositiveDefinite { name: name.to_string() });
            }
            *v = 0.0;
        }
        *v = v.sqrt();
    }
    let u = &eig.eigenvectors;
    Ok(symmetrize(&(u * Mat::from_diagonal(&roots) * u.transpose())))
}

/// Inverse of the symmetric square root, `M^{-1/2}`, for SPD `M`.
pub fn sym_inv_sqrt(m: &Mat, name: &str) -> Result<Mat> {
    cholesky(m, name)?;
    let eig = SymmetricEigen::new(symmetrize(m));
    let hi = eig.eigenvalues.max();
    let lo = eig.eigenvalues.min();
    if hi / lo > MAX_CONDITION {
        return Err(Error::Singular { name: name.to_string(), cond: hi / lo });
    }
    let inv_roots = eig.eigenvalues.map(|v| 1.0 / v.sqrt());
    let u = &eig.eigenvectors;
    Ok(symmetrize(&(u * Mat::from_diagonal(&inv_roots) * u.transpose())))
}

/// Vertical stack of row blocks sharing a column count.
pub fn vstack(blocks: &[Mat], cols: usize) -> Mat {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = Mat::zeros(rows, cols);
    let mut r = 0;
    for b in blocks {
        debug_assert_eq!(b.ncols(), cols);
        out.view_mut((r, 0), (b.nrows(), cols)).copy_from(b);
        r += b.nrows();
    }
    out
}

/// Horizontal concatenation of column blocks sharing a row count.
pub fn hstack(blocks: &[Mat], rows: usize) -> Mat {
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Mat::zeros(rows, cols);
    let mut c = 0;
    for b in blocks {
        debug_assert_eq!(b.nrows(), rows);
        out.view_mut((0, c), (rows, b.ncols())).copy_from(b);
        c += b.ncols();
    }
    out
}

/// Block diagonal of two square blocks.
pub fn block_diag(a: &Mat, b: &Mat) -> Mat {
    let (n, m) = (a.nrows(), b.nrows());
    let mut out = Mat::zeros(n + m, a.ncols() + b.ncols());
    out.view_mut((0, 0), a.shape()).copy_from(a);
    out.view_mut((n, a.ncols()), b.shape()).copy_from(b);
    out
}

pub fn matrix_power(a: &Mat, k: usize) -> Mat {
    let mut out = Mat::identity(a.nrows(), a.ncols());
    for _ in 0..k {
        out = &out * a;
    }
    out
}

/// Builds a matrix from row-major nested rows; all rows must share a length.
pub fn from_rows(rows: &[Vec<f64>]) -> Result<Mat> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(crate::error::config("ragged matrix rows"));
    }
    Ok(Mat::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn to_rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_rejects_indefinite_and_singular() {
        let indefinite = Mat::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(cholesky(&indefinite, "m").is_err());
        let singular = Mat::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(cholesky(&singular, "m").is_err());
        assert!(cholesky(&Mat::identity(3, 3), "m").is_ok());
    }

    #[test]
    fn inverse_refuses_ill_conditioned() {
        let m = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1e-13]);
        match inverse(&m, "x") {
            Err(Error::Singular { name, .. }) => assert_eq!(name, "x"),
            other => panic!("expected singular error, got {other:?}"),
        }
        let spd = Mat::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let inv = spd_inverse(&spd, "spd").unwrap();
        assert!((&spd * inv - Mat::identity(2, 2)).norm() < 1e-14);
    }

    #[test]
    fn sqrt_roundtrip_and_clamp() {
        let m = Mat::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let s = sym_sqrt(&m, "m").unwrap();
        assert!((&s * &s - &m).norm() < 1e-13);
        let is = sym_inv_sqrt(&m, "m").unwrap();
        assert!((&is * &m * &is - Mat::identity(2, 2)).norm() < 1e-13);

        let psd = Mat::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let r = sym_sqrt(&psd, "psd").unwrap();
        assert!((&r * &r - &psd).norm() < 1e-12);
        let neg = Mat::from_row_slice(1, 1, &[-1e-3]);
        assert!(sym_sqrt(&neg, "neg").is_err());
    }

    #[test]
    fn stacking() {
        let a = Mat::from_row_slice(1, 2, &[1.0, 2.0]);
        let b = Mat::from_row_slice(2, 2, &[3.0, 4.0, 5.0, 6.0]);
        let v = vstack(&[a.clone(), b.clone()], 2);
        assert_eq!(v.shape(), (3, 2));
        assert_eq!(v[(2, 1)], 6.0);
        let h = hstack(&[b.transpose(), a.transpose()], 2);
        assert_eq!(h.shape(), (2, 3));
        assert_eq!(h[(1, 2)], 2.0);
        let d = block_diag(&Mat::identity(1, 1), &b);
        assert_eq!(d[(2, 2)], 6.0);
        assert_eq!(d[(0, 1)], 0.0);
    }
}
