//! Small dense linear algebra helpers with the numerical policies used
//! throughout the crate.
//!
//! Policies (fixed here so every call site behaves identically):
//!
//! * symmetry is enforced as `(M + M') / 2` before any eigen decomposition;
//! * a matrix counts as positive semidefinite when its smallest eigenvalue is
//!   at least `-1e-10`;
//! * pseudo-inverses drop eigenvalues below a cutoff relative to the largest
//!   eigenvalue and emit a `log::warn!` diagnostic, since falling back to a
//!   pseudo-inverse usually signals a degenerate model configuration;
//! * Cholesky factorization of semidefinite matrices falls back to an
//!   eigenvalue-clipped square root when the strict factorization fails.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::scalar::{cst, Scalar};

/// Absolute eigenvalue floor below which a symmetric matrix is rejected as
/// not positive semidefinite.
pub const PSD_EIG_FLOOR: f64 = -1e-10;

/// Replace `m` by its symmetric part `(m + m') / 2`.
pub fn symmetrize<S: Scalar>(m: &DMatrix<S>) -> DMatrix<S> {
    let half = cst::<S>(0.5);
    let mut out = m.clone();
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out[(i, j)] = (m[(i, j)] + m[(j, i)]) * half;
        }
    }
    out
}

/// Eigenvalues of the symmetric part of `m`, ascending.
pub fn sym_eigenvalues<S: Scalar>(m: &DMatrix<S>) -> DVector<S> {
    let mut ev = symmetrize(m).symmetric_eigenvalues();
    ev.as_mut_slice()
        .sort_by(|a, b| a.partial_cmp(b).expect("eigenvalues are finite"));
    ev
}

/// Whether the symmetric part of `m` is positive semidefinite up to the
/// [`PSD_EIG_FLOOR`] tolerance.
pub fn is_psd<S: Scalar>(m: &DMatrix<S>) -> bool {
    if m.nrows() != m.ncols() {
        return false;
    }
    if m.nrows() == 0 {
        return true;
    }
    let ev = sym_eigenvalues(m);
    ev[0] >= cst::<S>(PSD_EIG_FLOOR)
}

/// Whether the symmetric part of `m` is positive definite with margin `tol`
/// relative to the largest eigenvalue (absolute for near-zero matrices).
pub fn is_pd<S: Scalar>(m: &DMatrix<S>, rel_tol: f64) -> bool {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return false;
    }
    let ev = sym_eigenvalues(m);
    let lmax = ev[ev.len() - 1].max(S::zero());
    let cut = (lmax * cst::<S>(rel_tol)).max(cst::<S>(f64::MIN_POSITIVE));
    ev[0] > cut
}

/// Moore-Penrose pseudo-inverse of a symmetric PSD matrix through its eigen
/// decomposition, dropping eigenvalues `<= rel_cutoff * lambda_max`.
///
/// Returns the inverse together with the log-pseudo-determinant (sum of log of
/// retained eigenvalues) and the number of dropped eigenvalues.
pub fn pinv_sym<S: Scalar>(m: &DMatrix<S>, rel_cutoff: f64) -> (DMatrix<S>, S, usize) {
    let n = m.nrows();
    assert_eq!(n, m.ncols(), "pinv_sym requires a square matrix");
    if n == 0 {
        return (DMatrix::zeros(0, 0), S::zero(), 0);
    }
    let se = symmetrize(m).symmetric_eigen();
    let lmax = se
        .eigenvalues
        .iter()
        .fold(S::zero(), |acc, &l| acc.max(l.abs()));
    let cut = lmax * cst::<S>(rel_cutoff);
    let mut inv_ev = se.eigenvalues.clone();
    let mut logdet = S::zero();
    let mut dropped = 0usize;
    for l in inv_ev.iter_mut() {
        if *l > cut && *l > S::zero() {
            logdet += l.ln();
            *l = S::one() / *l;
        } else {
            *l = S::zero();
            dropped += 1;
        }
    }
    let mut out = DMatrix::zeros(n, n);
    for k in 0..n {
        if inv_ev[k] != S::zero() {
            let v = se.eigenvectors.column(k);
            // out += inv_ev[k] * v v'
            for i in 0..n {
                let vi = v[i] * inv_ev[k];
                for j in 0..n {
                    out[(i, j)] += vi * v[j];
                }
            }
        }
    }
    (out, logdet, dropped)
}

/// Solve `M x = B` for symmetric positive definite `M` via Cholesky, falling
/// back to the eigenvalue pseudo-inverse with a warning when `M` is singular.
///
/// Returns the solution and the log-determinant of `M` (log-pseudo-determinant
/// in the fallback case).
pub fn solve_spd<S: Scalar>(
    m: &DMatrix<S>,
    b: &DMatrix<S>,
    rel_cutoff: f64,
    context: &str,
) -> (DMatrix<S>, S) {
    let sym = symmetrize(m);
    if let Some(chol) = Cholesky::new(sym.clone()) {
        let logdet = chol
            .l()
            .diagonal()
            .iter()
            .fold(S::zero(), |acc, &d| acc + d.ln())
            * cst::<S>(2.0);
        (chol.solve(b), logdet)
    } else {
        log::warn!("{context}: Cholesky failed, using pseudo-inverse");
        let (pinv, logdet, dropped) = pinv_sym(&sym, rel_cutoff);
        if dropped > 0 {
            log::warn!("{context}: pseudo-inverse dropped {dropped} eigenvalue(s)");
        }
        (&pinv * b, logdet)
    }
}

/// A factor `L` with `L L' = clip(M)` where `clip` zeroes negative
/// eigenvalues. Uses plain Cholesky when `M` is numerically PD.
pub fn chol_psd<S: Scalar>(m: &DMatrix<S>) -> DMatrix<S> {
    let sym = symmetrize(m);
    if let Some(chol) = Cholesky::new(sym.clone()) {
        return chol.unpack();
    }
    // Semi-definite (e.g. a rank-deficient initial-state covariance): build
    // the square root from the clipped eigen decomposition instead.
    let se = sym.symmetric_eigen();
    let n = m.nrows();
    let mut l = se.eigenvectors.clone();
    for k in 0..n {
        let s = se.eigenvalues[k].max(S::zero()).sqrt();
        for i in 0..n {
            l[(i, k)] *= s;
        }
    }
    l
}

/// Floor the eigenvalues of a symmetric matrix at `floor` (used to keep
/// estimated covariance matrices invertible).
pub fn floor_eigenvalues<S: Scalar>(m: &DMatrix<S>, floor: f64) -> DMatrix<S> {
    let sym = symmetrize(m);
    let se = sym.clone().symmetric_eigen();
    let fl = cst::<S>(floor);
    if se.eigenvalues.iter().all(|&l| l >= fl) {
        return sym;
    }
    let n = m.nrows();
    let mut out = DMatrix::zeros(n, n);
    for k in 0..n {
        let l = se.eigenvalues[k].max(fl);
        let v = se.eigenvectors.column(k);
        for i in 0..n {
            let vi = v[i] * l;
            for j in 0..n {
                out[(i, j)] += vi * v[j];
            }
        }
    }
    symmetrize(&out)
}

/// Elementwise exponential of a matrix (used by lognormal moment formulas).
pub fn exp_elem<S: Scalar>(m: &DMatrix<S>) -> DMatrix<S> {
    m.map(|x| x.exp())
}

/// `A^k` by repeated squaring is overkill for our sizes; propagator powers are
/// built incrementally instead. This helper exists for the VAR stationarity
/// check: the spectral radius of a square matrix via its (real Schur-based)
/// eigenvalue moduli.
pub fn spectral_radius<S: Scalar>(m: &DMatrix<S>) -> S {
    if m.nrows() == 0 {
        return S::zero();
    }
    let ev = m.clone().complex_eigenvalues();
    ev.iter().fold(S::zero(), |acc, c| acc.max((c.re * c.re + c.im * c.im).sqrt()))
}

/// Kronecker product helper, `a (x) b`.
pub fn kron<S: Scalar>(a: &DMatrix<S>, b: &DMatrix<S>) -> DMatrix<S> {
    a.kronecker(b)
}

/// Maximum absolute difference between two equally sized matrices.
pub fn max_abs_diff<S: Scalar>(a: &DMatrix<S>, b: &DMatrix<S>) -> S {
    assert_eq!(a.shape(), b.shape(), "max_abs_diff shape mismatch");
    let mut worst = S::zero();
    for (x, y) in a.iter().zip(b.iter()) {
        worst = worst.max((*x - *y).abs());
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    #[test]
    fn psd_check_accepts_semidefinite() {
        // Rank-one plus duplicated block structure: eigenvalues {2, 0}.
        let m = dmatrix![1.0, 1.0; 1.0, 1.0];
        assert!(is_psd(&m));
        assert!(!is_pd(&m, 1e-12));
        let neg = dmatrix![1.0, 2.0; 2.0, 1.0];
        assert!(!is_psd(&neg));
    }

    #[test]
    fn pinv_sym_inverts_full_rank() {
        let m = dmatrix![4.0, 1.0; 1.0, 3.0];
        let (inv, logdet, dropped) = pinv_sym(&m, 1e-12);
        assert_eq!(dropped, 0);
        assert!((logdet - (11.0f64).ln()).abs() < 1e-12);
        let id = &m * inv;
        assert!(max_abs_diff(&id, &DMatrix::identity(2, 2)) < 1e-12);
    }

    #[test]
    fn pinv_sym_handles_rank_deficiency() {
        let m = dmatrix![1.0, 1.0; 1.0, 1.0];
        let (pinv, _, dropped) = pinv_sym(&m, 1e-12);
        assert_eq!(dropped, 1);
        // M pinv M = M (defining property).
        let re = &m * &pinv * &m;
        assert!(max_abs_diff(&re, &m) < 1e-12);
    }

    #[test]
    fn chol_psd_roundtrip_on_singular_matrix() {
        let m = dmatrix![2.0, 2.0; 2.0, 2.0];
        let l = chol_psd(&m);
        let re = &l * l.transpose();
        assert!(max_abs_diff(&re, &m) < 1e-10);
    }

    #[test]
    fn floor_eigenvalues_keeps_pd_matrices() {
        let m = dmatrix![4.0, 1.0; 1.0, 3.0];
        let f = floor_eigenvalues(&m, 1e-12);
        assert!(max_abs_diff(&f, &m) < 1e-14);
        let deficient = dmatrix![1.0, 1.0; 1.0, 1.0];
        let fixed = floor_eigenvalues(&deficient, 1e-6);
        assert!(is_pd(&fixed, 1e-9));
    }

    #[test]
    fn spectral_radius_of_rotation_scaling() {
        let m = dmatrix![0.0, -0.9; 0.9, 0.0];
        assert!((spectral_radius(&m) - 0.9f64).abs() < 1e-12);
    }
}
