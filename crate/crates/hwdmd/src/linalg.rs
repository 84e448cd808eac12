//! Dense linear-algebra helpers: truncated SVD, symmetric eigendecomposition,
//! pseudo-inverses, and orthonormal residual bases.
//!
//! All factorizations apply a deterministic sign convention (the
//! largest-magnitude entry of each basis vector is made positive) so repeated
//! runs produce bit-identical results.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Machine epsilon scale used for rank decisions.
pub const EPS: f64 = f64::EPSILON;

/// Relative tolerance for treating singular/eigen values as zero:
/// `max(dim) * eps * largest_value`.
pub fn rank_tolerance(rows: usize, cols: usize, largest: f64) -> f64 {
    rows.max(cols) as f64 * EPS * largest
}

/// Result of a rank-`r` truncated SVD `M ≈ U Σ Vᵀ`.
pub struct TruncatedSvd {
    /// `rows × r`, orthonormal columns.
    pub u: DMatrix<f64>,
    /// The `r` leading singular values, non-increasing.
    pub sigma: DVector<f64>,
    /// `cols × r`, orthonormal columns.
    pub v: DMatrix<f64>,
}

/// Rank-`r` truncated SVD with descending singular values and the sign
/// convention applied to the columns of `U` (the matching `V` column is
/// flipped together with it).
pub fn truncated_svd(m: &DMatrix<f64>, rank: usize) -> Result<TruncatedSvd> {
    let (rows, cols) = m.shape();
    let min_dim = rows.min(cols);
    if rank == 0 || rank > min_dim {
        return Err(Error::InvalidParameter(format!(
            "truncation rank {rank} outside 1..={min_dim} for a {rows}x{cols} matrix"
        )));
    }
    let svd = m.clone().svd(true, true);
    let u_full = svd.u.expect("svd with u");
    let v_t_full = svd.v_t.expect("svd with v_t");
    let s = &svd.singular_values;

    // Order indices by singular value descending, ties by index.
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap().then(a.cmp(&b)));

    let mut u = DMatrix::zeros(rows, rank);
    let mut v = DMatrix::zeros(cols, rank);
    let mut sigma = DVector::zeros(rank);
    for (k, &idx) in order.iter().take(rank).enumerate() {
        let mut ucol: DVector<f64> = u_full.column(idx).into();
        let mut vcol: DVector<f64> = v_t_full.row(idx).transpose();
        if dominant_entry_sign(&ucol) < 0.0 {
            ucol.neg_mut();
            vcol.neg_mut();
        }
        u.set_column(k, &ucol);
        v.set_column(k, &vcol);
        sigma[k] = s[idx];
    }
    Ok(TruncatedSvd { u, sigma, v })
}

/// Sign of the largest-magnitude entry of a vector (earliest index wins ties).
fn dominant_entry_sign(v: &DVector<f64>) -> f64 {
    let mut best = 0usize;
    let mut best_abs = 0.0f64;
    for (i, &x) in v.iter().enumerate() {
        if x.abs() > best_abs {
            best_abs = x.abs();
            best = i;
        }
    }
    if v[best] < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Symmetric eigendecomposition with eigenvalues sorted descending and the
/// sign convention applied to each eigenvector. The input is symmetrized
/// first so that accumulated round-off cannot leak in.
pub fn sym_eig_desc(q: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = q.nrows();
    let sym = (q + q.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut vals = DVector::zeros(n);
    let mut vecs = DMatrix::zeros(n, n);
    for (k, &idx) in order.iter().enumerate() {
        let mut col: DVector<f64> = eig.eigenvectors.column(idx).into();
        if dominant_entry_sign(&col) < 0.0 {
            col.neg_mut();
        }
        vals[k] = eig.eigenvalues[idx];
        vecs.set_column(k, &col);
    }
    (vals, vecs)
}

/// Pseudo-inverse of a symmetric positive semidefinite matrix via its
/// eigendecomposition; eigenvalues below the rank tolerance are dropped.
pub fn pinv_psd(q: &DMatrix<f64>) -> DMatrix<f64> {
    pinv_psd_with_rank(q).0
}

/// Like [`pinv_psd`] but also reports the numerical rank that survived the
/// cutoff.
pub fn pinv_psd_with_rank(q: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let n = q.nrows();
    let (vals, vecs) = sym_eig_desc(q);
    let largest = vals.iter().cloned().fold(0.0f64, f64::max);
    let tol = rank_tolerance(n, n, largest);
    let mut out = DMatrix::zeros(n, n);
    let mut rank = 0usize;
    for k in 0..n {
        if vals[k] > tol {
            let v = vecs.column(k);
            out += (v * v.transpose()) / vals[k];
            rank += 1;
        }
    }
    (out, rank)
}

/// General Moore-Penrose pseudo-inverse via SVD with the standard
/// `max(dim)·eps·σ_max` cutoff.
pub fn pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (rows, cols) = m.shape();
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("svd with u");
    let v_t = svd.v_t.expect("svd with v_t");
    let s = &svd.singular_values;
    let largest = s.iter().cloned().fold(0.0f64, f64::max);
    let tol = rank_tolerance(rows, cols, largest);
    let mut out = DMatrix::zeros(cols, rows);
    for k in 0..s.len() {
        if s[k] > tol {
            let vcol = v_t.row(k).transpose();
            let ucol: DVector<f64> = u.column(k).into();
            out += (vcol * ucol.transpose()) / s[k];
        }
    }
    out
}

/// Orthonormal basis for the columns of `m` whose singular value exceeds
/// `tol`. Returns a matrix with zero columns when nothing survives.
pub fn orth(m: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let (rows, cols) = m.shape();
    if cols == 0 {
        return DMatrix::zeros(rows, 0);
    }
    let svd = m.clone().svd(true, false);
    let u = svd.u.expect("svd with u");
    let s = &svd.singular_values;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap().then(a.cmp(&b)));
    let kept: Vec<usize> = order.into_iter().filter(|&i| s[i] > tol).collect();
    let mut out = DMatrix::zeros(rows, kept.len());
    for (k, &idx) in kept.iter().enumerate() {
        let mut col: DVector<f64> = u.column(idx).into();
        if dominant_entry_sign(&col) < 0.0 {
            col.neg_mut();
        }
        out.set_column(k, &col);
    }
    out
}

/// Largest singular value of a matrix.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.ncols() == 0 || m.nrows() == 0 {
        return 0.0;
    }
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .cloned()
        .fold(0.0f64, f64::max)
}

/// Max-norm deviation of `UᵀU` from the identity; used by orthonormality
/// checks throughout the crate.
pub fn orthonormality_defect(u: &DMatrix<f64>) -> f64 {
    let gram = u.transpose() * u;
    let k = gram.nrows();
    let mut worst = 0.0f64;
    for i in 0..k {
        for j in 0..k {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((gram[(i, j)] - target).abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        // Small deterministic LCG; good enough for factorization smoke tests.
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        DMatrix::from_fn(rows, cols, |_, _| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn truncated_svd_reconstructs_low_rank() {
        let a = rand_matrix(8, 3, 1);
        let b = rand_matrix(3, 10, 2);
        let m = a * b; // rank 3
        let f = truncated_svd(&m, 3).unwrap();
        let recon = &f.u * DMatrix::from_diagonal(&f.sigma) * f.v.transpose();
        assert!((recon - &m).norm() < 1e-10);
        assert!(orthonormality_defect(&f.u) < 1e-12);
        assert!(f.sigma[0] >= f.sigma[1] && f.sigma[1] >= f.sigma[2]);
    }

    #[test]
    fn truncated_svd_rejects_bad_rank() {
        let m = rand_matrix(4, 5, 3);
        assert!(truncated_svd(&m, 0).is_err());
        assert!(truncated_svd(&m, 5).is_err());
    }

    #[test]
    fn svd_sign_convention_is_deterministic() {
        let m = rand_matrix(6, 6, 4);
        let f1 = truncated_svd(&m, 4).unwrap();
        let f2 = truncated_svd(&(m.clone() * 1.0), 4).unwrap();
        assert_eq!(f1.u.as_slice(), f2.u.as_slice());
        for k in 0..4 {
            let col: DVector<f64> = f1.u.column(k).into();
            assert!(dominant_entry_sign(&col) > 0.0);
        }
    }

    #[test]
    fn pinv_psd_matches_general_pinv() {
        let a = rand_matrix(5, 3, 7);
        let q = &a * a.transpose(); // PSD, rank 3
        let p1 = pinv_psd(&q);
        let p2 = pinv(&q);
        assert!((p1 - p2).norm() < 1e-8);
    }

    #[test]
    fn pinv_satisfies_moore_penrose_identity() {
        let m = rand_matrix(6, 4, 9);
        let p = pinv(&m);
        assert!((&m * &p * &m - &m).norm() < 1e-9);
        assert!((&p * &m * &p - &p).norm() < 1e-9);
    }

    #[test]
    fn orth_drops_null_directions() {
        let a = rand_matrix(8, 2, 11);
        let mut m = DMatrix::zeros(8, 3);
        m.set_column(0, &DVector::from(a.column(0)));
        m.set_column(1, &DVector::from(a.column(1)));
        let mixed = a.column(0) * 0.5 + a.column(1) * 0.25;
        m.set_column(2, &mixed);
        let basis = orth(&m, 1e-10);
        assert_eq!(basis.ncols(), 2);
        assert!(orthonormality_defect(&basis) < 1e-12);
    }

    #[test]
    fn sym_eig_sorted_descending() {
        let a = rand_matrix(6, 6, 13);
        let q = &a * a.transpose();
        let (vals, vecs) = sym_eig_desc(&q);
        for k in 1..6 {
            assert!(vals[k - 1] >= vals[k]);
        }
        assert!((&vecs * DMatrix::from_diagonal(&vals) * vecs.transpose() - &q).norm() < 1e-9);
    }
}
