//! Exact dynamic mode decomposition: eigenvalues and modes of the best-fit
//! linear operator between two snapshot matrices, computed through a
//! truncated SVD so the full n×n operator is never formed.

use nalgebra::{Complex, DMatrix, DVector, Normed};

use crate::error::{Error, Result};
use crate::linalg::{rank_tolerance, truncated_svd};

type CMatrix = DMatrix<Complex<f64>>;

/// Output of the decomposition.
#[derive(Debug, Clone)]
pub struct DmdResult {
    /// Eigenvalues sorted by magnitude descending (ties by real part, then
    /// imaginary part descending so conjugate pairs order deterministically).
    pub eigenvalues: Vec<Complex<f64>>,
    /// n×r DMD modes (eigenvectors of the full operator).
    pub modes: CMatrix,
    /// r×r reduced operator.
    pub a_tilde: DMatrix<f64>,
    /// n×r left singular basis of the input snapshots.
    pub u: DMatrix<f64>,
    /// Kept singular values, non-increasing.
    pub sigma: DVector<f64>,
}

/// Run exact DMD on snapshot matrices related by `Y_next ≈ A Y_prev`.
///
/// Steps: truncated SVD `Y_prev ≈ UΣVᵀ`; reduced operator
/// `Ã = Uᵀ Y_next V Σ⁻¹`; eigendecomposition `Ã W = W Λ`; modes
/// `Φ = Y_next V Σ⁻¹ W`.
pub fn exact_dmd(y_prev: &DMatrix<f64>, y_next: &DMatrix<f64>, r: usize) -> Result<DmdResult> {
    if y_prev.shape() != y_next.shape() {
        return Err(Error::DimensionMismatch(format!(
            "snapshot matrices differ: {:?} vs {:?}",
            y_prev.shape(),
            y_next.shape()
        )));
    }
    let f = truncated_svd(y_prev, r)?;
    let tol = rank_tolerance(y_prev.nrows(), y_prev.ncols(), f.sigma[0]);
    for (i, &sv) in f.sigma.iter().enumerate() {
        if sv <= tol {
            return Err(Error::RankDeficient { index: i });
        }
    }
    let sigma_inv = DMatrix::from_diagonal(&f.sigma.map(|v| 1.0 / v));
    // n×r map shared by the reduced operator and the modes
    let propagated = y_next * &f.v * &sigma_inv;
    let a_tilde = f.u.transpose() * &propagated;

    let (eigenvalues, w) = complex_eig(&a_tilde)?;
    let prop_c = to_complex(&propagated);
    let mut modes = prop_c * &w;
    for k in 0..modes.ncols() {
        let phase = dominant_phase(&modes.column(k).into_owned());
        for v in modes.column_mut(k).iter_mut() {
            *v *= phase;
        }
    }

    Ok(DmdResult { eigenvalues, modes, a_tilde, u: f.u, sigma: f.sigma })
}

fn to_complex(m: &DMatrix<f64>) -> CMatrix {
    m.map(|v| Complex::new(v, 0.0))
}

/// Unit phase factor that makes the largest-magnitude entry real positive.
fn dominant_phase(v: &DVector<Complex<f64>>) -> Complex<f64> {
    let mut best = 0usize;
    let mut best_norm = 0.0f64;
    for (i, z) in v.iter().enumerate() {
        if z.norm() > best_norm {
            best_norm = z.norm();
            best = i;
        }
    }
    if best_norm == 0.0 {
        Complex::new(1.0, 0.0)
    } else {
        v[best].conj() / best_norm
    }
}

/// Eigenvalues and eigenvectors of a real square matrix. Eigenvalues come
/// from the real Schur form; eigenvectors are recovered as null-space
/// directions of `A − λI`, with repeated eigenvalues handled as a group.
fn complex_eig(a: &DMatrix<f64>) -> Result<(Vec<Complex<f64>>, CMatrix)> {
    let r = a.nrows();
    let mut eigs: Vec<Complex<f64>> = a.complex_eigenvalues().iter().cloned().collect();
    eigs.sort_by(|p, q| {
        q.norm()
            .partial_cmp(&p.norm())
            .unwrap()
            .then(q.re.partial_cmp(&p.re).unwrap())
            .then(q.im.partial_cmp(&p.im).unwrap())
    });

    let scale = eigs.first().map(|z| z.norm()).unwrap_or(0.0).max(1.0);
    let group_tol = 1e-8 * scale;
    let ac = to_complex(a);
    let mut w = CMatrix::zeros(r, r);
    let mut k = 0usize;
    while k < r {
        // group eigenvalues that coincide within tolerance
        let mut size = 1usize;
        while k + size < r && (eigs[k + size] - eigs[k]).norm() <= group_tol {
            size += 1;
        }
        let shifted = &ac - CMatrix::identity(r, r) * eigs[k];
        let vecs = null_space(&shifted, size)?;
        for j in 0..size {
            w.set_column(k + j, &vecs.column(j).into_owned());
        }
        k += size;
    }
    Ok((eigs, w))
}

/// The `count` right singular vectors of `m` with the smallest singular
/// values, each normalized with a deterministic phase.
fn null_space(m: &CMatrix, count: usize) -> Result<CMatrix> {
    let r = m.nrows();
    let svd = m.clone().svd(false, true);
    let v_t = svd.v_t.expect("svd with v_t");
    let s = &svd.singular_values;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[a].partial_cmp(&s[b]).unwrap().then(a.cmp(&b)));
    let mut out = CMatrix::zeros(r, count);
    for (j, &idx) in order.iter().take(count).enumerate() {
        let mut col: DVector<Complex<f64>> = v_t.row(idx).adjoint();
        let phase = dominant_phase(&col);
        for v in col.iter_mut() {
            *v *= phase;
        }
        out.set_column(j, &col);
    }
    Ok(out)
}
