//! Daily online update of a fitted model: expand the projection bases with
//! the new day's unexplained directions, fold the day into the core matrices
//! under the forgetting ratio, then compress back to the target ranks. The
//! update never touches historical data, so memory stays constant in the
//! number of elapsed days.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::estimator::HwDmdModel;
use crate::linalg::{rank_tolerance, spectral_norm, sym_eig_desc, truncated_svd};
use crate::regression::DailyBatch;

/// Knobs for [`daily_update`].
#[derive(Debug, Clone, Copy)]
pub struct UpdateOptions {
    /// Residual directions with singular value below
    /// `tau_factor · σ_max(new batch)` are discarded during expansion; the
    /// machine-precision floor applies even at zero, so numerically null
    /// directions never creep in.
    pub tau_factor: f64,
    /// Compression targets; `None` keeps the model's hyperparameter ranks.
    pub target_r_x: Option<usize>,
    pub target_r_y: Option<usize>,
}

impl Default for UpdateOptions {
    fn default() -> Self {
        UpdateOptions { tau_factor: 1e-8, target_r_x: None, target_r_y: None }
    }
}

fn check_batch(model: &HwDmdModel, batch: &DailyBatch) -> Result<()> {
    let n = model.n();
    let rows = model.hyper.lags.input_rows(model.s);
    if batch.y_new.nrows() != n || batch.x_new.nrows() != rows {
        return Err(Error::DimensionMismatch(format!(
            "batch rows ({}, {}) do not match model ({n}, {rows})",
            batch.y_new.nrows(),
            batch.x_new.nrows()
        )));
    }
    if batch.y_new.ncols() != batch.x_new.ncols() {
        return Err(Error::DimensionMismatch(
            "target and input batches have different column counts".into(),
        ));
    }
    Ok(())
}

/// Orthonormal basis of the part of `data - U Uᵀ data` that exceeds `tau`,
/// re-orthogonalized against `U` so the appended block stays orthonormal.
/// The machine-precision floor is relative to the data's own spectral norm,
/// so a residual that is pure round-off never contributes directions even
/// when `tau` is zero.
fn residual_basis(u: &DMatrix<f64>, data: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
    let residual = data - u * (u.transpose() * data);
    let svd = truncated_svd_all(&residual);
    let floor = rank_tolerance(data.nrows(), data.ncols(), spectral_norm(data));
    let keep_tol = tau.max(floor);
    let mut kept: Vec<usize> = Vec::new();
    for (i, &sv) in svd.2.iter().enumerate() {
        if sv > keep_tol {
            kept.push(i);
        }
    }
    let mut basis = DMatrix::zeros(residual.nrows(), kept.len());
    for (k, &i) in kept.iter().enumerate() {
        basis.set_column(k, &svd.0.column(i).into_owned());
    }
    // one reorthogonalization pass against the existing basis
    if basis.ncols() > 0 {
        basis = &basis - u * (u.transpose() * &basis);
        for k in 0..basis.ncols() {
            let norm = basis.column(k).norm();
            if norm > 0.0 {
                basis.column_mut(k).scale_mut(1.0 / norm);
            }
        }
    }
    basis
}

/// Full SVD wrapper returning (U, σ_max, singular values descending).
fn truncated_svd_all(m: &DMatrix<f64>) -> (DMatrix<f64>, f64, Vec<f64>) {
    let min_dim = m.nrows().min(m.ncols());
    if min_dim == 0 {
        return (DMatrix::zeros(m.nrows(), 0), 0.0, Vec::new());
    }
    let f = truncated_svd(m, min_dim).expect("rank within bounds");
    let smax = f.sigma[0];
    (f.u, smax, f.sigma.iter().cloned().collect())
}

fn hstack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.view_mut((0, 0), a.shape()).copy_from(a);
    out.view_mut((0, a.ncols()), b.shape()).copy_from(b);
    out
}

/// Step 1: widen `U_X` and `U_Y` with the new day's residual directions.
/// Zero residual leaves the bases untouched.
pub fn expand_bases(model: &mut HwDmdModel, batch: &DailyBatch, tau_factor: f64) -> Result<()> {
    check_batch(model, batch)?;
    let tau_y = tau_factor * spectral_norm(&batch.y_new);
    let tau_x = tau_factor * spectral_norm(&batch.x_new);
    let ey = residual_basis(&model.u_y, &batch.y_new, tau_y);
    let ex = residual_basis(&model.u_x, &batch.x_new, tau_x);
    if ey.ncols() > 0 {
        model.u_y = hstack(&model.u_y, &ey);
    }
    if ex.ncols() > 0 {
        model.u_x = hstack(&model.u_x, &ex);
    }
    Ok(())
}

/// Step 2: zero-pad the cores to the expanded widths, then fold in the new
/// day under the forgetting ratio:
/// `P ← ρP + Ỹ X̃ᵀ`, `Q_X ← ρQ_X + X̃X̃ᵀ`, `Q_Y ← ρQ_Y + ỸỸᵀ`.
pub fn update_cores(model: &mut HwDmdModel, batch: &DailyBatch) -> Result<()> {
    check_batch(model, batch)?;
    let rx = model.rank_x();
    let ry = model.rank_y();
    if model.q_x.nrows() > rx || model.q_y.nrows() > ry {
        return Err(Error::DimensionMismatch(
            "cores wider than bases; expand must precede update".into(),
        ));
    }
    let rho = model.hyper.rho;
    model.p = model.p.clone().resize(ry, rx, 0.0);
    model.q_x = model.q_x.clone().resize(rx, rx, 0.0);
    model.q_y = model.q_y.clone().resize(ry, ry, 0.0);

    let x_tilde = model.u_x.transpose() * &batch.x_new;
    let y_tilde = model.u_y.transpose() * &batch.y_new;
    model.p = &model.p * rho + &y_tilde * x_tilde.transpose();
    model.q_x = &model.q_x * rho + &x_tilde * x_tilde.transpose();
    model.q_y = &model.q_y * rho + &y_tilde * y_tilde.transpose();
    Ok(())
}

/// Step 3: rotate to the eigenbases of the Gram cores and keep the leading
/// `target` directions. The kept directions are the leading left singular
/// vectors of the recovered weighted data.
pub fn compress(model: &mut HwDmdModel, target_r_x: usize, target_r_y: usize) -> Result<()> {
    if target_r_x == 0 || target_r_y == 0 {
        return Err(Error::InvalidParameter("compression targets must be >= 1".into()));
    }
    let keep_x = target_r_x.min(model.rank_x());
    let keep_y = target_r_y.min(model.rank_y());

    let (_, vx_full) = sym_eig_desc(&model.q_x);
    let (_, vy_full) = sym_eig_desc(&model.q_y);
    let vx = vx_full.columns(0, keep_x).into_owned();
    let vy = vy_full.columns(0, keep_y).into_owned();

    model.u_x = &model.u_x * &vx;
    model.u_y = &model.u_y * &vy;
    model.q_x = vx.transpose() * &model.q_x * &vx;
    model.q_y = vy.transpose() * &model.q_y * &vy;
    model.p = vy.transpose() * &model.p * &vx;
    Ok(())
}

/// One daily update: expand, fold in, compress. Constant memory in the
/// number of elapsed days.
pub fn daily_update(model: &mut HwDmdModel, batch: &DailyBatch, opts: &UpdateOptions) -> Result<()> {
    expand_bases(model, batch, opts.tau_factor)?;
    update_cores(model, batch)?;
    let rx = opts.target_r_x.unwrap_or(model.hyper.r_x);
    let ry = opts.target_r_y.unwrap_or(model.hyper.r_y);
    compress(model, rx, ry)
}
