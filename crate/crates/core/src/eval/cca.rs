use nalgebra::{DMatrix, DVector};

use crate::engine::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_REG: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct Cca {
    /// Canonical correlations, non-increasing.
    pub correlations: Vec<f64>,
    /// Projection maps `[d1, dims]`, `[d2, dims]` applied to centered data.
    pub wx: DMatrix<f64>,
    pub wy: DMatrix<f64>,
    pub mean_x: DVector<f64>,
    pub mean_y: DVector<f64>,
}

fn matrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.row_len(), t.data())
}

fn cholesky(c: DMatrix<f64>, which: &str) -> Result<DMatrix<f64>> {
    c.cholesky().map(|ch| ch.l()).ok_or_else(|| {
        Error::Numerical(format!(
            "{which} covariance is singular; use a regularization reg > 0"
        ))
    })
}

/// Regularized CCA via whitening: with `Cxx = Lx Lxᵀ`, `Cyy = Ly Lyᵀ`, the
/// singular values of `Lx⁻¹ Cxy Ly⁻ᵀ` are the canonical correlations.
pub fn cca_closed_form(x: &Tensor, y: &Tensor, reg: f64, dims: usize) -> Result<Cca> {
    if x.rank() != 2 || y.rank() != 2 || x.rows() != y.rows() {
        return Err(Error::Dimension(format!(
            "CCA needs [n, d1] and [n, d2] views, got {:?} and {:?}",
            x.shape(),
            y.shape()
        )));
    }
    let (n, d1, d2) = (x.rows(), x.row_len(), y.row_len());
    if n <= d1.max(d2) {
        return Err(Error::Usage(format!("CCA needs n > max(d1, d2); got n = {n}, d = ({d1}, {d2})")));
    }
    if !(reg >= 0.0 && reg.is_finite()) {
        return Err(Error::Config(format!("CCA regularization {reg} must be >= 0")));
    }
    let (mut xm, mut ym) = (matrix(x), matrix(y));
    let mean_x = xm.row_mean().transpose();
    let mean_y = ym.row_mean().transpose();
    for mut r in xm.row_iter_mut() {
        r -= mean_x.transpose();
    }
    for mut r in ym.row_iter_mut() {
        r -= mean_y.transpose();
    }
    let scale = 1.0 / (n as f64 - 1.0);
    let cxx = xm.tr_mul(&xm) * scale + DMatrix::identity(d1, d1) * reg;
    let cyy = ym.tr_mul(&ym) * scale + DMatrix::identity(d2, d2) * reg;
    let cxy = xm.tr_mul(&ym) * scale;
    let lx = cholesky(cxx, "view 1")?;
    let ly = cholesky(cyy, "view 2")?;
    let lx_inv = lx
        .try_inverse()
        .ok_or_else(|| Error::Numerical("view 1 whitening failed; use reg > 0".into()))?;
    let ly_inv = ly
        .try_inverse()
        .ok_or_else(|| Error::Numerical("view 2 whitening failed; use reg > 0".into()))?;
    let m = &lx_inv * cxy * ly_inv.transpose();
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    order.truncate(dims.min(d1.min(d2)));
    let correlations = order.iter().map(|&i| svd.singular_values[i]).collect();
    let u_sel = DMatrix::from_columns(&order.iter().map(|&i| u.column(i)).collect::<Vec<_>>());
    let v_sel = DMatrix::from_columns(&order.iter().map(|&i| vt.row(i).transpose()).collect::<Vec<_>>());
    Ok(Cca {
        correlations,
        wx: lx_inv.transpose() * u_sel,
        wy: ly_inv.transpose() * v_sel,
        mean_x,
        mean_y,
    })
}
