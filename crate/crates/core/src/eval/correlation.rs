use crate::data::MultiViewDataset;
use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::model::Model;

pub const ENCODE_CHUNK: usize = 500;

/// Eval-mode masked projections `h(X)` (x only) and `h(Y)` (y only).
pub fn masked_projections(model: &Model, data: &MultiViewDataset) -> Result<(Tensor, Tensor)> {
    let n = data.len();
    let d = model.spec.joint_dim;
    let mut hx = Vec::with_capacity(n * d);
    let mut hy = Vec::with_capacity(n * d);
    let mut start = 0;
    while start < n {
        let idx: Vec<usize> = (start..(start + ENCODE_CHUNK).min(n)).collect();
        let b = data.select(&idx);
        hx.extend(model.encode(Some(&b.x), None)?.into_data());
        hy.extend(model.encode(None, Some(&b.y))?.into_data());
        start += ENCODE_CHUNK;
    }
    Ok((Tensor::new(&[n, d], hx)?, Tensor::new(&[n, d], hy)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationReport {
    pub sum: f64,
    pub per_dimension: Vec<f64>,
    /// Dimensions with zero variance in either view; they contribute 0.
    pub degenerate: Vec<usize>,
}

/// Column-wise Pearson correlation of two `[n, d]` matrices.
pub fn column_correlations(a: &Tensor, b: &Tensor) -> Result<CorrelationReport> {
    if a.shape() != b.shape() || a.rank() != 2 {
        return Err(Error::Dimension(format!(
            "correlation needs two equal [n, d] matrices, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (n, d) = (a.rows(), a.row_len());
    if n < 2 {
        return Err(Error::Config("correlation needs at least 2 samples".into()));
    }
    let mean = |t: &Tensor| {
        let mut m = vec![0.0; d];
        for row in t.data().chunks(d) {
            m.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        m.iter_mut().for_each(|m| *m /= n as f64);
        m
    };
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    for (ra, rb) in a.data().chunks(d).zip(b.data().chunks(d)) {
        for j in 0..d {
            let (u, v) = (ra[j] - ma[j], rb[j] - mb[j]);
            sab[j] += u * v;
            saa[j] += u * u;
            sbb[j] += v * v;
        }
    }
    let mut per_dimension = Vec::with_capacity(d);
    let mut degenerate = Vec::new();
    for j in 0..d {
        let denom = (saa[j] * sbb[j]).sqrt();
        if denom == 0.0 || !denom.is_finite() {
            degenerate.push(j);
            per_dimension.push(0.0);
        } else {
            per_dimension.push((sab[j] / denom).clamp(-1.0, 1.0));
        }
    }
    Ok(CorrelationReport {
        sum: per_dimension.iter().sum(),
        per_dimension,
        degenerate,
    })
}

/// Sum over joint dimensions of the Pearson correlation between the masked
/// single-view projections of `data`.
pub fn sum_correlation_metric(model: &Model, data: &MultiViewDataset) -> Result<CorrelationReport> {
    if data.len() < 2 {
        return Err(Error::Config("sum correlation needs at least 2 samples".into()));
    }
    let (hx, hy) = masked_projections(model, data)?;
    column_correlations(&hx, &hy)
}
