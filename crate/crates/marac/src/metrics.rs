//! Error metrics: the parameter RMSE convention (Frobenius error divided by
//! the square root of the element count) and forecast RMSE over a frame
//! range.

use crate::error::Result;
use crate::linalg::{Mat, Tensor3};
use crate::model::{Forecaster, MatrixSeries};

/// `||est - truth||_F / sqrt(element count)`.
pub fn param_rmse(est: &Mat, truth: &Mat) -> f64 {
    (est - truth).norm() / (est.len() as f64).sqrt()
}

/// Parameter RMSE for an order-3 tensor.
pub fn tensor_rmse(est: &Tensor3, truth: &Tensor3) -> f64 {
    let (m, n, d) = est.dims();
    let mut sq = 0.0;
    for k in 0..d {
        sq += (est.slice(k) - truth.slice(k)).norm_squared();
    }
    (sq / (m * n * d) as f64).sqrt()
}

/// Root mean squared one-frame-ahead forecast error over `range`, averaged
/// over frames and matrix entries. With unit noise variance the optimum is 1.
pub fn forecast_rmse<F: Forecaster + ?Sized>(
    forecaster: &F,
    series: &MatrixSeries,
    range: std::ops::Range<usize>,
) -> Result<f64> {
    let mut sq = 0.0;
    let mut count = 0usize;
    for t in range {
        let pred = forecaster.forecast(series, t)?;
        sq += (series.frame(t) - pred).norm_squared();
        count += series.nrows() * series.ncols();
    }
    Ok((sq / count as f64).sqrt())
}
