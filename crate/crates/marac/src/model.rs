//! The MARAC(P, Q) model object: coefficient storage, one-step and latency-h
//! prediction, residuals, log-likelihood, and the penalized objective.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::codec::MatJson;
use crate::error::{MaracError, Result};
use crate::kernels::{GridConfig, KernelContext, TruncationKind};
use crate::linalg::{tvp, unvec, Mat, Tensor3, Vector};

/// T frames of an M x N matrix plus a D-dimensional auxiliary vector per
/// frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixSeries {
    frames: Vec<Mat>,
    aux: Vec<Vector>,
    pub timestamps: Option<Vec<f64>>,
}

impl MatrixSeries {
    pub fn new(frames: Vec<Mat>, aux: Vec<Vector>) -> Result<Self> {
        if frames.is_empty() {
            return Err(MaracError::Contract("series needs at least one frame".into()));
        }
        if frames.len() != aux.len() {
            return Err(MaracError::Shape(format!(
                "{} frames but {} auxiliary vectors",
                frames.len(),
                aux.len()
            )));
        }
        let shape = frames[0].shape();
        let d = aux[0].len();
        for (t, f) in frames.iter().enumerate() {
            if f.shape() != shape {
                return Err(MaracError::Shape(format!(
                    "frame {t} is {:?}, expected {shape:?}",
                    f.shape()
                )));
            }
            if f.iter().any(|v| !v.is_finite()) {
                return Err(MaracError::Contract(format!("frame {t} has non-finite entries")));
            }
        }
        for (t, z) in aux.iter().enumerate() {
            if z.len() != d {
                return Err(MaracError::Shape(format!(
                    "aux vector {t} has length {}, expected {d}",
                    z.len()
                )));
            }
            if z.iter().any(|v| !v.is_finite()) {
                return Err(MaracError::Contract(format!("aux vector {t} has non-finite entries")));
            }
        }
        Ok(Self {
            frames,
            aux,
            timestamps: None,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn nrows(&self) -> usize {
        self.frames[0].nrows()
    }

    pub fn ncols(&self) -> usize {
        self.frames[0].ncols()
    }

    /// Auxiliary dimension D.
    pub fn aux_dim(&self) -> usize {
        self.aux[0].len()
    }

    pub fn frame(&self, t: usize) -> &Mat {
        &self.frames[t]
    }

    pub fn aux(&self, t: usize) -> &Vector {
        &self.aux[t]
    }

    pub fn frames(&self) -> &[Mat] {
        &self.frames
    }

    pub fn aux_vectors(&self) -> &[Vector] {
        &self.aux
    }

    /// Sub-series over `range` (frames and aux vectors, timestamps dropped).
    pub fn window(&self, range: std::ops::Range<usize>) -> Result<Self> {
        if range.end > self.len() || range.start >= range.end {
            return Err(MaracError::Contract(format!(
                "window {range:?} out of bounds for T = {}",
                self.len()
            )));
        }
        MatrixSeries::new(
            self.frames[range.clone()].to_vec(),
            self.aux[range].to_vec(),
        )
    }
}

/// Auxiliary coefficients, exclusively one of the two parameterizations:
/// representer coefficients `Gamma_q` (MN x D per lag) against the kernel
/// Gram matrix, or truncated coefficients `Theta_q` (R x D per lag) against a
/// Mercer eigenbasis. The two penalties differ and must not be combined.
#[derive(Debug, Clone, PartialEq)]
pub enum AuxCoeffs {
    Exact { gamma: Vec<Mat> },
    Truncated { theta: Vec<Mat> },
}

impl AuxCoeffs {
    pub fn lags(&self) -> usize {
        match self {
            AuxCoeffs::Exact { gamma } => gamma.len(),
            AuxCoeffs::Truncated { theta } => theta.len(),
        }
    }

    pub fn is_truncated(&self) -> bool {
        matches!(self, AuxCoeffs::Truncated { .. })
    }
}

/// Fitted MARAC(P, Q) model.
#[derive(Debug, Clone, PartialEq)]
pub struct MaracModel {
    pub p: usize,
    pub q: usize,
    pub a: Vec<Mat>,
    pub b: Vec<Mat>,
    pub aux: AuxCoeffs,
    pub sigma_r: Mat,
    pub sigma_c: Mat,
    pub lambda: f64,
    /// Latency offset: the model pairs the target `X_t` with predictor frames
    /// `t - gap - 1, ..., t - gap - P`, so `gap = h - 1` for a latency-h
    /// forecaster and 0 for one-step prediction.
    pub gap: usize,
    pub diag_sigma: bool,
    pub kernel_ctx: Option<Arc<KernelContext>>,
    g_tensors: Vec<Tensor3>,
}

impl MaracModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        a: Vec<Mat>,
        b: Vec<Mat>,
        aux: AuxCoeffs,
        sigma_r: Mat,
        sigma_c: Mat,
        lambda: f64,
        gap: usize,
        diag_sigma: bool,
        kernel_ctx: Option<Arc<KernelContext>>,
    ) -> Result<Self> {
        let p = a.len();
        let q = aux.lags();
        if b.len() != p {
            return Err(MaracError::Shape(format!(
                "{p} row coefficients but {} column coefficients",
                b.len()
            )));
        }
        let m = sigma_r.nrows();
        let n = sigma_c.nrows();
        if sigma_r.shape() != (m, m) || sigma_c.shape() != (n, n) {
            return Err(MaracError::Shape("noise covariances must be square".into()));
        }
        for ap in &a {
            if ap.shape() != (m, m) {
                return Err(MaracError::Shape("A_p must be M x M".into()));
            }
        }
        for bp in &b {
            if bp.shape() != (n, n) {
                return Err(MaracError::Shape("B_p must be N x N".into()));
            }
        }
        if q > 0 && kernel_ctx.is_none() {
            return Err(MaracError::Contract(
                "auxiliary lags require a kernel context".into(),
            ));
        }
        let mut model = Self {
            p,
            q,
            a,
            b,
            aux,
            sigma_r,
            sigma_c,
            lambda,
            gap,
            diag_sigma,
            kernel_ctx,
            g_tensors: Vec::new(),
        };
        model.rebuild_tensors()?;
        Ok(model)
    }

    /// Recompute the cached coefficient tensors from the raw coefficients.
    pub fn rebuild_tensors(&mut self) -> Result<()> {
        let m = self.sigma_r.nrows();
        let n = self.sigma_c.nrows();
        let mut tensors = Vec::with_capacity(self.q);
        match &self.aux {
            AuxCoeffs::Exact { gamma } => {
                for g in gamma {
                    let ctx = self.kernel_ctx.as_ref().unwrap();
                    if g.nrows() != ctx.s() {
                        return Err(MaracError::Shape(format!(
                            "Gamma_q has {} rows, expected S = {}",
                            g.nrows(),
                            ctx.s()
                        )));
                    }
                    let kg = &ctx.gram * g;
                    tensors.push(columns_to_tensor(&kg, m, n)?);
                }
            }
            AuxCoeffs::Truncated { theta } => {
                for th in theta {
                    let ctx = self.kernel_ctx.as_ref().unwrap();
                    let basis = ctx.truncation.as_ref().ok_or_else(|| {
                        MaracError::Contract("truncated coefficients need a truncated basis".into())
                    })?;
                    if th.nrows() != basis.rank() {
                        return Err(MaracError::Shape(format!(
                            "Theta_q has {} rows, expected R = {}",
                            th.nrows(),
                            basis.rank()
                        )));
                    }
                    let kg = &basis.k_r * th;
                    tensors.push(columns_to_tensor(&kg, m, n)?);
                }
            }
        }
        self.g_tensors = tensors;
        Ok(())
    }

    pub fn nrows(&self) -> usize {
        self.sigma_r.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.sigma_c.nrows()
    }

    /// Auxiliary dimension D (0 when Q = 0).
    pub fn aux_dim(&self) -> usize {
        self.g_tensors.first().map(|g| g.dims().2).unwrap_or(0)
    }

    /// Forecast latency h = gap + 1.
    pub fn latency(&self) -> usize {
        self.gap + 1
    }

    /// Coefficient tensor for auxiliary lag `lag` (1-based): slice `d` equals
    /// `unvec(K Gamma[:, d])` in exact mode and `unvec(K_R Theta[:, d])` in
    /// truncated mode.
    pub fn coeff_tensor(&self, lag: usize) -> Result<&Tensor3> {
        if lag == 0 || lag > self.q {
            return Err(MaracError::Contract(format!(
                "auxiliary lag {lag} out of range 1..={}",
                self.q
            )));
        }
        Ok(&self.g_tensors[lag - 1])
    }

    /// First frame index with full history: `gap + max(P, Q)`.
    pub fn min_target(&self) -> usize {
        self.gap + self.p.max(self.q)
    }

    /// One-step prediction from explicit history. `recent_x[p-1]` is the
    /// lag-p frame and `recent_z[q-1]` the lag-q auxiliary vector, both
    /// most-recent-first.
    pub fn predict_one(&self, recent_x: &[&Mat], recent_z: &[&Vector]) -> Result<Mat> {
        if recent_x.len() < self.p || recent_z.len() < self.q {
            return Err(MaracError::Contract(format!(
                "history too short: got {} frames / {} vectors, need {} / {}",
                recent_x.len(),
                recent_z.len(),
                self.p,
                self.q
            )));
        }
        let mut pred = Mat::zeros(self.nrows(), self.ncols());
        for p in 0..self.p {
            pred += &self.a[p] * recent_x[p] * self.b[p].transpose();
        }
        for q in 0..self.q {
            pred += tvp(&self.g_tensors[q], recent_z[q])?;
        }
        Ok(pred)
    }

    /// Forecast of `X_t` within a series, honoring the model's latency gap:
    /// predictors are frames `t - gap - p` and vectors `t - gap - q`.
    pub fn forecast(&self, series: &MatrixSeries, t: usize) -> Result<Mat> {
        if t < self.min_target() || t >= series.len() {
            return Err(MaracError::Contract(format!(
                "target {t} outside predictable range {}..{}",
                self.min_target(),
                series.len()
            )));
        }
        let recent_x: Vec<&Mat> = (1..=self.p)
            .map(|p| series.frame(t - self.gap - p))
            .collect();
        let recent_z: Vec<&Vector> = (1..=self.q)
            .map(|q| series.aux(t - self.gap - q))
            .collect();
        self.predict_one(&recent_x, &recent_z)
    }

    /// `X_t` minus its forecast.
    pub fn residual(&self, series: &MatrixSeries, t: usize) -> Result<Mat> {
        Ok(series.frame(t) - self.forecast(series, t)?)
    }

    /// Average negative conditional log-likelihood over the `T' = T -
    /// gap - max(P, Q)` frames with full history:
    /// `1/2 log|Sigma_c (x) Sigma_r| + (1/2T') sum_t r_t' Sigma^-1 r_t`,
    /// evaluated with the trace identity so no S x S matrix is formed.
    pub fn neg_log_likelihood(&self, series: &MatrixSeries) -> Result<f64> {
        self.nll_from(series, self.min_target())
    }

    /// Same as [`Self::neg_log_likelihood`] but conditioning on frames
    /// `t >= start` (used by lag selection to score all candidates over a
    /// common horizon).
    pub fn nll_from(&self, series: &MatrixSeries, start: usize) -> Result<f64> {
        if start < self.min_target() {
            return Err(MaracError::Contract(format!(
                "conditioning start {start} precedes first predictable frame {}",
                self.min_target()
            )));
        }
        if series.len() <= start {
            return Err(MaracError::InsufficientData(format!(
                "{} frames with conditioning start {start}",
                series.len()
            )));
        }
        let t_eff = series.len() - start;
        let (m, n) = (self.nrows(), self.ncols());
        let chol_r = crate::linalg::spd_factor(&self.sigma_r, 0.0)?;
        let chol_c = crate::linalg::spd_factor(&self.sigma_c, 0.0)?;
        let logdet_r = 2.0 * chol_r.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let logdet_c = 2.0 * chol_c.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let inv_r = chol_r.inverse();
        let inv_c = chol_c.inverse();
        let mut quad = 0.0;
        for t in start..series.len() {
            let r = self.residual(series, t)?;
            quad += (&inv_r * &r * &inv_c * r.transpose()).trace();
        }
        Ok(0.5 * (n as f64 * logdet_r + m as f64 * logdet_c) + 0.5 * quad / t_eff as f64)
    }

    /// RKHS penalty term `sum_q tr(Gamma_q' K Gamma_q)` (exact mode) or
    /// `sum_q tr(Theta_q' Lambda_R^-1 Theta_q)` (truncated mode), without the
    /// `lambda/2` factor.
    pub fn penalty_quadratic(&self) -> f64 {
        match &self.aux {
            AuxCoeffs::Exact { gamma } => gamma
                .iter()
                .map(|g| {
                    let ctx = self.kernel_ctx.as_ref().unwrap();
                    (g.transpose() * &ctx.gram * g).trace()
                })
                .sum(),
            AuxCoeffs::Truncated { theta } => theta
                .iter()
                .map(|th| {
                    let basis = &self.kernel_ctx.as_ref().unwrap().truncation;
                    let lam = &basis.as_ref().unwrap().lambda_r;
                    (0..th.ncols())
                        .map(|d| {
                            (0..th.nrows()).map(|r| th[(r, d)] * th[(r, d)] / lam[r]).sum::<f64>()
                        })
                        .sum::<f64>()
                })
                .sum(),
        }
    }

    /// Penalized objective of the kernel-ridge form: average negative
    /// log-likelihood plus `lambda/2` times the RKHS quadratic.
    pub fn penalized_objective(&self, series: &MatrixSeries) -> Result<f64> {
        Ok(self.neg_log_likelihood(series)? + 0.5 * self.lambda * self.penalty_quadratic())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let doc = ModelDocument::from_model(self);
        let s = serde_json::to_string_pretty(&doc)?;
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        let doc: ModelDocument = serde_json::from_str(&s)?;
        doc.into_model()
    }

    /// JSON value form of the on-disk document (used by the baseline model
    /// envelope).
    pub fn to_json_value(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(ModelDocument::from_model(self))?)
    }

    pub fn from_json_value(value: serde_json::Value) -> Result<Self> {
        let doc: ModelDocument = serde_json::from_value(value)?;
        doc.into_model()
    }
}

/// Reshape the S x D matrix of stacked columns into an M x N x D tensor.
fn columns_to_tensor(cols: &Mat, m: usize, n: usize) -> Result<Tensor3> {
    let d = cols.ncols();
    let mut slices = Vec::with_capacity(d);
    for k in 0..d {
        let col = Vector::from_column_slice(cols.column(k).as_slice());
        slices.push(unvec(&col, m, n)?);
    }
    Tensor3::new(slices)
}

/// Common forecaster surface shared by MARAC and the baseline models so the
/// benchmark harness treats them uniformly.
pub trait Forecaster {
    /// Forecast of `X_t` from the series history (honoring the model's
    /// latency gap).
    fn forecast(&self, series: &MatrixSeries, t: usize) -> Result<Mat>;
    /// First frame index this model can forecast.
    fn min_target(&self) -> usize;
}

impl Forecaster for MaracModel {
    fn forecast(&self, series: &MatrixSeries, t: usize) -> Result<Mat> {
        MaracModel::forecast(self, series, t)
    }

    fn min_target(&self) -> usize {
        MaracModel::min_target(self)
    }
}

/// On-disk JSON document for a fitted model (`model.json`). Coefficients are
/// base64 f64le payloads so the round trip is bit-faithful; the kernel
/// context is rebuilt deterministically from the grid config.
#[derive(Debug, Serialize, Deserialize)]
struct ModelDocument {
    kind: String,
    p: usize,
    q: usize,
    m: usize,
    n: usize,
    d: usize,
    lambda: f64,
    gap: usize,
    diag_sigma: bool,
    grid: Option<GridConfig>,
    truncation: Option<TruncationKind>,
    aux_mode: String,
    a: Vec<MatJson>,
    b: Vec<MatJson>,
    aux: Vec<MatJson>,
    sigma_r: MatJson,
    sigma_c: MatJson,
}

impl ModelDocument {
    fn from_model(model: &MaracModel) -> Self {
        let (aux_mode, aux): (&str, Vec<MatJson>) = match &model.aux {
            AuxCoeffs::Exact { gamma } => ("exact", gamma.iter().map(MatJson::from).collect()),
            AuxCoeffs::Truncated { theta } => {
                ("truncated", theta.iter().map(MatJson::from).collect())
            }
        };
        let grid = model.kernel_ctx.as_ref().map(|ctx| GridConfig {
            kind: ctx.grid.kind,
            m: ctx.grid.m,
            n: ctx.grid.n,
            kernel: ctx.kernel.clone(),
        });
        let truncation = model
            .kernel_ctx
            .as_ref()
            .and_then(|ctx| ctx.truncation.as_ref().map(|b| b.kind));
        ModelDocument {
            kind: "marac".into(),
            p: model.p,
            q: model.q,
            m: model.nrows(),
            n: model.ncols(),
            d: model.aux_dim(),
            lambda: model.lambda,
            gap: model.gap,
            diag_sigma: model.diag_sigma,
            grid,
            truncation,
            aux_mode: aux_mode.into(),
            a: model.a.iter().map(MatJson::from).collect(),
            b: model.b.iter().map(MatJson::from).collect(),
            aux,
            sigma_r: MatJson::from(&model.sigma_r),
            sigma_c: MatJson::from(&model.sigma_c),
        }
    }

    fn into_model(self) -> Result<MaracModel> {
        if self.kind != "marac" {
            return Err(MaracError::Format(format!(
                "model document kind '{}' is not 'marac'",
                self.kind
            )));
        }
        let ctx = match self.grid {
            Some(cfg) => {
                let ctx = cfg.build_context()?;
                let ctx = match self.truncation {
                    Some(kind) => ctx.with_truncation_kind(kind)?,
                    None => ctx,
                };
                Some(Arc::new(ctx))
            }
            None => None,
        };
        let coeffs: Result<Vec<Mat>> = self.aux.iter().map(MatJson::to_mat).collect();
        let aux = match self.aux_mode.as_str() {
            "exact" => AuxCoeffs::Exact { gamma: coeffs? },
            "truncated" => AuxCoeffs::Truncated { theta: coeffs? },
            other => {
                return Err(MaracError::Format(format!("unknown aux mode '{other}'")));
            }
        };
        let a: Result<Vec<Mat>> = self.a.iter().map(MatJson::to_mat).collect();
        let b: Result<Vec<Mat>> = self.b.iter().map(MatJson::to_mat).collect();
        MaracModel::new(
            a?,
            b?,
            aux,
            self.sigma_r.to_mat()?,
            self.sigma_c.to_mat()?,
            self.lambda,
            self.gap,
            self.diag_sigma,
            ctx,
        )
    }
}
