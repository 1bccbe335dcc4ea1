//! Competing forecasters for head-to-head evaluation: MAR (no auxiliary
//! term), two-step MAR+LM, pixel-wise autoregression, VARX on the vectorized
//! series, and the persistence forecast. All of them expose the common
//! [`Forecaster`] surface so the benchmark harness treats them uniformly.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::codec::MatJson;
use crate::error::{MaracError, Result};
use crate::estimator::{fit, FitOptions, FitReport, SigmaMode};
use crate::kernels::KernelContext;
use crate::linalg::{spd_factor, vec_mat, Mat, Tensor3, Vector};
use crate::model::{Forecaster, MaracModel, MatrixSeries};

/// Fitted baseline, tagged by kind.
#[derive(Debug, Clone)]
pub enum BaselineModel {
    Mar(MaracModel),
    MarLm { mar: MaracModel, lm: MaracModel },
    PixelAr(PixelArModel),
    Varx(VarxModel),
    Persistence(Persistence),
}

impl BaselineModel {
    pub fn kind(&self) -> &'static str {
        match self {
            BaselineModel::Mar(_) => "mar",
            BaselineModel::MarLm { .. } => "mar_lm",
            BaselineModel::PixelAr(_) => "pixel_ar",
            BaselineModel::Varx(_) => "varx",
            BaselineModel::Persistence(_) => "persistence",
        }
    }
}

impl Forecaster for BaselineModel {
    fn forecast(&self, series: &MatrixSeries, t: usize) -> Result<Mat> {
        match self {
            BaselineModel::Mar(m) => m.forecast(series, t),
            BaselineModel::MarLm { mar, lm } => {
                Ok(mar.forecast(series, t)? + lm.forecast(series, t)?)
            }
            BaselineModel::PixelAr(m) => m.forecast(series, t),
            BaselineModel::Varx(m) => m.forecast(series, t),
            BaselineModel::Persistence(m) => m.forecast(series, t),
        }
    }

    fn min_target(&self) -> usize {
        match self {
            BaselineModel::Mar(m) => m.min_target(),
            BaselineModel::MarLm { mar, lm } => mar.min_target().max(lm.min_target()),
            BaselineModel::PixelAr(m) => m.min_target(),
            BaselineModel::Varx(m) => m.min_target(),
            BaselineModel::Persistence(m) => Forecaster::min_target(m),
        }
    }
}

/// MAR(P): MARAC with the auxiliary term removed. Delegates to the main
/// estimator with Q = 0, so the coefficients agree bitwise.
pub fn fit_mar(series: &MatrixSeries, p: usize, opts: &FitOptions) -> Result<(BaselineModel, FitReport)> {
    let (model, report) = fit(series, p, 0, None, opts)?;
    Ok((BaselineModel::Mar(model), report))
}

/// Two-step MAR+LM: fit MAR first, then regress its residuals on the lagged
/// auxiliary vectors with the kernel-ridge update under an identity noise
/// covariance.
pub fn fit_mar_lm(
    series: &MatrixSeries,
    p: usize,
    q: usize,
    ctx: &Arc<KernelContext>,
    opts: &FitOptions,
) -> Result<(BaselineModel, FitReport)> {
    let (mar, _mar_report) = fit(series, p, 0, None, opts)?;
    let t0 = p + opts.gap;
    let mut frames = Vec::with_capacity(series.len() - t0);
    let mut aux = Vec::with_capacity(series.len() - t0);
    for t in t0..series.len() {
        frames.push(mar.residual(series, t)?);
        aux.push(series.aux(t).clone());
    }
    let residual_series = MatrixSeries::new(frames, aux)?;
    let mut lm_opts = opts.clone();
    lm_opts.sigma = SigmaMode::FixedIdentity;
    lm_opts.warm_start = None;
    let (lm, lm_report) = fit(&residual_series, 0, q, Some(ctx), &lm_opts)?;
    Ok((BaselineModel::MarLm { mar, lm }, lm_report))
}

/// Per-pixel autoregression with intercept, own lags, and auxiliary lags.
#[derive(Debug, Clone)]
pub struct PixelArModel {
    pub p: usize,
    pub q: usize,
    pub gap: usize,
    pub intercept: Mat,
    /// `ar[p][(i, j)]` is the lag-(p+1) own coefficient of pixel (i, j).
    pub ar: Vec<Mat>,
    /// `aux[q]` holds the lag-(q+1) auxiliary coefficients as M x N x D.
    pub aux: Vec<Tensor3>,
    pub sigma2: Mat,
    /// True when any pixel needed the ridge fallback.
    pub ridge_fallback: bool,
}

impl Forecaster for PixelArModel {
    fn forecast(&self, series: &MatrixSeries, t: usize) -> Result<Mat> {
        if t < self.min_target() || t >= series.len() {
            return Err(MaracError::Contract(format!(
                "target {t} outside predictable range"
            )));
        }
        let mut pred = self.intercept.clone();
        for (pi, beta) in self.ar.iter().enumerate() {
            let x = series.frame(t - self.gap - pi - 1);
            for ((o, b), v) in pred
                .as_mut_slice()
                .iter_mut()
                .zip(beta.as_slice())
                .zip(x.as_slice())
            {
                *o += b * v;
            }
        }
        for (qi, g) in self.aux.iter().enumerate() {
            let z = series.aux(t - self.gap - qi - 1);
            pred += crate::linalg::tvp(g, z)?;
        }
        Ok(pred)
    }

    fn min_target(&self) -> usize {
        self.gap + self.p.max(self.q)
    }
}

/// Ordinary least squares per pixel; rank-deficient designs fall back to a
/// 1e-8 ridge and set the flag.
pub fn fit_pixel_ar(series: &MatrixSeries, p: usize, q: usize, gap: usize) -> Result<PixelArModel> {
    let (m, n, d) = (series.nrows(), series.ncols(), series.aux_dim());
    let t0 = p.max(q) + gap;
    let k = 1 + p + q * d;
    if series.len() <= t0 + k {
        return Err(MaracError::InsufficientData(format!(
            "{} frames cannot support {k} per-pixel coefficients",
            series.len()
        )));
    }
    let t_eff = series.len() - t0;
    let mut intercept = Mat::zeros(m, n);
    let mut ar = vec![Mat::zeros(m, n); p];
    let mut aux_flat = vec![Mat::zeros(m, n); q * d];
    let mut sigma2 = Mat::zeros(m, n);
    let mut ridge_fallback = false;

    let mut design = Mat::zeros(t_eff, k);
    let mut target = Vector::zeros(t_eff);
    for i in 0..m {
        for j in 0..n {
            for (row, t) in (t0..series.len()).enumerate() {
                design[(row, 0)] = 1.0;
                for lag in 1..=p {
                    design[(row, lag)] = series.frame(t - gap - lag)[(i, j)];
                }
                for lag in 1..=q {
                    let z = series.aux(t - gap - lag);
                    for dd in 0..d {
                        design[(row, p + (lag - 1) * d + dd + 1)] = z[dd];
                    }
                }
                target[row] = series.frame(t)[(i, j)];
            }
            let gtg = design.tr_mul(&design);
            let gty = design.tr_mul(&target);
            let beta = match spd_factor(&gtg, 0.0) {
                Ok(chol) => chol.solve(&gty),
                Err(_) => {
                    ridge_fallback = true;
                    let ridged = &gtg + Mat::identity(k, k) * 1e-8;
                    spd_factor(&ridged, 0.0)
                        .map_err(|_| {
                            MaracError::Singular(format!(
                                "pixel ({i},{j}): design is singular even with ridge"
                            ))
                        })?
                        .solve(&gty)
                }
            };
            intercept[(i, j)] = beta[0];
            for lag in 1..=p {
                ar[lag - 1][(i, j)] = beta[lag];
            }
            for lag in 1..=q {
                for dd in 0..d {
                    aux_flat[(lag - 1) * d + dd][(i, j)] = beta[p + (lag - 1) * d + dd + 1];
                }
            }
            let resid = &target - &design * &beta;
            sigma2[(i, j)] = resid.norm_squared() / t_eff as f64;
        }
    }
    let aux = (0..q)
        .map(|qi| Tensor3::new(aux_flat[qi * d..(qi + 1) * d].to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok(PixelArModel {
        p,
        q,
        gap,
        intercept,
        ar,
        aux,
        sigma2,
        ridge_fallback,
    })
}

/// VARX on the vectorized series: `x_t` regressed on stacked lagged `x` and
/// `z` with a 1e-8 ridge for conditioning.
#[derive(Debug, Clone)]
pub struct VarxModel {
    pub p: usize,
    pub q: usize,
    pub gap: usize,
    pub m: usize,
    pub n: usize,
    /// S x (S*P + D*Q) coefficient matrix.
    pub coeff: Mat,
    pub warning: Option<String>,
}

impl VarxModel {
    fn stack_predictors(&self, series: &MatrixSeries, t: usize, out: &mut Vector) {
        let s = self.m * self.n;
        let d = series.aux_dim();
        for lag in 1..=self.p {
            let x = series.frame(t - self.gap - lag);
            out.rows_mut((lag - 1) * s, s)
                .copy_from_slice(x.as_slice());
        }
        for lag in 1..=self.q {
            let z = series.aux(t - self.gap - lag);
            out.rows_mut(self.p * s + (lag - 1) * d, d).copy_from(z);
        }
    }
}

impl Forecaster for VarxModel {
    fn forecast(&self, series: &MatrixSeries, t: usize) -> Result<Mat> {
        if t < self.min_target() || t >= series.len() {
            return Err(MaracError::Contract(format!(
                "target {t} outside predictable range"
            )));
        }
        let k = self.coeff.ncols();
        let mut w = Vector::zeros(k);
        self.stack_predictors(series, t, &mut w);
        let xhat = &self.coeff * w;
        crate::linalg::unvec(&xhat, self.m, self.n)
    }

    fn min_target(&self) -> usize {
        self.gap + self.p.max(self.q)
    }
}

/// Multivariate least squares for the VARX baseline. Errors when the design
/// is underdetermined (the MARAC parameterization is the remedy at that
/// point) and records a warning when predictors exceed half the sample.
pub fn fit_varx(series: &MatrixSeries, p: usize, q: usize, gap: usize) -> Result<VarxModel> {
    let (m, n, d) = (series.nrows(), series.ncols(), series.aux_dim());
    let s = m * n;
    let k = s * p + d * q;
    if k == 0 {
        return Err(MaracError::Contract("VARX needs at least one lag".into()));
    }
    let t0 = p.max(q) + gap;
    if series.len() <= t0 {
        return Err(MaracError::InsufficientData("no frames with full history".into()));
    }
    let t_eff = series.len() - t0;
    if t_eff <= k {
        return Err(MaracError::InsufficientData(format!(
            "VARX is severely underdetermined: {k} predictors vs {t_eff} usable frames; \
             consider the MARAC parameterization instead"
        )));
    }
    let warning = if 2 * k >= t_eff {
        Some(format!(
            "VARX has {k} predictors for {t_eff} frames; estimates will be noisy"
        ))
    } else {
        None
    };
    let model_shell = VarxModel {
        p,
        q,
        gap,
        m,
        n,
        coeff: Mat::zeros(s, k),
        warning,
    };
    let mut w = Vector::zeros(k);
    let mut www = Mat::zeros(k, k);
    let mut xw = Mat::zeros(s, k);
    for t in t0..series.len() {
        model_shell.stack_predictors(series, t, &mut w);
        www.ger(1.0, &w, &w, 1.0);
        let x = vec_mat(series.frame(t));
        xw.ger(1.0, &x, &w, 1.0);
    }
    for i in 0..k {
        www[(i, i)] += 1e-8;
    }
    let chol = spd_factor(&www, 0.0)
        .map_err(|_| MaracError::Singular("VARX normal equations are singular".into()))?;
    let coeff = chol.solve(&xw.transpose()).transpose();
    let mut model = model_shell;
    model.coeff = coeff;
    Ok(model)
}

/// Forecast that repeats the most recent observed frame regardless of the
/// latency.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Persistence {
    pub gap: usize,
}

impl Persistence {
    pub fn new(h: usize) -> Result<Self> {
        if h == 0 {
            return Err(MaracError::Contract("latency h must be >= 1".into()));
        }
        Ok(Self { gap: h - 1 })
    }
}

impl Forecaster for Persistence {
    fn forecast(&self, series: &MatrixSeries, t: usize) -> Result<Mat> {
        if t < self.gap + 1 || t >= series.len() {
            return Err(MaracError::Contract("persistence needs one prior frame".into()));
        }
        Ok(series.frame(t - self.gap - 1).clone())
    }

    fn min_target(&self) -> usize {
        self.gap + 1
    }
}

/// Free-function form: the forecast issued at origin `t` for any latency is
/// the last observed frame `X_{t-1}`.
pub fn persistence(series: &MatrixSeries, t: usize, _h: usize) -> Result<Mat> {
    if t == 0 || t > series.len() {
        return Err(MaracError::Contract("persistence needs one prior frame".into()));
    }
    Ok(series.frame(t - 1).clone())
}

// --- persistence envelope ------------------------------------------------

#[derive(Serialize, Deserialize)]
struct TensorJson {
    slices: Vec<MatJson>,
}

impl TensorJson {
    fn from_tensor(t: &Tensor3) -> Self {
        TensorJson {
            slices: t.slices().iter().map(MatJson::from).collect(),
        }
    }

    fn to_tensor(&self) -> Result<Tensor3> {
        Tensor3::new(self.slices.iter().map(MatJson::to_mat).collect::<Result<Vec<_>>>()?)
    }
}

#[derive(Serialize, Deserialize)]
struct BaselineDocument {
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    mar: Option<serde_json::Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lm: Option<serde_json::Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pixel: Option<PixelArDocument>,
    #[serde(skip_serializing_if = "Option::is_none")]
    varx: Option<VarxDocument>,
    #[serde(skip_serializing_if = "Option::is_none")]
    persistence: Option<Persistence>,
}

#[derive(Serialize, Deserialize)]
struct PixelArDocument {
    p: usize,
    q: usize,
    gap: usize,
    intercept: MatJson,
    ar: Vec<MatJson>,
    aux: Vec<TensorJson>,
    sigma2: MatJson,
    ridge_fallback: bool,
}

#[derive(Serialize, Deserialize)]
struct VarxDocument {
    p: usize,
    q: usize,
    gap: usize,
    m: usize,
    n: usize,
    coeff: MatJson,
    warning: Option<String>,
}

/// Save any baseline through the shared model.json envelope with a kind tag.
pub fn save_baseline(model: &BaselineModel, path: &Path) -> Result<()> {
    let doc = match model {
        BaselineModel::Mar(m) => BaselineDocument {
            kind: "mar".into(),
            mar: Some(m.to_json_value()?),
            lm: None,
            pixel: None,
            varx: None,
            persistence: None,
        },
        BaselineModel::MarLm { mar, lm } => BaselineDocument {
            kind: "mar_lm".into(),
            mar: Some(mar.to_json_value()?),
            lm: Some(lm.to_json_value()?),
            pixel: None,
            varx: None,
            persistence: None,
        },
        BaselineModel::PixelAr(m) => BaselineDocument {
            kind: "pixel_ar".into(),
            mar: None,
            lm: None,
            pixel: Some(PixelArDocument {
                p: m.p,
                q: m.q,
                gap: m.gap,
                intercept: MatJson::from(&m.intercept),
                ar: m.ar.iter().map(MatJson::from).collect(),
                aux: m.aux.iter().map(TensorJson::from_tensor).collect(),
                sigma2: MatJson::from(&m.sigma2),
                ridge_fallback: m.ridge_fallback,
            }),
            varx: None,
            persistence: None,
        },
        BaselineModel::Varx(m) => BaselineDocument {
            kind: "varx".into(),
            mar: None,
            lm: None,
            pixel: None,
            varx: Some(VarxDocument {
                p: m.p,
                q: m.q,
                gap: m.gap,
                m: m.m,
                n: m.n,
                coeff: MatJson::from(&m.coeff),
                warning: m.warning.clone(),
            }),
            persistence: None,
        },
        BaselineModel::Persistence(p) => BaselineDocument {
            kind: "persistence".into(),
            mar: None,
            lm: None,
            pixel: None,
            varx: None,
            persistence: Some(*p),
        },
    };
    std::fs::write(path, serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

pub fn load_baseline(path: &Path) -> Result<BaselineModel> {
    let doc: BaselineDocument = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let missing = |field: &str| MaracError::Format(format!("baseline document lacks '{field}'"));
    match doc.kind.as_str() {
        "mar" => Ok(BaselineModel::Mar(MaracModel::from_json_value(
            doc.mar.ok_or_else(|| missing("mar"))?,
        )?)),
        "mar_lm" => Ok(BaselineModel::MarLm {
            mar: MaracModel::from_json_value(doc.mar.ok_or_else(|| missing("mar"))?)?,
            lm: MaracModel::from_json_value(doc.lm.ok_or_else(|| missing("lm"))?)?,
        }),
        "pixel_ar" => {
            let d = doc.pixel.ok_or_else(|| missing("pixel"))?;
            Ok(BaselineModel::PixelAr(PixelArModel {
                p: d.p,
                q: d.q,
                gap: d.gap,
                intercept: d.intercept.to_mat()?,
                ar: d.ar.iter().map(MatJson::to_mat).collect::<Result<Vec<_>>>()?,
                aux: d.aux.iter().map(TensorJson::to_tensor).collect::<Result<Vec<_>>>()?,
                sigma2: d.sigma2.to_mat()?,
                ridge_fallback: d.ridge_fallback,
            }))
        }
        "varx" => {
            let d = doc.varx.ok_or_else(|| missing("varx"))?;
            Ok(BaselineModel::Varx(VarxModel {
                p: d.p,
                q: d.q,
                gap: d.gap,
                m: d.m,
                n: d.n,
                coeff: d.coeff.to_mat()?,
                warning: d.warning,
            }))
        }
        "persistence" => Ok(BaselineModel::Persistence(
            doc.persistence.ok_or_else(|| missing("persistence"))?,
        )),
        other => Err(MaracError::Format(format!("unknown baseline kind '{other}'"))),
    }
}
