//! Effective degrees of freedom, AIC/BIC, and lag-pair selection over a
//! candidate grid.
//!
//! All candidates are scored over the common conditioning horizon
//! `max(P_max, Q_max)` so their likelihood sums run over the same frames;
//! comparing likelihoods over different sample sizes would invalidate the
//! criteria.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::error::{MaracError, Result};
use crate::estimator::{fit, tune_lambda, FitOptions};
use crate::kernels::KernelContext;
use crate::linalg::{kron, spd_factor, vec_mat, Mat};
use crate::model::{AuxCoeffs, MaracModel, MatrixSeries};

/// `AIC = -2 sum_t l + 2 df` from the summed log-likelihood.
pub fn aic_from(neg2_loglik_sum: f64, df: f64) -> f64 {
    neg2_loglik_sum + 2.0 * df
}

/// `BIC = -2 sum_t l + log(T') df` with `T'` the conditioned frame count.
pub fn bic_from(neg2_loglik_sum: f64, df: f64, t_eff: usize) -> f64 {
    neg2_loglik_sum + (t_eff as f64).ln() * df
}

/// Effective degrees of freedom conditioning on frames `t >= start`:
/// `P (M^2 + N^2 - 1) + (M^2 + N^2) + sum_q df_q` with
/// `df_q = tr{[K~ + lambda (I_D (x) Sigma_c (x) Sigma_r)]^-1 K~}` and
/// `K~ = (T'^-1 sum_t z_{t-q} z_{t-q}') (x) K`. Returns `(total, per-q)`.
pub fn effective_df_from(
    model: &MaracModel,
    series: &MatrixSeries,
    start: usize,
) -> Result<(f64, Vec<f64>)> {
    let (m, n) = (model.nrows(), model.ncols());
    if series.len() <= start {
        return Err(MaracError::InsufficientData(format!(
            "{} frames with conditioning start {start}",
            series.len()
        )));
    }
    let t_eff = series.len() - start;
    let d = series.aux_dim();
    let mut df_aux = Vec::with_capacity(model.q);
    for lag in 1..=model.q {
        let mut zz = Mat::zeros(d, d);
        for t in start..series.len() {
            let z = series.aux(t - model.gap - lag);
            zz.ger(1.0, z, z, 1.0);
        }
        zz /= t_eff as f64;
        let df_q = match &model.aux {
            AuxCoeffs::Exact { .. } => {
                let ctx = model.kernel_ctx.as_ref().unwrap();
                let k_tilde = kron(&zz, &ctx.gram);
                let sigma = kron(&model.sigma_c, &model.sigma_r);
                let mut sys = k_tilde.clone();
                let s = ctx.s();
                for dd in 0..d {
                    let off = dd * s;
                    for i in 0..s {
                        for j in 0..s {
                            sys[(off + i, off + j)] += model.lambda * sigma[(i, j)];
                        }
                    }
                }
                hat_trace(&sys, &k_tilde)?
            }
            AuxCoeffs::Truncated { .. } => {
                let ctx = model.kernel_ctx.as_ref().unwrap();
                let basis = ctx.truncation.as_ref().unwrap();
                let r = basis.rank();
                // K_R' Sigma^-1 K_R through the Kronecker factors
                let inv_r = spd_factor(&model.sigma_r, 0.0)?.inverse();
                let inv_c = spd_factor(&model.sigma_c, 0.0)?.inverse();
                let mut ik = Mat::zeros(ctx.s(), r);
                for col in 0..r {
                    let v = basis.k_r.column(col);
                    let mat = Mat::from_column_slice(m, n, v.as_slice());
                    let solved = &inv_r * mat * &inv_c;
                    ik.set_column(col, &vec_mat(&solved));
                }
                let c_mat = basis.k_r.tr_mul(&ik);
                let phi = kron(&zz, &c_mat);
                let mut sys = phi.clone();
                for dd in 0..d {
                    for i in 0..r {
                        let idx = dd * r + i;
                        sys[(idx, idx)] += model.lambda / basis.lambda_r[i];
                    }
                }
                // df = tr([Phi + lambda I (x) Lambda^-1]^-1 Phi)
                hat_trace(&sys, &phi)?
            }
        };
        df_aux.push(df_q);
    }
    let ar_df = model.p as f64 * (m * m + n * n - 1) as f64;
    let sigma_df = (m * m + n * n) as f64;
    let total = ar_df + sigma_df + df_aux.iter().sum::<f64>();
    Ok((total, df_aux))
}

/// Effective df over the model's own conditioning horizon.
pub fn effective_df(model: &MaracModel, series: &MatrixSeries) -> Result<(f64, Vec<f64>)> {
    effective_df_from(model, series, model.min_target())
}

fn hat_trace(sys: &Mat, target: &Mat) -> Result<f64> {
    let chol = spd_factor(sys, 0.0)
        .map_err(|_| MaracError::Singular("effective df: ridge system is singular".into()))?;
    let solved = chol.solve(target);
    Ok(solved.trace())
}

/// AIC over the model's conditioning horizon.
pub fn aic(model: &MaracModel, series: &MatrixSeries) -> Result<f64> {
    let start = model.min_target();
    let t_eff = series.len() - start;
    let nll = model.nll_from(series, start)?;
    let (df, _) = effective_df_from(model, series, start)?;
    Ok(aic_from(2.0 * t_eff as f64 * nll, df))
}

/// BIC over the model's conditioning horizon.
pub fn bic(model: &MaracModel, series: &MatrixSeries) -> Result<f64> {
    let start = model.min_target();
    let t_eff = series.len() - start;
    let nll = model.nll_from(series, start)?;
    let (df, _) = effective_df_from(model, series, start)?;
    Ok(bic_from(2.0 * t_eff as f64 * nll, df, t_eff))
}

/// Per-cell tuning request for [`select_lags`].
#[derive(Debug, Clone)]
pub struct TuneSpec {
    pub lambda_grid: Vec<f64>,
    pub train_end: usize,
    pub val_end: usize,
}

/// Options for the lag sweep.
#[derive(Debug, Clone)]
pub struct SelectOptions {
    pub p_min: usize,
    pub q_min: usize,
    pub fit: FitOptions,
    /// When set, lambda is tuned per candidate; otherwise `fit.lambda` is the
    /// single pre-tuned value shared across the grid.
    pub tune: Option<TuneSpec>,
}

impl Default for SelectOptions {
    fn default() -> Self {
        Self {
            p_min: 0,
            q_min: 0,
            fit: FitOptions::default(),
            tune: None,
        }
    }
}

/// One fitted candidate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionCell {
    pub p: usize,
    pub q: usize,
    pub lambda: f64,
    pub df_total: f64,
    /// Average negative log-likelihood over the common horizon.
    pub nll: f64,
    pub aic: f64,
    pub bic: f64,
    pub converged: bool,
    pub error: Option<String>,
}

/// Outcome of the candidate sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionResult {
    pub cells: Vec<SelectionCell>,
    pub best_aic: (usize, usize),
    pub best_bic: (usize, usize),
    /// Common lag horizon: every candidate scores frames `t >= horizon + gap`.
    pub horizon: usize,
    pub t_eff: usize,
}

/// Fit every `(P, Q)` candidate and score both criteria on a common
/// conditioning horizon. Per-cell failures are recorded, not fatal.
pub fn select_lags(
    series: &MatrixSeries,
    p_max: usize,
    q_max: usize,
    ctx: Option<&Arc<KernelContext>>,
    opts: &SelectOptions,
) -> Result<SelectionResult> {
    if opts.p_min > p_max || opts.q_min > q_max {
        return Err(MaracError::Contract("empty candidate grid".into()));
    }
    let horizon = p_max.max(q_max);
    let start = horizon + opts.fit.gap;
    if series.len() <= start + 1 {
        return Err(MaracError::InsufficientData(format!(
            "{} frames cannot support the candidate horizon {horizon}",
            series.len()
        )));
    }
    let t_eff = series.len() - start;
    let grid: Vec<(usize, usize)> = (opts.p_min..=p_max)
        .flat_map(|p| (opts.q_min..=q_max).map(move |q| (p, q)))
        .collect();

    let cells: Vec<SelectionCell> = grid
        .par_iter()
        .map(|&(p, q)| {
            let mut cell = SelectionCell {
                p,
                q,
                lambda: opts.fit.lambda,
                df_total: f64::NAN,
                nll: f64::NAN,
                aic: f64::NAN,
                bic: f64::NAN,
                converged: false,
                error: None,
            };
            let outcome = (|| -> Result<()> {
                let mut fit_opts = opts.fit.clone();
                fit_opts.lag_horizon = Some(horizon);
                fit_opts.warm_start = None;
                if q > 0 {
                    if let Some(tune) = &opts.tune {
                        let tuned = tune_lambda(
                            series,
                            p,
                            q,
                            ctx,
                            &tune.lambda_grid,
                            tune.train_end,
                            tune.val_end,
                            &fit_opts,
                        )?;
                        fit_opts.lambda = tuned.best_lambda;
                    }
                }
                let (model, report) = fit(series, p, q, ctx, &fit_opts)?;
                let nll = model.nll_from(series, start)?;
                let (df, _) = effective_df_from(&model, series, start)?;
                let neg2 = 2.0 * t_eff as f64 * nll;
                cell.lambda = fit_opts.lambda;
                cell.df_total = df;
                cell.nll = nll;
                cell.aic = aic_from(neg2, df);
                cell.bic = bic_from(neg2, df, t_eff);
                cell.converged = report.converged;
                Ok(())
            })();
            if let Err(e) = outcome {
                cell.error = Some(e.to_string());
            }
            cell
        })
        .collect();

    let best_by = |get: &dyn Fn(&SelectionCell) -> f64| -> Option<(usize, usize)> {
        cells
            .iter()
            .filter(|c| c.error.is_none() && get(c).is_finite())
            .min_by(|a, b| {
                // ties: smaller P+Q, then smaller P
                (get(a), a.p + a.q, a.p)
                    .partial_cmp(&(get(b), b.p + b.q, b.p))
                    .unwrap()
            })
            .map(|c| (c.p, c.q))
    };
    let best_aic = best_by(&|c| c.aic)
        .ok_or_else(|| MaracError::Internal("every candidate cell failed".into()))?;
    let best_bic = best_by(&|c| c.bic).unwrap();

    Ok(SelectionResult {
        cells,
        best_aic,
        best_bic,
        horizon,
        t_eff,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::{FitMode, SigmaMode};
    use crate::kernels::{GridSpec, KernelSpec};
    use crate::linalg::Vector;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn sphere_ctx(m: usize, n: usize) -> Arc<KernelContext> {
        Arc::new(
            KernelContext::new(GridSpec::sphere(m, n).unwrap(), KernelSpec::Lebedev { eta: 3.0 })
                .unwrap(),
        )
    }

    fn noise_series(rng: &mut ChaCha8Rng, m: usize, n: usize, d: usize, t: usize) -> MatrixSeries {
        MatrixSeries::new(
            (0..t)
                .map(|_| Mat::from_fn(m, n, |_, _| rng.sample(StandardNormal)))
                .collect(),
            (0..t)
                .map(|_| Vector::from_fn(d, |_, _| rng.sample(StandardNormal)))
                .collect(),
        )
        .unwrap()
    }

    fn fitted_model(
        series: &MatrixSeries,
        ctx: &Arc<KernelContext>,
        lambda: f64,
    ) -> MaracModel {
        let opts = FitOptions {
            lambda,
            max_iters: 30,
            ..FitOptions::default()
        };
        fit(series, 1, 1, Some(ctx), &opts).unwrap().0
    }

    #[test]
    fn aic_bic_pure_helpers() {
        // df = 0: both criteria equal -2 * loglik sum
        assert_eq!(aic_from(123.0, 0.0), 123.0);
        assert_eq!(bic_from(123.0, 0.0, 50), 123.0);
        // equal likelihood, smaller df wins for both
        assert!(aic_from(10.0, 1.0) < aic_from(10.0, 2.0));
        assert!(bic_from(10.0, 1.0, 20) < bic_from(10.0, 2.0, 20));
    }

    #[test]
    fn df_limits_in_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ctx = sphere_ctx(3, 3);
        let series = noise_series(&mut rng, 3, 3, 2, 60);
        let mut model = fitted_model(&series, &ctx, 1e-2);

        model.lambda = 1e-10;
        let (_, df) = effective_df(&model, &series).unwrap();
        assert!((df[0] - (3.0 * 3.0 * 2.0)).abs() <= 0.1, "df {} at tiny lambda", df[0]);

        model.lambda = 1e12;
        let (_, df) = effective_df(&model, &series).unwrap();
        assert!(df[0] <= 1e-6, "df {} at huge lambda", df[0]);
    }

    #[test]
    fn df_matches_dense_oracle_and_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ctx = sphere_ctx(2, 3);
        let series = noise_series(&mut rng, 2, 3, 2, 50);
        let mut model = fitted_model(&series, &ctx, 1e-2);

        // dense oracle: tr((K~ + lambda I (x) Sigma)^-1 K~) via full inverse
        let start = model.min_target();
        let t_eff = (series.len() - start) as f64;
        let d = 2;
        let s = 6;
        let mut zz = Mat::zeros(d, d);
        for t in start..series.len() {
            let z = series.aux(t - 1);
            zz.ger(1.0, z, z, 1.0);
        }
        zz /= t_eff;
        let k_tilde = kron(&zz, &ctx.gram);
        let sigma_big = kron(&kron(&Mat::identity(d, d), &model.sigma_c), &model.sigma_r);
        let sys = &k_tilde + sigma_big * model.lambda;
        let dense = (sys.try_inverse().unwrap() * &k_tilde).trace();
        let (_, df) = effective_df(&model, &series).unwrap();
        assert_relative_eq!(df[0], dense, max_relative = 1e-8);
        assert!(df[0] >= 0.0 && df[0] <= (s * d) as f64);

        // monotone non-increasing in lambda
        let mut last = f64::INFINITY;
        for lam in [1e-6, 1e-4, 1e-2, 1.0, 100.0] {
            model.lambda = lam;
            let (_, df) = effective_df(&model, &series).unwrap();
            assert!(df[0] <= last + 1e-9, "df not monotone at lambda {lam}");
            last = df[0];
        }
    }

    #[test]
    fn single_cell_grid_selects_it() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ctx = sphere_ctx(2, 2);
        let series = noise_series(&mut rng, 2, 2, 1, 40);
        let opts = SelectOptions {
            p_min: 1,
            q_min: 1,
            fit: FitOptions {
                lambda: 1e-2,
                max_iters: 20,
                ..FitOptions::default()
            },
            tune: None,
        };
        let res = select_lags(&series, 1, 1, Some(&ctx), &opts).unwrap();
        assert_eq!(res.cells.len(), 1);
        assert_eq!(res.best_aic, (1, 1));
        assert_eq!(res.best_bic, (1, 1));
    }

    #[test]
    fn qmax_zero_runs_mar_only_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let series = noise_series(&mut rng, 2, 2, 1, 60);
        let opts = SelectOptions {
            p_min: 0,
            q_min: 0,
            fit: FitOptions {
                max_iters: 20,
                sigma: SigmaMode::Full,
                mode: FitMode::Exact,
                ..FitOptions::default()
            },
            tune: None,
        };
        let res = select_lags(&series, 2, 0, None, &opts).unwrap();
        assert_eq!(res.cells.len(), 3);
        assert!(res.cells.iter().all(|c| c.q == 0 && c.error.is_none()));
        // repeated run is deterministic
        let res2 = select_lags(&series, 2, 0, None, &opts).unwrap();
        for (a, b) in res.cells.iter().zip(&res2.cells) {
            assert_eq!(a.bic.to_bits(), b.bic.to_bits());
        }
    }
}
