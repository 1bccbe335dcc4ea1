//! Penalized maximum-likelihood estimation by alternating minimization.
//!
//! Each block update is the exact minimizer of the penalized objective with
//! the other blocks held fixed, cycling
//! `A_1 -> B_1 -> ... -> A_P -> B_P -> Gamma_1 -> ... -> Gamma_Q -> Sigma_r
//! -> Sigma_c`, which yields a non-increasing objective sequence. Convergence
//! is declared when the Kronecker-difference bound for every (A_p, B_p) pair,
//! the Frobenius change of every coefficient tensor, and the bound for
//! `Sigma_c (x) Sigma_r` all fall below `rel_tol * (1 + current norm)`.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{MaracError, Result};
use crate::kernels::KernelContext;
use crate::linalg::{kron, kron_diff_bound, spd_factor, unvec, vec_mat, Mat, Vector};
use crate::model::{AuxCoeffs, MaracModel, MatrixSeries};

/// Auxiliary-coefficient parameterization to fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMode {
    /// Full representer coefficients `Gamma_q` (MN x D); requires lambda > 0
    /// whenever Q > 0.
    Exact,
    /// Rank-R Mercer truncation with coefficients `Theta_q` (R x D).
    Truncated { r: usize },
}

/// Noise-covariance handling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// Full Kronecker factors, re-estimated each cycle.
    Full,
    /// Off-diagonals zeroed after each update.
    Diagonal,
    /// Factors pinned at the identity (used by the two-step MAR+LM baseline).
    FixedIdentity,
}

/// Options controlling a single fit.
#[derive(Debug, Clone)]
pub struct FitOptions {
    pub lambda: f64,
    pub max_iters: usize,
    pub rel_tol: f64,
    pub mode: FitMode,
    pub sigma: SigmaMode,
    pub warm_start: Option<MaracModel>,
    pub seed: u64,
    /// Latency offset (h - 1): predictors for target t are frames
    /// `t - gap - p` and vectors `t - gap - q`.
    pub gap: usize,
    /// Conditioning horizon override: score frames `t >= lag_horizon + gap`.
    /// Defaults to `max(P, Q)`. Lag selection fixes this across candidates so
    /// all likelihoods run over the same frames.
    pub lag_horizon: Option<usize>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            lambda: 1e-3,
            max_iters: 200,
            rel_tol: 1e-4,
            mode: FitMode::Exact,
            sigma: SigmaMode::Full,
            warm_start: None,
            seed: 0,
            gap: 0,
            lag_horizon: None,
        }
    }
}

/// Analytic gradient norms of the penalized objective per block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockGradients {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub aux: Vec<f64>,
    pub sigma_r: f64,
    pub sigma_c: f64,
}

/// Convergence diagnostics from a fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub objective_trace: Vec<f64>,
    /// Per-iteration maximum of the relative block-change measures.
    pub block_change_trace: Vec<f64>,
    pub iters_run: usize,
    pub converged: bool,
    pub block_gradient_norms: BlockGradients,
    pub df_total: f64,
    pub df_aux: Vec<f64>,
    pub elapsed_seconds: f64,
}

/// Result of one alternating cycle.
#[derive(Debug, Clone, Copy)]
pub struct IterStats {
    pub converged: bool,
    pub max_rel_change: f64,
}

/// Dense assembly of the gamma system is used while S*D stays at or below
/// this bound; beyond it the update sweeps one covariate block at a time.
const DENSE_AUX_LIMIT: usize = 4000;

/// Mutable optimizer state exposing the individual block updates.
pub struct FitState<'a> {
    series: &'a MatrixSeries,
    ctx: Option<Arc<KernelContext>>,
    p: usize,
    q: usize,
    m: usize,
    n: usize,
    d: usize,
    s: usize,
    t0: usize,
    t_eff: usize,
    gap: usize,
    lambda: f64,
    mode: FitMode,
    sigma_mode: SigmaMode,
    a: Vec<Mat>,
    b: Vec<Mat>,
    /// `Gamma_q` (S x D) in exact mode, `Theta_q` (R x D) in truncated mode.
    aux: Vec<Mat>,
    /// `K Gamma_q` or `K_R Theta_q` (S x D): vectorized tensor slices.
    g_cols: Vec<Mat>,
    sigma_r: Mat,
    sigma_c: Mat,
    inv_sigma_r: Mat,
    inv_sigma_c: Mat,
    logdet_r: f64,
    logdet_c: f64,
    pred: Vec<Mat>,
    contrib_ar: Vec<Vec<Mat>>,
    contrib_aux: Vec<Vec<Mat>>,
    /// `sum_t z_{t-gap-q} z_{t-gap-q}^T` over scored frames, per lag q.
    zmom: Vec<Mat>,
    rel_tol: f64,
}

impl<'a> FitState<'a> {
    pub fn new(
        series: &'a MatrixSeries,
        p: usize,
        q: usize,
        ctx: Option<Arc<KernelContext>>,
        opts: &FitOptions,
    ) -> Result<Self> {
        let (m, n, d) = (series.nrows(), series.ncols(), series.aux_dim());
        let s = m * n;
        if q > 0 && ctx.is_none() {
            return Err(MaracError::Contract("Q > 0 requires a kernel context".into()));
        }
        if let Some(c) = &ctx {
            if c.s() != s {
                return Err(MaracError::Shape(format!(
                    "kernel context has {} locations but the series has {s}",
                    c.s()
                )));
            }
        }
        if q > 0 && d == 0 {
            return Err(MaracError::Contract("Q > 0 requires auxiliary covariates".into()));
        }
        if q > 0 && matches!(opts.mode, FitMode::Exact) && opts.lambda <= 0.0 {
            return Err(MaracError::Contract(
                "exact mode requires lambda > 0 when Q > 0 (the representer reduction needs it)"
                    .into(),
            ));
        }
        if opts.lambda < 0.0 || opts.rel_tol <= 0.0 {
            return Err(MaracError::Contract("lambda >= 0 and rel_tol > 0 required".into()));
        }
        let horizon = opts.lag_horizon.unwrap_or_else(|| p.max(q));
        if horizon < p.max(q) {
            return Err(MaracError::Contract(format!(
                "lag horizon {horizon} below max(P, Q) = {}",
                p.max(q)
            )));
        }
        let t0 = horizon + opts.gap;
        if series.len() < t0 + 2 {
            return Err(MaracError::InsufficientData(format!(
                "{} frames cannot condition on {} lagged frames plus 2",
                series.len(),
                t0
            )));
        }
        let t_eff = series.len() - t0;
        let aux_rows = match opts.mode {
            FitMode::Exact => s,
            FitMode::Truncated { r } => {
                let basis = ctx
                    .as_ref()
                    .and_then(|c| c.truncation.as_ref())
                    .filter(|bt| bt.rank() == r);
                if q > 0 && basis.is_none() {
                    return Err(MaracError::Contract(format!(
                        "truncated mode needs a rank-{r} basis attached to the kernel context"
                    )));
                }
                r
            }
        };

        let (a, b, aux, sigma_r, sigma_c) = match &opts.warm_start {
            Some(model) => {
                if model.p != p || model.q != q || model.nrows() != m || model.ncols() != n {
                    return Err(MaracError::Contract(
                        "warm-start model does not match the requested specification".into(),
                    ));
                }
                let aux = match (&model.aux, opts.mode) {
                    (AuxCoeffs::Exact { gamma }, FitMode::Exact) => gamma.clone(),
                    (AuxCoeffs::Truncated { theta }, FitMode::Truncated { r })
                        if theta.iter().all(|t| t.nrows() == r) =>
                    {
                        theta.clone()
                    }
                    _ if q == 0 => Vec::new(),
                    _ => {
                        return Err(MaracError::Contract(
                            "warm-start coefficients do not match the fit mode".into(),
                        ))
                    }
                };
                (
                    model.a.clone(),
                    model.b.clone(),
                    aux,
                    model.sigma_r.clone(),
                    model.sigma_c.clone(),
                )
            }
            None => {
                // stationary, scale-identified start with well-defined
                // first partial residuals
                let a0 = Mat::identity(m, m) / (m as f64).sqrt();
                let b0 = Mat::identity(n, n) * (0.5 / p.max(1) as f64);
                (
                    vec![a0; p],
                    vec![b0; p],
                    vec![Mat::zeros(aux_rows, d); q],
                    Mat::identity(m, m),
                    Mat::identity(n, n),
                )
            }
        };

        let mut state = Self {
            series,
            ctx,
            p,
            q,
            m,
            n,
            d,
            s,
            t0,
            t_eff,
            gap: opts.gap,
            lambda: opts.lambda,
            mode: opts.mode,
            sigma_mode: opts.sigma,
            a,
            b,
            aux,
            g_cols: Vec::new(),
            sigma_r,
            sigma_c,
            inv_sigma_r: Mat::identity(m, m),
            inv_sigma_c: Mat::identity(n, n),
            logdet_r: 0.0,
            logdet_c: 0.0,
            pred: vec![Mat::zeros(m, n); t_eff],
            contrib_ar: vec![vec![Mat::zeros(m, n); t_eff]; p],
            contrib_aux: vec![vec![Mat::zeros(m, n); t_eff]; q],
            zmom: Vec::new(),
            rel_tol: opts.rel_tol,
        };
        if matches!(state.sigma_mode, SigmaMode::FixedIdentity) {
            state.sigma_r = Mat::identity(m, m);
            state.sigma_c = Mat::identity(n, n);
        }
        state.refresh_sigma_caches()?;
        state.refresh_g_cols();
        state.rebuild_contributions();
        state.zmom = (1..=q)
            .map(|lag| {
                let mut zz = Mat::zeros(d, d);
                for t in state.t0..series.len() {
                    let z = series.aux(t - state.gap - lag);
                    zz.ger(1.0, z, z, 1.0);
                }
                zz
            })
            .collect();
        Ok(state)
    }

    fn basis(&self) -> &crate::kernels::TruncatedBasis {
        self.ctx
            .as_ref()
            .unwrap()
            .truncation
            .as_ref()
            .expect("truncated mode always carries a basis")
    }

    fn refresh_sigma_caches(&mut self) -> Result<()> {
        let chol_r = spd_factor(&self.sigma_r, 0.0)?;
        let chol_c = spd_factor(&self.sigma_c, 0.0)?;
        self.logdet_r = 2.0 * chol_r.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        self.logdet_c = 2.0 * chol_c.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        self.inv_sigma_r = chol_r.inverse();
        self.inv_sigma_c = chol_c.inverse();
        Ok(())
    }

    /// Recompute `K Gamma_q` / `K_R Theta_q` for all lags.
    fn refresh_g_cols(&mut self) {
        self.g_cols = (0..self.q)
            .map(|qi| match self.mode {
                FitMode::Exact => &self.ctx.as_ref().unwrap().gram * &self.aux[qi],
                FitMode::Truncated { .. } => &self.basis().k_r * &self.aux[qi],
            })
            .collect();
    }

    /// Recompute every cached contribution and the total prediction.
    fn rebuild_contributions(&mut self) {
        let mut tmp = Mat::zeros(self.m, self.n);
        for ti in 0..self.t_eff {
            let t = self.t0 + ti;
            self.pred[ti].fill(0.0);
            for pi in 0..self.p {
                let y = self.series.frame(t - self.gap - pi - 1);
                tmp.gemm(1.0, &self.a[pi], y, 0.0);
                let bt = self.b[pi].transpose();
                self.contrib_ar[pi][ti].gemm(1.0, &tmp, &bt, 0.0);
                self.pred[ti] += &self.contrib_ar[pi][ti];
            }
            for qi in 0..self.q {
                let z = self.series.aux(t - self.gap - qi - 1);
                self.set_aux_contrib(qi, ti, z);
                self.pred[ti] += &self.contrib_aux[qi][ti];
            }
        }
    }

    /// contrib_aux[qi][ti] = unvec(g_cols[qi] * z).
    fn set_aux_contrib(&mut self, qi: usize, ti: usize, z: &Vector) {
        let gc = &self.g_cols[qi];
        let out = &mut self.contrib_aux[qi][ti];
        out.fill(0.0);
        for dd in 0..self.d {
            let w = z[dd];
            if w == 0.0 {
                continue;
            }
            let col = gc.column(dd);
            for (o, g) in out.as_mut_slice().iter_mut().zip(col.iter()) {
                *o += w * g;
            }
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.m, self.n, self.d)
    }

    pub fn lags(&self) -> (usize, usize) {
        (self.p, self.q)
    }

    pub fn conditioned_frames(&self) -> usize {
        self.t_eff
    }

    pub fn a(&self, lag: usize) -> &Mat {
        &self.a[lag - 1]
    }

    pub fn b(&self, lag: usize) -> &Mat {
        &self.b[lag - 1]
    }

    pub fn aux_coeff(&self, lag: usize) -> &Mat {
        &self.aux[lag - 1]
    }

    pub fn sigma(&self) -> (&Mat, &Mat) {
        (&self.sigma_r, &self.sigma_c)
    }

    /// Penalized objective at the current state.
    pub fn objective(&self) -> f64 {
        let mut quad = 0.0;
        let mut xt = Mat::zeros(self.m, self.n);
        let mut u = Mat::zeros(self.m, self.n);
        let mut v = Mat::zeros(self.m, self.n);
        for ti in 0..self.t_eff {
            let t = self.t0 + ti;
            xt.copy_from(self.series.frame(t));
            xt -= &self.pred[ti];
            u.gemm(1.0, &self.inv_sigma_r, &xt, 0.0);
            v.gemm(1.0, &u, &self.inv_sigma_c, 0.0);
            quad += v.dot(&xt);
        }
        let logdet = self.n as f64 * self.logdet_r + self.m as f64 * self.logdet_c;
        0.5 * logdet + 0.5 * quad / self.t_eff as f64 + 0.5 * self.lambda * self.penalty_quadratic()
    }

    fn penalty_quadratic(&self) -> f64 {
        match self.mode {
            FitMode::Exact => self
                .aux
                .iter()
                .zip(&self.g_cols)
                .map(|(g, kg)| g.dot(kg))
                .sum(),
            FitMode::Truncated { .. } => {
                if self.q == 0 {
                    return 0.0;
                }
                let lam = &self.basis().lambda_r;
                self.aux
                    .iter()
                    .map(|th| {
                        (0..th.ncols())
                            .map(|dd| {
                                (0..th.nrows())
                                    .map(|r| th[(r, dd)] * th[(r, dd)] / lam[r])
                                    .sum::<f64>()
                            })
                            .sum::<f64>()
                    })
                    .sum()
            }
        }
    }

    /// Exact minimizer for `A_p` given every other block.
    pub fn update_a(&mut self, lag: usize) -> Result<()> {
        if lag == 0 || lag > self.p {
            return Err(MaracError::Contract(format!("AR lag {lag} out of range 1..={}", self.p)));
        }
        let pi = lag - 1;
        let scb = &self.inv_sigma_c * &self.b[pi];
        let sym = self.b[pi].tr_mul(&scb);
        let mut term1 = Mat::zeros(self.m, self.m);
        let mut term2 = Mat::zeros(self.m, self.m);
        let mut xt = Mat::zeros(self.m, self.n);
        let mut yt = Mat::zeros(self.n, self.m);
        let mut w1 = Mat::zeros(self.n, self.m);
        let mut w2 = Mat::zeros(self.n, self.m);
        for ti in 0..self.t_eff {
            let t = self.t0 + ti;
            let y = self.series.frame(t - self.gap - lag);
            y.transpose_to(&mut yt);
            xt.copy_from(self.series.frame(t));
            xt -= &self.pred[ti];
            xt += &self.contrib_ar[pi][ti];
            w1.gemm(1.0, &scb, &yt, 0.0);
            term1.gemm(1.0, &xt, &w1, 1.0);
            w2.gemm(1.0, &sym, &yt, 0.0);
            term2.gemm_tr(1.0, &yt, &w2, 1.0);
        }
        let chol = spd_factor(&term2, 0.0)
            .map_err(|_| MaracError::Singular("A update: predictor Gram factor is singular".into()))?;
        let a_new = chol.solve(&term1.transpose()).transpose();
        self.install_a(pi, a_new);
        Ok(())
    }

    fn install_a(&mut self, pi: usize, a_new: Mat) {
        self.a[pi] = a_new;
        self.refresh_ar_contrib(pi);
    }

    fn refresh_ar_contrib(&mut self, pi: usize) {
        let bt = self.b[pi].transpose();
        let mut tmp = Mat::zeros(self.m, self.n);
        let mut fresh = Mat::zeros(self.m, self.n);
        for ti in 0..self.t_eff {
            let t = self.t0 + ti;
            let y = self.series.frame(t - self.gap - pi - 1);
            tmp.gemm(1.0, &self.a[pi], y, 0.0);
            fresh.gemm(1.0, &tmp, &bt, 0.0);
            self.pred[ti] -= &self.contrib_ar[pi][ti];
            self.pred[ti] += &fresh;
            self.contrib_ar[pi][ti].copy_from(&fresh);
        }
    }

    /// Exact minimizer for `B_p` given every other block.
    pub fn update_b(&mut self, lag: usize) -> Result<()> {
        if lag == 0 || lag > self.p {
            return Err(MaracError::Contract(format!("AR lag {lag} out of range 1..={}", self.p)));
        }
        let pi = lag - 1;
        let srb = &self.inv_sigma_r * &self.a[pi];
        let sym = self.a[pi].tr_mul(&srb);
        let mut term1 = Mat::zeros(self.n, self.n);
        let mut term2 = Mat::zeros(self.n, self.n);
        let mut xt = Mat::zeros(self.m, self.n);
        let mut w1 = Mat::zeros(self.m, self.n);
        let mut w2 = Mat::zeros(self.m, self.n);
        for ti in 0..self.t_eff {
            let t = self.t0 + ti;
            let y = self.series.frame(t - self.gap - lag);
            xt.copy_from(self.series.frame(t));
            xt -= &self.pred[ti];
            xt += &self.contrib_ar[pi][ti];
            w1.gemm(1.0, &srb, y, 0.0);
            term1.gemm_tr(1.0, &xt, &w1, 1.0);
            w2.gemm(1.0, &sym, y, 0.0);
            term2.gemm_tr(1.0, y, &w2, 1.0);
        }
        let chol = spd_factor(&term2, 0.0)
            .map_err(|_| MaracError::Singular("B update: predictor Gram factor is singular".into()))?;
        let b_new = chol.solve(&term1.transpose()).transpose();
        self.b[pi] = b_new;
        self.refresh_ar_contrib(pi);
        Ok(())
    }

    /// Exact kernel-ridge minimizer for `Gamma_q` (exact mode).
    pub fn update_gamma(&mut self, lag: usize) -> Result<()> {
        if !matches!(self.mode, FitMode::Exact) {
            return Err(MaracError::Contract(
                "update_gamma applies to exact mode; use update_theta".into(),
            ));
        }
        self.update_aux_block(lag)
    }

    /// Exact ridge minimizer for `Theta_q` (truncated mode).
    pub fn update_theta(&mut self, lag: usize) -> Result<()> {
        if !matches!(self.mode, FitMode::Truncated { .. }) {
            return Err(MaracError::Contract(
                "update_theta applies to truncated mode; use update_gamma".into(),
            ));
        }
        self.update_aux_block(lag)
    }

    /// Dispatch for the auxiliary coefficient update at lag `q`.
    pub fn update_aux_block(&mut self, lag: usize) -> Result<()> {
        if lag == 0 || lag > self.q {
            return Err(MaracError::Contract(format!(
                "auxiliary lag {lag} out of range 1..={}",
                self.q
            )));
        }
        match self.mode {
            FitMode::Exact => {
                if self.s * self.d <= DENSE_AUX_LIMIT {
                    self.update_gamma_dense(lag - 1)
                } else {
                    self.update_gamma_sweep(lag - 1)
                }
            }
            FitMode::Truncated { .. } => self.update_theta_inner(lag - 1),
        }
    }

    /// Solve the full S*D kernel-ridge system
    /// `[(sum_t z z') (x) K + lambda T' (I_D (x) Sigma)] gamma = sum_t z (x) x~`.
    fn update_gamma_dense(&mut self, qi: usize) -> Result<()> {
        let sd = self.s * self.d;
        let gram = &self.ctx.as_ref().unwrap().gram;
        let mut sys = kron(&self.zmom[qi], gram);
        let sigma = kron(&self.sigma_c, &self.sigma_r);
        let shrink = self.lambda * self.t_eff as f64;
        for dd in 0..self.d {
            let off = dd * self.s;
            for i in 0..self.s {
                for j in 0..self.s {
                    sys[(off + i, off + j)] += shrink * sigma[(i, j)];
                }
            }
        }
        let mut rhs = Vector::zeros(sd);
        let mut xt = Mat::zeros(self.m, self.n);
        for ti in 0..self.t_eff {
            let t = self.t0 + ti;
            let z = self.series.aux(t - self.gap - qi - 1);
            xt.copy_from(self.series.frame(t));
            xt -= &self.pred[ti];
            xt += &self.contrib_aux[qi][ti];
            for dd in 0..self.d {
                let w = z[dd];
                if w == 0.0 {
                    continue;
                }
                let block = &mut rhs.as_mut_slice()[dd * self.s..(dd + 1) * self.s];
                for (r, x) in block.iter_mut().zip(xt.as_slice()) {
                    *r += w * x;
                }
            }
        }
        let chol = spd_factor(&sys, 0.0)
            .map_err(|_| MaracError::Singular("gamma update: ridge system is singular".into()))?;
        let gamma_vec = chol.solve(&rhs);
        let gamma = unvec(&gamma_vec, self.s, self.d)?;
        self.install_aux(qi, gamma);
        Ok(())
    }

    /// Per-covariate sweep used when the joint system would be too large:
    /// each gamma_{q,d} block is still an exact minimizer given the rest.
    fn update_gamma_sweep(&mut self, qi: usize) -> Result<()> {
        let ctx = self.ctx.clone().unwrap();
        let sigma = kron(&self.sigma_c, &self.sigma_r);
        let shrink = self.lambda * self.t_eff as f64;
        let mut gamma = self.aux[qi].clone();
        for dd in 0..self.d {
            let zsq: f64 = (self.t0..self.series.len())
                .map(|t| {
                    let z = self.series.aux(t - self.gap - qi - 1)[dd];
                    z * z
                })
                .sum();
            let mut sys = &ctx.gram * zsq;
            sys += &sigma * shrink;
            let mut rhs = Vector::zeros(self.s);
            let mut xt = Mat::zeros(self.m, self.n);
            for ti in 0..self.t_eff {
                let t = self.t0 + ti;
                let z = self.series.aux(t - self.gap - qi - 1);
                if z[dd] == 0.0 {
                    continue;
                }
                xt.copy_from(self.series.frame(t));
                xt -= &self.pred[ti];
                // add back this lag's own d-th contribution only
                let gcol = self.g_cols[qi].column(dd);
                for ((x, g), r) in xt
                    .as_mut_slice()
                    .iter_mut()
                    .zip(gcol.iter())
                    .zip(rhs.as_mut_slice().iter_mut())
                {
                    *x += z[dd] * g;
                    *r += z[dd] * *x;
                }
            }
            let chol = spd_factor(&sys, 0.0).map_err(|_| {
                MaracError::Singular("gamma sweep: per-covariate system is singular".into())
            })?;
            let gcol_new = chol.solve(&rhs);
            gamma.set_column(dd, &gcol_new);
            // make the new column visible to subsequent blocks of the sweep
            self.install_aux(qi, gamma.clone());
        }
        Ok(())
    }

    /// Solve the R*D truncated ridge system
    /// `[Phi(z' (x) K_R, Sigma) + lambda T' (I_D (x) Lambda_R^-1)] theta
    ///  = Phi(z' (x) K_R, x~, Sigma)`.
    fn update_theta_inner(&mut self, qi: usize) -> Result<()> {
        let r = self.basis().rank();
        let k_r = self.basis().k_r.clone();
        let lambda_r = self.basis().lambda_r.clone();
        // Sigma^-1 K_R, applied column-by-column through the Kronecker factors
        let mut ik = Mat::zeros(self.s, r);
        for col in 0..r {
            let mat = unvec(&Vector::from_column_slice(k_r.column(col).as_slice()), self.m, self.n)?;
            let solved = &self.inv_sigma_r * mat * &self.inv_sigma_c;
            ik.set_column(col, &vec_mat(&solved));
        }
        let c_mat = k_r.tr_mul(&ik); // K_R' Sigma^-1 K_R, symmetric R x R
        let rd = r * self.d;
        let mut sys = kron(&self.zmom[qi], &c_mat);
        let shrink = self.lambda * self.t_eff as f64;
        for dd in 0..self.d {
            for i in 0..r {
                let idx = dd * r + i;
                sys[(idx, idx)] += shrink / lambda_r[i];
            }
        }
        let mut rhs = Vector::zeros(rd);
        let mut xt = Mat::zeros(self.m, self.n);
        let mut w = Vector::zeros(r);
        for ti in 0..self.t_eff {
            let t = self.t0 + ti;
            let z = self.series.aux(t - self.gap - qi - 1);
            xt.copy_from(self.series.frame(t));
            xt -= &self.pred[ti];
            xt += &self.contrib_aux[qi][ti];
            let xv = vec_mat(&xt);
            w.gemv_tr(1.0, &ik, &xv, 0.0); // K_R' Sigma^-1 x~
            for dd in 0..self.d {
                let zw = z[dd];
                if zw == 0.0 {
                    continue;
                }
                let block = &mut rhs.as_mut_slice()[dd * r..(dd + 1) * r];
                for (out, val) in block.iter_mut().zip(w.iter()) {
                    *out += zw * val;
                }
            }
        }
        let chol = spd_factor(&sys, 0.0)
            .map_err(|_| MaracError::Singular("theta update: ridge system is singular".into()))?;
        let theta_vec = chol.solve(&rhs);
        let theta = unvec(&theta_vec, r, self.d)?;
        self.install_aux(qi, theta);
        Ok(())
    }

    fn install_aux(&mut self, qi: usize, coeff: Mat) {
        self.aux[qi] = coeff;
        self.g_cols[qi] = match self.mode {
            FitMode::Exact => &self.ctx.as_ref().unwrap().gram * &self.aux[qi],
            FitMode::Truncated { .. } => &self.basis().k_r * &self.aux[qi],
        };
        for ti in 0..self.t_eff {
            let t = self.t0 + ti;
            let z = self.series.aux(t - self.gap - qi - 1);
            self.pred[ti] -= &self.contrib_aux[qi][ti];
            self.set_aux_contrib(qi, ti, z);
            self.pred[ti] += &self.contrib_aux[qi][ti];
        }
    }

    /// Closed-form covariance updates: `Sigma_r` from the current residuals
    /// and `Sigma_c`, then `Sigma_c` from the freshly updated `Sigma_r`,
    /// followed by the trace normalization `tr(Sigma_r) = M`.
    pub fn update_sigma(&mut self) -> Result<()> {
        if matches!(self.sigma_mode, SigmaMode::FixedIdentity) {
            return Ok(());
        }
        let diag = matches!(self.sigma_mode, SigmaMode::Diagonal);
        let mut s_r = Mat::zeros(self.m, self.m);
        let mut xt = Mat::zeros(self.m, self.n);
        let mut xtt = Mat::zeros(self.n, self.m);
        let mut w = Mat::zeros(self.m, self.n);
        for ti in 0..self.t_eff {
            let t = self.t0 + ti;
            xt.copy_from(self.series.frame(t));
            xt -= &self.pred[ti];
            xt.transpose_to(&mut xtt);
            w.gemm(1.0, &xt, &self.inv_sigma_c, 0.0);
            s_r.gemm(1.0, &w, &xtt, 1.0);
        }
        s_r /= (self.n * self.t_eff) as f64;
        let s_r = condition_covariance(s_r, diag)?;
        let inv_r = spd_factor(&s_r, 0.0)?.inverse();

        let mut s_c = Mat::zeros(self.n, self.n);
        let mut w2 = Mat::zeros(self.m, self.n);
        for ti in 0..self.t_eff {
            let t = self.t0 + ti;
            xt.copy_from(self.series.frame(t));
            xt -= &self.pred[ti];
            w2.gemm(1.0, &inv_r, &xt, 0.0);
            s_c.gemm_tr(1.0, &xt, &w2, 1.0);
        }
        s_c /= (self.m * self.t_eff) as f64;
        let s_c = condition_covariance(s_c, diag)?;

        // resolve the (c, 1/c) scale ambiguity of the Kronecker factors
        let scale = s_r.trace() / self.m as f64;
        self.sigma_r = s_r / scale;
        self.sigma_c = s_c * scale;
        self.refresh_sigma_caches()
    }

    /// One full alternating cycle; returns the convergence measures.
    pub fn iterate(&mut self) -> Result<IterStats> {
        let a_old = self.a.clone();
        let b_old = self.b.clone();
        let g_old = self.g_cols.clone();
        let sr_old = self.sigma_r.clone();
        let sc_old = self.sigma_c.clone();

        for lag in 1..=self.p {
            self.update_a(lag)?;
            self.update_b(lag)?;
        }
        for lag in 1..=self.q {
            self.update_aux_block(lag)?;
        }
        self.update_sigma()?;

        let mut max_rel = 0.0_f64;
        for pi in 0..self.p {
            let bound = kron_diff_bound(&self.a[pi], &a_old[pi], &self.b[pi], &b_old[pi])?;
            let norm = self.a[pi].norm() * self.b[pi].norm();
            max_rel = max_rel.max(bound / (1.0 + norm));
        }
        for qi in 0..self.q {
            let change = (&self.g_cols[qi] - &g_old[qi]).norm();
            max_rel = max_rel.max(change / (1.0 + self.g_cols[qi].norm()));
        }
        let sig_bound = kron_diff_bound(&self.sigma_r, &sr_old, &self.sigma_c, &sc_old)?;
        let sig_norm = self.sigma_r.norm() * self.sigma_c.norm();
        max_rel = max_rel.max(sig_bound / (1.0 + sig_norm));

        Ok(IterStats {
            converged: max_rel <= self.rel_tol,
            max_rel_change: max_rel,
        })
    }

    /// Analytic gradient norms of the penalized objective for every block.
    pub fn gradient_norms(&self) -> Result<BlockGradients> {
        let mut xt = Mat::zeros(self.m, self.n);
        let inv_t = 1.0 / self.t_eff as f64;

        let mut grad_a = Vec::with_capacity(self.p);
        let mut grad_b = Vec::with_capacity(self.p);
        for pi in 0..self.p {
            let scb = &self.inv_sigma_c * &self.b[pi];
            let srb = &self.inv_sigma_r * &self.a[pi];
            let mut acc_a = Mat::zeros(self.m, self.m);
            let mut acc_b = Mat::zeros(self.n, self.n);
            let mut yt = Mat::zeros(self.n, self.m);
            let mut w = Mat::zeros(self.n, self.m);
            let mut wb = Mat::zeros(self.m, self.n);
            for ti in 0..self.t_eff {
                let t = self.t0 + ti;
                let y = self.series.frame(t - self.gap - pi - 1);
                xt.copy_from(self.series.frame(t));
                xt -= &self.pred[ti];
                y.transpose_to(&mut yt);
                w.gemm(1.0, &scb, &yt, 0.0);
                acc_a.gemm(1.0, &xt, &w, 1.0);
                wb.gemm(1.0, &srb, y, 0.0);
                acc_b.gemm_tr(1.0, &xt, &wb, 1.0);
            }
            grad_a.push((&self.inv_sigma_r * acc_a * inv_t).norm());
            grad_b.push((&self.inv_sigma_c * acc_b * inv_t).norm());
        }

        let mut grad_aux = Vec::with_capacity(self.q);
        for qi in 0..self.q {
            let rows = match self.mode {
                FitMode::Exact => self.s,
                FitMode::Truncated { .. } => self.basis().rank(),
            };
            let mut acc = Mat::zeros(rows, self.d);
            for ti in 0..self.t_eff {
                let t = self.t0 + ti;
                let z = self.series.aux(t - self.gap - qi - 1);
                xt.copy_from(self.series.frame(t));
                xt -= &self.pred[ti];
                let y = &self.inv_sigma_r * &xt * &self.inv_sigma_c;
                let yv = vec_mat(&y);
                let proj: Vector = match self.mode {
                    FitMode::Exact => &self.ctx.as_ref().unwrap().gram * &yv,
                    FitMode::Truncated { .. } => self.basis().k_r.tr_mul(&yv),
                };
                for dd in 0..self.d {
                    for i in 0..rows {
                        acc[(i, dd)] -= z[dd] * proj[i];
                    }
                }
            }
            acc *= inv_t;
            match self.mode {
                FitMode::Exact => {
                    let pen = &self.ctx.as_ref().unwrap().gram * &self.aux[qi] * self.lambda;
                    acc += pen;
                }
                FitMode::Truncated { .. } => {
                    let lam = self.basis().lambda_r.clone();
                    for dd in 0..self.d {
                        for i in 0..rows {
                            acc[(i, dd)] += self.lambda * self.aux[qi][(i, dd)] / lam[i];
                        }
                    }
                }
            }
            grad_aux.push(acc.norm());
        }

        // Sigma gradients vanish at the conditional minimizers
        let mut s_r = Mat::zeros(self.m, self.m);
        let mut s_c = Mat::zeros(self.n, self.n);
        let mut xtt = Mat::zeros(self.n, self.m);
        let mut w = Mat::zeros(self.m, self.n);
        for ti in 0..self.t_eff {
            let t = self.t0 + ti;
            xt.copy_from(self.series.frame(t));
            xt -= &self.pred[ti];
            xt.transpose_to(&mut xtt);
            w.gemm(1.0, &xt, &self.inv_sigma_c, 0.0);
            s_r.gemm(1.0, &w, &xtt, 1.0);
            w.gemm(1.0, &self.inv_sigma_r, &xt, 0.0);
            s_c.gemm_tr(1.0, &xt, &w, 1.0);
        }
        s_r *= inv_t;
        s_c *= inv_t;
        let grad_sr = (&self.inv_sigma_r * self.n as f64
            - &self.inv_sigma_r * &s_r * &self.inv_sigma_r)
            .norm()
            * 0.5;
        let grad_sc = (&self.inv_sigma_c * self.m as f64
            - &self.inv_sigma_c * &s_c * &self.inv_sigma_c)
            .norm()
            * 0.5;

        Ok(BlockGradients {
            a: grad_a,
            b: grad_b,
            aux: grad_aux,
            sigma_r: grad_sr,
            sigma_c: grad_sc,
        })
    }

    /// Build the (un-normalized) model at the current state.
    pub fn to_model(&self) -> Result<MaracModel> {
        let aux = match self.mode {
            FitMode::Exact => AuxCoeffs::Exact { gamma: self.aux.clone() },
            FitMode::Truncated { .. } => AuxCoeffs::Truncated { theta: self.aux.clone() },
        };
        MaracModel::new(
            self.a.clone(),
            self.b.clone(),
            aux,
            self.sigma_r.clone(),
            self.sigma_c.clone(),
            self.lambda,
            self.gap,
            matches!(self.sigma_mode, SigmaMode::Diagonal),
            self.ctx.clone(),
        )
    }

    // --- test and finite-difference hooks -------------------------------

    pub fn set_a(&mut self, lag: usize, value: Mat) {
        self.a[lag - 1] = value;
        self.refresh_ar_contrib(lag - 1);
    }

    pub fn set_b(&mut self, lag: usize, value: Mat) {
        self.b[lag - 1] = value;
        self.refresh_ar_contrib(lag - 1);
    }

    pub fn set_aux_coeff(&mut self, lag: usize, value: Mat) {
        self.install_aux(lag - 1, value);
    }

    pub fn set_sigma(&mut self, sigma_r: Mat, sigma_c: Mat) -> Result<()> {
        self.sigma_r = sigma_r;
        self.sigma_c = sigma_c;
        self.refresh_sigma_caches()
    }
}

/// Symmetrize and, if needed, eigenvalue-floor a covariance candidate so it
/// factorizes. Floors at `1e-10 * mean diagonal` (absolute 1e-10 fallback for
/// degenerate all-zero residuals).
fn condition_covariance(mut s: Mat, diag: bool) -> Result<Mat> {
    let k = s.nrows();
    let mean_diag = s.diagonal().iter().map(|v| v.abs()).sum::<f64>() / k as f64;
    let floor = if mean_diag > 0.0 { 1e-10 * mean_diag } else { 1e-10 };
    if diag {
        for i in 0..k {
            for j in 0..k {
                if i != j {
                    s[(i, j)] = 0.0;
                }
            }
            if s[(i, i)] < floor {
                s[(i, i)] = floor;
            }
        }
        return Ok(s);
    }
    // exact symmetry for the factorization
    for i in 0..k {
        for j in (i + 1)..k {
            let avg = 0.5 * (s[(i, j)] + s[(j, i)]);
            s[(i, j)] = avg;
            s[(j, i)] = avg;
        }
    }
    if nalgebra::Cholesky::new(s.clone()).is_some() {
        return Ok(s);
    }
    let eig = nalgebra::SymmetricEigen::new(s);
    let mut vals = eig.eigenvalues;
    for v in vals.iter_mut() {
        if *v < floor {
            *v = floor;
        }
    }
    let rebuilt = &eig.eigenvectors * Mat::from_diagonal(&vals) * eig.eigenvectors.transpose();
    let mut rebuilt = rebuilt;
    for i in 0..k {
        for j in (i + 1)..k {
            let avg = 0.5 * (rebuilt[(i, j)] + rebuilt[(j, i)]);
            rebuilt[(i, j)] = avg;
            rebuilt[(j, i)] = avg;
        }
    }
    Ok(rebuilt)
}

/// Scale each `(A_p, B_p)` pair by `c = ||A_p||_F * sign(tr A_p)` so that
/// `||A_p||_F = 1` and `tr(A_p) >= 0`, leaving `kron(B_p, A_p)` unchanged.
pub fn enforce_identifiability(model: &mut MaracModel) -> Result<()> {
    for pi in 0..model.p {
        let norm = model.a[pi].norm();
        if norm == 0.0 {
            return Err(MaracError::Contract(format!(
                "A_{} is exactly zero; the scale constraint is undefined",
                pi + 1
            )));
        }
        let sign = if model.a[pi].trace() < 0.0 { -1.0 } else { 1.0 };
        let c = norm * sign;
        model.a[pi] /= c;
        model.b[pi] *= c;
    }
    Ok(())
}

/// Fit a MARAC(P, Q) model by alternating minimization.
pub fn fit(
    series: &MatrixSeries,
    p: usize,
    q: usize,
    ctx: Option<&Arc<KernelContext>>,
    opts: &FitOptions,
) -> Result<(MaracModel, FitReport)> {
    let start = Instant::now();
    let mut state = FitState::new(series, p, q, ctx.cloned(), opts)?;

    let mut objective_trace = Vec::new();
    let mut block_change_trace = Vec::new();
    let mut converged = false;
    let mut iters_run = 0;
    let mut consecutive_increases = 0;
    let mut prev_obj = f64::INFINITY;
    for _ in 0..opts.max_iters {
        let stats = state.iterate()?;
        iters_run += 1;
        let obj = state.objective();
        if obj.is_finite() && obj > prev_obj + 1e-6 {
            consecutive_increases += 1;
            if consecutive_increases >= 2 {
                return Err(MaracError::Internal(format!(
                    "objective increased from {prev_obj} to {obj} on consecutive iterations; \
                     block updates are exact minimizers so this indicates a bug or numerical \
                     breakdown"
                )));
            }
        } else {
            consecutive_increases = 0;
        }
        prev_obj = obj;
        objective_trace.push(obj);
        block_change_trace.push(stats.max_rel_change);
        if stats.converged {
            converged = true;
            break;
        }
    }

    let mut model = state.to_model()?;
    enforce_identifiability(&mut model)?;
    let gradients = state.gradient_norms()?;
    let (df_total, df_aux) = crate::selection::effective_df_from(&model, series, state.t0)?;
    let report = FitReport {
        objective_trace,
        block_change_trace,
        iters_run,
        converged,
        block_gradient_norms: gradients,
        df_total,
        df_aux,
        elapsed_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}

/// Outcome of a lambda sweep.
#[derive(Debug, Clone)]
pub struct LambdaTuning {
    pub best_lambda: f64,
    /// `(lambda, validation RMSE)` in grid order.
    pub rmse_by_lambda: Vec<(f64, f64)>,
    pub best_model: MaracModel,
    pub best_report: FitReport,
}

/// Tune the penalty weight on a chronological train/validation split: fit on
/// the training window for each lambda (warm-starting from the previous
/// solution), score one-step prediction RMSE on the validation window, and
/// return the argmin with ties broken toward the larger lambda.
pub fn tune_lambda(
    series: &MatrixSeries,
    p: usize,
    q: usize,
    ctx: Option<&Arc<KernelContext>>,
    lambda_grid: &[f64],
    train_end: usize,
    val_end: usize,
    base_opts: &FitOptions,
) -> Result<LambdaTuning> {
    if lambda_grid.is_empty() {
        return Err(MaracError::Contract("lambda grid is empty".into()));
    }
    if train_end == 0 || train_end >= val_end || val_end > series.len() {
        return Err(MaracError::InsufficientData(format!(
            "invalid train/validation split {train_end}/{val_end} for T = {}",
            series.len()
        )));
    }
    let train = series.window(0..train_end)?;
    let mut rmse_by_lambda = Vec::with_capacity(lambda_grid.len());
    let mut best: Option<(f64, f64, MaracModel, FitReport)> = None;
    let mut warm: Option<MaracModel> = None;
    for &lambda in lambda_grid {
        let mut opts = base_opts.clone();
        opts.lambda = lambda;
        opts.warm_start = warm.take();
        let (model, report) = fit(&train, p, q, ctx, &opts)?;
        let rmse = crate::metrics::forecast_rmse(&model, series, train_end..val_end)?;
        rmse_by_lambda.push((lambda, rmse));
        let better = match &best {
            None => true,
            Some((best_rmse, best_lambda, _, _)) => {
                rmse < *best_rmse || (rmse == *best_rmse && lambda > *best_lambda)
            }
        };
        if better {
            best = Some((rmse, lambda, model.clone(), report));
        }
        warm = Some(model);
    }
    let (_, best_lambda, best_model, best_report) = best.unwrap();
    Ok(LambdaTuning {
        best_lambda,
        rmse_by_lambda,
        best_model,
        best_report,
    })
}
