//! Synthetic MARAC(P, Q) data generation: banded stationary AR coefficients,
//! Gaussian-process draws of the smooth functional coefficients on the grid,
//! a VAR(1) auxiliary series, Kronecker-structured Gaussian noise, burn-in
//! from zero initial frames, and ground-truth bundles for evaluation.

use std::sync::Arc;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data_io::SplitSpec;
use crate::error::{MaracError, Result};
use crate::kernels::{GridConfig, KernelContext};
use crate::linalg::{kron, spd_factor, tvp, unvec, Mat, Tensor3, Vector};
use crate::model::MatrixSeries;
use crate::stationarity::{check_stationarity, companion_radius, DEFAULT_MARGIN};

/// Noise-covariance factor specification; diagonals stay at unity for the
/// banded form so the per-entry noise variance is 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SigmaSpec {
    Identity,
    Diagonal { diag: Vec<f64> },
    Banded { band: usize, off_diag: f64 },
}

impl Default for SigmaSpec {
    fn default() -> Self {
        SigmaSpec::Banded { band: 1, off_diag: 0.3 }
    }
}

impl SigmaSpec {
    pub fn build(&self, size: usize) -> Result<Mat> {
        let mat = match self {
            SigmaSpec::Identity => Mat::identity(size, size),
            SigmaSpec::Diagonal { diag } => {
                if diag.len() != size {
                    return Err(MaracError::Shape(format!(
                        "diagonal spec has {} entries, expected {size}",
                        diag.len()
                    )));
                }
                if diag.iter().any(|v| *v <= 0.0) {
                    return Err(MaracError::Contract("diagonal entries must be positive".into()));
                }
                Mat::from_diagonal(&Vector::from_column_slice(diag))
            }
            SigmaSpec::Banded { band, off_diag } => {
                let mut m = Mat::identity(size, size);
                for i in 0..size {
                    for j in 0..size {
                        let dist = i.abs_diff(j);
                        if dist > 0 && dist <= *band {
                            m[(i, j)] = *off_diag;
                        }
                    }
                }
                m
            }
        };
        // the factor must be SPD for the Cholesky noise sampler
        spd_factor(&mat, 0.0).map_err(|_| {
            MaracError::Contract("noise covariance spec is not positive definite".into())
        })?;
        Ok(mat)
    }
}

/// Simulation configuration (serializable; the CLI's `simulate --config`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    pub m: usize,
    pub n: usize,
    pub d: usize,
    pub p: usize,
    pub q: usize,
    pub t_train: usize,
    pub t_val: usize,
    pub t_test: usize,
    #[serde(default = "default_band")]
    pub band_width: usize,
    #[serde(default = "default_radius")]
    pub target_radius: f64,
    /// VAR(1) coefficient for the auxiliary series: `aux_rho * I_D`.
    #[serde(default = "default_aux_rho")]
    pub aux_rho: f64,
    #[serde(default)]
    pub noise_r: SigmaSpec,
    #[serde(default)]
    pub noise_c: SigmaSpec,
    pub grid: Option<GridConfig>,
    pub seed: u64,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
}

fn default_band() -> usize {
    2
}
fn default_radius() -> f64 {
    0.8
}
fn default_aux_rho() -> f64 {
    0.5
}
fn default_burn_in() -> usize {
    200
}

impl SimConfig {
    pub fn new(m: usize, n: usize, d: usize, p: usize, q: usize, seed: u64) -> Self {
        Self {
            m,
            n,
            d,
            p,
            q,
            t_train: 1000,
            t_val: 500,
            t_test: 500,
            band_width: 2,
            target_radius: 0.8,
            aux_rho: 0.5,
            noise_r: SigmaSpec::default(),
            noise_c: SigmaSpec::default(),
            grid: None,
            seed,
            burn_in: 200,
        }
    }

    pub fn t_total(&self) -> usize {
        self.t_train + self.t_val + self.t_test
    }

    fn grid_config(&self) -> GridConfig {
        self.grid
            .clone()
            .unwrap_or_else(|| GridConfig::sphere_lebedev(self.m, self.n, 3.0))
    }
}

/// Ground-truth coefficients behind a simulated series.
#[derive(Debug, Clone)]
pub struct SimTruth {
    pub a: Vec<Mat>,
    pub b: Vec<Mat>,
    pub g: Vec<Tensor3>,
    /// Raw GP draws: the discrete `g_{q,d}` evaluations, `Q*D` vectors of
    /// length S in (q, d) order.
    pub g_values: Vec<Vector>,
    pub sigma_r: Mat,
    pub sigma_c: Mat,
    pub c1: Mat,
}

/// A simulated dataset: the series with split indices, the generating truth,
/// and the kernel context used for the smooth coefficients.
#[derive(Debug, Clone)]
pub struct SimBundle {
    pub series: MatrixSeries,
    pub split: SplitSpec,
    pub truth: SimTruth,
    pub ctx: Arc<KernelContext>,
}

/// Symmetric banded matrix with standard-normal in-band entries, rescaled so
/// its spectral radius equals `target`.
pub fn gen_banded_stationary(size: usize, band: usize, target: f64, seed: u64) -> Result<Mat> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gen_banded_stationary_with(size, band, target, &mut rng)
}

pub fn gen_banded_stationary_with(
    size: usize,
    band: usize,
    target: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Mat> {
    if band >= size {
        return Err(MaracError::Contract(format!(
            "band width {band} must be below the matrix size {size}"
        )));
    }
    let mut m = Mat::zeros(size, size);
    for i in 0..size {
        for j in i..size {
            if j - i <= band {
                let v: f64 = rng.sample(StandardNormal);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
    }
    // symmetric, so the spectral radius is the largest |eigenvalue|
    let radius = crate::linalg::spectral_radius(&m);
    if radius == 0.0 {
        // essentially impossible with continuous entries; regenerate via recursion
        return gen_banded_stationary_with(size, band, target, rng);
    }
    Ok(m * (target / radius))
}

/// Draw `count` functions from a GP with the context's kernel as covariance:
/// each is `chol(K) * standard normal`, evaluated at the S grid points.
pub fn gen_gp_functions(ctx: &KernelContext, count: usize, seed: u64) -> Result<Vec<Vector>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gen_gp_functions_with(ctx, count, &mut rng)
}

pub fn gen_gp_functions_with(
    ctx: &KernelContext,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vector>> {
    let chol = spd_factor(&ctx.gram, 0.0)?;
    let l = chol.l();
    let s = ctx.s();
    Ok((0..count)
        .map(|_| {
            let z = Vector::from_fn(s, |_, _| rng.sample(StandardNormal));
            &l * z
        })
        .collect())
}

/// Simulate a VAR(1) series `z_t = c1 z_{t-1} + nu_t` with standard-normal
/// innovations, discarding `burn_in` initial steps.
pub fn gen_var1(d: usize, t_total: usize, c1: &Mat, seed: u64, burn_in: usize) -> Result<Vec<Vector>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gen_var1_with(d, t_total, c1, burn_in, &mut rng)
}

pub fn gen_var1_with(
    d: usize,
    t_total: usize,
    c1: &Mat,
    burn_in: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vector>> {
    if c1.shape() != (d, d) {
        return Err(MaracError::Shape(format!(
            "VAR(1) coefficient is {:?}, expected {d}x{d}",
            c1.shape()
        )));
    }
    if crate::linalg::spectral_radius(c1) >= 1.0 {
        return Err(MaracError::Contract(
            "VAR(1) coefficient has spectral radius >= 1".into(),
        ));
    }
    let mut z = Vector::zeros(d);
    let mut out = Vec::with_capacity(t_total);
    for step in 0..burn_in + t_total {
        let nu = Vector::from_fn(d, |_, _| rng.sample(StandardNormal));
        z = c1 * &z + nu;
        if step >= burn_in {
            out.push(z.clone());
        }
    }
    Ok(out)
}

/// One draw of Kronecker-structured noise `E = L_r Z L_c'` so that `vec(E)`
/// has covariance `Sigma_c (x) Sigma_r`.
pub fn sample_noise(sigma_r: &Mat, sigma_c: &Mat, seed: u64) -> Result<Mat> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l_r = spd_factor(sigma_r, 0.0)?.l();
    let l_c = spd_factor(sigma_c, 0.0)?.l();
    Ok(sample_noise_with(&l_r, &l_c, &mut rng))
}

/// Noise draw from pre-factored Cholesky factors (the simulation loop keeps
/// the factors around).
pub fn sample_noise_with(l_r: &Mat, l_c: &Mat, rng: &mut ChaCha8Rng) -> Mat {
    let (m, n) = (l_r.nrows(), l_c.nrows());
    let z = Mat::from_fn(m, n, |_, _| rng.sample(StandardNormal));
    l_r * z * l_c.transpose()
}

/// Build the ground-truth coefficient set for a configuration.
fn build_truth(config: &SimConfig, ctx: &Arc<KernelContext>, rng: &mut ChaCha8Rng) -> Result<SimTruth> {
    let per_factor = config.target_radius.sqrt();
    let mut a: Vec<Mat> = Vec::with_capacity(config.p);
    let mut b: Vec<Mat> = Vec::with_capacity(config.p);
    for _ in 0..config.p {
        a.push(gen_banded_stationary_with(config.m, config.band_width.min(config.m - 1), per_factor, rng)?);
        b.push(gen_banded_stationary_with(config.n, config.band_width.min(config.n - 1), per_factor, rng)?);
    }
    if config.p > 1 {
        // share the stationarity budget across lags: bisect a common factor
        // on the B side until the companion radius hits the target
        let kron_blocks: Vec<Mat> = (0..config.p).map(|p| kron(&b[p], &a[p])).collect();
        let radius_at = |c: f64| -> Result<f64> {
            let scaled: Vec<Mat> = kron_blocks.iter().map(|k| k * c).collect();
            companion_radius(&scaled)
        };
        let mut lo = 0.0;
        let mut hi = 1.0;
        while radius_at(hi)? < config.target_radius {
            hi *= 2.0;
            if hi > 1e6 {
                return Err(MaracError::Internal("stationarity bisection diverged".into()));
            }
        }
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if radius_at(mid)? < config.target_radius {
                lo = mid;
            } else {
                hi = mid;
            }
            if (radius_at(0.5 * (lo + hi))? - config.target_radius).abs() <= 1e-6 {
                break;
            }
        }
        let c = 0.5 * (lo + hi);
        for bp in b.iter_mut() {
            *bp *= c;
        }
    }

    let g_values = gen_gp_functions_with(ctx, config.q * config.d, rng)?;
    let mut g = Vec::with_capacity(config.q);
    for qi in 0..config.q {
        let slices: Result<Vec<Mat>> = (0..config.d)
            .map(|dd| unvec(&g_values[qi * config.d + dd], config.m, config.n))
            .collect();
        g.push(Tensor3::new(slices?)?);
    }

    let sigma_r = config.noise_r.build(config.m)?;
    let sigma_c = config.noise_c.build(config.n)?;
    let c1 = Mat::identity(config.d, config.d) * config.aux_rho;
    Ok(SimTruth {
        a,
        b,
        g,
        g_values,
        sigma_r,
        sigma_c,
        c1,
    })
}

/// Generate a complete MARAC(P, Q) dataset: verifies joint stationarity,
/// iterates the recursion from zero initial frames through
/// `burn_in + t_total` steps, discards the burn-in, and attaches the
/// chronological train/validation/test split.
pub fn simulate(config: &SimConfig) -> Result<SimBundle> {
    if config.target_radius >= 1.0 {
        return Err(MaracError::Contract("target radius must be below 1".into()));
    }
    if config.m == 0 || config.n == 0 || config.d == 0 || config.t_total() == 0 {
        return Err(MaracError::Contract("dimensions must be positive".into()));
    }
    let grid_cfg = config.grid_config();
    if grid_cfg.m != config.m || grid_cfg.n != config.n {
        return Err(MaracError::Contract("grid shape must match the matrix shape".into()));
    }
    let ctx = Arc::new(grid_cfg.build_context()?);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let truth = build_truth(config, &ctx, &mut rng)?;

    let pairs: Vec<(Mat, Mat)> = truth
        .a
        .iter()
        .cloned()
        .zip(truth.b.iter().cloned())
        .collect();
    let verdict = check_stationarity(&pairs, std::slice::from_ref(&truth.c1), DEFAULT_MARGIN)?;
    if !verdict.stationary {
        return Err(MaracError::NonStationary(format!(
            "simulated coefficients have radii {:.6} / {:.6}",
            verdict.marac_radius, verdict.aux_radius
        )));
    }

    let horizon = config.burn_in + config.t_total();
    let z_all = gen_var1_with(config.d, horizon, &truth.c1, config.burn_in, &mut rng)?;

    let l_r = spd_factor(&truth.sigma_r, 0.0)?.l();
    let l_c = spd_factor(&truth.sigma_c, 0.0)?.l();
    let mut frames: Vec<Mat> = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let mut x = sample_noise_with(&l_r, &l_c, &mut rng);
        for (p, (ap, bp)) in truth.a.iter().zip(&truth.b).enumerate() {
            if t >= p + 1 {
                x += ap * &frames[t - p - 1] * bp.transpose();
            }
        }
        for (qi, g) in truth.g.iter().enumerate() {
            if t >= qi + 1 {
                x += tvp(g, &z_all[t - qi - 1])?;
            }
        }
        frames.push(x);
    }
    let frames = frames.split_off(config.burn_in);
    let z = z_all[config.burn_in..].to_vec();
    let series = MatrixSeries::new(frames, z)?;
    let split = SplitSpec {
        train_end: config.t_train,
        val_end: config.t_train + config.t_val,
    };
    split.validate(series.len())?;
    Ok(SimBundle {
        series,
        split,
        truth,
        ctx,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{GridSpec, KernelSpec};
    use crate::metrics::param_rmse;
    use approx::assert_relative_eq;

    fn small_ctx() -> KernelContext {
        KernelContext::new(GridSpec::sphere(3, 3).unwrap(), KernelSpec::Lebedev { eta: 3.0 })
            .unwrap()
    }

    #[test]
    fn banded_matrix_structure_and_radius() {
        let m = gen_banded_stationary(20, 2, 0.7, 42).unwrap();
        for i in 0..20usize {
            for j in 0..20usize {
                if i.abs_diff(j) > 2 {
                    assert_eq!(m[(i, j)], 0.0, "entry ({i},{j}) outside the band");
                }
            }
        }
        assert_relative_eq!(crate::linalg::spectral_radius(&m), 0.7, epsilon = 1e-6);
        assert_eq!(m, m.transpose());

        // band 0 gives a diagonal matrix with the requested radius
        let d = gen_banded_stationary(5, 0, 0.9, 7).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                if i != j {
                    assert_eq!(d[(i, j)], 0.0);
                }
            }
        }
        assert_relative_eq!(crate::linalg::spectral_radius(&d), 0.9, epsilon = 1e-9);
    }

    #[test]
    fn gp_draws_reproducible_and_match_kernel_covariance() {
        let ctx = small_ctx();
        let a = gen_gp_functions(&ctx, 3, 11).unwrap();
        let b = gen_gp_functions(&ctx, 3, 11).unwrap();
        assert_eq!(a, b);

        // Monte-Carlo covariance at two grid points
        let draws = gen_gp_functions(&ctx, 2000, 13).unwrap();
        let (u, v) = (0, 5);
        let mut cov = 0.0;
        let mut var_u = 0.0;
        for g in &draws {
            cov += g[u] * g[v];
            var_u += g[u] * g[u];
        }
        cov /= draws.len() as f64;
        var_u /= draws.len() as f64;
        assert!(
            (cov - ctx.gram[(u, v)]).abs() <= 0.1 * ctx.gram[(0, 0)].abs().max(ctx.gram[(u, v)].abs()),
            "cov {cov} vs {}",
            ctx.gram[(u, v)]
        );
        assert!((var_u - ctx.gram[(u, u)]).abs() <= 0.1 * ctx.gram[(u, u)]);
    }

    #[test]
    fn var1_white_noise_and_reproducibility() {
        let c0 = Mat::zeros(2, 2);
        let z = gen_var1(2, 4000, &c0, 3, 100).unwrap();
        // lag-1 sample autocorrelation of a white series stays near zero
        let mean: f64 = z.iter().map(|v| v[0]).sum::<f64>() / z.len() as f64;
        let var: f64 = z.iter().map(|v| (v[0] - mean).powi(2)).sum::<f64>() / z.len() as f64;
        let acov: f64 = z
            .windows(2)
            .map(|w| (w[0][0] - mean) * (w[1][0] - mean))
            .sum::<f64>()
            / (z.len() - 1) as f64;
        assert!((acov / var).abs() <= 3.0 / (z.len() as f64).sqrt());

        let z2 = gen_var1(2, 4000, &c0, 3, 100).unwrap();
        assert_eq!(z, z2);

        // near-unit-root inflation
        let c = Mat::identity(1, 1) * 0.99;
        let z = gen_var1(1, 4000, &c, 5, 500).unwrap();
        let var: f64 = z.iter().map(|v| v[0] * v[0]).sum::<f64>() / z.len() as f64;
        assert!(var > 5.0, "near-unit-root variance {var}");

        let unstable = Mat::identity(1, 1) * 1.01;
        assert!(gen_var1(1, 10, &unstable, 0, 0).is_err());
    }

    #[test]
    fn noise_covariance_monte_carlo() {
        let sigma_r = Mat::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 1.0]);
        let sigma_c = Mat::from_row_slice(2, 2, &[1.0, -0.2, -0.2, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let l_r = spd_factor(&sigma_r, 0.0).unwrap().l();
        let l_c = spd_factor(&sigma_c, 0.0).unwrap().l();
        let want = kron(&sigma_c, &sigma_r);
        let mut acc = Mat::zeros(4, 4);
        let n_draws = 5000;
        for _ in 0..n_draws {
            let e = sample_noise_with(&l_r, &l_c, &mut rng);
            let v = crate::linalg::vec_mat(&e);
            acc.ger(1.0, &v, &v, 1.0);
        }
        acc /= n_draws as f64;
        for i in 0..4 {
            for j in 0..4 {
                assert!(
                    (acc[(i, j)] - want[(i, j)]).abs() <= 0.1,
                    "cov entry ({i},{j}): {} vs {}",
                    acc[(i, j)],
                    want[(i, j)]
                );
            }
        }
        // determinism under a fixed seed
        let e1 = sample_noise(&sigma_r, &sigma_c, 23).unwrap();
        let e2 = sample_noise(&sigma_r, &sigma_c, 23).unwrap();
        assert_eq!(e1, e2);
    }

    #[test]
    fn simulate_produces_stationary_zero_mean_series() {
        let mut config = SimConfig::new(3, 3, 2, 1, 1, 99);
        config.t_train = 2000;
        config.t_val = 200;
        config.t_test = 200;
        let bundle = simulate(&config).unwrap();
        assert_eq!(bundle.series.len(), 2400);
        assert_eq!(bundle.split.train_end, 2000);
        assert_eq!(bundle.split.val_end, 2200);

        // the emitted truth passes the stationarity check by construction
        let pairs: Vec<(Mat, Mat)> = bundle
            .truth
            .a
            .iter()
            .cloned()
            .zip(bundle.truth.b.iter().cloned())
            .collect();
        let v = check_stationarity(&pairs, &[bundle.truth.c1.clone()], DEFAULT_MARGIN).unwrap();
        assert!(v.stationary);

        // sample mean of each entry is near zero
        let t = bundle.series.len() as f64;
        let mut mean = Mat::zeros(3, 3);
        for f in bundle.series.frames() {
            mean += f;
        }
        mean /= t;
        let sd = bundle
            .series
            .frames()
            .iter()
            .map(|f| f.norm_squared())
            .sum::<f64>()
            .sqrt()
            / t;
        for v in mean.iter() {
            assert!(v.abs() <= 4.0 * sd / t.sqrt() + 0.25, "mean entry {v}");
        }

        // second moments roughly time-invariant between the two halves
        let half = bundle.series.len() / 2;
        let var_of = |range: std::ops::Range<usize>| -> f64 {
            let mut acc = 0.0;
            let len = range.len();
            for t in range {
                acc += bundle.series.frame(t)[(1, 1)].powi(2);
            }
            acc / len as f64
        };
        let v1 = var_of(0..half);
        let v2 = var_of(half..bundle.series.len());
        assert!(
            (v1 - v2).abs() <= 0.2 * v1.max(v2),
            "halves differ: {v1} vs {v2}"
        );
    }

    #[test]
    fn oracle_prediction_rmse_near_unity() {
        // with the true coefficients, one-step prediction error is exactly
        // the unit-variance noise
        let mut config = SimConfig::new(4, 4, 2, 1, 1, 7);
        config.t_train = 500;
        config.t_val = 100;
        config.t_test = 2000;
        let bundle = simulate(&config).unwrap();
        let truth_model = crate::model::MaracModel::new(
            bundle.truth.a.clone(),
            bundle.truth.b.clone(),
            crate::model::AuxCoeffs::Exact {
                gamma: bundle
                    .truth
                    .g
                    .iter()
                    .map(|g| {
                        // invert K to express the truth in representer form
                        let s = bundle.ctx.s();
                        let mut cols = Mat::zeros(s, 2);
                        for dd in 0..2 {
                            let v = crate::linalg::vec_mat(g.slice(dd));
                            let sol = spd_factor(&bundle.ctx.gram, 0.0)
                                .unwrap()
                                .solve(&v);
                            cols.set_column(dd, &sol);
                        }
                        cols
                    })
                    .collect(),
            },
            bundle.truth.sigma_r.clone(),
            bundle.truth.sigma_c.clone(),
            0.0,
            0,
            false,
            Some(bundle.ctx.clone()),
        )
        .unwrap();
        let rmse = crate::metrics::forecast_rmse(
            &truth_model,
            &bundle.series,
            bundle.split.val_end..bundle.series.len(),
        )
        .unwrap();
        assert!((rmse - 1.0).abs() <= 0.05, "oracle RMSE {rmse}");
    }

    #[test]
    fn rmse_helper_hand_check() {
        let est = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let truth = Mat::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 0.0]);
        assert_relative_eq!(param_rmse(&est, &truth), (2.0_f64 / 4.0).sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn two_lag_truth_hits_target_radius() {
        let mut config = SimConfig::new(4, 4, 1, 2, 0, 3);
        config.t_train = 50;
        config.t_val = 10;
        config.t_test = 10;
        let bundle = simulate(&config).unwrap();
        let blocks: Vec<Mat> = bundle
            .truth
            .a
            .iter()
            .zip(&bundle.truth.b)
            .map(|(a, b)| kron(b, a))
            .collect();
        let radius = companion_radius(&blocks).unwrap();
        assert!((radius - 0.8).abs() <= 1e-5, "companion radius {radius}");
    }
}
