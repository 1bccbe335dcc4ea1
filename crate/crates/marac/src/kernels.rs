//! Spatial grids, kernel evaluation, Gram matrices, and truncated Mercer
//! eigenbases.
//!
//! Two grid/kernel families are supported: a spherical lat-lon grid with the
//! Lebedev kernel (whose Mercer eigenfunctions are the real spherical
//! harmonics), and a planar unit-square grid with a separable product of 1-D
//! kernels (whose Gram matrix factors as a Kronecker product).

use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};

use crate::error::{MaracError, Result};
use crate::linalg::{Mat, Vector};

/// Grid geometry: which domain the matrix entries live on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    PlanarUnitSquare,
    SphereLatlon,
}

/// Spatial locations of the entries of an M x N matrix.
///
/// Location `u = i + j*M` corresponds to matrix entry `(i, j)`. Planar
/// coordinates are `(x, y)` in the unit square; spherical coordinates are
/// `(theta, phi)` in degrees with polar theta in (0, 180) and azimuth phi in
/// [0, 360).
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub kind: GridKind,
    pub m: usize,
    pub n: usize,
    locations: Vec<[f64; 2]>,
}

impl GridSpec {
    /// Planar grid with rows at `i/(M-1)` and columns at `j/(N-1)` in [0,1].
    pub fn planar(m: usize, n: usize) -> Result<Self> {
        if m == 0 || n == 0 {
            return Err(MaracError::Contract("grid dims must be positive".into()));
        }
        let coord = |i: usize, k: usize| {
            if k == 1 {
                0.5
            } else {
                i as f64 / (k - 1) as f64
            }
        };
        let mut locations = Vec::with_capacity(m * n);
        for j in 0..n {
            for i in 0..m {
                locations.push([coord(i, m), coord(j, n)]);
            }
        }
        Ok(Self {
            kind: GridKind::PlanarUnitSquare,
            m,
            n,
            locations,
        })
    }

    /// Spherical grid: theta at cell midpoints in (0, 180) so the poles are
    /// excluded (coincident pole points make the Gram matrix singular), phi
    /// evenly spaced in [0, 360).
    pub fn sphere(m: usize, n: usize) -> Result<Self> {
        if m == 0 || n == 0 {
            return Err(MaracError::Contract("grid dims must be positive".into()));
        }
        let mut locations = Vec::with_capacity(m * n);
        for j in 0..n {
            for i in 0..m {
                let theta = 180.0 * (i as f64 + 0.5) / m as f64;
                let phi = 360.0 * j as f64 / n as f64;
                locations.push([theta, phi]);
            }
        }
        Ok(Self {
            kind: GridKind::SphereLatlon,
            m,
            n,
            locations,
        })
    }

    /// Number of grid points S = M*N.
    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    /// Location of point `u = i + j*M`.
    pub fn location(&self, u: usize) -> [f64; 2] {
        self.locations[u]
    }

    /// Unit Euclidean vector of point `u` (sphere grids only).
    pub fn unit_vector(&self, u: usize) -> [f64; 3] {
        let [theta, phi] = self.locations[u];
        sphere_unit_vector(theta, phi)
    }
}

/// (theta, phi) in degrees to a unit vector
/// `(sin t cos p, sin t sin p, cos t)`.
pub fn sphere_unit_vector(theta_deg: f64, phi_deg: f64) -> [f64; 3] {
    let t = theta_deg.to_radians();
    let p = phi_deg.to_radians();
    [t.sin() * p.cos(), t.sin() * p.sin(), t.cos()]
}

/// One-dimensional kernels on [0, 1] used to build separable planar kernels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "family")]
pub enum Kernel1d {
    /// `k(u, s) = exp(-|u - s| / lengthscale)`; positive definite on [0, 1]
    /// with polynomially decaying spectrum.
    Exponential { lengthscale: f64 },
}

impl Default for Kernel1d {
    fn default() -> Self {
        Kernel1d::Exponential { lengthscale: 0.3 }
    }
}

impl Kernel1d {
    pub fn eval(&self, u: f64, s: f64) -> f64 {
        match self {
            Kernel1d::Exponential { lengthscale } => (-(u - s).abs() / lengthscale).exp(),
        }
    }
}

/// Spatial kernel attached to a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "family")]
pub enum KernelSpec {
    /// Isotropic kernel on the unit sphere with spherical-harmonic
    /// eigenfunctions.
    Lebedev { eta: f64 },
    /// Separable planar kernel `k((u,v),(s,t)) = k1(u,s) * k2(v,t)`; the Gram
    /// matrix equals `kron(K2, K1)`.
    PlanarProduct { row: Kernel1d, col: Kernel1d },
}

impl KernelSpec {
    pub fn default_lebedev() -> Self {
        KernelSpec::Lebedev { eta: 3.0 }
    }

    pub fn default_planar() -> Self {
        KernelSpec::PlanarProduct {
            row: Kernel1d::default(),
            col: Kernel1d::default(),
        }
    }

    fn eval(&self, grid: &GridSpec, u1: usize, u2: usize) -> f64 {
        match self {
            KernelSpec::Lebedev { eta } => {
                lebedev_eval(&grid.unit_vector(u1), &grid.unit_vector(u2), *eta)
            }
            KernelSpec::PlanarProduct { row, col } => {
                let a = grid.location(u1);
                let b = grid.location(u2);
                row.eval(a[0], b[0]) * col.eval(a[1], b[1])
            }
        }
    }
}

/// Lebedev kernel between two points on the unit sphere:
/// `(1/4pi + eta/12pi) - (eta/8pi) * sqrt((1 - c)/2)` where `c` is the cosine
/// of the central angle.
pub fn lebedev_eval(s1: &[f64; 3], s2: &[f64; 3], eta: f64) -> f64 {
    let c = (s1[0] * s2[0] + s1[1] * s2[1] + s1[2] * s2[2]).clamp(-1.0, 1.0);
    let pi = std::f64::consts::PI;
    (1.0 / (4.0 * pi) + eta / (12.0 * pi)) - eta / (8.0 * pi) * ((1.0 - c) / 2.0).sqrt()
}

/// Associated Legendre polynomial `P_l^m(x)` for `0 <= m <= l`, computed by
/// the standard upward recurrence, without the Condon-Shortley phase.
fn assoc_legendre(l: usize, m: usize, x: f64) -> f64 {
    debug_assert!(m <= l);
    let somx2 = ((1.0 - x) * (1.0 + x)).max(0.0).sqrt();
    // P_m^m = (2m-1)!! * (1-x^2)^(m/2)
    let mut pmm = 1.0;
    let mut fact = 1.0;
    for _ in 0..m {
        pmm *= fact * somx2;
        fact += 2.0;
    }
    if l == m {
        return pmm;
    }
    let mut pmmp1 = x * (2 * m + 1) as f64 * pmm;
    if l == m + 1 {
        return pmmp1;
    }
    let mut pll = 0.0;
    for ll in (m + 2)..=l {
        pll = (x * (2 * ll - 1) as f64 * pmmp1 - (ll + m - 1) as f64 * pmm) / (ll - m) as f64;
        pmm = pmmp1;
        pmmp1 = pll;
    }
    pll
}

/// Real orthonormal spherical harmonic `Y_l^m(theta, phi)`, angles in radians.
///
/// `N_lm = sqrt((2l+1)(l-m)!/(4pi (l+m)!))`; positive orders carry
/// `sqrt(2) cos(m phi)`, negative orders `sqrt(2) sin(|m| phi)`.
pub fn spherical_harmonic(l: usize, m: i64, theta: f64, phi: f64) -> Result<f64> {
    let mm = m.unsigned_abs() as usize;
    if mm > l {
        return Err(MaracError::Contract(format!(
            "spherical_harmonic: |m| = {mm} exceeds degree l = {l}"
        )));
    }
    let pi = std::f64::consts::PI;
    // (l-m)!/(l+m)! as a running product to avoid factorial overflow
    let mut ratio = 1.0;
    for k in (l - mm + 1)..=(l + mm) {
        ratio /= k as f64;
    }
    let norm = ((2 * l + 1) as f64 * ratio / (4.0 * pi)).sqrt();
    let p = assoc_legendre(l, mm, theta.cos());
    let val = match m.cmp(&0) {
        std::cmp::Ordering::Greater => 2.0_f64.sqrt() * norm * p * (mm as f64 * phi).cos(),
        std::cmp::Ordering::Equal => norm * p,
        std::cmp::Ordering::Less => 2.0_f64.sqrt() * norm * p * (mm as f64 * phi).sin(),
    };
    Ok(val)
}

/// Pairwise kernel Gram matrix over all S grid points, with a diagonal jitter
/// applied when the smallest eigenvalue falls at or below `1e-10 * largest`,
/// so the positive-definiteness assumption holds numerically.
pub fn gram_matrix(grid: &GridSpec, kernel: &KernelSpec) -> Result<Mat> {
    match (grid.kind, kernel) {
        (GridKind::SphereLatlon, KernelSpec::Lebedev { .. }) => {}
        (GridKind::PlanarUnitSquare, KernelSpec::PlanarProduct { .. }) => {}
        _ => {
            return Err(MaracError::Contract(
                "kernel family does not match grid kind".into(),
            ))
        }
    }
    let s = grid.len();
    let mut k = Mat::zeros(s, s);
    for u1 in 0..s {
        for u2 in u1..s {
            let v = kernel.eval(grid, u1, u2);
            k[(u1, u2)] = v;
            k[(u2, u1)] = v;
        }
    }
    let eigs = SymmetricEigen::new(k.clone()).eigenvalues;
    let max_eig = eigs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min_eig = eigs.iter().cloned().fold(f64::INFINITY, f64::min);
    if max_eig <= 0.0 {
        return Err(MaracError::Singular("gram matrix has no positive eigenvalue".into()));
    }
    let tol = 1e-10 * max_eig;
    if min_eig <= tol {
        let jitter = 10.0 * tol - min_eig.min(0.0);
        for i in 0..s {
            k[(i, i)] += jitter;
        }
    }
    Ok(k)
}

/// How a truncated basis was constructed; stored with models so a context can
/// be rebuilt identically from its grid config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TruncationKind {
    /// Analytic spherical-harmonic basis of all degrees `l <= degree_max`,
    /// so `R = (degree_max + 1)^2`.
    LebedevHarmonics { degree_max: usize },
    /// Leading eigenpairs of the Gram matrix itself (any kernel family).
    GramEigen { rank: usize },
}

/// Rank-R Mercer truncation: `K ~ K_R Lambda_R K_R^T` with `K_R` holding the
/// eigenfunction evaluations at the grid points (S x R) and `Lambda_R` the
/// positive eigenvalues in non-increasing order.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedBasis {
    pub kind: TruncationKind,
    pub k_r: Mat,
    pub lambda_r: Vector,
}

impl TruncatedBasis {
    pub fn rank(&self) -> usize {
        self.lambda_r.len()
    }
}

/// Analytic Lebedev truncation. `r` must equal `(L+1)^2` for an integer
/// degree L because harmonics come in full degrees. The constant
/// eigenfunction `Y_0^0` carries eigenvalue 1, and each degree-l harmonic
/// carries `eta / ((4l^2 - 1)(2l + 3))`, reproducing the kernel's expansion.
pub fn lebedev_truncated_basis(grid: &GridSpec, eta: f64, r: usize) -> Result<TruncatedBasis> {
    if grid.kind != GridKind::SphereLatlon {
        return Err(MaracError::Contract(
            "lebedev truncation requires a sphere grid".into(),
        ));
    }
    if r == 0 {
        return Err(MaracError::Contract("truncation rank must be >= 1".into()));
    }
    let degree_max = (r as f64).sqrt().round() as usize - 1;
    if (degree_max + 1) * (degree_max + 1) != r {
        return Err(MaracError::Contract(format!(
            "lebedev truncation rank {r} is not (L+1)^2 for an integer degree L"
        )));
    }
    let s = grid.len();
    let mut columns: Vec<(f64, Vector)> = Vec::with_capacity(r);
    for l in 0..=degree_max {
        let lambda = if l == 0 {
            1.0
        } else {
            let lf = l as f64;
            eta / ((4.0 * lf * lf - 1.0) * (2.0 * lf + 3.0))
        };
        for m in -(l as i64)..=(l as i64) {
            let mut col = Vector::zeros(s);
            for u in 0..s {
                let [theta, phi] = grid.location(u);
                col[u] = spherical_harmonic(l, m, theta.to_radians(), phi.to_radians())?;
            }
            columns.push((lambda, col));
        }
    }
    // eigenvalues are non-increasing in l for the default eta; sort to keep
    // the ordering contract for any eta
    columns.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut k_r = Mat::zeros(s, r);
    let mut lambda_r = Vector::zeros(r);
    for (idx, (lambda, col)) in columns.into_iter().enumerate() {
        lambda_r[idx] = lambda;
        k_r.set_column(idx, &col);
    }
    Ok(TruncatedBasis {
        kind: TruncationKind::LebedevHarmonics { degree_max },
        k_r,
        lambda_r,
    })
}

/// Empirical truncation from the leading eigenpairs of the Gram matrix.
/// Valid for any kernel family; also used in tests to build a complete basis
/// with `K_R Lambda_R K_R^T = K` exactly.
pub fn gram_eigen_basis(gram: &Mat, r: usize) -> Result<TruncatedBasis> {
    let s = gram.nrows();
    if r == 0 || r > s {
        return Err(MaracError::Contract(format!(
            "gram eigen truncation rank {r} must be in 1..={s}"
        )));
    }
    let eig = SymmetricEigen::new(gram.clone());
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let max_eig = eig.eigenvalues[order[0]];
    let mut k_r = Mat::zeros(s, r);
    let mut lambda_r = Vector::zeros(r);
    for (idx, &src) in order.iter().take(r).enumerate() {
        let ev = eig.eigenvalues[src];
        if ev <= 1e-14 * max_eig {
            return Err(MaracError::Contract(format!(
                "gram eigen truncation rank {r} exceeds numerical rank {idx}"
            )));
        }
        lambda_r[idx] = ev;
        k_r.set_column(idx, &eig.eigenvectors.column(src));
    }
    Ok(TruncatedBasis {
        kind: TruncationKind::GramEigen { rank: r },
        k_r,
        lambda_r,
    })
}

/// Grid + kernel + Gram matrix (+ optional truncated basis), shared read-only
/// by the estimator and the simulator.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelContext {
    pub grid: GridSpec,
    pub kernel: KernelSpec,
    pub gram: Mat,
    pub truncation: Option<TruncatedBasis>,
}

impl KernelContext {
    pub fn new(grid: GridSpec, kernel: KernelSpec) -> Result<Self> {
        let gram = gram_matrix(&grid, &kernel)?;
        Ok(Self {
            grid,
            kernel,
            gram,
            truncation: None,
        })
    }

    /// Attach a truncated basis of rank `r` using the analytic harmonics for
    /// the Lebedev kernel and the Gram eigendecomposition otherwise.
    pub fn with_truncation(mut self, r: usize) -> Result<Self> {
        let basis = match &self.kernel {
            KernelSpec::Lebedev { eta } => lebedev_truncated_basis(&self.grid, *eta, r)?,
            KernelSpec::PlanarProduct { .. } => gram_eigen_basis(&self.gram, r)?,
        };
        self.truncation = Some(basis);
        Ok(self)
    }

    pub fn with_truncation_kind(mut self, kind: TruncationKind) -> Result<Self> {
        let basis = match kind {
            TruncationKind::LebedevHarmonics { degree_max } => {
                let eta = match &self.kernel {
                    KernelSpec::Lebedev { eta } => *eta,
                    _ => {
                        return Err(MaracError::Contract(
                            "harmonic truncation requires the Lebedev kernel".into(),
                        ))
                    }
                };
                lebedev_truncated_basis(&self.grid, eta, (degree_max + 1) * (degree_max + 1))?
            }
            TruncationKind::GramEigen { rank } => gram_eigen_basis(&self.gram, rank)?,
        };
        self.truncation = Some(basis);
        Ok(self)
    }

    pub fn s(&self) -> usize {
        self.grid.len()
    }
}

/// Serializable grid + kernel description (the `grid.json` schema).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub kind: GridKind,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub kernel: KernelSpec,
}

impl GridConfig {
    pub fn sphere_lebedev(m: usize, n: usize, eta: f64) -> Self {
        Self {
            kind: GridKind::SphereLatlon,
            m,
            n,
            kernel: KernelSpec::Lebedev { eta },
        }
    }

    pub fn planar_default(m: usize, n: usize) -> Self {
        Self {
            kind: GridKind::PlanarUnitSquare,
            m,
            n,
            kernel: KernelSpec::default_planar(),
        }
    }

    pub fn build_grid(&self) -> Result<GridSpec> {
        match self.kind {
            GridKind::PlanarUnitSquare => GridSpec::planar(self.m, self.n),
            GridKind::SphereLatlon => GridSpec::sphere(self.m, self.n),
        }
    }

    pub fn build_context(&self) -> Result<KernelContext> {
        KernelContext::new(self.build_grid()?, self.kernel.clone())
    }
}
