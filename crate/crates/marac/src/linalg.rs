//! Dense linear- and tensor-algebra primitives shared by the whole crate:
//! Kronecker products, order-3 tensors with tensor-vector products,
//! column-stacking vectorization, SPD solves with jitter escalation, and the
//! Kronecker-difference convergence bound.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{MaracError, Result};

/// Dense real matrix used throughout the crate.
pub type Mat = DMatrix<f64>;
/// Dense real vector used throughout the crate.
pub type Vector = DVector<f64>;

/// Order-3 tensor of shape M x N x D stored as D matrix slices.
///
/// Slice `d` holds the M x N coefficient matrix of the d-th covariate, so the
/// tensor-vector product against a length-D vector contracts the last mode.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    slices: Vec<Mat>,
}

impl Tensor3 {
    pub fn new(slices: Vec<Mat>) -> Result<Self> {
        if slices.is_empty() {
            return Err(MaracError::Shape("Tensor3 needs at least one slice".into()));
        }
        let (m, n) = slices[0].shape();
        if m == 0 || n == 0 {
            return Err(MaracError::Shape("Tensor3 slices must be non-empty".into()));
        }
        for (d, s) in slices.iter().enumerate() {
            if s.shape() != (m, n) {
                return Err(MaracError::Shape(format!(
                    "Tensor3 slice {d} is {:?}, expected {:?}",
                    s.shape(),
                    (m, n)
                )));
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(MaracError::Contract(format!(
                    "Tensor3 slice {d} contains non-finite entries"
                )));
            }
        }
        Ok(Self { slices })
    }

    pub fn zeros(m: usize, n: usize, d: usize) -> Self {
        Self {
            slices: vec![Mat::zeros(m, n); d],
        }
    }

    /// (M, N, D)
    pub fn dims(&self) -> (usize, usize, usize) {
        let (m, n) = self.slices[0].shape();
        (m, n, self.slices.len())
    }

    pub fn slice(&self, d: usize) -> &Mat {
        &self.slices[d]
    }

    pub fn slices(&self) -> &[Mat] {
        &self.slices
    }

    pub fn get(&self, i: usize, j: usize, d: usize) -> f64 {
        self.slices[d][(i, j)]
    }
}

/// Kronecker product `a (x) b`: block (i, j) equals `a[i,j] * b`.
pub fn kron(a: &Mat, b: &Mat) -> Mat {
    a.kronecker(b)
}

/// Tensor-vector product contracting the last mode:
/// `result[i,j] = sum_d g[i,j,d] * z[d]`.
pub fn tvp(g: &Tensor3, z: &Vector) -> Result<Mat> {
    let (m, n, d) = g.dims();
    if z.len() != d {
        return Err(MaracError::Shape(format!(
            "tvp: vector length {} does not match tensor depth {d}",
            z.len()
        )));
    }
    let mut out = Mat::zeros(m, n);
    for (k, slice) in g.slices().iter().enumerate() {
        let w = z[k];
        for (o, s) in out.as_mut_slice().iter_mut().zip(slice.as_slice()) {
            *o += w * s;
        }
    }
    Ok(out)
}

/// Column-stacking vectorization: `vec(a)[i + j*M] = a[i,j]`, so that
/// `vec(A X B^T) = (B (x) A) vec(X)`.
pub fn vec_mat(a: &Mat) -> Vector {
    Vector::from_column_slice(a.as_slice())
}

/// Inverse of [`vec_mat`]: reshape a length `m*n` vector into an M x N matrix.
pub fn unvec(v: &Vector, m: usize, n: usize) -> Result<Mat> {
    if v.len() != m * n {
        return Err(MaracError::Shape(format!(
            "unvec: vector length {} does not equal {m}x{n}",
            v.len()
        )));
    }
    Ok(Mat::from_column_slice(m, n, v.as_slice()))
}

/// Mode-3 matricization of an M x N x D tensor: row `d` is `vec(slice d)^T`,
/// giving a D x MN matrix.
pub fn mode3_mat(g: &Tensor3) -> Mat {
    let (m, n, d) = g.dims();
    let mut out = Mat::zeros(d, m * n);
    for k in 0..d {
        let v = vec_mat(g.slice(k));
        out.row_mut(k).copy_from(&v.transpose());
    }
    out
}

/// Maximum relative asymmetry `|a_ij - a_ji| / max|a|`.
fn asymmetry(a: &Mat) -> f64 {
    let scale = a.iter().fold(0.0_f64, |acc, v| acc.max(v.abs())).max(1e-300);
    let mut worst = 0.0_f64;
    for i in 0..a.nrows() {
        for j in (i + 1)..a.ncols() {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst / scale
}

/// Cholesky factorization of `a + jitter*I` with jitter escalation.
///
/// Starting from the caller's jitter, failures escalate the jitter by factors
/// of 10 up to `1e-6 * trace(a)/n` before giving up. Gram matrices of fine
/// grids sit right at the edge of positive definiteness, so an immediate
/// failure would be too brittle.
pub fn spd_factor(a: &Mat, jitter: f64) -> Result<Cholesky<f64, Dyn>> {
    if a.nrows() != a.ncols() {
        return Err(MaracError::Shape(format!(
            "spd_factor: matrix is {}x{}, expected square",
            a.nrows(),
            a.ncols()
        )));
    }
    if asymmetry(a) > 1e-10 {
        return Err(MaracError::Contract(
            "spd_factor: matrix is not symmetric within 1e-10 relative".into(),
        ));
    }
    let n = a.nrows() as f64;
    let mean_diag = a.trace() / n;
    if !(mean_diag > 0.0) {
        // a PSD candidate with non-positive trace is the zero matrix or
        // worse; no jitter scale exists
        return Err(MaracError::Singular(
            "spd_factor: matrix has non-positive trace".into(),
        ));
    }
    let cap = 1e-6 * mean_diag;
    let mut j = jitter;
    loop {
        let candidate = if j == 0.0 {
            a.clone()
        } else {
            let mut c = a.clone();
            for i in 0..a.nrows() {
                c[(i, i)] += j;
            }
            c
        };
        if let Some(chol) = Cholesky::new(candidate) {
            // a PSD-but-singular input can slip through with zero or NaN
            // pivots; only strictly positive finite pivots count
            let ok = chol
                .l_dirty()
                .diagonal()
                .iter()
                .all(|v| v.is_finite() && *v > 0.0);
            if ok {
                return Ok(chol);
            }
        }
        // escalate
        j = if j <= 0.0 { 1e-12 * mean_diag } else { j * 10.0 };
        if j > cap {
            return Err(MaracError::Singular(format!(
                "spd_factor: factorization failed at max jitter {cap:.3e}"
            )));
        }
    }
}

/// Solve `(a + jitter*I) x = b` for symmetric positive-definite `a`.
pub fn spd_solve(a: &Mat, b: &Mat, jitter: f64) -> Result<Mat> {
    let chol = spd_factor(a, jitter)?;
    Ok(chol.solve(b))
}

/// Upper bound on `||kron(b_new, a_new) - kron(b_old, a_old)||_F`:
/// `||b_new - b_old||_F * ||a_new||_F + ||b_old||_F * ||a_new - a_old||_F`.
pub fn kron_diff_bound(a_new: &Mat, a_old: &Mat, b_new: &Mat, b_old: &Mat) -> Result<f64> {
    if a_new.shape() != a_old.shape() || b_new.shape() != b_old.shape() {
        return Err(MaracError::Shape(
            "kron_diff_bound: shapes differ within a pair".into(),
        ));
    }
    let db = (b_new - b_old).norm();
    let da = (a_new - a_old).norm();
    Ok(db * a_new.norm() + b_old.norm() * da)
}

/// Spectral radius via a dense (non-symmetric) eigensolve.
pub fn spectral_radius(a: &Mat) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.complex_eigenvalues()
        .iter()
        .fold(0.0_f64, |acc, ev| acc.max(ev.norm()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn randn_mat(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Mat {
        Mat::from_fn(m, n, |_, _| rng.sample(StandardNormal))
    }

    /// Elementwise-definition oracle for the Kronecker product.
    fn kron_oracle(a: &Mat, b: &Mat) -> Mat {
        let (ma, na) = a.shape();
        let (mb, nb) = b.shape();
        let mut out = Mat::zeros(ma * mb, na * nb);
        for i in 0..ma {
            for j in 0..na {
                for k in 0..mb {
                    for l in 0..nb {
                        out[(i * mb + k, j * nb + l)] = a[(i, j)] * b[(k, l)];
                    }
                }
            }
        }
        out
    }

    #[test]
    fn kron_identity_and_zero() {
        let i2 = Mat::identity(2, 2);
        assert_eq!(kron(&i2, &i2), Mat::identity(4, 4));
        let z = Mat::zeros(2, 3);
        let b = Mat::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(kron(&z, &b), Mat::zeros(4, 6));
    }

    #[test]
    fn kron_matches_elementwise_oracle() {
        let a = Mat::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = Mat::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(kron(&a, &b), kron_oracle(&a, &b));

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let a = randn_mat(&mut rng, 3, 2);
            let b = randn_mat(&mut rng, 2, 4);
            assert_eq!(kron(&a, &b), kron_oracle(&a, &b));
        }
    }

    #[test]
    fn kron_bilinear_in_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let a = randn_mat(&mut rng, 3, 3);
            let b = randn_mat(&mut rng, 2, 2);
            let alpha: f64 = rng.sample(StandardNormal);
            let lhs = kron(&(&a * alpha), &b);
            let rhs = kron(&a, &b) * alpha;
            let scale = rhs.norm().max(1.0);
            assert!((lhs - rhs).norm() <= 1e-14 * scale);
        }
    }

    #[test]
    fn kron_spectral_radius_is_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for n in 2..=5 {
            let a = randn_mat(&mut rng, n, n);
            let b = randn_mat(&mut rng, n, n);
            let lhs = spectral_radius(&kron(&b, &a));
            let rhs = spectral_radius(&a) * spectral_radius(&b);
            assert_relative_eq!(lhs, rhs, max_relative = 1e-8);
        }
    }

    #[test]
    fn tvp_zero_and_unit_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Tensor3::new((0..3).map(|_| randn_mat(&mut rng, 2, 4)).collect()).unwrap();
        let zero = tvp(&g, &Vector::zeros(3)).unwrap();
        assert_eq!(zero, Mat::zeros(2, 4));
        for d in 0..3 {
            let mut e = Vector::zeros(3);
            e[d] = 1.0;
            assert_eq!(&tvp(&g, &e).unwrap(), g.slice(d));
        }
    }

    #[test]
    fn tvp_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = Tensor3::new((0..2).map(|_| randn_mat(&mut rng, 3, 2)).collect()).unwrap();
        let z = Vector::from_column_slice(&[0.5, -1.0]);
        let got = tvp(&g, &z).unwrap();
        let mut want = Mat::zeros(3, 2);
        for i in 0..3 {
            for j in 0..2 {
                for d in 0..2 {
                    want[(i, j)] += g.get(i, j, d) * z[d];
                }
            }
        }
        assert_relative_eq!(got, want, epsilon = 1e-15);
    }

    #[test]
    fn tvp_linear_in_z() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = Tensor3::new((0..3).map(|_| randn_mat(&mut rng, 3, 3)).collect()).unwrap();
        let z1 = Vector::from_fn(3, |_, _| rng.sample(StandardNormal));
        let z2 = Vector::from_fn(3, |_, _| rng.sample(StandardNormal));
        let (alpha, beta) = (0.7, -2.3);
        let lhs = tvp(&g, &(&z1 * alpha + &z2 * beta)).unwrap();
        let rhs = tvp(&g, &z1).unwrap() * alpha + tvp(&g, &z2).unwrap() * beta;
        assert!((lhs - rhs).norm() <= 1e-12);
    }

    #[test]
    fn vec_is_column_stacking() {
        let a = Mat::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let v = vec_mat(&a);
        assert_eq!(v.as_slice(), &[1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn unvec_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = randn_mat(&mut rng, 3, 4);
        let back = unvec(&vec_mat(&a), 3, 4).unwrap();
        assert_eq!(a, back);
        assert!(unvec(&Vector::zeros(5), 2, 3).is_err());
    }

    #[test]
    fn vec_of_bilinear_map_is_kron_action() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = randn_mat(&mut rng, 2, 2);
        let b = randn_mat(&mut rng, 2, 2);
        let x = randn_mat(&mut rng, 2, 2);
        let lhs = vec_mat(&(&a * &x * b.transpose()));
        let rhs = kron(&b, &a) * vec_mat(&x);
        assert!((lhs - rhs).norm() <= 1e-13);
    }

    #[test]
    fn mode3_matricization() {
        let z = Tensor3::zeros(2, 3, 4);
        assert_eq!(mode3_mat(&z), Mat::zeros(4, 6));

        // 1x1xD tensor flattens to a Dx1 matrix of the fiber
        let fiber = Tensor3::new(vec![
            Mat::from_element(1, 1, 1.5),
            Mat::from_element(1, 1, -2.0),
        ])
        .unwrap();
        assert_eq!(mode3_mat(&fiber), Mat::from_column_slice(2, 1, &[1.5, -2.0]));

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = Tensor3::new((0..3).map(|_| randn_mat(&mut rng, 2, 2)).collect()).unwrap();
        let g3 = mode3_mat(&g);
        assert_eq!(g3.shape(), (3, 4));
        for d in 0..3 {
            for i in 0..2 {
                for j in 0..2 {
                    assert_eq!(g3[(d, i + j * 2)], g.get(i, j, d));
                }
            }
        }
    }

    #[test]
    fn spd_solve_identity_cases() {
        let i3 = Mat::identity(3, 3);
        let b = Mat::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_relative_eq!(spd_solve(&i3, &b, 0.0).unwrap(), b, epsilon = 1e-14);
        let two_i = &i3 * 2.0;
        assert_relative_eq!(
            spd_solve(&two_i, &i3, 0.0).unwrap(),
            &i3 * 0.5,
            epsilon = 1e-14
        );
    }

    #[test]
    fn spd_solve_residual_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let m = randn_mat(&mut rng, 5, 5);
            let a = m.transpose() * &m + Mat::identity(5, 5);
            let b = randn_mat(&mut rng, 5, 3);
            let x = spd_solve(&a, &b, 0.0).unwrap();
            let res = (&a * &x - &b).norm();
            assert!(res <= 1e-9 * b.norm(), "residual {res}");
        }
    }

    #[test]
    fn spd_solve_rejects_asymmetric() {
        let a = Mat::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        let b = Mat::identity(2, 2);
        assert!(matches!(
            spd_solve(&a, &b, 0.0),
            Err(MaracError::Contract(_))
        ));
    }

    #[test]
    fn spd_solve_fails_on_hopeless_matrix() {
        // negative definite: no amount of capped jitter rescues it
        let a = Mat::identity(3, 3) * -1.0;
        let b = Mat::identity(3, 3);
        assert!(matches!(
            spd_solve(&a, &b, 0.0),
            Err(MaracError::Singular(_))
        ));
    }

    #[test]
    fn kron_diff_bound_trivial_cases() {
        let a = Mat::identity(3, 3);
        let b = Mat::identity(2, 2) * 0.5;
        assert_eq!(kron_diff_bound(&a, &a, &b, &b).unwrap(), 0.0);

        // a unchanged with ||a||_F = 1, ||b_new - b_old||_F = 0.1
        let a1 = Mat::from_row_slice(1, 1, &[1.0]);
        let b_old = Mat::from_row_slice(1, 1, &[0.3]);
        let b_new = Mat::from_row_slice(1, 1, &[0.4]);
        assert_relative_eq!(
            kron_diff_bound(&a1, &a1, &b_new, &b_old).unwrap(),
            0.1,
            epsilon = 1e-14
        );
    }

    #[test]
    fn kron_diff_bound_dominates_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let a_old = randn_mat(&mut rng, 3, 3);
            let a_new = &a_old + randn_mat(&mut rng, 3, 3) * 0.1;
            let b_old = randn_mat(&mut rng, 3, 3);
            let b_new = &b_old + randn_mat(&mut rng, 3, 3) * 0.1;
            let bound = kron_diff_bound(&a_new, &a_old, &b_new, &b_old).unwrap();
            let truth = (kron(&b_new, &a_new) - kron(&b_old, &a_old)).norm();
            assert!(bound + 1e-12 >= truth, "bound {bound} < truth {truth}");
        }
    }
}
