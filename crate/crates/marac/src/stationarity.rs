//! Joint stationarity checking via companion-matrix spectral radii.
//!
//! A lag-L autoregression is stationary iff the companion embedding of its
//! coefficient blocks has spectral radius strictly inside the unit circle;
//! this is the standard equivalent of the determinant condition on the unit
//! disk. The tensor coefficients never enter the verdict, which is why the
//! API takes no such argument.

use serde::{Deserialize, Serialize};

use crate::error::{MaracError, Result};
use crate::linalg::{kron, spectral_radius, Mat};

/// Stationarity verdict for a MARAC + auxiliary-VAR coefficient set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StationarityVerdict {
    /// Spectral radius of the companion matrix built from `B_p (x) A_p`.
    pub marac_radius: f64,
    /// Spectral radius of the auxiliary VAR companion.
    pub aux_radius: f64,
    pub stationary: bool,
    pub margin: f64,
}

pub const DEFAULT_MARGIN: f64 = 1e-6;

/// Spectral radius of the `kL x kL` companion matrix with `blocks` in the
/// first block row and identities on the sub-diagonal.
pub fn companion_radius(blocks: &[Mat]) -> Result<f64> {
    if blocks.is_empty() {
        return Err(MaracError::Contract("companion needs at least one block".into()));
    }
    let k = blocks[0].nrows();
    for (i, b) in blocks.iter().enumerate() {
        if b.shape() != (k, k) {
            return Err(MaracError::Shape(format!(
                "companion block {i} is {:?}, expected {k}x{k}",
                b.shape()
            )));
        }
    }
    let l = blocks.len();
    if l == 1 {
        return Ok(spectral_radius(&blocks[0]));
    }
    let mut comp = Mat::zeros(k * l, k * l);
    for (j, b) in blocks.iter().enumerate() {
        comp.view_mut((0, j * k), (k, k)).copy_from(b);
    }
    for j in 1..l {
        comp.view_mut((j * k, (j - 1) * k), (k, k))
            .copy_from(&Mat::identity(k, k));
    }
    Ok(spectral_radius(&comp))
}

/// Verify the joint stationarity condition for MARAC coefficients
/// `{(A_p, B_p)}` and auxiliary VAR coefficients `{C_q}`: both companion
/// radii must be strictly below `1 - margin`.
pub fn check_stationarity(
    marac_ab: &[(Mat, Mat)],
    aux_c: &[Mat],
    margin: f64,
) -> Result<StationarityVerdict> {
    let marac_radius = if marac_ab.is_empty() {
        0.0
    } else {
        let blocks: Vec<Mat> = marac_ab.iter().map(|(a, b)| kron(b, a)).collect();
        let radius = companion_radius(&blocks)?;
        if marac_ab.len() == 1 {
            // P = 1 special case: the radius factors over the pair
            let product =
                spectral_radius(&marac_ab[0].0) * spectral_radius(&marac_ab[0].1);
            debug_assert!(
                (radius - product).abs() <= 1e-8 * (1.0 + product),
                "companion radius {radius} differs from spectral product {product}"
            );
        }
        radius
    };
    let aux_radius = if aux_c.is_empty() {
        0.0
    } else {
        companion_radius(aux_c)?
    };
    let stationary = marac_radius < 1.0 - margin && aux_radius < 1.0 - margin;
    Ok(StationarityVerdict {
        marac_radius,
        aux_radius,
        stationary,
        margin,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn single_block_radius() {
        let half = Mat::identity(2, 2) * 0.5;
        assert_relative_eq!(companion_radius(&[half]).unwrap(), 0.5, epsilon = 1e-12);
        let zero = Mat::zeros(3, 3);
        assert_relative_eq!(
            companion_radius(&[zero.clone(), zero]).unwrap(),
            0.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn scalar_two_lag_companion_matches_quadratic_root() {
        // x^2 = 0.5 x + 0.25 has largest root (0.5 + sqrt(1.25)) / 2
        let blocks = [Mat::from_element(1, 1, 0.5), Mat::from_element(1, 1, 0.25)];
        let want = (0.5 + 1.25_f64.sqrt()) / 2.0;
        assert_relative_eq!(companion_radius(&blocks).unwrap(), want, epsilon = 1e-10);
        assert_relative_eq!(companion_radius(&blocks).unwrap(), 0.809017, epsilon = 1e-6);
    }

    #[test]
    fn block_size_mismatch_rejected() {
        let blocks = [Mat::identity(2, 2), Mat::identity(3, 3)];
        assert!(companion_radius(&blocks).is_err());
        assert!(companion_radius(&[]).is_err());
    }

    #[test]
    fn p1_product_rule() {
        let a = Mat::identity(3, 3) * 0.9;
        let b = Mat::identity(4, 4) * 0.9;
        let v = check_stationarity(&[(a, b)], &[], DEFAULT_MARGIN).unwrap();
        assert_relative_eq!(v.marac_radius, 0.81, epsilon = 1e-10);
        assert!(v.stationary);

        let a = Mat::identity(2, 2) * 1.0;
        let b = Mat::identity(2, 2) * 1.2;
        let v = check_stationarity(&[(a, b)], &[], DEFAULT_MARGIN).unwrap();
        assert_relative_eq!(v.marac_radius, 1.2, epsilon = 1e-10);
        assert!(!v.stationary);
    }

    #[test]
    fn p1_companion_equals_spectral_product_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let a = Mat::from_fn(4, 4, |_, _| rng.sample::<f64, _>(StandardNormal) * 0.4);
            let b = Mat::from_fn(4, 4, |_, _| rng.sample::<f64, _>(StandardNormal) * 0.4);
            let radius = companion_radius(&[kron(&b, &a)]).unwrap();
            let product = spectral_radius(&a) * spectral_radius(&b);
            assert!((radius - product).abs() <= 1e-8 * (1.0 + product));
        }
    }

    #[test]
    fn rescaling_pair_leaves_radius_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = Mat::from_fn(3, 3, |_, _| rng.sample::<f64, _>(StandardNormal) * 0.3);
        let b = Mat::from_fn(3, 3, |_, _| rng.sample::<f64, _>(StandardNormal) * 0.3);
        let base = check_stationarity(&[(a.clone(), b.clone())], &[], DEFAULT_MARGIN)
            .unwrap()
            .marac_radius;
        for c in [2.0, -3.0, 0.1] {
            let scaled = check_stationarity(&[(&a * c, &b / c)], &[], DEFAULT_MARGIN)
                .unwrap()
                .marac_radius;
            assert!((scaled - base).abs() <= 1e-10 * (1.0 + base));
        }
    }

    #[test]
    fn aux_var_radius_enters_verdict() {
        let a = Mat::identity(2, 2) * 0.5;
        let b = Mat::identity(2, 2) * 0.5;
        let c_stable = Mat::identity(3, 3) * 0.5;
        let c_unit = Mat::identity(3, 3) * 1.01;
        let v = check_stationarity(&[(a.clone(), b.clone())], &[c_stable], DEFAULT_MARGIN).unwrap();
        assert!(v.stationary);
        let v = check_stationarity(&[(a, b)], &[c_unit], DEFAULT_MARGIN).unwrap();
        assert!(!v.stationary);
        assert!(v.aux_radius > 1.0);
    }
}
