//! Stationary covariance functions and their time derivatives.
//!
//! For a kernel `k(a, b)` evaluated on a grid `t`, four matrices are needed:
//!
//! | matrix   | entry `(i, j)`                    |
//! |----------|-----------------------------------|
//! | `C`      | `k(t_i, t_j)`                     |
//! | `'C`     | `d/da k(a, b)` at `(t_i, t_j)`    |
//! | `C'`     | `d/db k(a, b)` at `(t_i, t_j)`    |
//! | `C''`    | `d²/da db k(a, b)` at `(t_i, t_j)` |
//!
//! All derivatives are closed form. Both kernels depend only on `r = a - b`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{OdinError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    /// `v² exp(-r² / 2ℓ²)`
    #[default]
    Rbf,
    /// Matérn ν = 5/2: `v² (1 + s|r| + s²r²/3) exp(-s|r|)`, `s = √5/ℓ`.
    Matern52,
}

/// Per-state kernel and observation-noise parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelHyperparams {
    /// Signal standard deviation `v`, in state units.
    pub amplitude: f64,
    /// Lengthscale `ℓ`, in time units.
    pub lengthscale: f64,
    /// Observation noise standard deviation `σ`, in state units.
    #[serde(rename = "sigma")]
    pub noise_sigma: f64,
}

impl KernelHyperparams {
    pub fn new(amplitude: f64, lengthscale: f64, noise_sigma: f64) -> Result<Self> {
        let hp = Self {
            amplitude,
            lengthscale,
            noise_sigma,
        };
        hp.validate()?;
        Ok(hp)
    }

    pub fn validate(&self) -> Result<()> {
        let Self {
            amplitude,
            lengthscale,
            noise_sigma,
        } = *self;
        if !(amplitude.is_finite() && lengthscale.is_finite() && noise_sigma.is_finite()) {
            return Err(OdinError::Domain(format!(
                "non-finite hyperparameters {self:?}"
            )));
        }
        if amplitude <= 0.0 || lengthscale <= 0.0 || noise_sigma < 0.0 {
            return Err(OdinError::Domain(format!(
                "hyperparameters out of range {self:?}"
            )));
        }
        Ok(())
    }
}

impl KernelFamily {
    pub fn value(self, amplitude: f64, lengthscale: f64, r: f64) -> f64 {
        let v2 = amplitude * amplitude;
        match self {
            KernelFamily::Rbf => v2 * (-0.5 * r * r / (lengthscale * lengthscale)).exp(),
            KernelFamily::Matern52 => {
                let s = 5f64.sqrt() / lengthscale;
                let sr = s * r.abs();
                v2 * (1.0 + sr + sr * sr / 3.0) * (-sr).exp()
            }
        }
    }

    /// `d/da k(a, b)` with `r = a - b`. Note `d/db k = -d/da k`.
    pub fn d_first(self, amplitude: f64, lengthscale: f64, r: f64) -> f64 {
        let v2 = amplitude * amplitude;
        match self {
            KernelFamily::Rbf => {
                let l2 = lengthscale * lengthscale;
                -r / l2 * v2 * (-0.5 * r * r / l2).exp()
            }
            KernelFamily::Matern52 => {
                let s = 5f64.sqrt() / lengthscale;
                let sr = s * r.abs();
                -v2 * s * s / 3.0 * r * (1.0 + sr) * (-sr).exp()
            }
        }
    }

    /// `d²/da db k(a, b)`.
    pub fn d_mixed(self, amplitude: f64, lengthscale: f64, r: f64) -> f64 {
        let v2 = amplitude * amplitude;
        match self {
            KernelFamily::Rbf => {
                let l2 = lengthscale * lengthscale;
                (1.0 / l2 - r * r / (l2 * l2)) * v2 * (-0.5 * r * r / l2).exp()
            }
            KernelFamily::Matern52 => {
                let s = 5f64.sqrt() / lengthscale;
                let sr = s * r.abs();
                v2 * s * s / 3.0 * (1.0 + sr - sr * sr) * (-sr).exp()
            }
        }
    }

    /// `d k / d log ℓ`, used by marginal-likelihood gradients.
    pub fn d_log_lengthscale(self, amplitude: f64, lengthscale: f64, r: f64) -> f64 {
        let v2 = amplitude * amplitude;
        match self {
            KernelFamily::Rbf => {
                let q = r * r / (lengthscale * lengthscale);
                v2 * q * (-0.5 * q).exp()
            }
            KernelFamily::Matern52 => {
                let s = 5f64.sqrt() / lengthscale;
                let sr = s * r.abs();
                v2 * sr * sr / 3.0 * (1.0 + sr) * (-sr).exp()
            }
        }
    }
}

/// `k(a, b)` for the given family and hyperparameters.
pub fn kernel_eval(family: KernelFamily, hp: &KernelHyperparams, a: f64, b: f64) -> Result<f64> {
    hp.validate()?;
    if !a.is_finite() || !b.is_finite() {
        return Err(OdinError::Domain(format!("non-finite kernel inputs ({a}, {b})")));
    }
    Ok(family.value(hp.amplitude, hp.lengthscale, a - b))
}

/// Checks that `t` is non-empty, finite and strictly increasing.
pub fn validate_grid(t: &[f64]) -> Result<()> {
    if t.is_empty() {
        return Err(OdinError::InvalidGrid("empty grid".into()));
    }
    if let Some(bad) = t.iter().find(|v| !v.is_finite()) {
        return Err(OdinError::InvalidGrid(format!("non-finite time {bad}")));
    }
    if let Some(w) = t.windows(2).find(|w| w[1] <= w[0]) {
        return Err(OdinError::InvalidGrid(format!(
            "times must be strictly increasing, got {} then {}",
            w[0], w[1]
        )));
    }
    Ok(())
}

/// The four covariance blocks over a time grid.
#[derive(Debug, Clone)]
pub struct CovMatrices {
    /// `C`
    pub c: DMatrix<f64>,
    /// `'C`, derivative in the first argument.
    pub c_da: DMatrix<f64>,
    /// `C'`, derivative in the second argument.
    pub c_db: DMatrix<f64>,
    /// `C''`, mixed second derivative.
    pub c_dadb: DMatrix<f64>,
}

pub fn build_cov_matrices(
    family: KernelFamily,
    hp: &KernelHyperparams,
    t: &[f64],
) -> Result<CovMatrices> {
    hp.validate()?;
    validate_grid(t)?;
    let n = t.len();
    let (v, l) = (hp.amplitude, hp.lengthscale);
    let c = DMatrix::from_fn(n, n, |i, j| family.value(v, l, t[i] - t[j]));
    let c_da = DMatrix::from_fn(n, n, |i, j| family.d_first(v, l, t[i] - t[j]));
    let c_db = c_da.transpose();
    let c_dadb = DMatrix::from_fn(n, n, |i, j| family.d_mixed(v, l, t[i] - t[j]));
    Ok(CovMatrices {
        c,
        c_da,
        c_db,
        c_dadb,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const FAMILIES: [KernelFamily; 2] = [KernelFamily::Rbf, KernelFamily::Matern52];

    fn hp(v: f64, l: f64) -> KernelHyperparams {
        KernelHyperparams::new(v, l, 0.0).unwrap()
    }

    fn random_grid(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        let mut t = Vec::with_capacity(n);
        let mut acc = rng.random_range(-1.0..1.0);
        for _ in 0..n {
            acc += rng.random_range(0.1..1.0);
            t.push(acc);
        }
        t
    }

    #[test]
    fn rbf_values() {
        let h = hp(1.0, 1.0);
        assert_eq!(kernel_eval(KernelFamily::Rbf, &h, 0.0, 0.0).unwrap(), 1.0);
        let v = kernel_eval(KernelFamily::Rbf, &h, 0.0, 1.0).unwrap();
        assert!((v - 0.606_530_659_712_633_4).abs() < 1e-15);
    }

    #[test]
    fn diagonal_is_amplitude_squared() {
        for fam in FAMILIES {
            let v = kernel_eval(fam, &hp(1.7, 0.3), 2.5, 2.5).unwrap();
            assert!((v - 1.7 * 1.7).abs() < 1e-14);
        }
    }

    #[test]
    fn symmetric_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for fam in FAMILIES {
            let h = hp(1.3, 0.7);
            for _ in 0..100 {
                let a = rng.random_range(-5.0..5.0);
                let b = rng.random_range(-5.0..5.0);
                assert_eq!(
                    kernel_eval(fam, &h, a, b).unwrap(),
                    kernel_eval(fam, &h, b, a).unwrap()
                );
            }
        }
    }

    #[test]
    fn non_finite_inputs_rejected() {
        let h = hp(1.0, 1.0);
        assert!(kernel_eval(KernelFamily::Rbf, &h, f64::NAN, 0.0).is_err());
        assert!(kernel_eval(KernelFamily::Rbf, &h, 0.0, f64::INFINITY).is_err());
        let bad = KernelHyperparams {
            amplitude: -1.0,
            lengthscale: 1.0,
            noise_sigma: 0.0,
        };
        assert!(kernel_eval(KernelFamily::Rbf, &bad, 0.0, 0.0).is_err());
    }

    #[test]
    fn single_point_matrices() {
        let m = build_cov_matrices(KernelFamily::Rbf, &hp(1.0, 1.0), &[0.3]).unwrap();
        assert_eq!(m.c[(0, 0)], 1.0);
        assert_eq!(m.c_da[(0, 0)], 0.0);
        assert_eq!(m.c_db[(0, 0)], 0.0);
        assert_eq!(m.c_dadb[(0, 0)], 1.0);
    }

    #[test]
    fn matern_mixed_derivative_at_zero() {
        let m = build_cov_matrices(KernelFamily::Matern52, &hp(2.0, 0.5), &[1.0]).unwrap();
        assert!((m.c_dadb[(0, 0)] - 5.0 * 4.0 / (3.0 * 0.25)).abs() < 1e-12);
    }

    #[test]
    fn grid_must_increase() {
        let h = hp(1.0, 1.0);
        for bad in [vec![], vec![0.0, 0.0], vec![1.0, 0.5], vec![0.0, f64::NAN]] {
            assert!(matches!(
                build_cov_matrices(KernelFamily::Rbf, &h, &bad),
                Err(OdinError::InvalidGrid(_))
            ));
        }
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-8)
    }

    #[test]
    fn derivative_matrices_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for fam in FAMILIES {
            for _ in 0..5 {
                let h = hp(rng.random_range(0.5..2.0), rng.random_range(0.3..2.0));
                let t = random_grid(&mut rng, 5);
                let m = build_cov_matrices(fam, &h, &t).unwrap();
                let step = 1e-5 * h.lengthscale;
                let k = |a: f64, b: f64| kernel_eval(fam, &h, a, b).unwrap();
                for i in 0..5 {
                    for j in 0..5 {
                        let (a, b) = (t[i], t[j]);
                        let fd_a = (k(a + step, b) - k(a - step, b)) / (2.0 * step);
                        let fd_ab = (k(a + step, b + step) - k(a + step, b - step)
                            - k(a - step, b + step)
                            + k(a - step, b - step))
                            / (4.0 * step * step);
                        if i != j {
                            assert!(rel_err(m.c_da[(i, j)], fd_a) < 1e-6, "{fam:?} 'C");
                        } else {
                            assert!(m.c_da[(i, j)].abs() < 1e-12);
                        }
                        let unit = h.amplitude.powi(2) / h.lengthscale.powi(2);
                        assert!((m.c_dadb[(i, j)] - fd_ab).abs() < 1e-5 * unit.max(fd_ab.abs()), "{fam:?} C''");
                    }
                }
            }
        }
    }

    #[test]
    fn lengthscale_derivative_matches_finite_difference() {
        for fam in FAMILIES {
            for r in [-1.3, -0.2, 0.4, 2.0] {
                let (v, l) = (1.2, 0.8);
                let h: f64 = 1e-6;
                let fd = (fam.value(v, l * h.exp(), r) - fam.value(v, l * (-h).exp(), r)) / (2.0 * h);
                assert!(rel_err(fam.d_log_lengthscale(v, l, r), fd) < 1e-6);
            }
        }
    }

    #[test]
    fn jitter_makes_c_factorizable() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for fam in FAMILIES {
            for _ in 0..10 {
                let n = rng.random_range(2..40);
                let t = random_grid(&mut rng, n);
                let h = hp(1.0, rng.random_range(0.1..5.0));
                let m = build_cov_matrices(fam, &h, &t).unwrap();
                crate::linalg::JitteredCholesky::new(&m.c, h.amplitude.powi(2), crate::linalg::JITTER_START)
                    .unwrap();
            }
        }
    }

    proptest! {
        #[test]
        fn transpose_and_symmetry(
            l in 0.05f64..5.0,
            v in 0.1f64..3.0,
            gaps in proptest::collection::vec(0.01f64..2.0, 1..12),
        ) {
            let t: Vec<f64> = gaps.iter().scan(0.0, |acc, g| { *acc += g; Some(*acc) }).collect();
            for fam in FAMILIES {
                let m = build_cov_matrices(fam, &hp(v, l), &t).unwrap();
                prop_assert_eq!(&m.c_da.transpose(), &m.c_db);
                prop_assert_eq!(&m.c, &m.c.transpose());
                prop_assert_eq!(&m.c_dadb, &m.c_dadb.transpose());
                prop_assert!(m.c.iter().chain(m.c_dadb.iter()).all(|x| x.is_finite()));
            }
        }

        #[test]
        fn stationarity_scaling(
            s in 0.1f64..10.0,
            l in 0.2f64..3.0,
            gaps in proptest::collection::vec(0.05f64..1.0, 1..8),
        ) {
            let t: Vec<f64> = gaps.iter().scan(0.0, |acc, g| { *acc += g; Some(*acc) }).collect();
            let ts: Vec<f64> = t.iter().map(|x| x * s).collect();
            for fam in FAMILIES {
                let base = build_cov_matrices(fam, &hp(1.0, l), &t).unwrap();
                let scaled = build_cov_matrices(fam, &hp(1.0, l * s), &ts).unwrap();
                let tol = 1e-12;
                prop_assert!((&scaled.c - &base.c).abs().max() < tol);
                prop_assert!((&scaled.c_da * s - &base.c_da).abs().max() < tol * (1.0 + 1.0 / l));
                prop_assert!((&scaled.c_dadb * (s * s) - &base.c_dadb).abs().max() < tol * (1.0 + 1.0 / (l * l)));
            }
        }
    }
}
