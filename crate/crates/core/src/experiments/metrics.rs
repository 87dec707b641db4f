//! Scores for estimated parameters and states, and robust summaries.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::integrator::{integrate, IntegratorSettings};
use crate::ode_models::OdeSystem;

/// Normalization of the trajectory error norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RmseConvention {
    /// `‖x̃ − x‖₂ / N`.
    #[default]
    Literal,
    /// `‖x̃ − x‖₂ / √(number of entries)`.
    Conventional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRmse {
    pub total: f64,
    pub per_state: Vec<f64>,
    /// Integration under the estimate failed; every value is `+∞`.
    pub failed: bool,
}

/// Integrate under `theta` from the true initial value and compare with the
/// true trajectory at the observation times.
pub fn trajectory_rmse(
    theta: &[f64],
    system: &dyn OdeSystem,
    truth: &DMatrix<f64>,
    x0: &[f64],
    times: &[f64],
    convention: RmseConvention,
) -> TrajectoryRmse {
    let k = truth.ncols();
    match integrate(system, theta, x0, times, &IntegratorSettings::scoring()) {
        Ok(est) if est.shape() == truth.shape() => trajectory_error(&est, truth, convention),
        _ => TrajectoryRmse {
            total: f64::INFINITY,
            per_state: vec![f64::INFINITY; k],
            failed: true,
        },
    }
}

/// tRMSE between two trajectories already on the same grid.
pub fn trajectory_error(est: &DMatrix<f64>, truth: &DMatrix<f64>, convention: RmseConvention) -> TrajectoryRmse {
    let (n, k) = truth.shape();
    let diff = est - truth;
    let (per_div, total_div) = match convention {
        RmseConvention::Literal => (n as f64, n as f64),
        RmseConvention::Conventional => ((n as f64).sqrt(), ((n * k) as f64).sqrt()),
    };
    TrajectoryRmse {
        total: diff.norm() / total_div,
        per_state: diff.column_iter().map(|c| c.norm() / per_div).collect(),
        failed: false,
    }
}

/// Root mean squared error over every entry.
pub fn state_rmse(est: &DMatrix<f64>, truth: &DMatrix<f64>) -> f64 {
    (est - truth).norm() / (truth.len() as f64).sqrt()
}

/// Linear-interpolation quantile of ascending `sorted` values, `p` in `[0, 1]`.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let h = p.clamp(0.0, 1.0) * (n - 1) as f64;
            let lo = h.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
        }
    }
}

/// Quartiles, mean and spread of the finite values; non-finite values are
/// counted separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub sentinels: usize,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub mean: f64,
    /// Sample standard deviation.
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let mut finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        finite.sort_by(f64::total_cmp);
        let count = finite.len();
        let mean = if count > 0 { finite.iter().sum::<f64>() / count as f64 } else { f64::NAN };
        let std = if count > 1 {
            (finite.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (count - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self {
            count,
            sentinels: values.len() - count,
            q25: quantile(&finite, 0.25),
            median: quantile(&finite, 0.5),
            q75: quantile(&finite, 0.75),
            mean,
            std,
        }
    }

    pub fn iqr(&self) -> f64 {
        self.q75 - self.q25
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ode_models::lookup;
    use proptest::prelude::*;

    #[test]
    fn exact_parameters_score_near_zero() {
        let sys = lookup("lv").unwrap();
        let c = sys.canonical();
        let truth = integrate(sys.as_ref(), &c.theta, &c.x0, &c.times, &IntegratorSettings::data_generation()).unwrap();
        let r = trajectory_rmse(&c.theta, sys.as_ref(), &truth, &c.x0, &c.times, RmseConvention::Literal);
        assert!(!r.failed);
        assert!(r.total < 1e-6, "{}", r.total);
    }

    #[test]
    fn constant_offset_literal_formula() {
        let truth = DMatrix::zeros(4, 1);
        let est = DMatrix::from_element(4, 1, 1.0);
        let r = trajectory_error(&est, &truth, RmseConvention::Literal);
        assert_eq!(r.total, 0.5);
        assert_eq!(r.per_state, vec![0.5]);
        let c = trajectory_error(&est, &truth, RmseConvention::Conventional);
        assert_eq!(c.total, 1.0);
    }

    #[test]
    fn failed_integration_is_a_sentinel() {
        let sys = lookup("pt").unwrap();
        let c = sys.canonical();
        let truth = DMatrix::zeros(c.times.len(), 5);
        let mut theta = c.theta.clone();
        // a zero Michaelis constant puts a pole at R_pp = 0
        theta[5] = 0.0;
        let r = trajectory_rmse(&theta, sys.as_ref(), &truth, &c.x0, &c.times, RmseConvention::Literal);
        assert!(r.failed);
        assert!(r.total.is_infinite());
    }

    #[test]
    fn summary_keeps_sentinels_apart() {
        let s = Summary::of(&[3.0, f64::INFINITY, 1.0, 2.0, f64::NAN]);
        assert_eq!(s.count, 3);
        assert_eq!(s.sentinels, 2);
        assert_eq!(s.median, 2.0);
        assert_eq!(s.q25, 1.5);
        assert_eq!(s.q75, 2.5);
    }

    /// Quantile by sorting and interpolating on a rank grid built independently.
    fn brute_quantile(values: &[f64], p: f64) -> f64 {
        let mut v = values.to_vec();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = v.len();
        let ranks: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        for i in 0..n - 1 {
            if p >= ranks[i] && p <= ranks[i + 1] {
                let w = (p - ranks[i]) / (ranks[i + 1] - ranks[i]);
                return v[i] * (1.0 - w) + v[i + 1] * w;
            }
        }
        v[n - 1]
    }

    proptest! {
        #[test]
        fn quantile_matches_brute_force(values in prop::collection::vec(-1e3f64..1e3, 2..40), p in 0.0f64..1.0) {
            let mut sorted = values.clone();
            sorted.sort_by(f64::total_cmp);
            let a = quantile(&sorted, p);
            let b = brute_quantile(&values, p);
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()), "{} vs {}", a, b);
        }

        #[test]
        fn doubling_residuals_doubles_trmse(vals in prop::collection::vec(-5.0f64..5.0, 6)) {
            let truth = DMatrix::from_fn(3, 2, |i, j| (i + j) as f64);
            let est = &truth + DMatrix::from_column_slice(3, 2, &vals);
            let est2 = &truth + DMatrix::from_column_slice(3, 2, &vals) * 2.0;
            let a = trajectory_error(&est, &truth, RmseConvention::Literal).total;
            let b = trajectory_error(&est2, &truth, RmseConvention::Literal).total;
            prop_assert!((b - 2.0 * a).abs() <= 1e-12 * (1.0 + a));
        }
    }
}
