//! Single-output GP regression: marginal likelihood, empirical-Bayes fitting,
//! posterior moments and the standardization used before fitting.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::TimeSeriesDataset;
use crate::derivative_gp::{compute_d_a, deriv_obs_covariance};
use crate::error::{OdinError, Result};
use crate::kernel::{build_cov_matrices, validate_grid, CovMatrices, KernelFamily, KernelHyperparams};
use crate::linalg::JitteredCholesky;
use crate::optimizer::{minimize, Bounds, OptimizerSettings, Termination};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Affine maps taking time and each state to zero mean and unit
/// (population) standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationTransform {
    pub t_shift: f64,
    pub t_scale: f64,
    pub y_shift: Vec<f64>,
    pub y_scale: Vec<f64>,
    /// Set for states whose observations are constant; their scale is 1.
    pub degenerate: Vec<bool>,
}

fn mean_and_pop_std(v: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = v.clone().count() as f64;
    let mean = v.clone().sum::<f64>() / n;
    let var = v.map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl StandardizationTransform {
    pub fn fit(t: &[f64], y: &DMatrix<f64>) -> Result<Self> {
        if t.len() < 2 {
            return Err(OdinError::Input(
                "standardization needs at least two time points".into(),
            ));
        }
        let (t_shift, t_scale) = mean_and_pop_std(t.iter().copied());
        if !(t_scale > 0.0) {
            return Err(OdinError::InvalidGrid("time grid is constant".into()));
        }
        let mut y_shift = Vec::new();
        let mut y_scale = Vec::new();
        let mut degenerate = Vec::new();
        for col in y.column_iter() {
            let (m, s) = mean_and_pop_std(col.iter().copied());
            let flat = !(s > 1e-12 * m.abs().max(1.0));
            y_shift.push(m);
            y_scale.push(if flat { 1.0 } else { s });
            degenerate.push(flat);
        }
        Ok(Self {
            t_shift,
            t_scale,
            y_shift,
            y_scale,
            degenerate,
        })
    }

    pub fn time(&self, t: f64) -> f64 {
        (t - self.t_shift) / self.t_scale
    }

    pub fn time_back(&self, s: f64) -> f64 {
        s * self.t_scale + self.t_shift
    }

    pub fn value(&self, k: usize, y: f64) -> f64 {
        (y - self.y_shift[k]) / self.y_scale[k]
    }

    pub fn value_back(&self, k: usize, s: f64) -> f64 {
        s * self.y_scale[k] + self.y_shift[k]
    }
}

/// Standardize time and every state of a dataset. Ground truth is dropped.
pub fn standardize(data: &TimeSeriesDataset) -> Result<(TimeSeriesDataset, StandardizationTransform)> {
    let tf = StandardizationTransform::fit(&data.t, &data.y)?;
    let t: Vec<f64> = data.t.iter().map(|&v| tf.time(v)).collect();
    let y = DMatrix::from_fn(data.n_times(), data.n_states(), |i, k| tf.value(k, data.y[(i, k)]));
    Ok((TimeSeriesDataset::new(t, y)?, tf))
}

/// Express hyperparameters fitted on standardized state `k` in original units.
pub fn map_hyperparams_to_original(
    hp: &KernelHyperparams,
    tf: &StandardizationTransform,
    k: usize,
) -> KernelHyperparams {
    KernelHyperparams {
        amplitude: hp.amplitude * tf.y_scale[k],
        lengthscale: hp.lengthscale * tf.t_scale,
        noise_sigma: hp.noise_sigma * tf.y_scale[k],
    }
}

fn check_inputs(y: &[f64], t: &[f64], hp: &KernelHyperparams) -> Result<()> {
    hp.validate()?;
    validate_grid(t)?;
    if y.len() != t.len() {
        return Err(OdinError::Input(format!(
            "{} observations for {} time points",
            y.len(),
            t.len()
        )));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(OdinError::Input("observations must be finite".into()));
    }
    Ok(())
}

/// Cholesky of `C + σ² I`, jittered relative to `amplitude²` only if needed.
fn noisy_cov_factor(cov: &DMatrix<f64>, hp: &KernelHyperparams) -> Result<JitteredCholesky> {
    let mut k = cov.clone();
    let s2 = hp.noise_sigma * hp.noise_sigma;
    for i in 0..k.nrows() {
        k[(i, i)] += s2;
    }
    JitteredCholesky::new(&k, hp.amplitude * hp.amplitude, 0.0)
}

/// `log N(y | 0, C + σ² I)`.
pub fn log_marginal_likelihood(
    y: &[f64],
    t: &[f64],
    family: KernelFamily,
    hp: &KernelHyperparams,
) -> Result<f64> {
    check_inputs(y, t, hp)?;
    let cov = build_cov_matrices(family, hp, t)?;
    let factor = noisy_cov_factor(&cov.c, hp)?;
    let yv = DVector::from_column_slice(y);
    let n = y.len() as f64;
    Ok(-0.5 * factor.quad_form(&yv) - 0.5 * factor.log_det() - 0.5 * n * LN_2PI)
}

/// Log marginal likelihood and its gradient with respect to
/// `(log amplitude, log lengthscale, log noise_sigma)`.
pub fn log_marginal_likelihood_with_gradient(
    y: &[f64],
    t: &[f64],
    family: KernelFamily,
    hp: &KernelHyperparams,
) -> Result<(f64, [f64; 3])> {
    check_inputs(y, t, hp)?;
    let n = y.len();
    let (v, l) = (hp.amplitude, hp.lengthscale);
    let cov = build_cov_matrices(family, hp, t)?;
    let factor = noisy_cov_factor(&cov.c, hp)?;
    let yv = DVector::from_column_slice(y);
    let alpha = factor.solve(&yv);
    let lml = -0.5 * yv.dot(&alpha) - 0.5 * factor.log_det() - 0.5 * n as f64 * LN_2PI;

    // dL/dp = 0.5 tr((αα^T - K^{-1}) dK/dp)
    let w = &alpha * alpha.transpose() - factor.inverse();
    let mut g_amp = 0.0;
    let mut g_len = 0.0;
    for j in 0..n {
        for i in 0..n {
            g_amp += w[(i, j)] * 2.0 * cov.c[(i, j)];
            g_len += w[(i, j)] * family.d_log_lengthscale(v, l, t[i] - t[j]);
        }
    }
    // jitter scales with amplitude²
    g_amp += 2.0 * factor.jitter * w.trace();
    let g_sig = 2.0 * hp.noise_sigma * hp.noise_sigma * w.trace();
    Ok((lml, [0.5 * g_amp, 0.5 * g_len, 0.5 * g_sig]))
}

/// Posterior mean and covariance of the latent states at the training times.
pub fn posterior(
    y: &[f64],
    t: &[f64],
    family: KernelFamily,
    hp: &KernelHyperparams,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_inputs(y, t, hp)?;
    let cov = build_cov_matrices(family, hp, t)?;
    let factor = noisy_cov_factor(&cov.c, hp)?;
    let yv = DVector::from_column_slice(y);
    let mean = &cov.c * factor.solve(&yv);
    // σ² (C + σ²I)^{-1} C
    let sigma2 = hp.noise_sigma * hp.noise_sigma + factor.jitter;
    let cov_post = crate::linalg::symmetrize(&(factor.solve_mat(&cov.c) * sigma2));
    Ok((mean, cov_post))
}

/// Settings for multi-restart empirical Bayes on standardized data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmpiricalBayesSettings {
    pub restarts: usize,
    pub seed: u64,
    /// Lower bound on the fitted noise standard deviation.
    pub noise_floor: f64,
    pub optimizer: OptimizerSettings,
}

impl Default for EmpiricalBayesSettings {
    fn default() -> Self {
        Self {
            restarts: 10,
            seed: 0,
            noise_floor: 1e-3,
            optimizer: OptimizerSettings {
                f_tol: 1e-12,
                max_iterations: 500,
                ..OptimizerSettings::default()
            },
        }
    }
}

/// Maximize the log marginal likelihood over log-hyperparameters with
/// several random starts. Intended for standardized data.
pub fn fit_hyperparameters(
    y: &[f64],
    t: &[f64],
    family: KernelFamily,
    settings: &EmpiricalBayesSettings,
) -> Result<KernelHyperparams> {
    validate_grid(t)?;
    if settings.restarts == 0 {
        return Err(OdinError::Input("at least one restart is required".into()));
    }
    if y.len() != t.len() {
        return Err(OdinError::Input("observation and time lengths differ".into()));
    }
    let min_gap = t
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::INFINITY, f64::min);
    let len_lo = if min_gap.is_finite() {
        (0.5 * min_gap).max(1e-3)
    } else {
        1e-3
    };
    let bounds = Bounds::new(
        vec![1e-2f64.ln(), len_lo.ln(), settings.noise_floor.ln()],
        vec![1e2f64.ln(), 1e2f64.ln(), 1e1f64.ln()],
    )?;

    let to_hp = |p: &[f64]| KernelHyperparams {
        amplitude: p[0].exp(),
        lengthscale: p[1].exp(),
        noise_sigma: p[2].exp(),
    };
    let mut objective = |p: &[f64], g: &mut [f64]| -> f64 {
        match log_marginal_likelihood_with_gradient(y, t, family, &to_hp(p)) {
            Ok((lml, grad)) => {
                for i in 0..3 {
                    g[i] = -grad[i];
                }
                -lml
            }
            Err(_) => f64::INFINITY,
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let log_uniform = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| rng.random_range(lo.ln()..hi.ln());
    let mut best: Option<(f64, KernelHyperparams, bool)> = None;
    for _ in 0..settings.restarts {
        let mut start = [
            log_uniform(&mut rng, 0.5, 2.0),
            log_uniform(&mut rng, 0.1, 2.0),
            log_uniform(&mut rng, 0.01, 1.0),
        ];
        bounds.project(&mut start);
        let Ok(report) = minimize(&mut objective, &start, &bounds, &settings.optimizer) else {
            continue;
        };
        if !report.value.is_finite() {
            continue;
        }
        let converged = matches!(
            report.termination,
            Termination::GradientTolerance | Termination::StepTolerance | Termination::FunctionTolerance
        ) || report.grad_norm <= 1e-4 * (1.0 + report.value.abs());
        let candidate = (report.value, to_hp(&report.x), converged);
        let better = match &best {
            None => true,
            Some((v, _, c)) => (converged && !c) || (converged == *c && report.value < *v),
        };
        if better {
            best = Some(candidate);
        }
    }
    match best {
        Some((_, hp, true)) => Ok(hp),
        Some((_, hp, false)) => Err(OdinError::Fitting {
            message: "no empirical-Bayes restart converged".into(),
            best_effort: Some((hp.amplitude, hp.lengthscale, hp.noise_sigma)),
        }),
        None => Err(OdinError::Fitting {
            message: "marginal likelihood was not finite at any restart".into(),
            best_effort: None,
        }),
    }
}

/// Per-state matrices needed by the risk, in the units of `times`.
#[derive(Debug, Clone)]
pub struct GpState {
    pub family: KernelFamily,
    pub hyperparams: KernelHyperparams,
    /// Constant prior mean of the state.
    pub prior_mean: f64,
    pub matrices: CovMatrices,
    /// Factor of `C + jitter I`.
    pub chol_c: JitteredCholesky,
    /// `'C C^{-1}`
    pub d: DMatrix<f64>,
    /// `C'' - 'C C^{-1} C'`, symmetrized, plus `a_jitter` on the diagonal.
    pub a: DMatrix<f64>,
    pub a_jitter: f64,
}

impl GpState {
    pub fn new(
        family: KernelFamily,
        hyperparams: KernelHyperparams,
        times: &[f64],
        prior_mean: f64,
    ) -> Result<Self> {
        let matrices = build_cov_matrices(family, &hyperparams, times)?;
        let cond = compute_d_a(&matrices, hyperparams.amplitude.powi(2))?;
        // Fix A's regularization once so that A + γI is smooth in γ.
        let probe = deriv_obs_covariance(&cond.a, 0.0)?;
        let mut a = cond.a;
        for i in 0..a.nrows() {
            a[(i, i)] += probe.jitter;
        }
        Ok(Self {
            family,
            hyperparams,
            prior_mean,
            matrices,
            chol_c: cond.c_factor,
            d: cond.d,
            a,
            a_jitter: probe.jitter,
        })
    }

    pub fn jitter_used(&self) -> f64 {
        self.chol_c.jitter
    }

    pub fn n(&self) -> usize {
        self.d.nrows()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn hp(v: f64, l: f64, s: f64) -> KernelHyperparams {
        KernelHyperparams::new(v, l, s).unwrap()
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Dense multivariate normal log density with explicit determinant and inverse.
    fn brute_force_lml(y: &[f64], t: &[f64], h: &KernelHyperparams) -> f64 {
        let n = y.len();
        let k = DMatrix::from_fn(n, n, |i, j| {
            let r = t[i] - t[j];
            h.amplitude.powi(2) * (-0.5 * r * r / h.lengthscale.powi(2)).exp()
                + if i == j { h.noise_sigma.powi(2) } else { 0.0 }
        });
        let det = k.clone().determinant();
        let inv = k.try_inverse().unwrap();
        let yv = DVector::from_column_slice(y);
        -0.5 * (yv.transpose() * inv * &yv)[(0, 0)] - 0.5 * det.ln() - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
    }

    #[test]
    fn one_point_closed_forms() {
        let v = (0.5f64).sqrt();
        let val = log_marginal_likelihood(&[0.0], &[0.0], KernelFamily::Rbf, &hp(v, 1.0, v)).unwrap();
        assert_relative_eq!(val, -0.918_938_533_204_672_7, epsilon = 1e-12);
        let val = log_marginal_likelihood(&[2.0], &[0.0], KernelFamily::Rbf, &hp(1.0, 1.0, 1.0)).unwrap();
        assert_relative_eq!(val, -0.5 * (2.0 + (4.0 * std::f64::consts::PI).ln()), epsilon = 1e-12);
        assert_relative_eq!(val, -2.265_512_123_484_645, epsilon = 1e-9);
    }

    #[test]
    fn matches_brute_force_density() {
        let mut r = rng(3);
        for _ in 0..5 {
            let t: Vec<f64> = (0..6).map(|i| i as f64 * 0.7 + r.random_range(0.0..0.3)).collect();
            let y: Vec<f64> = (0..6).map(|_| r.random_range(-2.0..2.0)).collect();
            let h = hp(r.random_range(0.5..2.0), r.random_range(0.3..1.5), r.random_range(0.1..1.0));
            let fast = log_marginal_likelihood(&y, &t, KernelFamily::Rbf, &h).unwrap();
            let slow = brute_force_lml(&y, &t, &h);
            assert!(((fast - slow) / slow).abs() < 1e-8, "{fast} vs {slow}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut r = rng(8);
        for fam in [KernelFamily::Rbf, KernelFamily::Matern52] {
            for _ in 0..5 {
                let t: Vec<f64> = (0..8).map(|i| i as f64 * 0.4 + r.random_range(0.0..0.2)).collect();
                let y: Vec<f64> = t.iter().map(|x| x.sin() + r.random_range(-0.3..0.3)).collect();
                let p = [r.random_range(-0.5f64..0.5), r.random_range(-1.0..0.5), r.random_range(-2.0..0.0)];
                let at = |p: [f64; 3]| {
                    let h = hp(p[0].exp(), p[1].exp(), p[2].exp());
                    log_marginal_likelihood(&y, &t, fam, &h).unwrap()
                };
                let (_, g) = log_marginal_likelihood_with_gradient(&y, &t, fam, &hp(p[0].exp(), p[1].exp(), p[2].exp()))
                    .unwrap();
                for i in 0..3 {
                    let step = 1e-5;
                    let mut plus = p;
                    let mut minus = p;
                    plus[i] += step;
                    minus[i] -= step;
                    let fd = (at(plus) - at(minus)) / (2.0 * step);
                    assert!((g[i] - fd).abs() <= 1e-5 * fd.abs().max(1e-2), "{fam:?} {i}: {} vs {fd}", g[i]);
                }
            }
        }
    }

    #[test]
    fn posterior_limits() {
        let t: Vec<f64> = (0..6).map(|i| i as f64).collect();
        let y = [0.3, -1.0, 2.0, 0.5, 0.1, -0.4];
        let (m, _) = posterior(&y, &t, KernelFamily::Rbf, &hp(1.0, 0.7, 1e-10)).unwrap();
        for i in 0..6 {
            assert!((m[i] - y[i]).abs() < 1e-6);
        }
        let (m, _) = posterior(&y, &t, KernelFamily::Rbf, &hp(1.0, 0.7, 1e10)).unwrap();
        let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(m.norm() < 1e-6 * ny);
        let (m, s) = posterior(&[2.0], &[0.0], KernelFamily::Rbf, &hp(1.0, 1.0, 1.0)).unwrap();
        assert_relative_eq!(m[0], 1.0, epsilon = 1e-14);
        assert_relative_eq!(s[(0, 0)], 0.5, epsilon = 1e-14);
    }

    #[test]
    fn posterior_covariance_is_symmetric_psd() {
        let t: Vec<f64> = (0..10).map(|i| i as f64 * 0.3).collect();
        let y: Vec<f64> = t.iter().map(|x| x.cos()).collect();
        let (_, s) = posterior(&y, &t, KernelFamily::Matern52, &hp(1.0, 0.5, 0.1)).unwrap();
        assert_eq!(s, s.transpose());
        let eig = s.symmetric_eigenvalues();
        assert!(eig.iter().all(|e| *e > -1e-10));
    }

    #[test]
    fn posterior_mean_is_linear_in_y() {
        let t: Vec<f64> = (0..7).map(|i| i as f64 * 0.5).collect();
        let y1: Vec<f64> = t.iter().map(|x| x.sin()).collect();
        let y2: Vec<f64> = t.iter().map(|x| x * x - 1.0).collect();
        let h = hp(1.3, 0.8, 0.2);
        let (a, b) = (2.5, -0.7);
        let mix: Vec<f64> = y1.iter().zip(&y2).map(|(p, q)| a * p + b * q).collect();
        let (m1, _) = posterior(&y1, &t, KernelFamily::Rbf, &h).unwrap();
        let (m2, _) = posterior(&y2, &t, KernelFamily::Rbf, &h).unwrap();
        let (mm, _) = posterior(&mix, &t, KernelFamily::Rbf, &h).unwrap();
        assert!((mm - (m1 * a + m2 * b)).amax() < 1e-10);
    }

    #[test]
    fn standardize_small_example() {
        let d = TimeSeriesDataset::new(vec![0.0, 1.0, 2.0], DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0])).unwrap();
        let (s, tf) = standardize(&d).unwrap();
        let expect = [-1.224_744_871_391_589, 0.0, 1.224_744_871_391_589];
        for i in 0..3 {
            assert_relative_eq!(s.t[i], expect[i], epsilon = 1e-12);
            assert_relative_eq!(s.y[(i, 0)], expect[i], epsilon = 1e-12);
            assert_relative_eq!(tf.value_back(0, s.y[(i, 0)]), d.y[(i, 0)], epsilon = 1e-12);
            assert_relative_eq!(tf.time_back(s.t[i]), d.t[i], epsilon = 1e-12);
        }
        assert!(!tf.degenerate[0]);
    }

    #[test]
    fn constant_state_is_flagged() {
        let d = TimeSeriesDataset::new(
            vec![0.0, 1.0, 2.0],
            DMatrix::from_row_slice(3, 2, &[4.0, 1.0, 4.0, 2.0, 4.0, 3.0]),
        )
        .unwrap();
        let (s, tf) = standardize(&d).unwrap();
        assert_eq!(tf.degenerate, vec![true, false]);
        assert_eq!(tf.y_scale[0], 1.0);
        assert!(s.y.column(0).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn mapping_preserves_likelihood_up_to_log_scale() {
        let t: Vec<f64> = (0..15).map(|i| 3.0 + i as f64 * 0.4).collect();
        let y: Vec<f64> = t.iter().map(|x| 10.0 + 4.0 * (x * 0.8).sin()).collect();
        let d = TimeSeriesDataset::new(t.clone(), DMatrix::from_column_slice(15, 1, &y)).unwrap();
        let (s, tf) = standardize(&d).unwrap();
        let h_std = hp(0.9, 0.6, 0.05);
        let l_std = log_marginal_likelihood(s.y.column(0).as_slice(), &s.t, KernelFamily::Rbf, &h_std).unwrap();
        let h_orig = map_hyperparams_to_original(&h_std, &tf, 0);
        let centered: Vec<f64> = y.iter().map(|v| v - tf.y_shift[0]).collect();
        let l_orig = log_marginal_likelihood(&centered, &t, KernelFamily::Rbf, &h_orig).unwrap();
        assert_relative_eq!(l_orig, l_std - 15.0 * tf.y_scale[0].ln(), epsilon = 1e-8);

        // posterior means agree after mapping back
        let (m_std, _) = posterior(s.y.column(0).as_slice(), &s.t, KernelFamily::Rbf, &h_std).unwrap();
        let (m_orig, _) = posterior(&centered, &t, KernelFamily::Rbf, &h_orig).unwrap();
        for i in 0..15 {
            assert!((tf.value_back(0, m_std[i]) - (m_orig[i] + tf.y_shift[0])).abs() < 1e-8);
        }
    }

    #[test]
    fn noiseless_sinusoid_gets_small_noise() {
        let t: Vec<f64> = (0..30).map(|i| i as f64 * 0.25).collect();
        let y: Vec<f64> = t.iter().map(|x| x.sin()).collect();
        let d = TimeSeriesDataset::new(t, DMatrix::from_column_slice(30, 1, &y)).unwrap();
        let (s, _) = standardize(&d).unwrap();
        let h = fit_hyperparameters(s.y.column(0).as_slice(), &s.t, KernelFamily::Rbf, &Default::default()).unwrap();
        // standardized std(y) is 1
        assert!(h.noise_sigma < 0.05, "{h:?}");
    }

    #[test]
    fn white_noise_gets_unit_noise() {
        use rand_distr::{Distribution, StandardNormal};
        let mut sigmas = Vec::new();
        for seed in 0..20 {
            let mut r = rng(100 + seed);
            let t: Vec<f64> = (0..50).map(|i| i as f64).collect();
            let y: Vec<f64> = (0..50).map(|_| StandardNormal.sample(&mut r)).collect();
            let d = TimeSeriesDataset::new(t, DMatrix::from_column_slice(50, 1, &y)).unwrap();
            let (s, tf) = standardize(&d).unwrap();
            let settings = EmpiricalBayesSettings { seed, ..Default::default() };
            let h = fit_hyperparameters(s.y.column(0).as_slice(), &s.t, KernelFamily::Rbf, &settings).unwrap();
            sigmas.push(map_hyperparams_to_original(&h, &tf, 0).noise_sigma);
        }
        sigmas.sort_by(f64::total_cmp);
        let median = 0.5 * (sigmas[9] + sigmas[10]);
        assert!((0.7..=1.3).contains(&median), "median σ = {median}");
    }

    #[test]
    fn fitting_is_deterministic() {
        let t: Vec<f64> = (0..20).map(|i| i as f64 * 0.1).collect();
        let y: Vec<f64> = t.iter().map(|x| (3.0 * x).cos() + 0.05 * (17.0 * x).sin()).collect();
        let s = EmpiricalBayesSettings { seed: 42, ..Default::default() };
        let a = fit_hyperparameters(&y, &t, KernelFamily::Rbf, &s).unwrap();
        let b = fit_hyperparameters(&y, &t, KernelFamily::Rbf, &s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_restarts_rejected() {
        let s = EmpiricalBayesSettings { restarts: 0, ..Default::default() };
        assert!(fit_hyperparameters(&[0.0, 1.0], &[0.0, 1.0], KernelFamily::Rbf, &s).is_err());
    }

    #[test]
    fn gp_state_identities() {
        let t: Vec<f64> = (0..12).map(|i| i as f64 * 0.5).collect();
        let st = GpState::new(KernelFamily::Rbf, hp(1.5, 0.9, 0.1), &t, 0.0).unwrap();
        let mut c = st.matrices.c.clone();
        for i in 0..12 {
            c[(i, i)] += st.jitter_used();
        }
        let resid = (&st.d * &c - &st.matrices.c_da).norm() / st.matrices.c_da.norm();
        assert!(resid < 1e-8, "{resid}");
        assert_eq!(st.a, st.a.transpose());
        assert!(st.a.clone().cholesky().is_some());
    }
}
