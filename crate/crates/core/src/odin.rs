//! Two-step ODIN fit: independent GP regression per state, then joint
//! minimization of the risk over states, parameters and derivative noise.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::TimeSeriesDataset;
use crate::error::{OdinError, Result, Stage};
use crate::gp::{
    fit_hyperparameters, map_hyperparams_to_original, posterior, standardize,
    EmpiricalBayesSettings, GpState, StandardizationTransform,
};
use crate::kernel::{KernelFamily, KernelHyperparams};
use crate::ode_models::OdeSystem;
use crate::optimizer::{minimize, Bounds, OptimizerReport, OptimizerSettings};
use crate::risk::{FlatLayout, RiskContext, RiskObjective, GAMMA_MIN};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OdinConfig {
    pub kernel: KernelFamily,
    /// Master seed. State `k` fits its hyperparameters with `seed + k`;
    /// parameter initialization draws from a stream derived from it.
    pub seed: u64,
    pub eb_restarts: usize,
    pub eb_noise_floor: f64,
    /// Each initial `θ_p` is drawn uniformly from this interval.
    pub theta_init_low: f64,
    pub theta_init_high: f64,
    /// Independent parameter initializations; the lowest final risk wins.
    pub theta_restarts: usize,
    pub gamma_init: f64,
    pub gamma_min: f64,
    /// Keep `γ` at `gamma_init` instead of optimizing it.
    pub fixed_gamma: bool,
    pub theta_lower: Option<Vec<f64>>,
    pub theta_upper: Option<Vec<f64>>,
    /// Common box for every state value.
    pub state_lower: Option<f64>,
    pub state_upper: Option<f64>,
    /// After the main run, restart once from the solution with every `γ_k`
    /// at its lower bound and keep whichever risk is lower.
    pub floor_restart: bool,
    /// Optimize `ln γ` instead of `γ`, with the same lower bound.
    pub log_gamma: bool,
    /// Optimize whitened states `L_k⁻¹ (x_k − m_k)`. Ignored when state
    /// bounds are set.
    pub whiten_states: bool,
    pub optimizer: OptimizerSettings,
}

impl Default for OdinConfig {
    fn default() -> Self {
        Self {
            kernel: KernelFamily::Rbf,
            seed: 0,
            eb_restarts: 10,
            eb_noise_floor: 1e-3,
            theta_init_low: 0.0,
            theta_init_high: 1.0,
            theta_restarts: 1,
            gamma_init: 1.0,
            gamma_min: GAMMA_MIN,
            fixed_gamma: false,
            theta_lower: None,
            theta_upper: None,
            state_lower: None,
            state_upper: None,
            whiten_states: true,
            log_gamma: true,
            floor_restart: true,
            optimizer: OptimizerSettings {
                max_iterations: 100_000,
                ..OptimizerSettings::default()
            },
        }
    }
}

impl OdinConfig {
    pub fn validate(&self, n_params: usize) -> Result<()> {
        if !(self.gamma_min > 0.0) || !(self.gamma_init >= self.gamma_min) || !self.gamma_init.is_finite() {
            return Err(OdinError::Input(format!(
                "γ initial value {} must be finite and at least the lower bound {}",
                self.gamma_init, self.gamma_min
            )));
        }
        if self.theta_restarts == 0 || self.eb_restarts == 0 {
            return Err(OdinError::Input("restart counts must be positive".into()));
        }
        if !(self.theta_init_low < self.theta_init_high) {
            return Err(OdinError::Input("empty θ initialization interval".into()));
        }
        for b in [&self.theta_lower, &self.theta_upper].into_iter().flatten() {
            if b.len() != n_params {
                return Err(OdinError::Input(format!(
                    "θ bounds have {} entries, the system has {n_params} parameters",
                    b.len()
                )));
            }
        }
        Ok(())
    }
}

/// Output of step 1 for one dataset.
#[derive(Debug, Clone)]
pub struct GpStep {
    pub transform: StandardizationTransform,
    /// Hyperparameters in original units.
    pub hyperparams: Vec<KernelHyperparams>,
    pub states: Vec<GpState>,
    /// Posterior means at the observation times, original units, `N x K`.
    pub mean: DMatrix<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OdinResult {
    /// Estimated states, `N x K`.
    pub states: DMatrix<f64>,
    pub theta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub hyperparams: Vec<KernelHyperparams>,
    pub risk: f64,
    /// Risk at the GP mean, initial θ and initial γ of the winning restart.
    pub initial_risk: f64,
    pub initial_theta: Vec<f64>,
    /// GP posterior means the optimization started from.
    pub gp_mean: DMatrix<f64>,
    pub report: OptimizerReport,
    pub transform: StandardizationTransform,
    pub seed: u64,
    pub runtime_seconds: f64,
}

/// Step 1: standardize, fit each state's GP by empirical Bayes and compute
/// posterior means in original units.
pub fn gp_step(data: &TimeSeriesDataset, config: &OdinConfig) -> Result<GpStep> {
    let (n, k) = (data.n_times(), data.n_states());
    if n < 3 {
        return Err(OdinError::Input(format!(
            "at least 3 observations per state are required, got {n}"
        )));
    }
    let (std_data, transform) = standardize(data).map_err(|e| e.at(Stage::GpFit))?;
    let mut hyperparams = Vec::with_capacity(k);
    let mut states = Vec::with_capacity(k);
    let mut mean = DMatrix::zeros(n, k);
    for j in 0..k {
        let settings = EmpiricalBayesSettings {
            restarts: config.eb_restarts,
            seed: config.seed.wrapping_add(j as u64),
            noise_floor: config.eb_noise_floor,
            ..EmpiricalBayesSettings::default()
        };
        let hp_std = fit_hyperparameters(std_data.y.column(j).as_slice(), &std_data.t, config.kernel, &settings)
            .map_err(|e| e.at(Stage::GpFit))?;
        let hp = map_hyperparams_to_original(&hp_std, &transform, j);
        let shift = transform.y_shift[j];
        let centered: Vec<f64> = data.y.column(j).iter().map(|v| v - shift).collect();
        let (mu, _) = posterior(&centered, &data.t, config.kernel, &hp).map_err(|e| e.at(Stage::GpFit))?;
        for i in 0..n {
            mean[(i, j)] = mu[i] + shift;
        }
        states.push(GpState::new(config.kernel, hp, &data.t, shift).map_err(|e| e.at(Stage::GpFit))?);
        hyperparams.push(hp);
    }
    Ok(GpStep {
        transform,
        hyperparams,
        states,
        mean,
    })
}

/// GP regression only: posterior means in original units.
pub fn gp_baseline(data: &TimeSeriesDataset, config: &OdinConfig) -> Result<DMatrix<f64>> {
    Ok(gp_step(data, config)?.mean)
}

/// Risk context built from a finished step 1.
pub fn risk_context(
    step: &GpStep,
    data: &TimeSeriesDataset,
    system: Arc<dyn OdeSystem>,
    config: &OdinConfig,
) -> Result<RiskContext> {
    let sigma = step.hyperparams.iter().map(|h| h.noise_sigma).collect();
    let mut ctx = RiskContext::new(step.states.clone(), data.y.clone(), sigma, system)?;
    ctx.gamma_min = config.gamma_min;
    Ok(ctx)
}

fn bounds_for(layout: &FlatLayout, config: &OdinConfig, gamma_coord: impl Fn(f64) -> f64) -> Result<Bounds> {
    let nx = layout.n * layout.k;
    let mut lo = vec![config.state_lower.unwrap_or(f64::NEG_INFINITY); nx];
    let mut hi = vec![config.state_upper.unwrap_or(f64::INFINITY); nx];
    match &config.theta_lower {
        Some(v) => lo.extend_from_slice(v),
        None => lo.extend(std::iter::repeat_n(f64::NEG_INFINITY, layout.p)),
    }
    match &config.theta_upper {
        Some(v) => hi.extend_from_slice(v),
        None => hi.extend(std::iter::repeat_n(f64::INFINITY, layout.p)),
    }
    if config.fixed_gamma {
        lo.extend(std::iter::repeat_n(config.gamma_init, layout.k));
        hi.extend(std::iter::repeat_n(config.gamma_init, layout.k));
    } else {
        lo.extend(std::iter::repeat_n(gamma_coord(config.gamma_min), layout.k));
        hi.extend(std::iter::repeat_n(f64::INFINITY, layout.k));
    }
    Bounds::new(lo, hi)
}

/// Seeded initial parameter vectors, one per restart.
pub fn theta_starts(config: &OdinConfig, p: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    (0..config.theta_restarts)
        .map(|_| {
            (0..p)
                .map(|_| rng.random_range(config.theta_init_low..config.theta_init_high))
                .collect()
        })
        .collect()
}

/// Full two-step fit.
pub fn fit(data: &TimeSeriesDataset, system: Arc<dyn OdeSystem>, config: &OdinConfig) -> Result<OdinResult> {
    let started = Instant::now();
    if system.dim() != data.n_states() {
        return Err(OdinError::Input(format!(
            "{} has {} states but the data have {}",
            system.name(),
            system.dim(),
            data.n_states()
        )));
    }
    config.validate(system.n_params())?;
    let step = gp_step(data, config)?;
    let ctx = risk_context(&step, data, system.clone(), config)?;
    let layout = FlatLayout::of(&ctx);
    let gamma0 = vec![config.gamma_init; layout.k];
    let mut obj = RiskObjective::new(&ctx);
    if config.whiten_states && config.state_lower.is_none() && config.state_upper.is_none() {
        obj = obj.with_whitening();
    }
    if config.log_gamma && !config.fixed_gamma {
        obj = obj.with_log_gamma();
    }
    let bounds = bounds_for(&layout, config, |g| obj.gamma_coordinate(g))?;

    let mut best: Option<(OptimizerReport, Vec<f64>)> = None;
    let mut last_err = None;
    for theta0 in theta_starts(config, layout.p) {
        let v0 = obj.to_internal(&step.mean, &theta0, &gamma0);
        match minimize(&mut obj, &v0, &bounds, &config.optimizer) {
            Ok(report) => {
                if best.as_ref().is_none_or(|(b, _)| report.value < b.value) {
                    best = Some((report, theta0));
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    let Some((mut report, initial_theta)) = best else {
        let err = last_err.unwrap_or_else(|| OdinError::Numerical("no restart ran".into()));
        // a non-finite start usually means the vector field is undefined there
        let stage = if matches!(err, OdinError::Input(_)) { Stage::Ode } else { Stage::Optimization };
        return Err(err.at(stage));
    };
    if config.floor_restart && !config.fixed_gamma {
        let (x, theta, gamma) = obj.to_external(&report.x);
        if gamma.iter().any(|g| *g > config.gamma_min) {
            let floor = vec![config.gamma_min; layout.k];
            let v0 = obj.to_internal(&x, &theta, &floor);
            if let Ok(second) = minimize(&mut obj, &v0, &bounds, &config.optimizer) {
                if second.value < report.value {
                    let initial_value = report.initial_value;
                    let (iterations, evaluations) = (report.iterations, report.evaluations);
                    report = second;
                    report.initial_value = initial_value;
                    report.iterations += iterations;
                    report.evaluations += evaluations;
                }
            }
        }
    }
    let (x, theta, gamma) = obj.to_external(&report.x);
    report.x = layout.pack(&x, &theta, &gamma);
    Ok(OdinResult {
        states: x,
        theta,
        gamma,
        hyperparams: step.hyperparams,
        risk: report.value,
        initial_risk: report.initial_value,
        initial_theta,
        gp_mean: step.mean,
        report,
        transform: step.transform,
        seed: config.seed,
        runtime_seconds: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::data::{generate_dataset, NoiseSpec};
    use crate::ode_models::lookup;

    fn lv_data(sigma: f64, seed: u64) -> TimeSeriesDataset {
        let sys = lookup("lv").unwrap();
        let c = sys.canonical();
        generate_dataset(sys.as_ref(), &c.theta, &c.x0, &c.times, &NoiseSpec::Absolute(sigma), seed).unwrap()
    }

    #[test]
    fn baseline_is_fit_initialization() {
        let d = lv_data(0.1, 3);
        let cfg = OdinConfig::default();
        let base = gp_baseline(&d, &cfg).unwrap();
        let r = fit(&d, lookup("lv").unwrap(), &cfg).unwrap();
        assert_eq!(base, r.gp_mean);
        assert!(r.risk <= r.initial_risk);
        assert!(r.gamma.iter().all(|g| *g >= GAMMA_MIN));
    }

    #[test]
    fn fixed_gamma_is_self_consistent() {
        let d = lv_data(0.1, 5);
        let sys = lookup("lv").unwrap();
        let cfg = OdinConfig { fixed_gamma: true, ..Default::default() };
        let r = fit(&d, sys.clone(), &cfg).unwrap();
        assert_eq!(r.gamma, vec![1.0, 1.0]);
        let step = gp_step(&d, &cfg).unwrap();
        let ctx = risk_context(&step, &d, sys, &cfg).unwrap();
        let again = ctx.risk_full(&r.states, &r.theta, &r.gamma).unwrap();
        assert!((again - r.risk).abs() <= 1e-9 * r.risk.abs().max(1.0));
    }

    #[test]
    fn reproducible() {
        let d = lv_data(0.1, 7);
        let cfg = OdinConfig { seed: 11, ..Default::default() };
        let a = fit(&d, lookup("lv").unwrap(), &cfg).unwrap();
        let b = fit(&d, lookup("lv").unwrap(), &cfg).unwrap();
        assert_eq!(a.theta, b.theta);
        assert_eq!(a.states, b.states);
        assert_eq!(a.gamma, b.gamma);
    }

    #[test]
    fn rejects_wrong_dimension() {
        let d = lv_data(0.1, 1);
        assert!(matches!(fit(&d, lookup("pt").unwrap(), &Default::default()), Err(OdinError::Input(_))));
    }

    #[test]
    fn rejects_bad_gamma_init() {
        let cfg = OdinConfig { gamma_init: 1e-9, ..Default::default() };
        assert!(cfg.validate(4).is_err());
    }

    #[test]
    fn too_few_points() {
        let d = TimeSeriesDataset::new(vec![0.0, 1.0], DMatrix::from_element(2, 2, 1.0)).unwrap();
        assert!(fit(&d, lookup("lv").unwrap(), &Default::default()).is_err());
    }
}
