//! Synthetic observations from a simulated trajectory.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{GroundTruth, TimeSeriesDataset};
use crate::error::{OdinError, Result};
use crate::integrator::{integrate, IntegratorSettings};
use crate::ode_models::OdeSystem;

/// How the observation noise level is specified.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "kebab-case")]
pub enum NoiseSpec {
    /// The same standard deviation for every state.
    #[serde(rename = "absolute-sigma")]
    Absolute(f64),
    /// Signal-to-noise ratio: `σ_k = std(x*_k) / √SNR` with the population
    /// standard deviation of the true state over the grid.
    Snr(f64),
}

impl NoiseSpec {
    pub fn mode(&self) -> &'static str {
        match self {
            NoiseSpec::Absolute(_) => "absolute-sigma",
            NoiseSpec::Snr(_) => "snr",
        }
    }

    pub fn value(&self) -> f64 {
        match self {
            NoiseSpec::Absolute(v) | NoiseSpec::Snr(v) => *v,
        }
    }

    /// Per-state noise standard deviations for a true trajectory (`N x K`).
    pub fn resolve(&self, truth: &DMatrix<f64>) -> Result<Vec<f64>> {
        match *self {
            NoiseSpec::Absolute(s) => {
                if !(s >= 0.0) || !s.is_finite() {
                    return Err(OdinError::Input(format!("noise std must be non-negative, got {s}")));
                }
                Ok(vec![s; truth.ncols()])
            }
            NoiseSpec::Snr(v) => {
                if !(v > 0.0) || !v.is_finite() {
                    return Err(OdinError::Input(format!("SNR must be positive, got {v}")));
                }
                Ok(truth
                    .column_iter()
                    .map(|c| {
                        let n = c.len() as f64;
                        let m = c.sum() / n;
                        let var = c.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
                        var.sqrt() / v.sqrt()
                    })
                    .collect())
            }
        }
    }
}

/// Integrate the true trajectory and add independent Gaussian noise.
pub fn generate_dataset(
    system: &dyn OdeSystem,
    theta: &[f64],
    x0: &[f64],
    times: &[f64],
    noise: &NoiseSpec,
    seed: u64,
) -> Result<TimeSeriesDataset> {
    let states = integrate(system, theta, x0, times, &IntegratorSettings::data_generation())?;
    let sigma = noise.resolve(&states)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, k) = states.shape();
    let mut y = states.clone();
    for i in 0..n {
        for j in 0..k {
            let e: f64 = StandardNormal.sample(&mut rng);
            y[(i, j)] += sigma[j] * e;
        }
    }
    Ok(TimeSeriesDataset::new(times.to_vec(), y)?.with_truth(GroundTruth {
        states,
        theta: theta.to_vec(),
        x0: x0.to_vec(),
        noise_sigma: sigma,
    }))
}

/// Dataset on the system's benchmark configuration.
pub fn generate_canonical(system: &dyn OdeSystem, noise: &NoiseSpec, seed: u64) -> Result<TimeSeriesDataset> {
    let c = system.canonical();
    generate_dataset(system, &c.theta, &c.x0, &c.times, noise, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ode_models::lookup;

    #[test]
    fn zero_noise_is_the_trajectory() {
        let sys = lookup("lv").unwrap();
        let d = generate_canonical(sys.as_ref(), &NoiseSpec::Absolute(0.0), 1).unwrap();
        assert_eq!(d.y, d.truth.unwrap().states);
    }

    #[test]
    fn pooled_noise_level() {
        let sys = lookup("lv").unwrap();
        let c = sys.canonical();
        let t = crate::ode_models::linspace(0.0, 2.0, 20);
        let mut ss = 0.0;
        let mut count = 0.0;
        for seed in 0..50 {
            let d = generate_dataset(sys.as_ref(), &c.theta, &c.x0, &t, &NoiseSpec::Absolute(0.5), seed).unwrap();
            let truth = d.truth.as_ref().unwrap();
            ss += (&d.y - &truth.states).norm_squared();
            count += 40.0;
        }
        let s = (ss / count).sqrt();
        assert!((0.4..=0.6).contains(&s), "{s}");
    }

    #[test]
    fn deterministic_bytes() {
        let sys = lookup("fhn").unwrap();
        let bytes = |seed| {
            let d = generate_canonical(sys.as_ref(), &NoiseSpec::Snr(100.0), seed).unwrap();
            let mut b = Vec::new();
            d.write_csv(&mut b).unwrap();
            b
        };
        assert_eq!(bytes(4), bytes(4));
        assert_ne!(bytes(4), bytes(5));
    }

    #[test]
    fn snr_conversion() {
        let truth = DMatrix::from_column_slice(4, 1, &[1.0, 3.0, 1.0, 3.0]);
        let s = NoiseSpec::Snr(100.0).resolve(&truth).unwrap();
        assert!((s[0] - 0.1).abs() < 1e-15);
        assert!(NoiseSpec::Snr(0.0).resolve(&truth).is_err());
        assert!(NoiseSpec::Absolute(-1.0).resolve(&truth).is_err());
    }

    #[test]
    fn serde_shape() {
        let j = serde_json::to_string(&NoiseSpec::Absolute(0.1)).unwrap();
        assert_eq!(j, r#"{"mode":"absolute-sigma","value":0.1}"#);
        let back: NoiseSpec = serde_json::from_str(r#"{"mode":"snr","value":10.0}"#).unwrap();
        assert_eq!(back, NoiseSpec::Snr(10.0));
    }
}
