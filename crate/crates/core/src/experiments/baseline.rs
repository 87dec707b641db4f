//! Naive gradient matching: states fixed at the GP posterior mean, `θ` by
//! unweighted least squares between `f(x̄, θ)` and the GP derivative mean.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::dataset::TimeSeriesDataset;
use crate::error::{OdinError, Result, Stage};
use crate::ode_models::OdeSystem;
use crate::odin::{gp_step, theta_starts, OdinConfig};
use crate::optimizer::{minimize, Bounds};

#[derive(Debug, Clone)]
pub struct NaiveFit {
    pub theta: Vec<f64>,
    /// Sum of squared derivative mismatches at `theta`.
    pub loss: f64,
    pub states: DMatrix<f64>,
}

pub fn naive_gradient_matching(
    data: &TimeSeriesDataset,
    system: Arc<dyn OdeSystem>,
    config: &OdinConfig,
) -> Result<NaiveFit> {
    let step = gp_step(data, config)?;
    let (n, k) = step.mean.shape();
    let p = system.n_params();
    let mut slopes = DMatrix::zeros(n, k);
    for (j, st) in step.states.iter().enumerate() {
        let z = DVector::from_iterator(n, step.mean.column(j).iter().map(|v| v - st.prior_mean));
        slopes.set_column(j, &(&st.d * z));
    }
    let rows: Vec<Vec<f64>> = (0..n).map(|i| step.mean.row(i).iter().copied().collect()).collect();

    let mut objective = |theta: &[f64], grad: &mut [f64]| -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        let mut out = vec![0.0; k];
        let mut gx = vec![0.0; k];
        for (i, row) in rows.iter().enumerate() {
            if system.rhs_unchecked(row, theta, &mut out).is_err() {
                grad.iter_mut().for_each(|g| *g = 0.0);
                return f64::INFINITY;
            }
            let w: Vec<f64> = (0..k).map(|j| 2.0 * (out[j] - slopes[(i, j)])).collect();
            loss += w.iter().map(|v| v * v / 4.0).sum::<f64>();
            if system.vjp_unchecked(row, theta, &w, &mut gx, grad).is_err() {
                grad.iter_mut().for_each(|g| *g = 0.0);
                return f64::INFINITY;
            }
        }
        loss
    };

    let bounds = Bounds::new(
        config.theta_lower.clone().unwrap_or_else(|| vec![f64::NEG_INFINITY; p]),
        config.theta_upper.clone().unwrap_or_else(|| vec![f64::INFINITY; p]),
    )?;
    let mut best: Option<(f64, Vec<f64>)> = None;
    for theta0 in theta_starts(config, p) {
        if let Ok(r) = minimize(&mut objective, &theta0, &bounds, &config.optimizer) {
            if best.as_ref().is_none_or(|(v, _)| r.value < *v) {
                best = Some((r.value, r.x));
            }
        }
    }
    let (loss, theta) = best.ok_or_else(|| {
        OdinError::Numerical("least-squares gradient matching failed from every start".into()).at(Stage::Optimization)
    })?;
    Ok(NaiveFit {
        theta,
        loss,
        states: step.mean,
    })
}
