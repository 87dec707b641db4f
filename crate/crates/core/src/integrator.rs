//! Dormand-Prince 5(4) with step-size control and 4th-order dense output.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{OdinError, Result};
use crate::ode_models::OdeSystem;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorSettings {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
    /// Initial step; estimated when `None`.
    pub h0: Option<f64>,
}

impl IntegratorSettings {
    /// Tolerances used when simulating ground truth.
    pub fn data_generation() -> Self {
        Self {
            rtol: 1e-8,
            atol: 1e-10,
            ..Self::default()
        }
    }

    /// Tolerances used when scoring estimated parameters.
    pub fn scoring() -> Self {
        Self {
            rtol: 1e-6,
            atol: 1e-8,
            ..Self::default()
        }
    }
}

impl Default for IntegratorSettings {
    fn default() -> Self {
        Self {
            rtol: 1e-8,
            atol: 1e-10,
            max_steps: 1_000_000,
            h0: None,
        }
    }
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;

const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

struct Rhs<'a> {
    sys: &'a dyn OdeSystem,
    theta: &'a [f64],
}

impl Rhs<'_> {
    fn call(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.sys.rhs_unchecked(x, self.theta, out).map_err(|e| match e {
            OdinError::Domain(m) => OdinError::Domain(format!("{m} (at t = {t})")),
            other => other,
        })?;
        if out.iter().any(|v| !v.is_finite()) {
            return Err(OdinError::Integration {
                t,
                message: "vector field is not finite".into(),
            });
        }
        Ok(())
    }
}

fn err_norm(y: &[f64], y_new: &[f64], e: &[f64], s: &IntegratorSettings) -> f64 {
    let n = y.len() as f64;
    let sum: f64 = (0..y.len())
        .map(|i| {
            let sc = s.atol + s.rtol * y[i].abs().max(y_new[i].abs());
            (e[i] / sc).powi(2)
        })
        .sum();
    (sum / n).sqrt()
}

/// Starting step from Hairer, Nørsett & Wanner's heuristic.
fn initial_step(
    f: &Rhs,
    t0: f64,
    x0: &[f64],
    f0: &[f64],
    span: f64,
    s: &IntegratorSettings,
) -> Result<f64> {
    let n = x0.len() as f64;
    let sc: Vec<f64> = x0.iter().map(|v| s.atol + s.rtol * v.abs()).collect();
    let d0 = (x0.iter().zip(&sc).map(|(v, c)| (v / c).powi(2)).sum::<f64>() / n).sqrt();
    let d1 = (f0.iter().zip(&sc).map(|(v, c)| (v / c).powi(2)).sum::<f64>() / n).sqrt();
    let mut h0 = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    };
    h0 = h0.min(span);
    let x1: Vec<f64> = x0.iter().zip(f0).map(|(x, d)| x + h0 * d).collect();
    let mut f1 = vec![0.0; x0.len()];
    f.call(t0 + h0, &x1, &mut f1)?;
    let d2 = (f1
        .iter()
        .zip(f0)
        .zip(&sc)
        .map(|((a, b), c)| ((a - b) / c).powi(2))
        .sum::<f64>()
        / n)
        .sqrt()
        / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(1.0 / 5.0)
    };
    Ok((100.0 * h0).min(h1).min(span))
}

/// Integrate `ẋ = f(x, θ)` from `x0` at `t_out[0]` and return the states at
/// every entry of `t_out` as an `N x K` matrix. The first row is `x0` exactly.
pub fn integrate(
    system: &dyn OdeSystem,
    theta: &[f64],
    x0: &[f64],
    t_out: &[f64],
    settings: &IntegratorSettings,
) -> Result<DMatrix<f64>> {
    system.check(x0, theta)?;
    if t_out.is_empty() {
        return Err(OdinError::Input("no output times".into()));
    }
    if t_out.windows(2).any(|w| !(w[1] >= w[0])) || t_out.iter().any(|v| !v.is_finite()) {
        return Err(OdinError::InvalidGrid(
            "output times must be finite and non-decreasing".into(),
        ));
    }
    if x0.iter().chain(theta).any(|v| !v.is_finite()) {
        return Err(OdinError::Input("initial state and parameters must be finite".into()));
    }
    let k = x0.len();
    let n_out = t_out.len();
    let mut out = DMatrix::zeros(n_out, k);
    for j in 0..k {
        out[(0, j)] = x0[j];
    }
    let t_end = t_out[n_out - 1];
    let t0 = t_out[0];
    if t_end == t0 {
        for i in 1..n_out {
            for j in 0..k {
                out[(i, j)] = x0[j];
            }
        }
        return Ok(out);
    }

    let f = Rhs { sys: system, theta };
    let mut t = t0;
    let mut x = x0.to_vec();
    let mut k1 = vec![0.0; k];
    f.call(t, &x, &mut k1)?;
    let span = t_end - t0;
    let mut h = match settings.h0 {
        Some(h) if h > 0.0 => h.min(span),
        _ => initial_step(&f, t, &x, &k1, span, settings)?,
    };

    let (mut k2, mut k3, mut k4, mut k5, mut k6, mut k7) = (
        vec![0.0; k],
        vec![0.0; k],
        vec![0.0; k],
        vec![0.0; k],
        vec![0.0; k],
        vec![0.0; k],
    );
    let mut tmp = vec![0.0; k];
    let mut x_new = vec![0.0; k];
    let mut err = vec![0.0; k];
    let mut next_out = 1;
    while next_out < n_out && t_out[next_out] <= t0 {
        next_out += 1;
    }
    let mut steps = 0usize;

    while next_out < n_out {
        if steps >= settings.max_steps {
            return Err(OdinError::Integration {
                t,
                message: format!("exceeded {} steps", settings.max_steps),
            });
        }
        steps += 1;
        let last = t + h >= t_end;
        if last {
            h = t_end - t;
        }
        if h <= 1e-14 * t.abs().max(1.0) {
            return Err(OdinError::Integration {
                t,
                message: "step size underflow".into(),
            });
        }

        for i in 0..k {
            tmp[i] = x[i] + h * A21 * k1[i];
        }
        f.call(t + C2 * h, &tmp, &mut k2)?;
        for i in 0..k {
            tmp[i] = x[i] + h * (A31 * k1[i] + A32 * k2[i]);
        }
        f.call(t + C3 * h, &tmp, &mut k3)?;
        for i in 0..k {
            tmp[i] = x[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
        }
        f.call(t + C4 * h, &tmp, &mut k4)?;
        for i in 0..k {
            tmp[i] = x[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
        }
        f.call(t + C5 * h, &tmp, &mut k5)?;
        for i in 0..k {
            tmp[i] = x[i]
                + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
        }
        f.call(t + h, &tmp, &mut k6)?;
        for i in 0..k {
            x_new[i] = x[i]
                + h * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
        }
        f.call(t + h, &x_new, &mut k7)?;
        for i in 0..k {
            err[i] = h
                * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
        }
        let en = err_norm(&x, &x_new, &err, settings);
        if !en.is_finite() {
            h *= 0.2;
            continue;
        }
        if en <= 1.0 {
            let t_new = if last { t_end } else { t + h };
            // dense output over [t, t_new]
            while next_out < n_out && t_out[next_out] <= t_new {
                let tau = t_out[next_out];
                let row = if tau == t_new {
                    x_new.clone()
                } else {
                    let th = (tau - t) / h;
                    let th1 = 1.0 - th;
                    (0..k)
                        .map(|i| {
                            let r2 = x_new[i] - x[i];
                            let r3 = h * k1[i] - r2;
                            let r4 = r2 - h * k7[i] - r3;
                            let r5 = h
                                * (D1 * k1[i]
                                    + D3 * k3[i]
                                    + D4 * k4[i]
                                    + D5 * k5[i]
                                    + D6 * k6[i]
                                    + D7 * k7[i]);
                            x[i] + th * (r2 + th1 * (r3 + th * (r4 + th1 * r5)))
                        })
                        .collect()
                };
                for j in 0..k {
                    out[(next_out, j)] = row[j];
                }
                next_out += 1;
            }
            t = t_new;
            std::mem::swap(&mut x, &mut x_new);
            std::mem::swap(&mut k1, &mut k7);
            let fac = (0.9 * en.max(1e-10).powf(-0.2)).clamp(0.2, 10.0);
            h *= fac;
        } else {
            let fac = (0.9 * en.powf(-0.2)).clamp(0.2, 1.0);
            h *= fac;
        }
    }
    Ok(out)
}
