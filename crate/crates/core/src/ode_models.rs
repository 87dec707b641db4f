//! Parametric vector fields `ẋ = f(x, θ)` with analytic Jacobians, plus the
//! benchmark configurations they are usually run with.

use std::fmt::Debug;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{OdinError, Result};
use crate::experiments::data::NoiseSpec;

/// Ground-truth setup a system is benchmarked with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanonicalSetup {
    pub theta: Vec<f64>,
    pub x0: Vec<f64>,
    /// Observation times; the first entry is the initial time.
    pub times: Vec<f64>,
    /// Low-noise preset first.
    pub noise_presets: Vec<NoiseSpec>,
}

pub trait OdeSystem: Debug + Send + Sync {
    fn name(&self) -> String;
    /// State dimension `K`.
    fn dim(&self) -> usize;
    /// Parameter count `P`.
    fn n_params(&self) -> usize;

    /// Writes `f(x, θ)` into `out`. Inputs are assumed to have the right lengths.
    fn rhs_unchecked(&self, x: &[f64], theta: &[f64], out: &mut [f64]) -> Result<()>;
    /// `∂f/∂x`, `K x K`.
    fn jac_x_unchecked(&self, x: &[f64], theta: &[f64]) -> Result<DMatrix<f64>>;
    /// `∂f/∂θ`, `K x P`.
    fn jac_theta_unchecked(&self, x: &[f64], theta: &[f64]) -> Result<DMatrix<f64>>;

    fn canonical(&self) -> CanonicalSetup;

    /// Accumulates `(∂f/∂x)^T w` into `gx` and `(∂f/∂θ)^T w` into `gtheta`.
    /// Systems with sparse Jacobians override this.
    fn vjp_unchecked(
        &self,
        x: &[f64],
        theta: &[f64],
        w: &[f64],
        gx: &mut [f64],
        gtheta: &mut [f64],
    ) -> Result<()> {
        let jx = self.jac_x_unchecked(x, theta)?;
        let jt = self.jac_theta_unchecked(x, theta)?;
        for (j, gj) in gx.iter_mut().enumerate() {
            *gj += (0..w.len()).map(|i| jx[(i, j)] * w[i]).sum::<f64>();
        }
        for (p, gp) in gtheta.iter_mut().enumerate() {
            *gp += (0..w.len()).map(|i| jt[(i, p)] * w[i]).sum::<f64>();
        }
        Ok(())
    }

    fn check(&self, x: &[f64], theta: &[f64]) -> Result<()> {
        if x.len() != self.dim() || theta.len() != self.n_params() {
            return Err(OdinError::Input(format!(
                "{} expects {} states and {} parameters, got {} and {}",
                self.name(),
                self.dim(),
                self.n_params(),
                x.len(),
                theta.len()
            )));
        }
        Ok(())
    }

    fn rhs(&self, x: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
        self.check(x, theta)?;
        let mut out = vec![0.0; self.dim()];
        self.rhs_unchecked(x, theta, &mut out)?;
        Ok(out)
    }

    fn jac_x(&self, x: &[f64], theta: &[f64]) -> Result<DMatrix<f64>> {
        self.check(x, theta)?;
        self.jac_x_unchecked(x, theta)
    }

    fn jac_theta(&self, x: &[f64], theta: &[f64]) -> Result<DMatrix<f64>> {
        self.check(x, theta)?;
        self.jac_theta_unchecked(x, theta)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LotkaVolterra;

impl OdeSystem for LotkaVolterra {
    fn name(&self) -> String {
        "lv".into()
    }
    fn dim(&self) -> usize {
        2
    }
    fn n_params(&self) -> usize {
        4
    }
    fn rhs_unchecked(&self, x: &[f64], th: &[f64], out: &mut [f64]) -> Result<()> {
        out[0] = th[0] * x[0] - th[1] * x[0] * x[1];
        out[1] = -th[2] * x[1] + th[3] * x[0] * x[1];
        Ok(())
    }
    fn jac_x_unchecked(&self, x: &[f64], th: &[f64]) -> Result<DMatrix<f64>> {
        Ok(DMatrix::from_row_slice(
            2,
            2,
            &[
                th[0] - th[1] * x[1],
                -th[1] * x[0],
                th[3] * x[1],
                -th[2] + th[3] * x[0],
            ],
        ))
    }
    fn jac_theta_unchecked(&self, x: &[f64], _th: &[f64]) -> Result<DMatrix<f64>> {
        let p = x[0] * x[1];
        Ok(DMatrix::from_row_slice(2, 4, &[x[0], -p, 0.0, 0.0, 0.0, 0.0, -x[1], p]))
    }
    fn canonical(&self) -> CanonicalSetup {
        CanonicalSetup {
            theta: vec![2.0, 1.0, 4.0, 1.0],
            x0: vec![5.0, 3.0],
            times: linspace(0.0, 2.0, 20),
            noise_presets: vec![NoiseSpec::Absolute(0.1), NoiseSpec::Absolute(0.5)],
        }
    }
}

/// Sign of the recovery-variable equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FhnSignConvention {
    /// `Ṙ = (1/θ1)(V - θ2 + θ3 R)`
    Alternate,
    /// `Ṙ = -(1/θ1)(V - θ2 + θ3 R)`
    #[default]
    Standard,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FitzHughNagumo {
    pub sign: FhnSignConvention,
}

impl FitzHughNagumo {
    fn s(&self) -> f64 {
        match self.sign {
            FhnSignConvention::Alternate => 1.0,
            FhnSignConvention::Standard => -1.0,
        }
    }
}

fn nonzero(v: f64, what: &str) -> Result<f64> {
    if v.abs() <= 1e-12 {
        Err(OdinError::Domain(format!("{what} is zero")))
    } else {
        Ok(v)
    }
}

impl OdeSystem for FitzHughNagumo {
    fn name(&self) -> String {
        match self.sign {
            FhnSignConvention::Standard => "fhn".into(),
            FhnSignConvention::Alternate => "fhn-alt".into(),
        }
    }
    fn dim(&self) -> usize {
        2
    }
    fn n_params(&self) -> usize {
        3
    }
    fn rhs_unchecked(&self, x: &[f64], th: &[f64], out: &mut [f64]) -> Result<()> {
        let (v, r) = (x[0], x[1]);
        let t1 = nonzero(th[0], "theta_1")?;
        out[0] = t1 * (v - v.powi(3) / 3.0 + r);
        out[1] = self.s() / t1 * (v - th[1] + th[2] * r);
        Ok(())
    }
    fn jac_x_unchecked(&self, x: &[f64], th: &[f64]) -> Result<DMatrix<f64>> {
        let t1 = nonzero(th[0], "theta_1")?;
        let s = self.s();
        Ok(DMatrix::from_row_slice(
            2,
            2,
            &[t1 * (1.0 - x[0] * x[0]), t1, s / t1, s * th[2] / t1],
        ))
    }
    fn jac_theta_unchecked(&self, x: &[f64], th: &[f64]) -> Result<DMatrix<f64>> {
        let (v, r) = (x[0], x[1]);
        let t1 = nonzero(th[0], "theta_1")?;
        let s = self.s();
        let inner = v - th[1] + th[2] * r;
        Ok(DMatrix::from_row_slice(
            2,
            3,
            &[
                v - v.powi(3) / 3.0 + r,
                0.0,
                0.0,
                -s * inner / (t1 * t1),
                -s / t1,
                s * r / t1,
            ],
        ))
    }
    fn canonical(&self) -> CanonicalSetup {
        CanonicalSetup {
            theta: vec![0.2, 0.2, 3.0],
            x0: vec![-1.0, 1.0],
            times: linspace(0.0, 10.0, 20),
            noise_presets: vec![NoiseSpec::Snr(100.0), NoiseSpec::Snr(10.0)],
        }
    }
}

/// States ordered `[S, dS, R, R_S, R_pp]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ProteinTransduction;

impl ProteinTransduction {
    fn denom(rpp: f64, th6: f64) -> Result<f64> {
        let q = th6 + rpp;
        if q <= 1e-12 {
            Err(OdinError::Domain(format!(
                "theta_6 + R_pp = {q} is at or past the pole"
            )))
        } else {
            Ok(q)
        }
    }
}

impl OdeSystem for ProteinTransduction {
    fn name(&self) -> String {
        "pt".into()
    }
    fn dim(&self) -> usize {
        5
    }
    fn n_params(&self) -> usize {
        6
    }
    fn rhs_unchecked(&self, x: &[f64], th: &[f64], out: &mut [f64]) -> Result<()> {
        let [s, _ds, r, rs, rpp] = [x[0], x[1], x[2], x[3], x[4]];
        let q = Self::denom(rpp, th[5])?;
        let mm = th[4] * rpp / q;
        out[0] = -th[0] * s - th[1] * s * r + th[2] * rs;
        out[1] = th[0] * s;
        out[2] = -th[1] * s * r + th[2] * rs + mm;
        out[3] = th[1] * s * r - th[2] * rs - th[3] * rs;
        out[4] = th[3] * rs - mm;
        Ok(())
    }
    fn jac_x_unchecked(&self, x: &[f64], th: &[f64]) -> Result<DMatrix<f64>> {
        let [s, _ds, r, _rs, rpp] = [x[0], x[1], x[2], x[3], x[4]];
        let q = Self::denom(rpp, th[5])?;
        let dmm = th[4] * th[5] / (q * q);
        #[rustfmt::skip]
        let j = DMatrix::from_row_slice(5, 5, &[
            -th[0] - th[1] * r, 0.0, -th[1] * s, th[2], 0.0,
            th[0], 0.0, 0.0, 0.0, 0.0,
            -th[1] * r, 0.0, -th[1] * s, th[2], dmm,
            th[1] * r, 0.0, th[1] * s, -th[2] - th[3], 0.0,
            0.0, 0.0, 0.0, th[3], -dmm,
        ]);
        Ok(j)
    }
    fn jac_theta_unchecked(&self, x: &[f64], th: &[f64]) -> Result<DMatrix<f64>> {
        let [s, _ds, r, rs, rpp] = [x[0], x[1], x[2], x[3], x[4]];
        let q = Self::denom(rpp, th[5])?;
        let h = rpp / q;
        let d6 = -th[4] * rpp / (q * q);
        let sr = s * r;
        #[rustfmt::skip]
        let j = DMatrix::from_row_slice(5, 6, &[
            -s, -sr, rs, 0.0, 0.0, 0.0,
            s, 0.0, 0.0, 0.0, 0.0, 0.0,
            0.0, -sr, rs, 0.0, h, d6,
            0.0, sr, -rs, -rs, 0.0, 0.0,
            0.0, 0.0, 0.0, rs, -h, -d6,
        ]);
        Ok(j)
    }
    fn canonical(&self) -> CanonicalSetup {
        CanonicalSetup {
            theta: vec![0.07, 0.6, 0.05, 0.3, 0.017, 0.3],
            x0: vec![1.0, 0.0, 1.0, 0.0, 0.0],
            times: vec![
                0.0, 1.0, 2.0, 4.0, 5.0, 7.0, 10.0, 15.0, 20.0, 30.0, 40.0, 50.0, 60.0, 80.0, 100.0,
            ],
            noise_presets: vec![NoiseSpec::Absolute(0.001), NoiseSpec::Absolute(0.01)],
        }
    }
}

/// `ẋ_k = (x_{k+1} - x_{k-2}) x_{k-1} - x_k + θ`, indices modulo `K`.
#[derive(Debug, Clone, Copy)]
pub struct Lorenz96 {
    k: usize,
}

impl Lorenz96 {
    pub fn new(k: usize) -> Result<Self> {
        if k < 4 {
            return Err(OdinError::Input(format!(
                "Lorenz '96 needs at least 4 states, got {k}"
            )));
        }
        Ok(Self { k })
    }

    fn idx(&self, i: usize, offset: isize) -> usize {
        (i as isize + offset).rem_euclid(self.k as isize) as usize
    }
}

impl OdeSystem for Lorenz96 {
    fn name(&self) -> String {
        format!("lorenz96-{}", self.k)
    }
    fn dim(&self) -> usize {
        self.k
    }
    fn n_params(&self) -> usize {
        1
    }
    fn rhs_unchecked(&self, x: &[f64], th: &[f64], out: &mut [f64]) -> Result<()> {
        for i in 0..self.k {
            out[i] = (x[self.idx(i, 1)] - x[self.idx(i, -2)]) * x[self.idx(i, -1)] - x[i] + th[0];
        }
        Ok(())
    }
    fn jac_x_unchecked(&self, x: &[f64], _th: &[f64]) -> Result<DMatrix<f64>> {
        let mut j = DMatrix::zeros(self.k, self.k);
        for i in 0..self.k {
            let (p1, m1, m2) = (self.idx(i, 1), self.idx(i, -1), self.idx(i, -2));
            j[(i, p1)] += x[m1];
            j[(i, m2)] -= x[m1];
            j[(i, m1)] += x[p1] - x[m2];
            j[(i, i)] -= 1.0;
        }
        Ok(j)
    }
    fn jac_theta_unchecked(&self, _x: &[f64], _th: &[f64]) -> Result<DMatrix<f64>> {
        Ok(DMatrix::from_element(self.k, 1, 1.0))
    }
    fn vjp_unchecked(
        &self,
        x: &[f64],
        _th: &[f64],
        w: &[f64],
        gx: &mut [f64],
        gtheta: &mut [f64],
    ) -> Result<()> {
        for i in 0..self.k {
            let (p1, m1, m2) = (self.idx(i, 1), self.idx(i, -1), self.idx(i, -2));
            gx[p1] += w[i] * x[m1];
            gx[m2] -= w[i] * x[m1];
            gx[m1] += w[i] * (x[p1] - x[m2]);
            gx[i] -= w[i];
            gtheta[0] += w[i];
        }
        Ok(())
    }
    fn canonical(&self) -> CanonicalSetup {
        // Forcing value plus a fixed pseudo-random offset per state.
        let mut rng = ChaCha8Rng::seed_from_u64(0x96);
        let x0 = (0..self.k).map(|_| 8.0 + rng.random_range(-1.0..1.0)).collect();
        CanonicalSetup {
            theta: vec![8.0],
            x0,
            times: linspace(0.0, 5.0, 50),
            noise_presets: vec![NoiseSpec::Absolute(0.5)],
        }
    }
}

/// Lotka-Volterra candidate with either equation optionally replaced:
/// `ẋ1 = θa x1² + θb x2` when `first_correct` is false and
/// `ẋ2 = -θc x2` when `second_correct` is false.
#[derive(Debug, Clone, Copy)]
pub struct LvMisspecified {
    pub first_correct: bool,
    pub second_correct: bool,
}

impl LvMisspecified {
    pub fn new(i: u8, j: u8) -> Result<Self> {
        if i > 1 || j > 1 {
            return Err(OdinError::Input(format!("model index ({i}, {j}) must be 0 or 1")));
        }
        Ok(Self {
            first_correct: i == 1,
            second_correct: j == 1,
        })
    }

    fn n_second(&self) -> usize {
        if self.second_correct {
            2
        } else {
            1
        }
    }
}

impl OdeSystem for LvMisspecified {
    fn name(&self) -> String {
        format!(
            "lv-m{}{}",
            self.first_correct as u8, self.second_correct as u8
        )
    }
    fn dim(&self) -> usize {
        2
    }
    fn n_params(&self) -> usize {
        2 + self.n_second()
    }
    fn rhs_unchecked(&self, x: &[f64], th: &[f64], out: &mut [f64]) -> Result<()> {
        out[0] = if self.first_correct {
            th[0] * x[0] - th[1] * x[0] * x[1]
        } else {
            th[0] * x[0] * x[0] + th[1] * x[1]
        };
        out[1] = if self.second_correct {
            -th[2] * x[1] + th[3] * x[0] * x[1]
        } else {
            -th[2] * x[1]
        };
        Ok(())
    }
    fn jac_x_unchecked(&self, x: &[f64], th: &[f64]) -> Result<DMatrix<f64>> {
        let row0 = if self.first_correct {
            [th[0] - th[1] * x[1], -th[1] * x[0]]
        } else {
            [2.0 * th[0] * x[0], th[1]]
        };
        let row1 = if self.second_correct {
            [th[3] * x[1], -th[2] + th[3] * x[0]]
        } else {
            [0.0, -th[2]]
        };
        Ok(DMatrix::from_row_slice(2, 2, &[row0[0], row0[1], row1[0], row1[1]]))
    }
    fn jac_theta_unchecked(&self, x: &[f64], _th: &[f64]) -> Result<DMatrix<f64>> {
        let mut j = DMatrix::zeros(2, self.n_params());
        if self.first_correct {
            j[(0, 0)] = x[0];
            j[(0, 1)] = -x[0] * x[1];
        } else {
            j[(0, 0)] = x[0] * x[0];
            j[(0, 1)] = x[1];
        }
        j[(1, 2)] = -x[1];
        if self.second_correct {
            j[(1, 3)] = x[0] * x[1];
        }
        Ok(j)
    }
    fn canonical(&self) -> CanonicalSetup {
        let mut c = LotkaVolterra.canonical();
        c.theta.truncate(self.n_params());
        c
    }
}

pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![a],
        _ => (0..n)
            .map(|i| a + (b - a) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

/// Names accepted by [`lookup`].
pub const SYSTEM_NAMES: &[&str] = &[
    "lv", "fhn", "fhn-alt", "pt", "lorenz96", "lv-m00", "lv-m01", "lv-m10", "lv-m11",
];

/// Default Lorenz '96 dimension when none is given in the name.
pub const LORENZ96_DEFAULT_DIM: usize = 25;

/// Registry lookup. Lorenz '96 accepts `lorenz96` or `lorenz96-<K>`.
pub fn lookup(name: &str) -> Result<Arc<dyn OdeSystem>> {
    let sys: Arc<dyn OdeSystem> = match name {
        "lv" => Arc::new(LotkaVolterra),
        "fhn" => Arc::new(FitzHughNagumo {
            sign: FhnSignConvention::Standard,
        }),
        "fhn-alt" => Arc::new(FitzHughNagumo {
            sign: FhnSignConvention::Alternate,
        }),
        "pt" => Arc::new(ProteinTransduction),
        "lorenz96" => Arc::new(Lorenz96::new(LORENZ96_DEFAULT_DIM)?),
        "lv-m00" => Arc::new(LvMisspecified::new(0, 0)?),
        "lv-m01" => Arc::new(LvMisspecified::new(0, 1)?),
        "lv-m10" => Arc::new(LvMisspecified::new(1, 0)?),
        "lv-m11" => Arc::new(LvMisspecified::new(1, 1)?),
        other => {
            let k = other
                .strip_prefix("lorenz96-")
                .and_then(|s| s.parse::<usize>().ok())
                .ok_or_else(|| OdinError::UnknownSystem(other.to_string()))?;
            Arc::new(Lorenz96::new(k)?)
        }
    };
    Ok(sys)
}
