//! The ODIN risk and its analytic gradient.
//!
//! For states `x` (`N x K`), parameters `θ` and per-state derivative noise `γ`:
//!
//! ```text
//! R = Σ_k  z_kᵀ C_k⁻¹ z_k + σ_k⁻² ‖x_k − y_k‖² + r_kᵀ M_k⁻¹ r_k + log det M_k
//! z_k = x_k − m_k,   r_k = f_k(x, θ) − D_k z_k,   M_k = A_k + γ_k I
//! ```
//!
//! where `m_k` is the constant GP prior mean of state `k`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{OdinError, Result};
use crate::gp::GpState;
use crate::linalg::{JITTER_MAX, JITTER_START};
use crate::ode_models::OdeSystem;
use crate::optimizer::Objective;

pub const GAMMA_MIN: f64 = 1e-6;

/// Relative change in `γ_k` below which a cached factor of `A_k + γ_k I` is reused.
const GAMMA_CACHE_RTOL: f64 = 1e-12;

/// Everything the risk needs besides the optimization variables.
#[derive(Debug, Clone)]
pub struct RiskContext {
    pub states: Vec<GpState>,
    /// Observations, `N x K`.
    pub y: DMatrix<f64>,
    /// Observation noise standard deviation per state.
    pub sigma: Vec<f64>,
    pub system: Arc<dyn OdeSystem>,
    pub gamma_min: f64,
    /// Eigendecomposition of each `A_k`.
    a_eigen: Vec<SymmetricEigen<f64, nalgebra::Dyn>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiskGradient {
    /// `∂R/∂x`, `N x K`.
    pub x: DMatrix<f64>,
    pub theta: Vec<f64>,
    pub gamma: Vec<f64>,
}

/// Spectral factor of `M = A_k + γ_k I`: `M = Q diag(d) Qᵀ`.
#[derive(Debug, Clone)]
pub struct DerivFactor {
    pub gamma: f64,
    /// Shifted eigenvalues, including any jitter that was needed.
    pub d: DVector<f64>,
    pub jitter: f64,
    pub log_det: f64,
    pub trace_inv: f64,
}

impl DerivFactor {
    fn new(eig: &SymmetricEigen<f64, nalgebra::Dyn>, gamma: f64) -> Result<Self> {
        if !(gamma >= 0.0) {
            return Err(OdinError::Domain(format!(
                "derivative noise must be non-negative, got {gamma}"
            )));
        }
        let n = eig.eigenvalues.len();
        let scale = eig.eigenvalues.sum() / n.max(1) as f64;
        let scale = if scale.is_finite() && scale > 0.0 { scale } else { 1.0 };
        let mut eps = 0.0;
        loop {
            let jitter = eps * scale;
            let d = eig.eigenvalues.map(|l| l + gamma + jitter);
            let top = d.max();
            if d.min() > n as f64 * f64::EPSILON * top && top.is_finite() {
                return Ok(Self {
                    gamma,
                    log_det: d.iter().map(|v| v.ln()).sum(),
                    trace_inv: d.iter().map(|v| 1.0 / v).sum(),
                    d,
                    jitter,
                });
            }
            eps = if eps == 0.0 { JITTER_START } else { eps * 10.0 };
            if eps > JITTER_MAX * (1.0 + 1e-9) {
                return Err(OdinError::Numerical(format!(
                    "A + γI is not positive definite with relative jitter up to {JITTER_MAX:e}"
                )));
            }
        }
    }

    /// `M⁻¹ r`.
    fn solve(&self, eig: &SymmetricEigen<f64, nalgebra::Dyn>, r: &DVector<f64>) -> DVector<f64> {
        let mut c = eig.eigenvectors.tr_mul(r);
        c.component_div_assign(&self.d);
        &eig.eigenvectors * c
    }

    /// `rᵀ M⁻¹ r`.
    fn quad_form(&self, eig: &SymmetricEigen<f64, nalgebra::Dyn>, r: &DVector<f64>) -> f64 {
        let c = eig.eigenvectors.tr_mul(r);
        c.iter().zip(self.d.iter()).map(|(a, b)| a * a / b).sum()
    }
}

impl RiskContext {
    pub fn new(
        states: Vec<GpState>,
        y: DMatrix<f64>,
        sigma: Vec<f64>,
        system: Arc<dyn OdeSystem>,
    ) -> Result<Self> {
        let (n, k) = y.shape();
        if states.len() != k || sigma.len() != k || system.dim() != k {
            return Err(OdinError::Input(format!(
                "{} GP states, {} noise levels and a {}-dimensional system for {k} observed states",
                states.len(),
                sigma.len(),
                system.dim()
            )));
        }
        if states.iter().any(|s| s.n() != n) {
            return Err(OdinError::Input(
                "GP states built on a grid of the wrong length".into(),
            ));
        }
        if sigma.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(OdinError::Input("noise levels must be positive".into()));
        }
        let a_eigen = states.iter().map(|s| SymmetricEigen::new(s.a.clone())).collect();
        Ok(Self {
            states,
            y,
            sigma,
            system,
            gamma_min: GAMMA_MIN,
            a_eigen,
        })
    }

    pub fn n(&self) -> usize {
        self.y.nrows()
    }

    pub fn k(&self) -> usize {
        self.y.ncols()
    }

    pub fn p(&self) -> usize {
        self.system.n_params()
    }

    fn check_shapes(&self, x: &DMatrix<f64>, gamma: &[f64]) -> Result<()> {
        if x.shape() != self.y.shape() || gamma.len() != self.k() {
            return Err(OdinError::Input(format!(
                "states are {:?} and γ has {} entries, expected {:?} and {}",
                x.shape(),
                gamma.len(),
                self.y.shape(),
                self.k()
            )));
        }
        Ok(())
    }

    pub fn deriv_factor(&self, k: usize, gamma: f64) -> Result<DerivFactor> {
        DerivFactor::new(&self.a_eigen[k], gamma)
    }

    /// `f(x_i, θ)` for every row of `x`.
    pub fn vector_field(&self, x: &DMatrix<f64>, theta: &[f64]) -> Result<DMatrix<f64>> {
        let (n, k) = x.shape();
        self.system.check(&vec![0.0; k], theta)?;
        let mut f = DMatrix::zeros(n, k);
        let mut row = vec![0.0; k];
        let mut out = vec![0.0; k];
        for i in 0..n {
            for j in 0..k {
                row[j] = x[(i, j)];
            }
            self.system.rhs_unchecked(&row, theta, &mut out)?;
            for j in 0..k {
                f[(i, j)] = out[j];
            }
        }
        Ok(f)
    }

    /// Quadratic part of the risk with derivative observations `F` held fixed.
    pub fn risk_tilde(&self, x: &DMatrix<f64>, f: &DMatrix<f64>, gamma: &[f64]) -> Result<f64> {
        self.check_shapes(x, gamma)?;
        if f.shape() != x.shape() {
            return Err(OdinError::Input("F must have the same shape as x".into()));
        }
        let mut total = 0.0;
        for k in 0..self.k() {
            let st = &self.states[k];
            let z = DVector::from_iterator(self.n(), x.column(k).iter().map(|v| v - st.prior_mean));
            let r = f.column(k) - &st.d * &z;
            let m = self.deriv_factor(k, gamma[k])?;
            let fit = (x.column(k) - self.y.column(k)).norm_squared() / self.sigma[k].powi(2);
            total += st.chol_c.quad_form(&z) + fit + m.quad_form(&self.a_eigen[k], &r);
        }
        Ok(total)
    }

    /// `risk_tilde(x, f(x, θ), γ) + Σ_k log det(A_k + γ_k I)`.
    pub fn risk_full(&self, x: &DMatrix<f64>, theta: &[f64], gamma: &[f64]) -> Result<f64> {
        self.check_shapes(x, gamma)?;
        let f = self.vector_field(x, theta)?;
        let mut total = self.risk_tilde(x, &f, gamma)?;
        for k in 0..self.k() {
            total += self.deriv_factor(k, gamma[k])?.log_det;
        }
        Ok(total)
    }

    /// Risk and gradient in one pass.
    pub fn risk_gradient(
        &self,
        x: &DMatrix<f64>,
        theta: &[f64],
        gamma: &[f64],
    ) -> Result<(f64, RiskGradient)> {
        let mut cache = vec![None; self.k()];
        self.evaluate_cached(x, theta, gamma, &mut cache)
    }

    /// As [`risk_gradient`](Self::risk_gradient), reusing factors of
    /// `A_k + γ_k I` whose `γ_k` has not changed.
    pub fn evaluate_cached(
        &self,
        x: &DMatrix<f64>,
        theta: &[f64],
        gamma: &[f64],
        cache: &mut [Option<DerivFactor>],
    ) -> Result<(f64, RiskGradient)> {
        self.check_shapes(x, gamma)?;
        let (n, kk) = (self.n(), self.k());
        if gamma.iter().any(|g| !(*g >= self.gamma_min)) {
            return Err(OdinError::Domain(format!(
                "γ must be at least {:e}",
                self.gamma_min
            )));
        }
        let f = self.vector_field(x, theta)?;
        let mut value = 0.0;
        let mut gx = DMatrix::zeros(n, kk);
        let mut ggamma = vec![0.0; kk];
        // u_k = M_k⁻¹ r_k, stored column-wise
        let mut u = DMatrix::zeros(n, kk);

        for k in 0..kk {
            let st = &self.states[k];
            let stale = match &cache[k] {
                Some(c) => (c.gamma - gamma[k]).abs() > GAMMA_CACHE_RTOL * c.gamma.abs(),
                None => true,
            };
            if stale {
                cache[k] = Some(self.deriv_factor(k, gamma[k])?);
            }
            let fac = cache[k].as_ref().expect("factor cached above");

            let z = DVector::from_iterator(n, x.column(k).iter().map(|v| v - st.prior_mean));
            let cz = st.chol_c.solve(&z);
            let r = f.column(k) - &st.d * &z;
            let uk = fac.solve(&self.a_eigen[k], &r);
            let resid = x.column(k) - self.y.column(k);
            let s2 = self.sigma[k] * self.sigma[k];

            value += z.dot(&cz) + resid.norm_squared() / s2 + r.dot(&uk) + fac.log_det;

            let col = cz * 2.0 + resid * (2.0 / s2) - st.d.tr_mul(&uk) * 2.0;
            gx.set_column(k, &col);
            ggamma[k] = fac.trace_inv - uk.norm_squared();
            u.set_column(k, &uk);
        }

        let mut gtheta = vec![0.0; self.p()];
        let mut row = vec![0.0; kk];
        let mut w = vec![0.0; kk];
        let mut gxi = vec![0.0; kk];
        for i in 0..n {
            for j in 0..kk {
                row[j] = x[(i, j)];
                w[j] = 2.0 * u[(i, j)];
                gxi[j] = 0.0;
            }
            self.system
                .vjp_unchecked(&row, theta, &w, &mut gxi, &mut gtheta)?;
            for j in 0..kk {
                gx[(i, j)] += gxi[j];
            }
        }
        Ok((
            value,
            RiskGradient {
                x: gx,
                theta: gtheta,
                gamma: ggamma,
            },
        ))
    }
}

/// Position of each block in the flat optimization vector
/// `[vec(x) column by column, θ, γ]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlatLayout {
    pub n: usize,
    pub k: usize,
    pub p: usize,
}

impl FlatLayout {
    pub fn of(ctx: &RiskContext) -> Self {
        Self {
            n: ctx.n(),
            k: ctx.k(),
            p: ctx.p(),
        }
    }

    pub fn len(&self) -> usize {
        self.n * self.k + self.p + self.k
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn theta_offset(&self) -> usize {
        self.n * self.k
    }

    pub fn gamma_offset(&self) -> usize {
        self.n * self.k + self.p
    }

    pub fn pack(&self, x: &DMatrix<f64>, theta: &[f64], gamma: &[f64]) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.extend_from_slice(x.as_slice());
        v.extend_from_slice(theta);
        v.extend_from_slice(gamma);
        v
    }

    pub fn unpack<'a>(&self, v: &'a [f64]) -> (DMatrix<f64>, &'a [f64], &'a [f64]) {
        let x = DMatrix::from_column_slice(self.n, self.k, &v[..self.theta_offset()]);
        let theta = &v[self.theta_offset()..self.gamma_offset()];
        let gamma = &v[self.gamma_offset()..];
        (x, theta, gamma)
    }
}

/// Adapter exposing the risk as an optimizer objective. Evaluation failures
/// (ODE domain errors, failed factorizations) are reported as `+∞` so that
/// the line search backs off.
///
/// With whitening enabled the state block of the optimization vector holds
/// `w_k` with `x_k = m_k + L_k w_k`, where `L_k L_kᵀ` is the (jittered) prior
/// covariance of state `k`. With `log_gamma` the γ block holds `ln γ_k`;
/// values at or below `ln γ_min` map to `γ_min` exactly.
pub struct RiskObjective<'a> {
    pub ctx: &'a RiskContext,
    pub layout: FlatLayout,
    whitening: Option<Vec<DMatrix<f64>>>,
    log_gamma: bool,
    cache: Vec<Option<DerivFactor>>,
}

impl<'a> RiskObjective<'a> {
    pub fn new(ctx: &'a RiskContext) -> Self {
        Self {
            ctx,
            layout: FlatLayout::of(ctx),
            whitening: None,
            log_gamma: false,
            cache: vec![None; ctx.k()],
        }
    }

    pub fn with_whitening(mut self) -> Self {
        self.whitening = Some(self.ctx.states.iter().map(|s| s.chol_c.l()).collect());
        self
    }

    pub fn with_log_gamma(mut self) -> Self {
        self.log_gamma = true;
        self
    }

    /// Map a bound on `γ` to optimizer coordinates.
    pub fn gamma_coordinate(&self, gamma: f64) -> f64 {
        if self.log_gamma {
            gamma.ln()
        } else {
            gamma
        }
    }

    fn gamma_from_coordinate(&self, s: f64) -> f64 {
        if !self.log_gamma {
            return s;
        }
        let floor = self.ctx.gamma_min;
        if s <= floor.ln() {
            floor
        } else {
            s.exp().max(floor)
        }
    }

    /// Optimizer coordinates for a point `(x, θ, γ)`.
    pub fn to_internal(&self, x: &DMatrix<f64>, theta: &[f64], gamma: &[f64]) -> Vec<f64> {
        let gamma: Vec<f64> = gamma.iter().map(|g| self.gamma_coordinate(*g)).collect();
        let gamma = gamma.as_slice();
        match &self.whitening {
            None => self.layout.pack(x, theta, gamma),
            Some(ls) => {
                let mut w = x.clone();
                for (k, l) in ls.iter().enumerate() {
                    let z = x.column(k).add_scalar(-self.ctx.states[k].prior_mean);
                    let wk = l.solve_lower_triangular(&z).expect("factor has a positive diagonal");
                    w.set_column(k, &wk);
                }
                self.layout.pack(&w, theta, gamma)
            }
        }
    }

    /// `(x, θ, γ)` for optimizer coordinates.
    pub fn to_external(&self, v: &[f64]) -> (DMatrix<f64>, Vec<f64>, Vec<f64>) {
        let (mut x, theta, gamma) = self.layout.unpack(v);
        if let Some(ls) = &self.whitening {
            for (k, l) in ls.iter().enumerate() {
                let xk = (l * x.column(k)).add_scalar(self.ctx.states[k].prior_mean);
                x.set_column(k, &xk);
            }
        }
        let gamma = gamma.iter().map(|s| self.gamma_from_coordinate(*s)).collect();
        (x, theta.to_vec(), gamma)
    }
}

impl Objective for RiskObjective<'_> {
    fn evaluate(&mut self, v: &[f64], grad: &mut [f64]) -> f64 {
        let (x, theta, gamma) = self.to_external(v);
        match self.ctx.evaluate_cached(&x, &theta, &gamma, &mut self.cache) {
            Ok((value, mut g)) if value.is_finite() => {
                if let Some(ls) = &self.whitening {
                    for (k, l) in ls.iter().enumerate() {
                        let gw = l.tr_mul(&g.x.column(k));
                        g.x.set_column(k, &gw);
                    }
                }
                if self.log_gamma {
                    for (gk, gam) in g.gamma.iter_mut().zip(&gamma) {
                        *gk *= gam;
                    }
                }
                let (tx, tg) = (self.layout.theta_offset(), self.layout.gamma_offset());
                grad[..tx].copy_from_slice(g.x.as_slice());
                grad[tx..tg].copy_from_slice(&g.theta);
                grad[tg..].copy_from_slice(&g.gamma);
                value
            }
            _ => {
                grad.iter_mut().for_each(|v| *v = 0.0);
                f64::INFINITY
            }
        }
    }
}
