//! The GP over derivatives conditioned on states.
//!
//! Given `x ~ N(0, C)` and the cross-covariances with `ẋ`, the conditional
//! `p(ẋ | x) = N(D x, A)` has
//!
//! ```text
//! D = 'C C^{-1}
//! A = C'' - 'C C^{-1} C'
//! ```
//!
//! Both are formed with triangular solves against the Cholesky factor of `C`.

use nalgebra::DMatrix;

use crate::error::Result;
use crate::kernel::CovMatrices;
use crate::linalg::{symmetrize, JitteredCholesky, JITTER_START};

#[derive(Debug, Clone)]
pub struct DerivativeConditional {
    pub d: DMatrix<f64>,
    /// Symmetrized, not yet regularized.
    pub a: DMatrix<f64>,
    /// Factor of `C + jitter I` used to form `d` and `a`.
    pub c_factor: JitteredCholesky,
}

/// `D` and `A` from the four covariance blocks. `scale` sets the jitter
/// unit for `C` (normally `amplitude²`).
pub fn compute_d_a(cov: &CovMatrices, scale: f64) -> Result<DerivativeConditional> {
    let c_factor = JitteredCholesky::new(&cov.c, scale, JITTER_START)?;
    // W = L^{-1} C'   =>   'C C^{-1} C' = W^T W
    let w = c_factor.solve_lower_mat(&cov.c_db);
    let a = symmetrize(&(&cov.c_dadb - w.transpose() * &w));
    // D^T = C^{-1} C'
    let d = c_factor.solve_mat(&cov.c_db).transpose();
    Ok(DerivativeConditional { d, a, c_factor })
}

/// Cholesky factor of `A + γI`, with jitter relative to `trace(A)/N` added
/// only if the bare matrix does not factor.
pub fn deriv_obs_covariance(a: &DMatrix<f64>, gamma: f64) -> Result<JitteredCholesky> {
    if !(gamma >= 0.0) {
        return Err(crate::error::OdinError::Domain(format!(
            "derivative noise must be non-negative, got {gamma}"
        )));
    }
    let n = a.nrows();
    let mut m = a.clone();
    for i in 0..n {
        m[(i, i)] += gamma;
    }
    let scale = if n > 0 { a.trace() / n as f64 } else { 1.0 };
    JitteredCholesky::new(&m, scale, 0.0)
}
