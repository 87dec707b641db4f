//! Small dense helpers on top of nalgebra's Cholesky.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{OdinError, Result};

/// First relative jitter tried when a factorization needs regularization.
pub const JITTER_START: f64 = 1e-8;
/// Largest relative jitter before giving up.
pub const JITTER_MAX: f64 = 1e-4;

/// A Cholesky factor of `M + jitter * I` together with the jitter that was needed.
#[derive(Clone, Debug)]
pub struct JitteredCholesky {
    pub chol: Cholesky<f64, Dyn>,
    /// Absolute diagonal shift that was added to the input matrix.
    pub jitter: f64,
}

impl JitteredCholesky {
    /// Factor `m + eps * scale * I`, starting with `eps = first` and escalating by
    /// 10x up to [`JITTER_MAX`]. `first = 0.0` tries the bare matrix before
    /// falling back to [`JITTER_START`].
    pub fn new(m: &DMatrix<f64>, scale: f64, first: f64) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(OdinError::Input(format!(
                "cannot factor a {}x{} matrix",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(OdinError::Numerical(
                "matrix has non-finite entries".into(),
            ));
        }
        let scale = if scale.is_finite() && scale > 0.0 {
            scale
        } else {
            1.0
        };
        let mut eps = first;
        loop {
            let jitter = eps * scale;
            let mut shifted = m.clone();
            if jitter > 0.0 {
                for i in 0..shifted.nrows() {
                    shifted[(i, i)] += jitter;
                }
            }
            if let Some(chol) = Cholesky::new(shifted) {
                let diag_ok = (0..m.nrows()).all(|i| {
                    let d = chol.l_dirty()[(i, i)];
                    d.is_finite() && d > 0.0
                });
                if diag_ok {
                    return Ok(Self { chol, jitter });
                }
            }
            eps = if eps == 0.0 { JITTER_START } else { eps * 10.0 };
            if eps > JITTER_MAX * (1.0 + 1e-9) {
                return Err(OdinError::Numerical(format!(
                    "Cholesky factorization failed with relative jitter up to {JITTER_MAX:e}"
                )));
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    /// `L^{-1} b` by forward substitution.
    pub fn solve_lower_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = b.clone();
        self.chol.l_dirty().solve_lower_triangular_mut(&mut out);
        out
    }

    pub fn solve_lower(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut out = b.clone();
        self.chol.l_dirty().solve_lower_triangular_mut(&mut out);
        out
    }

    pub fn log_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }

    /// `b^T M^{-1} b`.
    pub fn quad_form(&self, b: &DVector<f64>) -> f64 {
        self.solve_lower(b).norm_squared()
    }

    /// Explicit inverse; only for small matrices and gradient bookkeeping.
    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    /// `trace(M^{-1}) = ||L^{-1}||_F^2`.
    pub fn trace_inverse(&self) -> f64 {
        let n = self.dim();
        let eye = DMatrix::<f64>::identity(n, n);
        self.solve_lower_mat(&eye).norm_squared()
    }
}

/// `(m + m^T) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn singular_matrix_gets_jitter() {
        let m = DMatrix::from_element(3, 3, 1.0);
        let f = JitteredCholesky::new(&m, 1.0, JITTER_START).unwrap();
        assert!(f.jitter >= 1e-8);
        let rebuilt = f.l() * f.l().transpose();
        assert!((rebuilt - m).abs().max() <= f.jitter * 1.0001);
    }

    #[test]
    fn bare_attempt_for_pd_matrix() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let f = JitteredCholesky::new(&m, 1.0, 0.0).unwrap();
        assert_eq!(f.jitter, 0.0);
        assert!((f.log_det() - 11f64.ln()).abs() < 1e-14);
        let inv = f.inverse();
        assert!((f.trace_inverse() - inv.trace()).abs() < 1e-14);
    }

    #[test]
    fn indefinite_matrix_fails() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(
            JitteredCholesky::new(&m, 1.0, JITTER_START),
            Err(OdinError::Numerical(_))
        ));
    }
}
