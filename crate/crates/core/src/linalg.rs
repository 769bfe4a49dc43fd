//! Small dense linear-algebra helpers shared by the GP and the regret lab.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-4;

/// A Cholesky factor together with the diagonal jitter that was needed to obtain it.
#[derive(Debug, Clone)]
pub struct Factor {
    pub chol: Cholesky<f64, Dyn>,
    pub jitter: f64,
}

impl Factor {
    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(rhs)
    }

    /// `ln |A|` of the factored matrix (including any jitter).
    pub fn log_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }
}

/// Factor a symmetric matrix, escalating diagonal jitter from 1e-10 by
/// factors of ten up to 1e-4 if the plain factorization fails.
pub fn cholesky_jittered(mat: &DMatrix<f64>) -> Result<Factor> {
    if let Some(chol) = Cholesky::new(mat.clone()) {
        return Ok(Factor { chol, jitter: 0.0 });
    }
    let mut jitter = JITTER_START;
    while jitter <= JITTER_MAX * (1.0 + 1e-9) {
        let mut m = mat.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(m) {
            return Ok(Factor { chol, jitter });
        }
        jitter *= 10.0;
    }
    let diag_min = (0..mat.nrows()).map(|i| mat[(i, i)]).fold(f64::INFINITY, f64::min);
    Err(Error::numeric(format!(
        "cholesky failed on {n}x{n} matrix after jitter up to {JITTER_MAX:e} (min diagonal {diag_min:e})",
        n = mat.nrows()
    )))
}

/// A square-root factor `B` with `B Bᵀ = mat` for a symmetric PSD matrix,
/// built from the eigendecomposition so rank-deficient inputs are handled.
/// Negative round-off eigenvalues are clamped to zero.
pub fn psd_sqrt(mat: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(mat.clone());
    let mut b = eig.eigenvectors.clone();
    for (j, &lam) in eig.eigenvalues.iter().enumerate() {
        let s = lam.max(0.0).sqrt();
        b.column_mut(j).scale_mut(s);
    }
    b
}

/// Numerically stable `ln Σ exp(xᵢ)`; returns `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if m == f64::INFINITY {
        return f64::INFINITY;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
