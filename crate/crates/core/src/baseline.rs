//! Reference detectors: matched filter, ZF, LMMSE and the Jacobi-style
//! interference-cancellation iteration the unfolded network is built on.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::system_model::{Constellation, RealSystem};

/// `D = diag(H^T H)` together with `H^T H` and `H^T y`.
///
/// Shared by every detector that works on the normal equations, so a
/// Monte Carlo frame only pays for the Gram product once.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalGram {
    pub d: DVector<f64>,
    pub gram: DMatrix<f64>,
    pub matched: DVector<f64>,
}

impl DiagonalGram {
    pub fn precompute(sys: &RealSystem) -> Result<Self> {
        let gram = sys.h.tr_mul(&sys.h);
        let matched = sys.h.tr_mul(&sys.y);
        Self::from_parts(gram, matched)
    }

    /// Build from an already formed Gram matrix and matched-filter vector.
    pub fn from_parts(gram: DMatrix<f64>, matched: DVector<f64>) -> Result<Self> {
        if !gram.is_square() || gram.nrows() != matched.len() {
            return Err(Error::Dimension(format!(
                "gram {}x{} with matched length {}",
                gram.nrows(),
                gram.ncols(),
                matched.len()
            )));
        }
        let d = gram.diagonal();
        if let Some(column) = d.iter().position(|&di| di <= 0.0) {
            return Err(Error::DegenerateChannel { column });
        }
        Ok(Self { d, gram, matched })
    }

    /// Length of the real-domain symbol vector, `2K`.
    pub fn dim(&self) -> usize {
        self.d.len()
    }
}

fn solve(a: DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    // LU with partial pivoting
    a.lu().solve(b).ok_or(Error::SingularMatrix)
}

/// Unquantized `(H^T H)^-1 H^T y`.
pub fn zf_estimate(g: &DiagonalGram) -> Result<DVector<f64>> {
    solve(g.gram.clone(), &g.matched)
}

/// Unquantized `(H^T H + sigma^2 I)^-1 H^T y`, `noise_var` being the total
/// complex noise variance.
pub fn lmmse_estimate(g: &DiagonalGram, noise_var: f64) -> Result<DVector<f64>> {
    let mut a = g.gram.clone();
    for i in 0..a.nrows() {
        a[(i, i)] += noise_var;
    }
    solve(a, &g.matched)
}

pub fn zf_detect(sys: &RealSystem, c: &Constellation) -> Result<DVector<f64>> {
    let g = DiagonalGram::precompute(sys)?;
    Ok(c.quantize(&zf_estimate(&g)?))
}

pub fn lmmse_detect(sys: &RealSystem, c: &Constellation) -> Result<DVector<f64>> {
    let g = DiagonalGram::precompute(sys)?;
    Ok(c.quantize(&lmmse_estimate(&g, sys.noise_var())?))
}

/// Channel-hardening initializer `D^-1 H^T y`.
pub fn matched_filter_init(g: &DiagonalGram) -> DVector<f64> {
    g.matched.component_div(&g.d)
}

/// `D^-1 (H^T y - H^T H x_hat)`.
pub fn residual(g: &DiagonalGram, x_hat: &DVector<f64>) -> DVector<f64> {
    let mut v = &g.matched - &g.gram * x_hat;
    v.component_div_assign(&g.d);
    v
}

/// Unquantized iterate after `n_iters` interference-cancellation steps
/// starting from [`matched_filter_init`].
pub fn iterative_estimate(g: &DiagonalGram, n_iters: usize) -> DVector<f64> {
    let mut x = matched_filter_init(g);
    for _ in 0..n_iters {
        x += residual(g, &x);
    }
    x
}

/// Iterates unquantized, quantizes once at the end.
pub fn iterative_detect(
    sys: &RealSystem,
    c: &Constellation,
    n_iters: usize,
) -> Result<DVector<f64>> {
    if n_iters == 0 {
        return Err(Error::Config("n_iters must be >= 1".into()));
    }
    let g = DiagonalGram::precompute(sys)?;
    Ok(c.quantize(&iterative_estimate(&g, n_iters)))
}

/// Variant that quantizes after every step: `x <- Q[x + residual(x)]`.
pub fn iterative_detect_hard(g: &DiagonalGram, c: &Constellation, n_iters: usize) -> DVector<f64> {
    let mut x = matched_filter_init(g);
    for _ in 0..n_iters {
        let v = residual(g, &x);
        x = c.quantize(&(x + v));
    }
    x
}

/// Spectral radius of the iteration matrix `I - D^-1 H^T H`.
///
/// That matrix is similar to the symmetric `I - D^-1/2 H^T H D^-1/2`, so
/// a symmetric eigensolver suffices.
pub fn jacobi_spectral_radius(g: &DiagonalGram) -> f64 {
    let n = g.dim();
    let inv_sqrt = g.d.map(|di| 1.0 / di.sqrt());
    let m = DMatrix::from_fn(n, n, |i, j| {
        let delta = if i == j { 1.0 } else { 0.0 };
        delta - inv_sqrt[i] * g.gram[(i, j)] * inv_sqrt[j]
    });
    m.symmetric_eigenvalues().amax()
}
