//! Dense symmetric positive-definite factorization.
//!
//! Matrices are held as `nalgebra::DMatrix` everywhere in the crate; the
//! Cholesky kernels themselves run through `faer`, which is several times
//! faster for the n = 300..3000 systems the samplers and simulations build.

use std::sync::Once;

use faer::linalg::solvers::{DenseSolveCore, Solve};
use faer::{Mat, Side};
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Diagonal jitter schedule applied when a plain factorization fails.
pub const JITTER_SCHEDULE: [f64; 2] = [1e-10, 1e-8];

static SEQUENTIAL: Once = Once::new();

fn ensure_sequential() {
    // Results must not depend on the thread count; chains and replications
    // provide the parallelism instead.
    SEQUENTIAL.call_once(|| faer::set_global_parallelism(faer::Par::Seq));
}

fn to_faer(m: &DMatrix<f64>) -> Mat<f64> {
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

fn from_faer(m: faer::MatRef<'_, f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Cholesky factor `K = L L'` of a symmetric positive-definite matrix.
pub struct Cholesky {
    llt: faer::linalg::solvers::Llt<f64>,
    jitter: f64,
}

impl std::fmt::Debug for Cholesky {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Cholesky")
            .field("dim", &self.dim())
            .field("jitter", &self.jitter)
            .finish()
    }
}

impl Cholesky {
    /// Factor without any jitter.
    pub fn new_exact(m: &DMatrix<f64>) -> Option<Self> {
        ensure_sequential();
        if m.nrows() != m.ncols() {
            return None;
        }
        let llt = to_faer(m).llt(Side::Lower).ok()?;
        let fac = Self { llt, jitter: 0.0 };
        fac.log_det().is_finite().then_some(fac)
    }

    /// Factor, retrying with the jitter schedule (1e-10, then 1e-8 on the
    /// diagonal) before giving up.
    pub fn new(m: &DMatrix<f64>) -> Result<Self> {
        if let Some(f) = Self::new_exact(m) {
            return Ok(f);
        }
        for &eps in JITTER_SCHEDULE.iter() {
            let mut jittered = m.clone();
            for i in 0..m.nrows() {
                jittered[(i, i)] += eps;
            }
            if let Some(mut f) = Self::new_exact(&jittered) {
                log::debug!("cholesky succeeded with diagonal jitter {eps:e}");
                f.jitter = eps;
                return Ok(f);
            }
        }
        let n = m.nrows();
        let min_diag = (0..n).map(|i| m[(i, i)]).fold(f64::INFINITY, f64::min);
        let asym = (0..n)
            .flat_map(|i| (0..i).map(move |j| (i, j)))
            .map(|(i, j)| (m[(i, j)] - m[(j, i)]).abs())
            .fold(0.0, f64::max);
        Err(Error::Numerical(format!(
            "matrix of order {n} is not positive definite after jitter {:e} \
             (min diagonal {min_diag:.3e}, max asymmetry {asym:.3e})",
            JITTER_SCHEDULE[JITTER_SCHEDULE.len() - 1]
        )))
    }

    pub fn dim(&self) -> usize {
        self.llt.L().nrows()
    }

    /// Diagonal jitter that was needed (0 when the matrix factored cleanly).
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn log_det(&self) -> f64 {
        let l = self.llt.L();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }

    /// Lower-triangular factor as a dense matrix.
    pub fn lower(&self) -> DMatrix<f64> {
        from_faer(self.llt.L())
    }

    /// `L v`.
    pub fn lower_mul(&self, v: &DVector<f64>) -> DVector<f64> {
        let l = self.llt.L();
        let n = l.nrows();
        let mut out = DVector::zeros(n);
        for j in 0..n {
            let vj = v[j];
            if vj == 0.0 {
                continue;
            }
            for i in j..n {
                out[i] += l[(i, j)] * vj;
            }
        }
        out
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let rhs = Mat::from_fn(b.len(), 1, |i, _| b[i]);
        let x = self.llt.solve(&rhs);
        DVector::from_fn(b.len(), |i, _| x[(i, 0)])
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let x = self.llt.solve(&to_faer(b));
        from_faer(x.as_ref())
    }

    /// `K^{-1}`, symmetrized.
    pub fn inverse(&self) -> DMatrix<f64> {
        let inv = self.llt.inverse();
        let n = inv.nrows();
        DMatrix::from_fn(n, n, |i, j| 0.5 * (inv[(i, j)] + inv[(j, i)]))
    }

    /// `b' K^{-1} b`.
    pub fn quad_form(&self, b: &DVector<f64>) -> f64 {
        b.dot(&self.solve_vec(b))
    }

    /// Log density of `N(0, K)` at `x`.
    pub fn mvn_log_density(&self, x: &DVector<f64>) -> f64 {
        let n = x.len() as f64;
        -0.5 * (n * (2.0 * std::f64::consts::PI).ln() + self.log_det() + self.quad_form(x))
    }
}

/// A square-root factor `S` with `S S' = cov` for a symmetric positive
/// semidefinite matrix: Cholesky (with the jitter schedule) when possible,
/// otherwise an eigendecomposition with negative eigenvalues clipped to 0.
pub fn psd_sqrt(cov: &DMatrix<f64>) -> DMatrix<f64> {
    if let Ok(c) = Cholesky::new(cov) {
        return c.lower();
    }
    let eig = cov.clone().symmetric_eigen();
    let mut s = eig.eigenvectors.clone();
    for (j, &lam) in eig.eigenvalues.iter().enumerate() {
        let root = lam.max(0.0).sqrt();
        s.column_mut(j).scale_mut(root);
    }
    s
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Internal helper: sample covariance (denominator `n - 1`) of row vectors.
pub(crate) fn sample_covariance(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let d = rows.first().map_or(0, |r| r.len());
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n as f64;
        }
    }
    let mut cov = DMatrix::zeros(d, d);
    if n < 2 {
        return cov;
    }
    for r in rows {
        for i in 0..d {
            let di = r[i] - mean[i];
            for j in 0..=i {
                cov[(i, j)] += di * (r[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in 0..=i {
            let v = cov[(i, j)] / (n - 1) as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    cov
}
