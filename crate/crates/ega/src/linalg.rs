//! Dense small-matrix routines: Gram matrices, a cyclic Jacobi eigensolver
//! for symmetric matrices, and the orthogonal projection + rescaling that
//! aligns a task-gradient matrix.
//!
//! Everything here targets matrices whose row count is the task count
//! (single digits), so cubic algorithms are fine and the implementation
//! favors determinism and verifiability over throughput.

use crate::error::{Error, Result};

/// Maximum allowed asymmetry `max |a_ij - a_ji|` accepted by [`jacobi_eigh`].
pub const SYMMETRY_TOL: f64 = 1e-9;

/// Off-diagonal convergence threshold for [`jacobi_eigh`], relative to the
/// Frobenius norm of the input.
pub const JACOBI_OFF_TOL: f64 = 1e-12;

/// Sweep limit for [`jacobi_eigh`].
pub const JACOBI_MAX_SWEEPS: usize = 100;

/// Default relative rank tolerance for [`project_align`]: a singular
/// direction is retained iff `sigma_i > rank_tol * sigma_max`.
pub const DEFAULT_RANK_TOL: f64 = 1e-8;

/// Row-major dense matrix of finite `f64` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major entries, validating shape and finiteness.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidInput(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::InvalidInput(format!(
                "entry count {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite entry {bad}")));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidInput("matrix needs at least one row".into()));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidInput("ragged rows".into()));
        }
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "dimensions must be positive");
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::InvalidInput(format!(
                "matmul shape mismatch: {}x{} * {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..rhs.cols {
                    let v = out.get(i, j) + a * rhs.get(k, j);
                    out.set(i, j, v);
                }
            }
        }
        Ok(out)
    }

    pub fn scaled(&self, c: f64) -> Matrix {
        let data = self.data.iter().map(|v| v * c).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.rows != rhs.rows || self.cols != rhs.cols {
            return Err(Error::InvalidInput("sub shape mismatch".into()));
        }
        let data = self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `max |a_ij - a_ji|` over a square matrix.
    pub fn symmetry_defect(&self) -> f64 {
        assert_eq!(self.rows, self.cols, "symmetry defect needs a square matrix");
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }
}

/// Eigendecomposition of a symmetric matrix: `A = V diag(lambda) V^T`.
///
/// Eigenvalues are sorted descending; the columns of `eigenvectors` are
/// the corresponding orthonormal eigenvectors. Each eigenvector is signed
/// so its largest-magnitude entry is positive (first index wins ties),
/// which makes the output reproducible.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Matrix,
}

/// Gram matrix `G * G^T`.
///
/// The result is bitwise symmetric because entry (i, j) and entry (j, i) are
/// the same dot product evaluated in the same order.
pub fn gram(g: &Matrix) -> Matrix {
    let n = g.rows();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            let (ri, rj) = (g.row(i), g.row(j));
            for k in 0..g.cols() {
                acc += ri[k] * rj[k];
            }
            out.set(i, j, acc);
        }
    }
    out
}

/// Symmetric eigendecomposition via cyclic Jacobi rotations.
///
/// Converges when every off-diagonal magnitude drops below
/// `JACOBI_OFF_TOL * ||A||_F`, or fails after `JACOBI_MAX_SWEEPS` sweeps
/// with the residual attached to the error.
pub fn jacobi_eigh(a: &Matrix) -> Result<EigenDecomposition> {
    if a.rows() != a.cols() {
        return Err(Error::InvalidInput(format!(
            "eigendecomposition needs a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    let defect = a.symmetry_defect();
    if defect > SYMMETRY_TOL {
        return Err(Error::InvalidInput(format!(
            "matrix is not symmetric: max |a_ij - a_ji| = {defect:e}"
        )));
    }

    let n = a.rows();
    // Work on the symmetrized copy so tiny input asymmetry cannot bias the sweep.
    let mut w = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            w.set(i, j, 0.5 * (a.get(i, j) + a.get(j, i)));
        }
    }
    let mut v = Matrix::identity(n);

    if n == 1 {
        return Ok(EigenDecomposition { eigenvalues: vec![w.get(0, 0)], eigenvectors: v });
    }

    let thresh = JACOBI_OFF_TOL * w.frobenius_norm();
    let mut converged = false;
    let mut residual = 0.0;
    for _sweep in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off = off.max(w.get(p, q).abs());
            }
        }
        residual = off;
        if off <= thresh {
            converged = true;
            break;
        }
        for p in 0..(n - 1) {
            for q in (p + 1)..n {
                let apq = w.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (w.get(q, q) - w.get(p, p)) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    let sign = if theta < 0.0 { -1.0 } else { 1.0 };
                    sign / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // A <- J^T A J with the rotation in the (p, q) plane.
                for k in 0..n {
                    let akp = w.get(k, p);
                    let akq = w.get(k, q);
                    w.set(k, p, c * akp - s * akq);
                    w.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = w.get(p, k);
                    let aqk = w.get(q, k);
                    w.set(p, k, c * apk - s * aqk);
                    w.set(q, k, s * apk + c * aqk);
                }
                w.set(p, q, 0.0);
                w.set(q, p, 0.0);
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    if !converged {
        return Err(Error::NumericalFailure {
            what: "jacobi eigendecomposition did not converge".into(),
            residual,
        });
    }

    // Sort eigenpairs descending by eigenvalue (stable, hence deterministic).
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| w.get(j, j).partial_cmp(&w.get(i, i)).unwrap());
    let eigenvalues: Vec<f64> = order.iter().map(|&i| w.get(i, i)).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (col, &src) in order.iter().enumerate() {
        // Sign convention: make the largest-magnitude entry positive.
        let mut pivot = 0;
        let mut best = 0.0f64;
        for k in 0..n {
            let mag = v.get(k, src).abs();
            if mag > best {
                best = mag;
                pivot = k;
            }
        }
        let flip = if v.get(pivot, src) < 0.0 { -1.0 } else { 1.0 };
        for k in 0..n {
            vectors.set(k, col, flip * v.get(k, src));
        }
    }

    Ok(EigenDecomposition { eigenvalues, eigenvectors: vectors })
}

/// Result of [`project_align`].
#[derive(Debug, Clone)]
pub struct Projection {
    /// The aligned gradient matrix: rows mutually orthogonal, each of norm
    /// `sigma_min` when the input has full row rank.
    pub aligned: Matrix,
    /// Smallest retained singular value of the input.
    pub sigma_min: f64,
    /// Number of singular directions kept.
    pub retained: usize,
}

/// Projects an `n x m` matrix (`n <= m`) onto the nearest row-orthogonal
/// frame and rescales every row to the smallest retained singular value:
/// `aligned = sigma_min * U pinv(Sigma) U^T G`, from the eigendecomposition
/// `G G^T = U Sigma^2 U^T`.
///
/// `rank_tol` is relative: direction `i` is kept iff
/// `sigma_i > rank_tol * sigma_max`, so the projection is invariant under
/// positive rescaling of `G`. Dropped directions contribute zero.
///
/// Returns [`Error::DegenerateGradient`] when the whole matrix is zero
/// (no singular value above the tolerance); callers skip the update.
pub fn project_align(g: &Matrix, rank_tol: f64) -> Result<Projection> {
    let (n, m) = (g.rows(), g.cols());
    if n > m {
        return Err(Error::InvalidInput(format!(
            "project_align needs n <= m, got {n}x{m}"
        )));
    }
    if !(0.0..1.0).contains(&rank_tol) {
        return Err(Error::InvalidConfig(format!(
            "rank_tol must lie in [0, 1), got {rank_tol}"
        )));
    }

    let eig = jacobi_eigh(&gram(g))?;
    let sigmas: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let sigma_max = sigmas[0];
    if !(sigma_max > 0.0) {
        return Err(Error::DegenerateGradient);
    }
    let cutoff = rank_tol * sigma_max;
    let retained = sigmas.iter().take_while(|&&s| s > cutoff).count();
    debug_assert!(retained >= 1);
    let sigma_min = sigmas[retained - 1];

    // B = U pinv(Sigma) U^T over the retained directions.
    let u = &eig.eigenvectors;
    let mut b = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for (k, sigma) in sigmas[..retained].iter().enumerate() {
                acc += u.get(i, k) * u.get(j, k) / sigma;
            }
            b.set(i, j, acc);
        }
    }
    let aligned = b.matmul(g)?.scaled(sigma_min);
    Ok(Projection { aligned, sigma_min, retained })
}
