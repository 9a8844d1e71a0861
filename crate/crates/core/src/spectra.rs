//! Singular spectra for rank selection, via the Gram matrix of the smaller
//! side and a replicated cyclic Jacobi eigensolver.
//!
//! Only singular values (and occasionally the Gram eigenvectors) are needed
//! by the pipeline, and stage matrices keep one side small, so the full
//! distributed SVD machinery is avoided: ranks cooperate to build the small
//! Gram matrix exactly once, then every rank solves the same replicated
//! eigenproblem. The reduction order is deterministic, so all ranks hold
//! bit-identical spectra without a broadcast.

use crate::comm::{concat_block_cols, timed, Category, MatrixGrid};
use crate::error::{NttError, Result};
use crate::tensor::Matrix;

/// Default bound on the Gram side length; the replicated eigensolve is
/// cubic, so refuse sides that would silently take forever.
pub const DEFAULT_GRAM_CAP: usize = 4096;

/// Hard sweep limit for the Jacobi iteration.
pub const JACOBI_MAX_SWEEPS: usize = 100;

/// Which side's Gram matrix was formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GramSide {
    /// X*X^T (m x m); eigenvectors are left singular vectors.
    Rows,
    /// X^T*X (n x n); eigenvectors are right singular vectors.
    Cols,
}

/// Descending nonnegative singular values, length min(m, n).
#[derive(Debug, Clone)]
pub struct SpectrumResult {
    pub singular_values: Vec<f64>,
}

/// Builds the Gram matrix of the smaller side of a block-distributed X,
/// replicated on every rank. One group leader per slab computes its local
/// Gram and the world reduce sums leader contributions exactly; non-leaders
/// contribute zeros so no scaling is involved.
pub fn dist_gram_small(
    x: &Matrix,
    grid: &MatrixGrid,
    m: usize,
    n: usize,
    cap: usize,
) -> Result<(Matrix, GramSide)> {
    if x.rows() != grid.x_rows_local(m)? || x.cols() != grid.x_cols_local(n)? {
        return Err(NttError::Dimension(format!(
            "X block is {}x{}, grid expects {}x{}",
            x.rows(),
            x.cols(),
            grid.x_rows_local(m)?,
            grid.x_cols_local(n)?
        )));
    }
    let side = m.min(n);
    if side > cap {
        return Err(NttError::Numerical(format!(
            "Gram side {side} exceeds the replicated-eigensolve cap {cap}; \
             use a stage shape with a smaller short side"
        )));
    }
    let world = grid.world();
    let (i, j) = grid.coords();
    let (gram_side, local) = if m <= n {
        // Column slab X[:, block j]: stack the column group's row blocks.
        let gathered = grid.col_group().all_gather(x.as_slice())?;
        let slab = Matrix::new(m, x.cols(), gathered)?;
        let contrib = if i == 0 {
            timed(world, Category::Gr, || slab.matmul_abt(&slab))?
        } else {
            Matrix::zeros(m, m)
        };
        (GramSide::Rows, contrib)
    } else {
        // Row slab X[block i, :]: stitch the row group's column blocks.
        let gathered = grid.row_group().all_gather(x.as_slice())?;
        let data = concat_block_cols(&gathered, x.rows(), x.cols(), grid.pc());
        let slab = Matrix::new(x.rows(), n, data)?;
        let contrib = if j == 0 {
            timed(world, Category::Gr, || slab.matmul_atb(&slab))?
        } else {
            Matrix::zeros(n, n)
        };
        (GramSide::Cols, contrib)
    };
    let summed = world.all_reduce_sum(local.as_slice())?;
    let g = Matrix::new(side, side, summed)?;
    let mut sym = Matrix::zeros(side, side);
    for a in 0..side {
        for b in 0..side {
            sym.set(a, b, 0.5 * (g.at(a, b) + g.at(b, a)));
        }
    }
    Ok((sym, gram_side))
}

/// Singular values from Gram eigenvalues. Eigenvalues within the solver's
/// resolution of zero (1e-14 of the largest) collapse to exact zero; the
/// square root would otherwise lift eigenvalue noise near 1e-16 of lambda_1
/// into spurious singular values near 1e-8 of sigma_1.
pub fn sigmas_from_eigenvalues(eigvals: &[f64]) -> Vec<f64> {
    let lmax = eigvals.iter().cloned().fold(0.0, f64::max);
    let cutoff = lmax * 1e-14;
    eigvals
        .iter()
        .map(|&l| if l > cutoff { l.sqrt() } else { 0.0 })
        .collect()
}

/// Singular values of a block-distributed X, replicated on every rank.
pub fn dist_singular_values(
    x: &Matrix,
    grid: &MatrixGrid,
    m: usize,
    n: usize,
    cap: usize,
) -> Result<SpectrumResult> {
    let (gram, _) = dist_gram_small(x, grid, m, n, cap)?;
    let (eigvals, _) = jacobi_eigh(&gram)?;
    let singular_values = sigmas_from_eigenvalues(&eigvals);
    Ok(SpectrumResult { singular_values })
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations. Returns
/// eigenvalues in descending order and the matching eigenvectors as columns,
/// each with its largest-magnitude component made positive so repeated runs
/// and replicated ranks agree bit for bit.
pub fn jacobi_eigh(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    if a.rows() != a.cols() {
        return Err(NttError::Dimension(format!(
            "eigendecomposition of a {}x{} matrix",
            a.rows(),
            a.cols()
        )));
    }
    let n = a.rows();
    let mut m = a.clone();
    let mut v = Matrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 });
    let frob_sq = m.frob_norm_sq();
    let tol_sq = if frob_sq > 0.0 {
        frob_sq * 1e-28
    } else {
        f64::MIN_POSITIVE
    };
    let mut converged = false;
    for _ in 0..JACOBI_MAX_SWEEPS {
        if off_diag_sq(&m) <= tol_sq {
            converged = true;
            break;
        }
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let apq = m.at(p, q);
                if apq == 0.0 {
                    continue;
                }
                let tau = (m.at(q, q) - m.at(p, p)) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    1.0 / (tau - (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                rotate_cols(&mut m, p, q, c, s);
                rotate_rows(&mut m, p, q, c, s);
                rotate_cols(&mut v, p, q, c, s);
            }
        }
    }
    if !converged && off_diag_sq(&m) > tol_sq {
        return Err(NttError::Numerical(format!(
            "Jacobi eigensolver failed to converge in {JACOBI_MAX_SWEEPS} sweeps \
             (off-diagonal mass {:.3e}, norm {:.3e})",
            off_diag_sq(&m).sqrt(),
            frob_sq.sqrt()
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let diag: Vec<f64> = (0..n).map(|i| m.at(i, i)).collect();
    order.sort_by(|&i, &j| diag[j].partial_cmp(&diag[i]).unwrap());
    let eigvals: Vec<f64> = order.iter().map(|&i| diag[i]).collect();
    let mut vecs = Matrix::zeros(n, n);
    for (new_col, &old_col) in order.iter().enumerate() {
        // Sign convention: the entry of largest magnitude (earliest on ties)
        // is positive.
        let mut best = 0;
        for k in 1..n {
            if v.at(k, old_col).abs() > v.at(best, old_col).abs() {
                best = k;
            }
        }
        let flip = if v.at(best, old_col) < 0.0 { -1.0 } else { 1.0 };
        for k in 0..n {
            vecs.set(k, new_col, flip * v.at(k, old_col));
        }
    }
    Ok((eigvals, vecs))
}

fn off_diag_sq(m: &Matrix) -> f64 {
    let n = m.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += m.at(i, j) * m.at(i, j);
            }
        }
    }
    s
}

fn rotate_cols(m: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    for k in 0..m.rows() {
        let kp = m.at(k, p);
        let kq = m.at(k, q);
        m.set(k, p, c * kp - s * kq);
        m.set(k, q, s * kp + c * kq);
    }
}

fn rotate_rows(m: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    for k in 0..m.cols() {
        let pk = m.at(p, k);
        let qk = m.at(q, k);
        m.set(p, k, c * pk - s * qk);
        m.set(q, k, s * pk + c * qk);
    }
}

/// Spectral norm of a small symmetric matrix.
pub fn spectral_norm_sym(g: &Matrix) -> Result<f64> {
    let (eigvals, _) = jacobi_eigh(g)?;
    Ok(eigvals
        .iter()
        .fold(0.0f64, |acc, &l| acc.max(l.abs())))
}

/// Suffix sums of squared singular values: out[k] = sum of sigma[k..]^2,
/// accumulated from the smallest values upward so tiny tails keep their
/// digits.
fn tail_sums_sq(sigma: &[f64]) -> Vec<f64> {
    let n = sigma.len();
    let mut suf = vec![0.0; n + 1];
    for k in (0..n).rev() {
        suf[k] = suf[k + 1] + sigma[k] * sigma[k];
    }
    suf
}

/// sqrt(sum of sigma[r..]^2): the best-rank-r Frobenius residual.
pub fn sigma_tail(sigma: &[f64], r: usize) -> f64 {
    let suf = tail_sums_sq(sigma);
    suf[r.min(sigma.len())].sqrt()
}

/// Smallest k with sqrt(sum_{i>k} sigma_i^2) / sqrt(sum sigma_i^2) <= eps,
/// clamped to [1, N]. An all-zero spectrum satisfies any threshold at k=1.
pub fn choose_rank(spectrum: &SpectrumResult, eps: f64) -> Result<usize> {
    let sigma = &spectrum.singular_values;
    if sigma.is_empty() {
        return Err(NttError::DegenerateInput("empty spectrum".into()));
    }
    if !(eps > 0.0) {
        return Err(NttError::Config(format!(
            "rank threshold must be positive, got {eps}"
        )));
    }
    let suf = tail_sums_sq(sigma);
    let total = suf[0];
    if total <= 0.0 {
        log::warn!("all-zero spectrum; selecting rank 1");
        return Ok(1);
    }
    let norm = total.sqrt();
    for k in 1..sigma.len() {
        if suf[k].sqrt() <= eps * norm {
            return Ok(k);
        }
    }
    Ok(sigma.len())
}
