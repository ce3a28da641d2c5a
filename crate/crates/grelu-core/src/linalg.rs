//! Gaussian sampling, spectral extremes, and minimal-norm least squares.
//!
//! The eigen-extreme routine is a deterministic power iteration with a fixed
//! start vector; the minimum is recovered by a second pass on the shifted
//! matrix. Full decompositions are avoided: the probes only ever need the
//! extremes. The least-squares solve goes through a one-sided Jacobi SVD,
//! which is a rank-revealing orthogonal factorization, with singular values
//! below `sigma_max * 1e-10` treated as zero.

use crate::matrix::{dot, norm2, Matrix};
use crate::rng::RngStream;
use core::fmt;

/// Relative cutoff defining numerical rank in the pseudo-inverse.
pub const SINGULAR_VALUE_CUTOFF: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub enum LinalgError {
    /// A dimension was zero where a non-empty matrix is required.
    ZeroDimension,
    /// Variance must be strictly positive.
    NonPositiveVariance(f64),
    /// Symmetric input required but the symmetry check failed.
    NotSymmetric { max_asymmetry: f64, tolerance: f64 },
    /// Matrix must be square.
    NotSquare { rows: usize, cols: usize },
    /// Row counts of the two sides of a least-squares system disagree.
    RowMismatch { a_rows: usize, b_rows: usize },
}

impl fmt::Display for LinalgError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LinalgError::ZeroDimension => write!(f, "matrix dimensions must be at least 1"),
            LinalgError::NonPositiveVariance(v) => write!(f, "variance must be > 0, got {v}"),
            LinalgError::NotSymmetric { max_asymmetry, tolerance } => {
                write!(f, "matrix is not symmetric: |A - A^T| up to {max_asymmetry:e} exceeds {tolerance:e}")
            }
            LinalgError::NotSquare { rows, cols } => write!(f, "matrix is {rows}x{cols}, expected square"),
            LinalgError::RowMismatch { a_rows, b_rows } => {
                write!(f, "least-squares row mismatch: A has {a_rows} rows, B has {b_rows}")
            }
        }
    }
}

impl std::error::Error for LinalgError {}

/// Matrix with i.i.d. `N(0, variance)` entries, filled row-major so the draw
/// order is part of the reproducibility contract.
pub fn gaussian_matrix(
    rows: usize,
    cols: usize,
    variance: f64,
    stream: &RngStream,
) -> Result<Matrix, LinalgError> {
    if rows == 0 || cols == 0 {
        return Err(LinalgError::ZeroDimension);
    }
    if !(variance > 0.0) {
        return Err(LinalgError::NonPositiveVariance(variance));
    }
    let sd = variance.sqrt();
    let mut m = Matrix::zeros(rows, cols);
    let mut g = stream.gaussian_source();
    for x in m.data_mut() {
        *x = sd * g.next_standard_normal();
    }
    Ok(m)
}

/// Power iteration on a linear operator given by matvec closures.
///
/// Returns the dominant eigenvalue (largest magnitude) of the symmetric
/// operator `apply`, estimated by Rayleigh quotients. Two fixed start
/// vectors are used and the larger-magnitude limit wins: one start can sit
/// nearly orthogonal to the extreme eigenvector and stall on an interior
/// plateau, but not both.
fn dominant_symmetric_eig(dim: usize, mut apply: impl FnMut(&[f64], &mut [f64])) -> f64 {
    if dim == 0 {
        return 0.0;
    }
    let mut best = 0.0f64;
    for start in 0..2 {
        let mut v: Vec<f64> = (0..dim)
            .map(|i| match start {
                0 => 1.0 / (1.0 + i as f64),
                _ => (if i % 2 == 0 { 1.0 } else { -1.0 }) * (1.0 + (i as f64 * 0.7).sin()),
            })
            .collect();
        let inv = 1.0 / norm2(&v);
        v.iter_mut().for_each(|x| *x *= inv);
        let mut av = vec![0.0; dim];
        let mut theta = 0.0f64;
        for it in 0..20_000 {
            apply(&v, &mut av);
            let norm = norm2(&av);
            if norm == 0.0 {
                // v is in the kernel; the Rayleigh quotient so far is exact.
                break;
            }
            let new_theta = dot(&v, &av);
            let done =
                (new_theta - theta).abs() <= 1e-13 * new_theta.abs().max(1e-300) && it > 30;
            theta = new_theta;
            let inv = 1.0 / norm;
            for (vi, avi) in v.iter_mut().zip(&av) {
                *vi = avi * inv;
            }
            if done {
                break;
            }
        }
        if theta.abs() > best.abs() {
            best = theta;
        }
    }
    best
}

/// Extreme eigenvalues `(lambda_min, lambda_max)` of a symmetric matrix.
///
/// First pass finds the eigenvalue of largest magnitude; the second pass runs
/// on the shifted matrix `A - mu I`, whose dominant eigenvalue is the one
/// farthest from `mu`. Together these bracket the spectrum.
pub fn sym_eig_extremes(a: &Matrix) -> Result<(f64, f64), LinalgError> {
    if a.rows() != a.cols() {
        return Err(LinalgError::NotSquare { rows: a.rows(), cols: a.cols() });
    }
    if a.rows() == 0 {
        return Err(LinalgError::ZeroDimension);
    }
    let tol = 1e-9 * a.max_abs();
    let mut max_asym = 0.0f64;
    for i in 0..a.rows() {
        for j in (i + 1)..a.cols() {
            max_asym = max_asym.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    if max_asym > tol {
        return Err(LinalgError::NotSymmetric { max_asymmetry: max_asym, tolerance: tol });
    }

    let n = a.rows();
    let mu = dominant_symmetric_eig(n, |v, out| {
        let y = a.matvec(v);
        out.copy_from_slice(&y);
    });
    // Dominant eigenvalue of A - mu I is (lambda_far - mu) where lambda_far is
    // the eigenvalue farthest from mu, i.e. the opposite end of the spectrum.
    let nu = dominant_symmetric_eig(n, |v, out| {
        let y = a.matvec(v);
        for ((o, yi), vi) in out.iter_mut().zip(&y).zip(v) {
            *o = yi - mu * vi;
        }
    });
    let other = mu + nu;
    Ok((mu.min(other), mu.max(other)))
}

/// Spectral norm `||A||_2 = sqrt(lambda_max(A^T A))` without forming the Gram
/// matrix, via blocked subspace iteration.
pub fn spectral_norm(a: &Matrix) -> f64 {
    spectral_norm_block(
        a.rows(),
        a.cols(),
        4,
        1e-11,
        5_000,
        |block| a.matmul(block),
        |block| a.t_matmul(block),
    )
}

/// Top singular value of an operator given by block matvec closures, via
/// subspace iteration on `A^T A` with Rayleigh-Ritz extraction.
///
/// `apply` maps a `cols x b` block to `rows x b`, `apply_t` the reverse; both
/// see whole blocks so chained operators can use matrix products internally.
/// A deterministic start subspace is used. Iteration stops when the top Ritz
/// value stagnates at relative `tol`; spectra with clustered edges therefore
/// give best-effort estimates, which is what the bound probes need.
pub fn spectral_norm_block(
    rows: usize,
    cols: usize,
    block: usize,
    tol: f64,
    max_iter: usize,
    apply: impl Fn(&Matrix) -> Matrix,
    apply_t: impl Fn(&Matrix) -> Matrix,
) -> f64 {
    if rows == 0 || cols == 0 {
        return 0.0;
    }
    let b = block.clamp(1, cols);
    let mut v = Matrix::from_fn(cols, b, |i, j| {
        1.0 / (1.0 + i as f64 + 3.0 * j as f64) + if i % b == j { 0.5 } else { 0.0 }
    });
    orthonormalize_columns(&mut v);
    let mut theta = 0.0f64;
    for it in 0..max_iter {
        let u = apply(&v);
        let w = apply_t(&u);
        // top Ritz value of A^T A on span(V)
        let small = v.t_matmul(&w);
        let sym = {
            // symmetrize against rounding before the eigen solve
            let mut s = small.clone();
            for i in 0..b {
                for j in 0..b {
                    let avg = 0.5 * (small[(i, j)] + small[(j, i)]);
                    s[(i, j)] = avg;
                }
            }
            s
        };
        let (_, top) = sym_eig_extremes(&sym).unwrap_or((0.0, 0.0));
        let done = it > 3 && (top - theta).abs() <= tol * top.abs().max(1e-300);
        theta = theta.max(top);
        if w.max_abs() == 0.0 {
            // block sits in the kernel; current Ritz value is final
            break;
        }
        v = w;
        orthonormalize_columns(&mut v);
        if done {
            break;
        }
    }
    theta.max(0.0).sqrt()
}

/// Replace `v` by an exactly orthonormal basis of (a superset of) its column
/// span, via Householder QR. Orthonormality holds to machine precision even
/// when the input columns are rank deficient, which matters because the
/// subspace iteration reuses the basis for Rayleigh-Ritz extraction.
fn orthonormalize_columns(v: &mut Matrix) {
    let (rows, cols) = (v.rows(), v.cols());
    debug_assert!(cols <= rows);
    // Factor in place: store Householder vectors below the diagonal.
    let mut hh: Vec<Vec<f64>> = Vec::with_capacity(cols);
    for j in 0..cols {
        let mut alpha = 0.0;
        for i in j..rows {
            alpha += v[(i, j)] * v[(i, j)];
        }
        let alpha = alpha.sqrt();
        let mut u: Vec<f64> = (j..rows).map(|i| v[(i, j)]).collect();
        let sign = if u[0] >= 0.0 { 1.0 } else { -1.0 };
        u[0] += sign * alpha;
        let unorm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if unorm > 0.0 {
            u.iter_mut().for_each(|x| *x /= unorm);
        } else {
            // degenerate column: identity reflector
            u.iter_mut().for_each(|x| *x = 0.0);
        }
        // apply reflector to the remaining columns
        for c in j..cols {
            let mut dot = 0.0;
            for (t, ui) in u.iter().enumerate() {
                dot += ui * v[(j + t, c)];
            }
            for (t, ui) in u.iter().enumerate() {
                v[(j + t, c)] -= 2.0 * dot * ui;
            }
        }
        hh.push(u);
    }
    // Q = H_0 ... H_{cols-1} applied to the first `cols` identity columns.
    for x in v.data_mut() {
        *x = 0.0;
    }
    for j in 0..cols {
        v[(j, j)] = 1.0;
    }
    for j in (0..cols).rev() {
        let u = &hh[j];
        for c in 0..cols {
            let mut dot = 0.0;
            for (t, ui) in u.iter().enumerate() {
                dot += ui * v[(j + t, c)];
            }
            for (t, ui) in u.iter().enumerate() {
                v[(j + t, c)] -= 2.0 * dot * ui;
            }
        }
    }
}

/// Thin SVD `A = U diag(s) V^T` for `A` with `rows >= cols`, by one-sided
/// Jacobi orthogonalization of the columns.
struct ThinSvd {
    u: Matrix,
    s: Vec<f64>,
    v: Matrix,
}

fn jacobi_svd_tall(a: &Matrix) -> ThinSvd {
    let n = a.cols();
    let mut u = a.clone();
    let mut v = Matrix::identity(n);
    for _sweep in 0..60 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                let (mut app, mut aqq, mut apq) = (0.0, 0.0, 0.0);
                for i in 0..u.rows() {
                    let (x, y) = (u[(i, p)], u[(i, q)]);
                    app += x * x;
                    aqq += y * y;
                    apq += x * y;
                }
                let denom = (app * aqq).sqrt();
                if denom == 0.0 || apq.abs() <= 1e-15 * denom {
                    continue;
                }
                off = off.max(apq.abs() / denom);
                let zeta = (aqq - app) / (2.0 * apq);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..u.rows() {
                    let (x, y) = (u[(i, p)], u[(i, q)]);
                    u[(i, p)] = c * x - s * y;
                    u[(i, q)] = s * x + c * y;
                }
                for i in 0..n {
                    let (x, y) = (v[(i, p)], v[(i, q)]);
                    v[(i, p)] = c * x - s * y;
                    v[(i, q)] = s * x + c * y;
                }
            }
        }
        if off < 1e-14 {
            break;
        }
    }
    let mut s = vec![0.0; n];
    for j in 0..n {
        let nj = norm2(&u.col(j));
        s[j] = nj;
        if nj > 0.0 {
            let inv = 1.0 / nj;
            for i in 0..u.rows() {
                u[(i, j)] *= inv;
            }
        }
    }
    ThinSvd { u, s, v }
}

/// Minimal-Frobenius-norm solution `X` of `min ||A X - B||_F`.
///
/// Rank-deficient systems are handled by zeroing singular values below
/// `sigma_max * 1e-10`; among all minimizers this picks the one of least
/// Frobenius norm (the pseudo-inverse solution).
pub fn min_norm_least_squares(a: &Matrix, b: &Matrix) -> Result<Matrix, LinalgError> {
    if a.rows() != b.rows() {
        return Err(LinalgError::RowMismatch { a_rows: a.rows(), b_rows: b.rows() });
    }
    if a.rows() == 0 || a.cols() == 0 {
        return Err(LinalgError::ZeroDimension);
    }
    // X = V diag(1/s) U^T B, with the SVD taken of A or A^T so the Jacobi
    // sweep always runs on the short column dimension.
    let (u, s, v) = if a.rows() >= a.cols() {
        let svd = jacobi_svd_tall(a);
        (svd.u, svd.s, svd.v)
    } else {
        let svd = jacobi_svd_tall(&a.transpose());
        // A = (A^T)^T = V s U^T, so U_A = svd.v, V_A = svd.u.
        (svd.v, svd.s, svd.u)
    };
    let smax = s.iter().fold(0.0f64, |m, x| m.max(*x));
    let cutoff = smax * SINGULAR_VALUE_CUTOFF;
    let mut utb = u.t_matmul(b);
    for (r, sr) in s.iter().enumerate() {
        let f = if *sr > cutoff { 1.0 / sr } else { 0.0 };
        for x in utb.row_mut(r) {
            *x *= f;
        }
    }
    Ok(v.matmul(&utb))
}
