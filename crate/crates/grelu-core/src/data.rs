//! Synthetic regression data: generation, normalization, separation.

use crate::matrix::{dot, norm2, Matrix};
use crate::rng::RngStream;
use core::fmt;

/// Floor applied to `|x|` before the logarithm in the label formula, so fp
/// underflow can never produce an infinite label.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum DataError {
    BadDimensions { n: usize, d: usize },
    RowNotUnit { row: usize, norm: f64 },
    NonFinite { row: usize },
    CountMismatch { x_rows: usize, y_rows: usize },
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::BadDimensions { n, d } => write!(f, "need n >= 1 and d >= 1, got n={n}, d={d}"),
            DataError::RowNotUnit { row, norm } => {
                write!(f, "input row {row} has norm {norm}, expected 1 within 1e-9")
            }
            DataError::NonFinite { row } => write!(f, "row {row} contains non-finite values"),
            DataError::CountMismatch { x_rows, y_rows } => {
                write!(f, "input rows ({x_rows}) and label rows ({y_rows}) differ")
            }
        }
    }
}

impl std::error::Error for DataError {}

/// Normalized inputs (unit rows) and scaled targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `n x d_x`, each row unit norm.
    pub x: Matrix,
    /// `n x d_y`.
    pub y: Matrix,
    /// Factor the raw labels were divided by so that `max |y| = 1`.
    pub label_scale: f64,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn d_x(&self) -> usize {
        self.x.cols()
    }

    pub fn d_y(&self) -> usize {
        self.y.cols()
    }

    pub fn from_parts(x: Matrix, y: Matrix, label_scale: f64) -> Result<Dataset, DataError> {
        if x.rows() == 0 || x.cols() == 0 {
            return Err(DataError::BadDimensions { n: x.rows(), d: x.cols() });
        }
        if x.rows() != y.rows() {
            return Err(DataError::CountMismatch { x_rows: x.rows(), y_rows: y.rows() });
        }
        let ds = Dataset { x, y, label_scale };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        for i in 0..self.x.rows() {
            if !self.x.row(i).iter().all(|v| v.is_finite()) || !self.y.row(i).iter().all(|v| v.is_finite()) {
                return Err(DataError::NonFinite { row: i });
            }
            let norm = norm2(self.x.row(i));
            if (norm - 1.0).abs() > 1e-9 {
                return Err(DataError::RowNotUnit { row: i, norm });
            }
        }
        Ok(())
    }
}

/// Circular index used by the label formula: term `t` (0-based) multiplies
/// coordinate `sigma(t) = (d - 2 - t) mod d`, which is the 1-based `d - d'`
/// with index 0 wrapping around to `d`.
fn ackley_partner(d: usize, t: usize) -> usize {
    (2 * d - 2 - t) % d
}

/// Label for one normalized input row.
pub fn ackley_label(x: &[f64]) -> f64 {
    let d = x.len();
    let mut y = 0.0;
    for t in 0..d {
        let v = x[t];
        let inner = v.abs().max(LOG_FLOOR).ln() * (v.cos() + v * v * v * v.sin()) + v.abs().sqrt();
        y += x[ackley_partner(d, t)] * inner;
    }
    y
}

/// Synthetic regression set: rows drawn standard Gaussian then unit
/// normalized, scalar labels from the oscillatory benchmark formula, scaled
/// so that `max |y| = 1` (the scale factor is recorded).
pub fn gen_ackley(n: usize, d: usize, seed: u64) -> Result<Dataset, DataError> {
    if n == 0 || d == 0 {
        return Err(DataError::BadDimensions { n, d });
    }
    let mut g = RngStream::new(seed, 0).gaussian_source();
    let mut x = Matrix::zeros(n, d);
    for i in 0..n {
        let row = x.row_mut(i);
        g.fill_standard_normal(row);
        let norm = norm2(row);
        if norm > 0.0 {
            let inv = 1.0 / norm;
            row.iter_mut().for_each(|v| *v *= inv);
        } else {
            // Probability-zero draw; fall back to a coordinate vector.
            row[0] = 1.0;
        }
    }
    let mut y = Matrix::zeros(n, 1);
    for i in 0..n {
        y[(i, 0)] = ackley_label(x.row(i));
    }
    let scale = y.max_abs();
    let label_scale = if scale > 0.0 { scale } else { 1.0 };
    y.scale(1.0 / label_scale);
    Dataset::from_parts(x, y, label_scale)
}

/// Data separation `delta = max_{i != j} |<x_i, x_j>|`; returns 0 for fewer
/// than two examples (the caller should treat that as a degenerate case).
pub fn check_separation(ds: &Dataset) -> f64 {
    let n = ds.n();
    let mut delta = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            delta = delta.max(dot(ds.x.row(i), ds.x.row(j)).abs());
        }
    }
    delta
}
