//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

pub fn is_symmetric(m: &Mat, tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = m.amax().max(1.0);
    (m - m.transpose()).amax() <= tol * scale
}

fn min_eigenvalue(m: &Mat) -> f64 {
    symmetrize(m).symmetric_eigenvalues().min()
}

/// Symmetric and all eigenvalues above `-tol * max(1, |m|)`.
pub fn is_psd(m: &Mat, tol: f64) -> bool {
    if !is_symmetric(m, 1e-9) {
        return false;
    }
    if m.is_empty() {
        return true;
    }
    min_eigenvalue(m) >= -tol * m.amax().max(1.0)
}

pub fn is_pd(m: &Mat) -> bool {
    is_symmetric(m, 1e-9) && symmetrize(m).cholesky().is_some()
}

pub fn require_psd(m: &Mat, what: &'static str) -> Result<()> {
    if is_psd(m, 1e-10) {
        Ok(())
    } else {
        Err(Error::NotPsd(what))
    }
}

pub fn require_pd(m: &Mat, what: &'static str) -> Result<()> {
    if is_pd(m) {
        Ok(())
    } else {
        Err(Error::NotPd(what))
    }
}

/// Symmetric square root of a PSD matrix; small negative eigenvalues are clamped to zero.
pub fn sqrt_psd(m: &Mat) -> Mat {
    let eig = symmetrize(m).symmetric_eigen();
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * Mat::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

pub fn inverse(m: &Mat, what: &'static str) -> Result<Mat> {
    m.clone()
        .try_inverse()
        .ok_or_else(|| Error::InvalidArgument(format!("{what} is singular")))
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
pub fn spd_inverse(m: &Mat, what: &'static str) -> Result<Mat> {
    let chol = symmetrize(m).cholesky().ok_or(Error::NotPd(what))?;
    Ok(symmetrize(&chol.inverse()))
}

pub fn check_square(m: &Mat, n: usize, what: &str) -> Result<()> {
    if m.nrows() != n || m.ncols() != n {
        return Err(Error::Dimension(format!(
            "{what} is {}x{}, expected {n}x{n}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

pub fn check_shape(m: &Mat, rows: usize, cols: usize, what: &str) -> Result<()> {
    if m.nrows() != rows || m.ncols() != cols {
        return Err(Error::Dimension(format!(
            "{what} is {}x{}, expected {rows}x{cols}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

/// `y = m x` for row-major `m` stored flat; used in the simulation hot loops.
#[inline]
pub(crate) fn matvec_into(m: &[f64], cols: usize, x: &[f64], y: &mut [f64]) {
    for (row, out) in m.chunks_exact(cols).zip(y.iter_mut()) {
        *out = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

/// Row-major copy of a matrix.
pub(crate) fn row_major(m: &Mat) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// Text form of a matrix: explicit dimensions, row-major values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixDoc {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl MatrixDoc {
    pub fn to_matrix(&self) -> Result<Mat> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::Dimension(format!(
                "matrix document declares {}x{} but has {} values",
                self.rows,
                self.cols,
                self.data.len()
            )));
        }
        Ok(Mat::from_row_slice(self.rows, self.cols, &self.data))
    }
}

impl From<&Mat> for MatrixDoc {
    fn from(m: &Mat) -> Self {
        Self { rows: m.nrows(), cols: m.ncols(), data: row_major(m) }
    }
}
