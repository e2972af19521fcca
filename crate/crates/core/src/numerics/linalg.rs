//! Small dense matrices. Everything here is sized for mixed-model and
//! likelihood work (a few dozen rows at most), so storage is a plain
//! row-major `Vec<f64>` and no blocking is attempted.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use super::NumericsError;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Matrix::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    /// Builds a matrix from row slices. Panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), n_cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix {
            rows: n_rows,
            cols: n_cols,
            data,
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t[(c, r)] = self[(r, c)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "dimension mismatch in matmul");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.data[k * other.cols + j];
                }
            }
        }
        out
    }

    pub fn mat_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "dimension mismatch in mat_vec");
        (0..self.rows)
            .map(|r| self.row(r).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        self.add(&other.scale(-1.0))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Symmetric to within `rel_tol` relative to the largest entry.
    pub fn is_symmetric(&self, rel_tol: f64) -> bool {
        if !self.is_square() {
            return false;
        }
        let scale = self.max_abs().max(f64::MIN_POSITIVE);
        for i in 0..self.rows {
            for j in 0..i {
                if (self[(i, j)] - self[(j, i)]).abs() > rel_tol * scale {
                    return false;
                }
            }
        }
        true
    }

    /// Replaces the matrix by `(A + Aᵀ)/2`.
    pub fn symmetrize(&mut self) {
        assert!(self.is_square());
        for i in 0..self.rows {
            for j in 0..i {
                let m = 0.5 * (self[(i, j)] + self[(j, i)]);
                self[(i, j)] = m;
                self[(j, i)] = m;
            }
        }
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
///
/// Fails with [`NumericsError::NotPositiveDefinite`] carrying the 1-based
/// index of the first non-positive pivot.
pub fn cholesky(m: &Matrix) -> Result<Matrix, NumericsError> {
    if !m.is_square() {
        return Err(NumericsError::Dimension(format!(
            "cholesky of a {}x{} matrix",
            m.rows(),
            m.cols()
        )));
    }
    let n = m.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(NumericsError::NotPositiveDefinite { pivot: j + 1 });
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(l)
}

/// Square root of a symmetric positive semi-definite matrix in lower
/// triangular form. Pivots below `tol · max diag` are treated as exact
/// zeros, so degenerate covariances (fixed parameters, zero variance
/// components) still yield a usable factor.
pub fn cholesky_psd(m: &Matrix, tol: f64) -> Result<Matrix, NumericsError> {
    if !m.is_square() {
        return Err(NumericsError::Dimension("cholesky_psd of non-square".into()));
    }
    let n = m.rows();
    let scale = m.diag().into_iter().fold(0.0_f64, f64::max);
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= tol * scale {
            if d < -1e-8 * scale.max(1.0) {
                return Err(NumericsError::NotPositiveDefinite { pivot: j + 1 });
            }
            continue;
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(l)
}

/// Solves `L x = b` for lower-triangular `L`.
pub fn forward_solve(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    let mut x = b.to_vec();
    for i in 0..n {
        let mut s = x[i];
        for k in 0..i {
            s -= l[(i, k)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

/// Solves `Lᵀ x = b` for lower-triangular `L`.
pub fn backward_solve_transposed(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    let mut x = b.to_vec();
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in i + 1..n {
            s -= l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

/// Factorized symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: Matrix,
}

impl Cholesky {
    pub fn new(m: &Matrix) -> Result<Self, NumericsError> {
        Ok(Cholesky { l: cholesky(m)? })
    }

    pub fn factor(&self) -> &Matrix {
        &self.l
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        backward_solve_transposed(&self.l, &forward_solve(&self.l, b))
    }

    pub fn inverse(&self) -> Matrix {
        let n = self.l.rows();
        let mut inv = Matrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.iter_mut().for_each(|x| *x = 0.0);
            e[j] = 1.0;
            let col = self.solve(&e);
            for i in 0..n {
                inv[(i, j)] = col[i];
            }
        }
        inv.symmetrize();
        inv
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diag().iter().map(|d| d.ln()).sum::<f64>()
    }
}

/// Symmetric positive-definite matrix, validated on construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Matrix", into = "Matrix")]
pub struct SpdMatrix(Matrix);

impl SpdMatrix {
    pub fn new(m: Matrix) -> Result<Self, NumericsError> {
        if !m.is_symmetric(1e-12) {
            return Err(NumericsError::NotSymmetric);
        }
        cholesky(&m)?;
        Ok(SpdMatrix(m))
    }

    pub fn identity(n: usize) -> Self {
        SpdMatrix(Matrix::identity(n))
    }

    pub fn dim(&self) -> usize {
        self.0.rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn cholesky(&self) -> Matrix {
        cholesky(&self.0).expect("validated at construction")
    }
}

impl TryFrom<Matrix> for SpdMatrix {
    type Error = NumericsError;

    fn try_from(m: Matrix) -> Result<Self, Self::Error> {
        SpdMatrix::new(m)
    }
}

impl From<SpdMatrix> for Matrix {
    fn from(s: SpdMatrix) -> Matrix {
        s.0
    }
}

/// Inverts an observed-information matrix. Parameters whose curvature is
/// negligible relative to the largest diagonal entry sit on a flat ridge
/// (typically a variance component at its lower bound); they are dropped
/// from the inversion and receive zero variance. Returns the covariance
/// and the indices that were dropped.
pub fn invert_information(info: &Matrix) -> Result<(Matrix, Vec<usize>), NumericsError> {
    invert_information_pruning(info, &[])
}

/// As [`invert_information`], but a parameter listed in `prunable` whose
/// pivot fails is also dropped and the inversion retried. Meant for
/// variance components converging to the boundary, where the curvature
/// vanishes only asymptotically.
pub fn invert_information_pruning(info: &Matrix, prunable: &[usize]) -> Result<(Matrix, Vec<usize>), NumericsError> {
    let n = info.rows();
    let max_diag = info.diag().into_iter().fold(0.0_f64, |m, d| m.max(d.abs()));
    let mut flat: Vec<usize> = (0..n)
        .filter(|&i| info[(i, i)].abs() <= 1e-9 * max_diag.max(1e-300))
        .collect();
    loop {
        let keep: Vec<usize> = (0..n).filter(|i| !flat.contains(i)).collect();
        let mut sub = Matrix::zeros(keep.len(), keep.len());
        for (a, &i) in keep.iter().enumerate() {
            for (b, &j) in keep.iter().enumerate() {
                sub[(a, b)] = info[(i, j)];
            }
        }
        sub.symmetrize();
        let inv = match Cholesky::new(&sub) {
            Ok(c) => c.inverse(),
            Err(NumericsError::NotPositiveDefinite { pivot }) => {
                let idx = keep[pivot - 1];
                if prunable.contains(&idx) {
                    flat.push(idx);
                    flat.sort_unstable();
                    continue;
                }
                return Err(NumericsError::NotPositiveDefinite { pivot: idx + 1 });
            }
            Err(e) => return Err(e),
        };
        let mut cov = Matrix::zeros(n, n);
        for (a, &i) in keep.iter().enumerate() {
            for (b, &j) in keep.iter().enumerate() {
                cov[(i, j)] = inv[(a, b)];
            }
        }
        return Ok((cov, flat));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &Matrix, b: &Matrix, tol: f64) -> bool {
        a.as_slice()
            .iter()
            .zip(b.as_slice())
            .all(|(x, y)| (x - y).abs() <= tol * (1.0 + y.abs()))
    }

    #[test]
    fn cholesky_identity() {
        let l = cholesky(&Matrix::identity(3)).unwrap();
        assert_eq!(l, Matrix::identity(3));
    }

    #[test]
    fn cholesky_two_by_two_by_hand() {
        let m = Matrix::from_rows(&[[4.0, 2.0], [2.0, 3.0]]);
        let l = cholesky(&m).unwrap();
        let expected = Matrix::from_rows(&[[2.0, 0.0], [1.0, 2f64.sqrt()]]);
        assert!(close(&l, &expected, 1e-15));
        assert!(close(&l.matmul(&l.transpose()), &m, 1e-12));
    }

    #[test]
    fn cholesky_indefinite_names_pivot() {
        let m = Matrix::from_rows(&[[1.0, 2.0], [2.0, 1.0]]);
        match cholesky(&m) {
            Err(NumericsError::NotPositiveDefinite { pivot }) => assert_eq!(pivot, 2),
            other => panic!("expected pivot error, got {other:?}"),
        }
    }

    #[test]
    fn spd_rejects_asymmetric() {
        let m = Matrix::from_rows(&[[2.0, 1.0], [0.0, 2.0]]);
        assert!(matches!(SpdMatrix::new(m), Err(NumericsError::NotSymmetric)));
    }

    #[test]
    fn inverse_round_trip() {
        let m = Matrix::from_rows(&[[4.0, 1.0, 0.5], [1.0, 3.0, 0.2], [0.5, 0.2, 2.0]]);
        let inv = Cholesky::new(&m).unwrap().inverse();
        assert!(close(&m.matmul(&inv), &Matrix::identity(3), 1e-12));
    }

    #[test]
    fn psd_factor_skips_zero_pivots() {
        let m = Matrix::from_rows(&[[1.0, 0.0, 1.0], [0.0, 0.0, 0.0], [1.0, 0.0, 2.0]]);
        let l = cholesky_psd(&m, 1e-12).unwrap();
        assert!(close(&l.matmul(&l.transpose()), &m, 1e-12));
    }

    #[test]
    fn information_with_flat_direction() {
        let info = Matrix::from_rows(&[[2.0, 0.0], [0.0, 0.0]]);
        let (cov, flat) = invert_information(&info).unwrap();
        assert_eq!(flat, vec![1]);
        assert!((cov[(0, 0)] - 0.5).abs() < 1e-15);
        assert_eq!(cov[(1, 1)], 0.0);
    }
}
