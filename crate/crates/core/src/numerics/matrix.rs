use std::fmt;
use std::ops::{Add, Index, IndexMut, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use super::NumericsError;

/// Dense real matrix stored row-major.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MatrixRepr", into = "MatrixRepr")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct MatrixRepr {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<MatrixRepr> for Matrix {
    type Error = NumericsError;

    fn try_from(r: MatrixRepr) -> Result<Self, Self::Error> {
        Matrix::from_vec(r.rows, r.cols, r.data)
    }
}

impl From<Matrix> for MatrixRepr {
    fn from(m: Matrix) -> Self {
        MatrixRepr {
            rows: m.rows,
            cols: m.cols,
            data: m.data,
        }
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
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting shape mismatches and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        if rows == 0 || cols == 0 {
            return Err(NumericsError::InvalidInput(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if rows * cols != data.len() {
            return Err(NumericsError::InvalidInput(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::InvalidInput(
                "matrix entries must be finite".into(),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self, NumericsError> {
        let ncols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(NumericsError::InvalidInput("ragged rows".into()));
        }
        Self::from_vec(
            rows.len(),
            ncols,
            rows.iter().flat_map(|r| r.iter().copied()).collect(),
        )
    }

    pub fn column(values: &[f64]) -> Self {
        Matrix {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn row(values: &[f64]) -> Self {
        Matrix {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row_slice(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col_vec(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Maximum absolute column sum.
    pub fn norm_1(&self) -> f64 {
        (0..self.cols)
            .map(|j| (0..self.rows).map(|i| self[(i, j)].abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn symmetrize(&self) -> Matrix {
        let t = self.transpose();
        (self + &t).scale(0.5)
    }

    pub fn asymmetry(&self) -> f64 {
        (self - &self.transpose()).max_abs()
    }

    /// Copy of the block starting at `(r0, c0)` with the given size.
    pub fn block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Matrix {
        let mut b = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                b[(i, j)] = self[(r0 + i, c0 + j)];
            }
        }
        b
    }

    pub fn set_block(&mut self, r0: usize, c0: usize, b: &Matrix) {
        for i in 0..b.rows {
            for j in 0..b.cols {
                self[(r0 + i, c0 + j)] = b[(i, j)];
            }
        }
    }

    /// Horizontal concatenation.
    pub fn hstack(parts: &[&Matrix]) -> Result<Matrix, NumericsError> {
        let rows = parts.first().map_or(0, |p| p.rows);
        if parts.iter().any(|p| p.rows != rows) {
            return Err(NumericsError::InvalidInput("hstack row mismatch".into()));
        }
        let cols = parts.iter().map(|p| p.cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut c0 = 0;
        for p in parts {
            out.set_block(0, c0, p);
            c0 += p.cols;
        }
        Ok(out)
    }

    /// Sub-matrix made of the listed rows and columns, in order.
    pub fn select(&self, rows: &[usize], cols: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(rows.len(), cols.len());
        for (i, &r) in rows.iter().enumerate() {
            for (j, &c) in cols.iter().enumerate() {
                out[(i, j)] = self[(r, c)];
            }
        }
        out
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix, NumericsError> {
        if self.cols != rhs.rows {
            return Err(NumericsError::InvalidInput(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..rhs.cols {
                    out.data[i * rhs.cols + j] += a * rhs.data[k * rhs.cols + j];
                }
            }
        }
        Ok(out)
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.cols, "vector length mismatch");
        (0..self.rows)
            .map(|i| self.row_slice(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn lu(&self) -> Result<Lu, NumericsError> {
        Lu::factor(self)
    }

    pub fn determinant(&self) -> Result<f64, NumericsError> {
        Ok(self.lu()?.determinant())
    }

    /// Solves `self · X = rhs` by partially pivoted LU.
    pub fn solve(&self, rhs: &Matrix) -> Result<Matrix, NumericsError> {
        self.lu()?.solve(rhs)
    }

    pub fn inverse(&self) -> Result<Matrix, NumericsError> {
        self.solve(&Matrix::identity(self.rows))
    }

    /// Matrix exponential by scaling and squaring of a truncated Taylor series.
    pub fn expm(&self) -> Result<Matrix, NumericsError> {
        if !self.is_square() {
            return Err(NumericsError::InvalidInput(
                "expm needs a square matrix".into(),
            ));
        }
        let norm = self.norm_1();
        let squarings = if norm > 0.5 {
            (norm / 0.5).log2().ceil() as u32
        } else {
            0
        };
        let scaled = self.scale(0.5_f64.powi(squarings as i32));
        let n = self.rows;
        let mut result = Matrix::identity(n);
        let mut term = Matrix::identity(n);
        for k in 1..=24 {
            term = term.matmul(&scaled)?.scale(1.0 / k as f64);
            result = &result + &term;
            if term.max_abs() <= f64::EPSILON * result.max_abs() {
                break;
            }
        }
        for _ in 0..squarings {
            result = result.matmul(&result)?;
        }
        Ok(result)
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

fn zip_same_shape(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    assert_eq!(a.shape(), b.shape(), "matrix shape mismatch");
    Matrix {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect(),
    }
}

impl Add for &Matrix {
    type Output = Matrix;

    fn add(self, rhs: &Matrix) -> Matrix {
        zip_same_shape(self, rhs, |a, b| a + b)
    }
}

impl Sub for &Matrix {
    type Output = Matrix;

    fn sub(self, rhs: &Matrix) -> Matrix {
        zip_same_shape(self, rhs, |a, b| a - b)
    }
}

impl Neg for &Matrix {
    type Output = Matrix;

    fn neg(self) -> Matrix {
        self.scale(-1.0)
    }
}

/// Panics on shape mismatch; use [`Matrix::matmul`] for a fallible product.
impl Mul for &Matrix {
    type Output = Matrix;

    fn mul(self, rhs: &Matrix) -> Matrix {
        self.matmul(rhs).expect("matrix product shape mismatch")
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            let row: Vec<String> = self
                .row_slice(i)
                .iter()
                .map(|v| format!("{v:>12.6e}"))
                .collect();
            writeln!(f, "  {}", row.join(" "))?;
        }
        write!(f, "]")
    }
}

/// LU factorisation with partial pivoting, `P·A = L·U`.
#[derive(Clone, Debug)]
pub struct Lu {
    n: usize,
    lu: Matrix,
    perm: Vec<usize>,
    sign: f64,
    singular: bool,
}

impl Lu {
    fn factor(a: &Matrix) -> Result<Lu, NumericsError> {
        if !a.is_square() {
            return Err(NumericsError::InvalidInput(format!(
                "LU needs a square matrix, got {}x{}",
                a.rows, a.cols
            )));
        }
        let n = a.rows;
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = 1.0;
        let mut singular = false;
        for k in 0..n {
            let (p, pmax) = (k..n)
                .map(|i| (i, lu[(i, k)].abs()))
                .fold((k, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
            if pmax == 0.0 {
                singular = true;
                continue;
            }
            if p != k {
                for j in 0..n {
                    lu.data.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
                sign = -sign;
            }
            let pivot = lu[(k, k)];
            for i in k + 1..n {
                let factor = lu[(i, k)] / pivot;
                lu[(i, k)] = factor;
                if factor != 0.0 {
                    for j in k + 1..n {
                        lu[(i, j)] -= factor * lu[(k, j)];
                    }
                }
            }
        }
        Ok(Lu {
            n,
            lu,
            perm,
            sign,
            singular,
        })
    }

    pub fn determinant(&self) -> f64 {
        if self.singular {
            return 0.0;
        }
        (0..self.n).map(|i| self.lu[(i, i)]).product::<f64>() * self.sign
    }

    pub fn solve(&self, rhs: &Matrix) -> Result<Matrix, NumericsError> {
        if rhs.rows != self.n {
            return Err(NumericsError::InvalidInput(
                "LU solve rhs row mismatch".into(),
            ));
        }
        let scale = self.lu.max_abs();
        if self.singular
            || (0..self.n).any(|i| self.lu[(i, i)].abs() <= f64::EPSILON * scale * 1e-3)
        {
            return Err(NumericsError::Singular);
        }
        let n = self.n;
        let mut x = rhs.select(&self.perm, &(0..rhs.cols).collect::<Vec<_>>());
        for c in 0..rhs.cols {
            for i in 0..n {
                let mut s = x[(i, c)];
                for k in 0..i {
                    s -= self.lu[(i, k)] * x[(k, c)];
                }
                x[(i, c)] = s;
            }
            for i in (0..n).rev() {
                let mut s = x[(i, c)];
                for k in i + 1..n {
                    s -= self.lu[(i, k)] * x[(k, c)];
                }
                x[(i, c)] = s / self.lu[(i, i)];
            }
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes_and_non_finite() {
        assert!(Matrix::from_vec(2, 2, vec![1.0; 3]).is_err());
        assert!(Matrix::from_vec(1, 1, vec![f64::NAN]).is_err());
        assert!(Matrix::from_vec(0, 3, vec![]).is_err());
    }

    #[test]
    fn solve_and_determinant() {
        let a = Matrix::from_rows(&[&[0.0, 2.0, 1.0], &[1.0, 1.0, 0.0], &[3.0, 0.0, 1.0]]).unwrap();
        assert!((a.determinant().unwrap() - (-5.0)).abs() < 1e-12);
        let x = a.solve(&Matrix::column(&[3.0, 2.0, 4.0])).unwrap();
        for (got, want) in x.as_slice().iter().zip([1.0, 1.0, 1.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        let z = Matrix::from_rows(&[&[0.0, 1.0], &[0.0, 2.0]]).unwrap();
        assert_eq!(z.determinant().unwrap(), 0.0);
        assert!(matches!(z.inverse(), Err(NumericsError::Singular)));
    }

    #[test]
    fn expm_of_rotation_generator() {
        let w = 2.5_f64;
        let a = Matrix::from_rows(&[&[0.0, -w], &[w, 0.0]]).unwrap();
        let e = a.expm().unwrap();
        assert!((e[(0, 0)] - w.cos()).abs() < 1e-13);
        assert!((e[(1, 0)] - w.sin()).abs() < 1e-13);
        let d = Matrix::from_diag(&[-3.0, 7.0]).expm().unwrap();
        assert!((d[(0, 0)] - (-3.0f64).exp()).abs() < 1e-15);
        assert!((d[(1, 1)] / 7.0f64.exp() - 1.0).abs() < 1e-13);
    }

    #[test]
    fn serde_round_trip_validates() {
        let m = Matrix::from_diag(&[1.0, 2.0]);
        let s = serde_json::to_string(&m).unwrap();
        let back: Matrix = serde_json::from_str(&s).unwrap();
        assert_eq!(m, back);
        assert!(serde_json::from_str::<Matrix>(r#"{"rows":2,"cols":2,"data":[1]}"#).is_err());
    }
}
