use std::fmt;
use std::ops::{Index, IndexMut};

use crate::error::{ensure, Error, Result};

/// Dense row-major `f64` matrix.
///
/// All reductions run sequentially over the inner dimension so that two
/// evaluations on identical inputs are bit-identical.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(
            data.len() == rows * cols,
            "matrix data length {} does not match {}x{}",
            data.len(),
            rows,
            cols
        );
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows; every row must have the same length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            ensure!(
                r.len() == cols,
                "row {i} has {} entries, expected {cols}",
                r.len()
            );
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    /// Selects rows by index, in the given order.
    pub fn gather_rows(&self, idx: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(idx.len(), self.cols);
        for (dst, &src) in idx.iter().enumerate() {
            out.row_mut(dst).copy_from_slice(self.row(src));
        }
        out
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn hconcat(parts: &[&Matrix]) -> Result<Matrix> {
        let rows = parts.first().map_or(0, |m| m.rows);
        ensure!(
            parts.iter().all(|m| m.rows == rows),
            "hconcat: row counts differ"
        );
        let cols: usize = parts.iter().map(|m| m.cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let mut off = 0;
            let dst = out.row_mut(i);
            for m in parts {
                dst[off..off + m.cols].copy_from_slice(m.row(i));
                off += m.cols;
            }
        }
        Ok(out)
    }

    /// Splits columns into consecutive blocks of the given widths.
    pub fn hsplit(&self, widths: &[usize]) -> Result<Vec<Matrix>> {
        ensure!(
            widths.iter().sum::<usize>() == self.cols,
            "hsplit: widths sum to {}, matrix has {} columns",
            widths.iter().sum::<usize>(),
            self.cols
        );
        let mut out: Vec<Matrix> = widths
            .iter()
            .map(|&w| Matrix::zeros(self.rows, w))
            .collect();
        for i in 0..self.rows {
            let src = self.row(i);
            let mut off = 0;
            for (m, &w) in out.iter_mut().zip(widths) {
                m.row_mut(i).copy_from_slice(&src[off..off + w]);
                off += w;
            }
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Elementwise product.
    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        ensure!(self.shape() == other.shape(), "hadamard: shape mismatch");
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a * b)
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        ensure!(self.shape() == other.shape(), "add_assign: shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Adds `bias` to every row.
    pub fn add_row_vector(&mut self, bias: &[f64]) -> Result<()> {
        ensure!(bias.len() == self.cols, "add_row_vector: width mismatch");
        for row in self.data.chunks_exact_mut(self.cols.max(1)) {
            for (x, b) in row.iter_mut().zip(bias) {
                *x += b;
            }
        }
        Ok(())
    }

    /// Column sums, accumulated top to bottom.
    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (o, x) in out.iter_mut().zip(self.row(i)) {
                *o += x;
            }
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Fails with [`Error::NonFinite`] naming `what` if any entry is NaN/Inf.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

/// `a · b`. The inner dimension is reduced in index order.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    ensure!(
        a.cols == b.rows,
        "matmul: {}x{} times {}x{}",
        a.rows,
        a.cols,
        b.rows,
        b.cols
    );
    let mut c = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out = &mut c.data[i * b.cols..(i + 1) * b.cols];
        for p in 0..a.cols {
            let s = a.data[i * a.cols + p];
            let brow = &b.data[p * b.cols..(p + 1) * b.cols];
            for (o, &bv) in out.iter_mut().zip(brow) {
                *o += s * bv;
            }
        }
    }
    Ok(c)
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    ensure!(
        a.rows == b.rows,
        "matmul_tn: ({}x{})ᵀ times {}x{}",
        a.rows,
        a.cols,
        b.rows,
        b.cols
    );
    let mut c = Matrix::zeros(a.cols, b.cols);
    for p in 0..a.rows {
        let arow = a.row(p);
        let brow = b.row(p);
        for (i, &s) in arow.iter().enumerate() {
            if s == 0.0 {
                continue;
            }
            let out = &mut c.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bv) in out.iter_mut().zip(brow) {
                *o += s * bv;
            }
        }
    }
    Ok(c)
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    ensure!(
        a.cols == b.cols,
        "matmul_nt: {}x{} times ({}x{})ᵀ",
        a.rows,
        a.cols,
        b.rows,
        b.cols
    );
    let mut c = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            c.data[i * b.rows + j] = dot(arow, b.row(j));
        }
    }
    Ok(c)
}

/// Sequential dot product.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_product_is_noop() {
        let a = Matrix::from_rows(&[[1.0, -2.0, 0.5], [3.0, 4.0, 5.0], [0.0, 7.0, -1.0]]).unwrap();
        assert_eq!(matmul(&Matrix::identity(3), &a).unwrap(), a);
    }

    #[test]
    fn hand_product() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[[1.0], [1.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.as_slice(), &[3.0, 7.0]);
    }

    #[test]
    fn empty_inner_dimension_gives_zero() {
        let a = Matrix::zeros(1, 0);
        let b = Matrix::zeros(0, 1);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), (1, 1));
        assert_eq!(c[(0, 0)], 0.0);
    }

    #[test]
    fn dimension_mismatch_is_contract_violation() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let a = Matrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        let b = Matrix::from_rows(&[[0.5, -1.0], [2.0, 0.0]]).unwrap();
        assert_eq!(
            matmul_tn(&a, &b).unwrap(),
            matmul(&a.transpose(), &b).unwrap()
        );
        let c = Matrix::from_rows(&[[1.0, 0.0, -1.0], [2.0, 2.0, 2.0]]).unwrap();
        assert_eq!(
            matmul_nt(&a, &c).unwrap(),
            matmul(&a, &c.transpose()).unwrap()
        );
    }

    #[test]
    fn concat_split_inverse() {
        let a = Matrix::from_rows(&[[1.0], [2.0]]).unwrap();
        let b = Matrix::from_rows(&[[3.0, 4.0], [5.0, 6.0]]).unwrap();
        let c = Matrix::hconcat(&[&a, &b]).unwrap();
        assert_eq!(c.row(1), &[2.0, 5.0, 6.0]);
        let parts = c.hsplit(&[1, 2]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }
}
