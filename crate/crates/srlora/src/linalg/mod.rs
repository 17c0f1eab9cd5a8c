//! Dense matrix kernels sized for desk-scale experiments.
//!
//! Everything is `f64`, row-major, and bounds-checked at the API surface.
//! There is no SIMD, no blocking, no parallelism: the matrices in this crate
//! top out around a few thousand entries and the priority is bit-for-bit
//! reproducibility of every experiment, so all reductions run in a fixed
//! left-to-right order.
//!
//! The on-disk format ([`Matrix::write_srlm`] / [`Matrix::read_srlm`]) is a
//! 12-byte header (`b"SRLM"`, rows, cols as little-endian `u32`) followed by
//! row-major `f64` little-endian payload.

mod rng;
mod svd;

pub use rng::Rng;
pub use svd::{best_rank_k_error, svd, SvdFactors};

use std::fmt;
use std::io::{Read, Write};

use crate::error::{shape_mismatch, Error, Result};

const SRLM_MAGIC: &[u8; 4] = b"SRLM";

/// Row-major `f64` matrix. Entries are finite by construction; both
/// dimensions are at least 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Matrix {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Square matrix with `entries` on the diagonal.
    pub fn diagonal(entries: &[f64]) -> Matrix {
        let n = entries.len();
        let mut m = Matrix::zeros(n, n);
        for (i, &e) in entries.iter().enumerate() {
            m.data[i * n + i] = e;
        }
        m
    }

    /// Builds a matrix from row-major data. Rejects length mismatches and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Matrix> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidArgument(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::InvalidArgument(format!(
                "expected {} entries for a {rows}x{cols} matrix, got {}",
                rows * cols,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(
                "matrix entries must be finite".to_string(),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Convenience constructor from row slices. All rows must share a length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Matrix> {
        if rows.is_empty() {
            return Err(Error::InvalidArgument(
                "matrix needs at least one row".to_string(),
            ));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidArgument(
                "all rows must have the same length".to_string(),
            ));
        }
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Matrix::from_vec(rows.len(), cols, data)
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        assert!(i < self.rows && j < self.cols, "index out of bounds");
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        assert!(i < self.rows && j < self.cols, "index out of bounds");
        self.data[i * self.cols + j] = v;
    }

    /// Contiguous view of row `i`.
    pub fn row(&self, i: usize) -> &[f64] {
        assert!(i < self.rows, "row out of bounds");
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        assert!(j < self.cols, "column out of bounds");
        (0..self.rows).map(|i| self.data[i * self.cols + j]).collect()
    }

    pub fn set_column(&mut self, j: usize, values: &[f64]) {
        assert!(j < self.cols, "column out of bounds");
        assert!(values.len() == self.rows, "column length mismatch");
        for (i, &v) in values.iter().enumerate() {
            self.data[i * self.cols + j] = v;
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(shape_mismatch("matmul", self.shape(), other.shape()));
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let out_row = &mut out[i * n..(i + 1) * n];
            for (p, &a_ip) in a_row.iter().enumerate() {
                if a_ip == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for q in 0..n {
                    out_row[q] += a_ip * b_row[q];
                }
            }
        }
        Ok(Matrix {
            rows: m,
            cols: n,
            data: out,
        })
    }

    /// `self^T * other` without materializing the transpose.
    pub fn matmul_tn(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(shape_mismatch("matmul_tn", self.shape(), other.shape()));
        }
        let (k, m, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let s_row = &self.data[p * m..(p + 1) * m];
            let o_row = &other.data[p * n..(p + 1) * n];
            for (i, &v) in s_row.iter().enumerate() {
                if v == 0.0 {
                    continue;
                }
                let out_row = &mut out[i * n..(i + 1) * n];
                for q in 0..n {
                    out_row[q] += v * o_row[q];
                }
            }
        }
        Ok(Matrix {
            rows: m,
            cols: n,
            data: out,
        })
    }

    /// `self * other^T` without materializing the transpose.
    pub fn matmul_nt(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(shape_mismatch("matmul_nt", self.shape(), other.shape()));
        }
        let (m, k, n) = (self.rows, self.cols, other.rows);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            for q in 0..n {
                let b_row = &other.data[q * k..(q + 1) * k];
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a_row[p] * b_row[p];
                }
                out[i * n + q] = acc;
            }
        }
        Ok(Matrix {
            rows: m,
            cols: n,
            data: out,
        })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        self.map(|v| v * factor)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(
        &self,
        other: &Matrix,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(shape_mismatch(op, self.shape(), other.shape()));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// In-place elementwise update `self[i] = f(self[i], other[i])`.
    pub fn zip_apply(
        &mut self,
        other: &Matrix,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_mismatch(op, self.shape(), other.shape()));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = f(*a, b);
        }
        Ok(())
    }

    /// Rank-1 update `self += factor * col * row^T`.
    pub fn add_outer(&mut self, factor: f64, col: &[f64], row: &[f64]) -> Result<()> {
        if col.len() != self.rows || row.len() != self.cols {
            return Err(shape_mismatch(
                "add_outer",
                self.shape(),
                (col.len(), row.len()),
            ));
        }
        for (i, &c) in col.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            let out_row = &mut self.data[i * self.cols..(i + 1) * self.cols];
            for (q, &r) in row.iter().enumerate() {
                out_row[q] += factor * c * r;
            }
        }
        Ok(())
    }

    /// Adds a column vector (`rows x 1`) to every column of `self`.
    pub fn add_col_broadcast(&self, bias: &Matrix) -> Result<Matrix> {
        if bias.rows != self.rows || bias.cols != 1 {
            return Err(shape_mismatch(
                "add_col_broadcast",
                self.shape(),
                bias.shape(),
            ));
        }
        let mut out = self.clone();
        for i in 0..self.rows {
            let b = bias.data[i];
            for v in &mut out.data[i * self.cols..(i + 1) * self.cols] {
                *v += b;
            }
        }
        Ok(out)
    }

    /// Row sums as a `rows x 1` column vector.
    pub fn row_sums(&self) -> Matrix {
        let mut out = Matrix::zeros(self.rows, 1);
        for i in 0..self.rows {
            out.data[i] = self.row(i).iter().sum();
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Writes the `SRLM` binary record for this matrix.
    pub fn write_srlm<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        out.write_all(SRLM_MAGIC)?;
        out.write_all(&(self.rows as u32).to_le_bytes())?;
        out.write_all(&(self.cols as u32).to_le_bytes())?;
        for v in &self.data {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads one `SRLM` record. Fails on a bad magic, truncation, or
    /// non-finite payload entries.
    pub fn read_srlm<R: Read>(input: &mut R) -> Result<Matrix> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != SRLM_MAGIC {
            return Err(Error::InvalidArgument(format!(
                "bad matrix magic {magic:?}, expected {SRLM_MAGIC:?}"
            )));
        }
        let mut dim = [0u8; 4];
        input.read_exact(&mut dim)?;
        let rows = u32::from_le_bytes(dim) as usize;
        input.read_exact(&mut dim)?;
        let cols = u32::from_le_bytes(dim) as usize;
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidArgument(format!(
                "matrix record has degenerate shape {rows}x{cols}"
            )));
        }
        let mut data = vec![0.0; rows * cols];
        let mut buf = [0u8; 8];
        for v in &mut data {
            input.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        Matrix::from_vec(rows, cols, data)
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        assert!(i < self.rows && j < self.cols, "index out of bounds");
        &self.data[i * self.cols + j]
    }
}

impl fmt::Display for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.rows {
            for j in 0..self.cols {
                if j > 0 {
                    write!(f, "  ")?;
                }
                write!(f, "{:>10.5}", self.get(i, j))?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// `||a - b||_F / max(||b||_F, 1e-12)`. The second argument is the reference.
pub fn relative_frobenius_distance(a: &Matrix, b: &Matrix) -> Result<f64> {
    let diff = a.sub(b)?;
    Ok(diff.frobenius_norm() / b.frobenius_norm().max(1e-12))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seeded(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = Rng::new(seed);
        rng.gaussian(rows, cols, 0.0, 1.0)
    }

    #[test]
    fn matmul_identity_is_noop() {
        let m = seeded(3, 3, 7);
        let out = Matrix::identity(3).matmul(&m).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn matmul_hand_checked() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let a = seeded(5, 4, 11);
        let b = seeded(4, 3, 12);
        let fast = a.matmul(&b).unwrap();
        let mut slow = Matrix::zeros(5, 3);
        for i in 0..5 {
            for j in 0..3 {
                let mut acc = 0.0;
                for p in 0..4 {
                    acc += a.get(i, p) * b.get(p, j);
                }
                slow.set(i, j, acc);
            }
        }
        assert!(relative_frobenius_distance(&fast, &slow).unwrap() < 1e-12);
    }

    #[test]
    fn matmul_tn_and_nt_match_explicit_transpose() {
        let a = seeded(6, 4, 21);
        let b = seeded(6, 3, 22);
        let tn = a.matmul_tn(&b).unwrap();
        let explicit = a.transpose().matmul(&b).unwrap();
        assert!(relative_frobenius_distance(&tn, &explicit).unwrap() < 1e-14);

        let c = seeded(5, 4, 23);
        let d = seeded(7, 4, 24);
        let nt = c.matmul_nt(&d).unwrap();
        let explicit = c.matmul(&d.transpose()).unwrap();
        assert!(relative_frobenius_distance(&nt, &explicit).unwrap() < 1e-14);
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3"), "message should carry shapes: {msg}");
    }

    #[test]
    fn from_vec_rejects_bad_input() {
        assert!(Matrix::from_vec(2, 2, vec![1.0; 3]).is_err());
        assert!(Matrix::from_vec(2, 2, vec![1.0, f64::NAN, 0.0, 0.0]).is_err());
        assert!(Matrix::from_vec(0, 2, vec![]).is_err());
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn add_outer_matches_dense_update() {
        let mut m = seeded(4, 3, 31);
        let reference = m.clone();
        let col = vec![1.0, -2.0, 0.5, 0.0];
        let row = vec![2.0, 0.0, -1.0];
        m.add_outer(0.5, &col, &row).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let expect = reference.get(i, j) + 0.5 * col[i] * row[j];
                assert!((m.get(i, j) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn broadcast_and_row_sums_agree_with_loops() {
        let m = seeded(3, 5, 41);
        let bias = Matrix::from_vec(3, 1, vec![1.0, -1.0, 0.25]).unwrap();
        let shifted = m.add_col_broadcast(&bias).unwrap();
        for i in 0..3 {
            for j in 0..5 {
                assert_eq!(shifted.get(i, j), m.get(i, j) + bias.get(i, 0));
            }
        }
        let sums = m.row_sums();
        for i in 0..3 {
            let expect: f64 = (0..5).map(|j| m.get(i, j)).sum();
            assert!((sums.get(i, 0) - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn srlm_roundtrip_is_lossless() {
        let m = seeded(7, 2, 51);
        let mut buf = Vec::new();
        m.write_srlm(&mut buf).unwrap();
        assert_eq!(&buf[0..4], b"SRLM");
        let back = Matrix::read_srlm(&mut buf.as_slice()).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn srlm_rejects_corruption() {
        let m = seeded(3, 3, 52);
        let mut buf = Vec::new();
        m.write_srlm(&mut buf).unwrap();

        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(Matrix::read_srlm(&mut bad_magic.as_slice()).is_err());

        let truncated = &buf[..buf.len() - 4];
        assert!(Matrix::read_srlm(&mut &truncated[..]).is_err());
    }
}
