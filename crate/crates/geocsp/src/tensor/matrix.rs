//! Row-major dense matrix of f64 values.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// A row-major dense matrix. Shape metadata is always consistent with the
/// backing buffer; constructors reject mismatched or non-finite data.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Build from a row-major buffer. Fails on length mismatch or non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        let m = Matrix { rows, cols, data };
        m.check_finite("matrix construction")?;
        Ok(m)
    }

    /// 1xN matrix holding one row vector.
    pub fn from_row(data: Vec<f64>) -> Result<Self> {
        let cols = data.len();
        Matrix::from_vec(1, cols, data)
    }

    /// Stack equal-length rows. An empty slice with `cols` hint is a 0xC matrix.
    pub fn from_rows(rows: &[Vec<f64>], cols: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row of length {} in matrix with {cols} columns",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Matrix::from_vec(rows.len(), cols, data)
    }

    /// Glorot-uniform initialization: entries uniform in +-sqrt(6/(fan_in+fan_out))
    /// where fan_in = rows and fan_out = cols.
    pub fn glorot_uniform<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.gen::<f64>() * 2.0 * bound - bound)
            .collect();
        Matrix { rows, cols, data }
    }

    /// Zero-mean Gaussian initialization with standard deviation `sigma`.
    pub fn gaussian<R: Rng>(rows: usize, cols: usize, sigma: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, sigma).expect("sigma must be finite and non-negative");
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        Matrix { rows, cols, data }
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

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        debug_assert!(r < self.rows);
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        debug_assert!(r < self.rows);
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// The single entry of a 1x1 matrix.
    pub fn scalar(&self) -> f64 {
        assert!(self.is_scalar(), "scalar() on a {}x{} matrix", self.rows, self.cols);
        self.data[0]
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!(
                    "{context}: entry ({}, {}) is {v}",
                    i / self.cols.max(1),
                    i % self.cols.max(1)
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(matches!(
            Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        assert!(matches!(
            Matrix::from_vec(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn row_access_is_row_major() {
        let m = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(m.row(1), &[4.0, 5.0, 6.0]);
        assert_eq!(m.get(0, 2), 3.0);
    }

    #[test]
    fn glorot_entries_within_bound() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let m = Matrix::glorot_uniform(8, 4, &mut rng);
        let bound = (6.0 / 12.0f64).sqrt();
        assert!(m.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn gaussian_is_seeded_deterministic() {
        let a = Matrix::gaussian(3, 3, 0.5, &mut ChaCha12Rng::seed_from_u64(7));
        let b = Matrix::gaussian(3, 3, 0.5, &mut ChaCha12Rng::seed_from_u64(7));
        assert_eq!(a, b);
    }
}
