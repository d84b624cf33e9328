use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::FinetuneError;

/// Dense row-major matrix of finite `f64` values.
///
/// As a layer weight it has `rows = d` (input dimension) and `cols = k`
/// (output dimension), so a row-vector input `x` maps to `x · W`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl WeightMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, FinetuneError> {
        if data.len() != rows * cols {
            return Err(FinetuneError::Shape {
                op: "new",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(FinetuneError::NonFinite("matrix entries"));
        }
        Ok(WeightMatrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        WeightMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, FinetuneError> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(FinetuneError::Ragged);
        }
        Self::new(r, c, rows.concat())
    }

    /// Entries drawn i.i.d. from N(0, std²).
    pub fn random_normal<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        WeightMatrix { rows, cols, data }
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    /// Copy with entry `(i, j)` replaced; used by finite-difference checks.
    pub fn with_entry(&self, i: usize, j: usize, value: f64) -> Self {
        let mut m = self.clone();
        m.data[i * self.cols + j] = value;
        m
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        WeightMatrix { rows, cols, data }
    }

    fn same_shape(&self, other: &Self, op: &'static str) -> Result<(), FinetuneError> {
        if self.shape() != other.shape() {
            return Err(FinetuneError::Shape {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    pub fn transpose(&self) -> Self {
        let mut data = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        WeightMatrix::from_raw(self.cols, self.rows, data)
    }

    pub fn matmul(&self, other: &Self) -> Result<Self, FinetuneError> {
        if self.cols != other.rows {
            return Err(FinetuneError::Shape {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (n, m, p) = (self.rows, self.cols, other.cols);
        let mut data = vec![0.0; n * p];
        for i in 0..n {
            for t in 0..m {
                let a = self.data[i * m + t];
                if a == 0.0 {
                    continue;
                }
                let orow = &other.data[t * p..(t + 1) * p];
                let out = &mut data[i * p..(i + 1) * p];
                for (o, &b) in out.iter_mut().zip(orow) {
                    *o += a * b;
                }
            }
        }
        Ok(WeightMatrix::from_raw(n, p, data))
    }

    /// `self · otherᵀ`
    pub fn matmul_transposed(&self, other: &Self) -> Result<Self, FinetuneError> {
        if self.cols != other.cols {
            return Err(FinetuneError::Shape {
                op: "matmul_transposed",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (n, m, p) = (self.rows, self.cols, other.rows);
        let mut data = vec![0.0; n * p];
        for i in 0..n {
            let a = &self.data[i * m..(i + 1) * m];
            for j in 0..p {
                let b = &other.data[j * m..(j + 1) * m];
                data[i * p + j] = a.iter().zip(b).map(|(x, y)| x * y).sum();
            }
        }
        Ok(WeightMatrix::from_raw(n, p, data))
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self, FinetuneError> {
        self.same_shape(other, op)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(WeightMatrix::from_raw(self.rows, self.cols, data))
    }

    pub fn add(&self, other: &Self) -> Result<Self, FinetuneError> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self, FinetuneError> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self, FinetuneError> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Self {
        WeightMatrix::from_raw(self.rows, self.cols, self.data.iter().map(|v| v * s).collect())
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64, FinetuneError> {
        self.same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Little-endian bytes of every entry, row-major.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}
