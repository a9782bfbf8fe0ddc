use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
///
/// Every operation checks shapes exactly; there is no broadcasting.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor({}x{}) ", self.rows, self.cols)?;
        f.debug_list().entries(self.data.iter().take(16)).finish()
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension {
                op: "new",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 1.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::filled(1, 1, value)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// A `1 x n` row vector.
    pub fn row_vector(values: &[f64]) -> Self {
        Tensor {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    /// Builds a matrix from nested rows; panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Tensor {
            rows: rows.len(),
            cols,
            data,
        }
    }

    /// Gaussian entries with mean 0 and the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let data = (0..rows * cols)
            .map(|_| std * normal.sample(rng))
            .collect();
        Tensor { rows, cols, data }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Value of a `1 x 1` tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        check_same(op, self, other)?;
        Ok(Tensor {
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

    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::Dimension {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        // i-k-j order: fixed accumulation sequence, cache friendly.
        for i in 0..n {
            let out_row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * m..(p + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            rows: n,
            cols: m,
            data: out,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Self> {
        self.zip(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| c * v)
    }

    /// `self += c * other`, in place.
    pub fn axpy(&mut self, c: f64, other: &Tensor) -> Result<()> {
        check_same("axpy", self, other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        Ok(())
    }

    pub fn transpose(&self) -> Self {
        let mut out = vec![0.0; self.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        Tensor {
            rows: self.cols,
            cols: self.rows,
            data: out,
        }
    }

    pub fn relu(&self) -> Self {
        self.map(|v| if v > 0.0 { v } else { 0.0 })
    }

    /// 1 where the entry is strictly positive, 0 elsewhere.
    pub fn relu_mask(&self) -> Self {
        self.map(|v| if v > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Self {
        self.map(|v| 1.0 / (1.0 + (-v).exp()))
    }

    /// Softmax of every row, with the row maximum subtracted first.
    pub fn row_softmax(&self) -> Self {
        let mut out = self.data.clone();
        for row in out.chunks_mut(self.cols.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: out,
        }
    }

    /// Column means: `T x d -> 1 x d`.
    pub fn mean_pool_rows(&self) -> Result<Self> {
        if self.rows == 0 {
            return Err(Error::Domain("mean_pool_rows of an empty matrix".into()));
        }
        let mut out = vec![0.0; self.cols];
        for row in self.data.chunks(self.cols) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = 1.0 / self.rows as f64;
        for o in &mut out {
            *o *= inv;
        }
        Ok(Tensor {
            rows: 1,
            cols: self.cols,
            data: out,
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<f64> {
        if labels.len() != self.rows {
            return Err(Error::Dimension {
                op: "cross_entropy",
                left: self.shape(),
                right: (labels.len(), 1),
            });
        }
        if self.rows == 0 {
            return Err(Error::Domain("cross_entropy of an empty batch".into()));
        }
        let mut total = 0.0;
        for (row, &label) in self.data.chunks(self.cols).zip(labels) {
            if label >= self.cols {
                return Err(Error::Domain(format!(
                    "label {label} out of range for {} classes",
                    self.cols
                )));
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        Ok(total / self.rows as f64)
    }

    /// One-hot encoding matching this tensor's shape.
    pub fn one_hot(rows: usize, cols: usize, labels: &[usize]) -> Self {
        let mut t = Self::zeros(rows, cols);
        for (i, &l) in labels.iter().enumerate() {
            t.set(i, l, 1.0);
        }
        t
    }

    /// Mean of squared differences over all entries.
    pub fn mse(&self, target: &Tensor) -> Result<f64> {
        check_same("mse", self, target)?;
        if self.is_empty() {
            return Err(Error::Domain("mse of an empty tensor".into()));
        }
        let total: f64 = self
            .data
            .iter()
            .zip(&target.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(total / self.len() as f64)
    }

    /// `1 x k -> k x k` diagonal matrix.
    pub fn diag(&self) -> Result<Self> {
        if self.rows != 1 {
            return Err(Error::Dimension {
                op: "diag",
                left: self.shape(),
                right: (1, self.cols),
            });
        }
        let k = self.cols;
        let mut t = Self::zeros(k, k);
        for (j, &v) in self.data.iter().enumerate() {
            t.data[j * k + j] = v;
        }
        Ok(t)
    }

    /// `k x k -> 1 x k` main diagonal.
    pub fn diag_part(&self) -> Result<Self> {
        if self.rows != self.cols {
            return Err(Error::Dimension {
                op: "diag_part",
                left: self.shape(),
                right: (self.rows, self.rows),
            });
        }
        let k = self.rows;
        Ok(Tensor {
            rows: 1,
            cols: k,
            data: (0..k).map(|j| self.data[j * k + j]).collect(),
        })
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Rows picked by index, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Tensor {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Columns picked by index, in the given order.
    pub fn select_cols(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.rows);
        for r in 0..self.rows {
            let row = self.row(r);
            data.extend(indices.iter().map(|&j| row[j]));
        }
        Tensor {
            rows: self.rows,
            cols: indices.len(),
            data,
        }
    }

    /// Contiguous block of rows `[start, start + len)`.
    pub fn slice_rows(&self, start: usize, len: usize) -> Self {
        Tensor {
            rows: len,
            cols: self.cols,
            data: self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        }
    }

    /// Reinterprets the storage with a new shape of equal size.
    pub fn reshape(&self, rows: usize, cols: usize) -> Result<Self> {
        Tensor::new(rows, cols, self.data.clone())
    }

    /// Singular values in descending order.
    pub fn singular_values(&self) -> Vec<f64> {
        let m = nalgebra::DMatrix::from_row_slice(self.rows, self.cols, &self.data);
        let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
        s.sort_by(|a, b| b.total_cmp(a));
        s
    }

    /// Number of singular values above `rel_tol * sigma_max`.
    pub fn numerical_rank(&self, rel_tol: f64) -> usize {
        let s = self.singular_values();
        let Some(&top) = s.first() else { return 0 };
        if top == 0.0 {
            return 0;
        }
        s.iter().filter(|&&v| v > rel_tol * top).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for p in 0..a.cols() {
                    s += a.get(i, p) * b.get(p, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn identity_matmul() {
        let a = Tensor::from_rows(&[&[1.5, -2.0], &[0.25, 4.0]]);
        assert_eq!(Tensor::identity(2).matmul(&a).unwrap(), a);
    }

    #[test]
    fn hand_product() {
        let a = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]);
        let b = Tensor::from_rows(&[&[0.0, 2.0], &[3.0, 0.0]]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c, Tensor::from_rows(&[&[0.0, 2.0], &[0.0, 0.0]]));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(5, 7, 1.0, &mut rng);
        let b = Tensor::randn(7, 3, 1.0, &mut rng);
        let fast = a.matmul(&b).unwrap();
        let slow = naive_matmul(&a, &b);
        for (x, y) in fast.data().iter().zip(slow.data()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = Tensor::zeros(2, 3).matmul(&Tensor::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)"), "{msg}");
        assert!(matches!(err, Error::Dimension { op: "matmul", .. }));
    }

    #[test]
    fn relu_sign_cases() {
        let t = Tensor::row_vector(&[-1.0, 0.0, 2.0]);
        assert_eq!(t.relu().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_of_equal_row_is_uniform() {
        let t = Tensor::filled(1, 5, 3.7).row_softmax();
        for &v in t.data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let t = Tensor::row_vector(&[1000.0, 1000.0]).row_softmax();
        assert_eq!(t.data(), &[0.5, 0.5]);
    }

    #[test]
    fn perfect_prediction_has_zero_cross_entropy() {
        // Probability 1 on the label: logit gap large enough that exp underflows.
        let logits = Tensor::from_rows(&[&[800.0, 0.0, 0.0]]);
        assert_eq!(logits.cross_entropy(&[0]).unwrap(), 0.0);
    }

    #[test]
    fn add_rejects_mismatch() {
        assert!(Tensor::zeros(2, 2).add(&Tensor::zeros(1, 2)).is_err());
        assert!(Tensor::new(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn diag_round_trip() {
        let v = Tensor::row_vector(&[1.0, 2.0, 3.0]);
        assert_eq!(v.diag().unwrap().diag_part().unwrap(), v);
    }

    #[test]
    fn numerical_rank_of_outer_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Tensor::randn(10, 2, 1.0, &mut rng);
        let b = Tensor::randn(2, 12, 1.0, &mut rng);
        assert_eq!(a.matmul(&b).unwrap().numerical_rank(1e-9), 2);
        assert_eq!(Tensor::zeros(3, 3).numerical_rank(1e-9), 0);
    }
}
