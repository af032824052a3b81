use serde::{Deserialize, Serialize};

use super::Real;
use crate::error::{Error, Result};

/// Dense row-major n-dimensional array.
///
/// Gradient bookkeeping lives on the [`Tape`](super::Tape): a tensor becomes
/// differentiable once it is registered there as a leaf with `requires_grad`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dimension("tensor", shape, &[data.len()]));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    /// Builds a `[rows.len(), cols]` matrix from nested rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::dimension("from_rows", &[cols], &[row.len()]));
            }
            data.extend_from_slice(row);
        }
        Tensor::new(&[rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::Usage(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::dimension("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Length of the last axis.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Row `i` of a matrix (or of the leading axis, flattened).
    pub fn row(&self, i: usize) -> &[T] {
        let width = self.data.len() / self.rows().max(1);
        &self.data[i * width..(i + 1) * width]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let width = self.data.len() / self.rows().max(1);
        &mut self.data[i * width..(i + 1) * width]
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    /// Gathers rows of a matrix in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let width = self.data.len() / self.rows().max(1);
        let mut data = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            data.extend_from_slice(&self.data[i * width..(i + 1) * width]);
        }
        let mut shape = self.shape.clone();
        if shape.is_empty() {
            shape.push(1);
        }
        shape[0] = indices.len();
        Tensor { shape, data }
    }

    /// Gathers columns of a matrix in the given order.
    pub fn select_cols(&self, indices: &[usize]) -> Self {
        let rows = self.rows();
        let cols = self.cols();
        let mut data = Vec::with_capacity(rows * indices.len());
        for r in 0..rows {
            let row = &self.data[r * cols..(r + 1) * cols];
            data.extend(indices.iter().map(|&c| row[c]));
        }
        Tensor {
            shape: vec![rows, indices.len()],
            data,
        }
    }

    /// Concatenates two matrices with equal row counts along the columns.
    pub fn hconcat(&self, other: &Self) -> Result<Self> {
        if self.rows() != other.rows() || self.ndim() != 2 || other.ndim() != 2 {
            return Err(Error::dimension("hconcat", &self.shape, &other.shape));
        }
        let (ca, cb) = (self.cols(), other.cols());
        let mut data = Vec::with_capacity(self.numel() + other.numel());
        for r in 0..self.rows() {
            data.extend_from_slice(&self.data[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&other.data[r * cb..(r + 1) * cb]);
        }
        Tensor::new(&[self.rows(), ca + cb], data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Converts every element to another precision.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64(v.as_f64()).unwrap_or_else(U::nan))
                .collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, &v| if v.abs() > acc { v.abs() } else { acc })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Plain (non-recorded) matrix product of two 2-D tensors.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.ndim() != 2 || other.ndim() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::dimension("matmul", &self.shape, &other.shape));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, &self.data, false, &other.data, false, &mut out, false);
        Tensor::new(&[m, n], out)
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.ndim() != 2 {
            return Err(Error::dimension("transpose", &self.shape, &[2]));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(&[c, r], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_element_count() {
        assert!(Tensor::<f64>::new(&[2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f64>::new(&[2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
        assert_eq!(t.shape(), &[2, 3]);
    }

    #[test]
    fn select_and_concat() {
        let t = Tensor::<f64>::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let s = t.select_rows(&[2, 0]);
        assert_eq!(s.data(), &[5.0, 6.0, 1.0, 2.0]);
        let c = t.select_cols(&[1]);
        assert_eq!(c.data(), &[2.0, 4.0, 6.0]);
        let h = t.hconcat(&c).unwrap();
        assert_eq!(h.shape(), &[3, 3]);
        assert_eq!(h.row(1), &[3.0, 4.0, 4.0]);
    }

    #[test]
    fn plain_matmul_and_transpose() {
        let a = Tensor::<f64>::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::<f64>::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[17.0, 39.0]);
        assert_eq!(a.transpose().unwrap().data(), &[1.0, 3.0, 2.0, 4.0]);
    }
}
